//! On-disk datasets: a directory with `manifest.jsonl` and, per scene,
//! `{id}.ppm`, `{id}_edge.pgm` and `{id}_gray.pgm`.

use std::path::{Path, PathBuf};

use nanocontrol::data::{
    random_scene, read_manifest, read_pnm, render, write_manifest, write_pnm, ManifestRecord, Task,
};
use nanocontrol::tensor::{seeded, split_seed, Tensor};

use crate::error::{io_at, CliError, Code, Result};

pub const MANIFEST: &str = "manifest.jsonl";

/// One scene loaded into memory, values in `[0, 1]`.
#[derive(Clone, Debug)]
pub struct Example {
    pub id: String,
    pub label: usize,
    pub image: Tensor<f64>,
    pub edges: Tensor<f64>,
    pub gray: Tensor<f64>,
}

impl Example {
    pub fn condition_map(&self, task: Task) -> &Tensor<f64> {
        match task {
            Task::Edge => &self.edges,
            Task::Gray => &self.gray,
        }
    }
}

/// `path` itself if it is a file, else `path/manifest.jsonl`.
pub fn manifest_path(path: &Path) -> PathBuf {
    if path.is_file() {
        path.to_path_buf()
    } else {
        path.join(MANIFEST)
    }
}

/// Renders `count` scenes; scene `i` is drawn from stream `split_seed(seed, i)`.
pub fn generate(dir: &Path, count: usize, seed: u64, side: usize) -> Result<Vec<ManifestRecord>> {
    if side < 10 {
        return Err(CliError::new(
            Code::Config,
            format!("image side {side} is too small for the shape generator (minimum 10)"),
        ));
    }
    io_at(dir, std::fs::create_dir_all(dir))?;
    let mut records = Vec::with_capacity(count);
    for i in 0..count {
        let scene = random_scene(&mut seeded(split_seed(seed, i as u64)), side);
        let r = render(&scene);
        let id = format!("{i:05}");
        let rec = ManifestRecord {
            id: id.clone(),
            label: scene.label().expect("generated scenes are never empty"),
            image: format!("{id}.ppm"),
            edge: format!("{id}_edge.pgm"),
            gray: format!("{id}_gray.pgm"),
            scene,
        };
        write_pnm(&dir.join(&rec.image), &r.image)?;
        write_pnm(&dir.join(&rec.edge), &r.edges)?;
        write_pnm(&dir.join(&rec.gray), &r.gray)?;
        records.push(rec);
    }
    write_manifest(&dir.join(MANIFEST), &records)?;
    Ok(records)
}

pub fn load(path: &Path) -> Result<Vec<Example>> {
    let manifest = manifest_path(path);
    if !manifest.exists() {
        return Err(CliError::new(Code::Io, format!("{}: dataset manifest not found", manifest.display())));
    }
    let root = manifest.parent().unwrap_or(Path::new("."));
    let records = read_manifest(&manifest)?;
    if records.is_empty() {
        return Err(CliError::new(Code::Contract, format!("{}: dataset is empty", manifest.display())));
    }
    let read = |name: &str| {
        let path = root.join(name);
        read_pnm(&path).map_err(|e| {
            let e = CliError::from(e);
            CliError::new(e.code, format!("{}: {}", path.display(), e.message))
        })
    };
    let mut out = Vec::with_capacity(records.len());
    for r in records {
        let ex =
            Example { image: read(&r.image)?, edges: read(&r.edge)?, gray: read(&r.gray)?, label: r.label, id: r.id };
        if ex.image.shape()[0] != 3 || ex.edges.shape()[0] != 1 || ex.gray.shape()[0] != 1 {
            return Err(CliError::new(
                Code::Shape,
                format!("sample {}: expected RGB image and single-channel maps", ex.id),
            ));
        }
        out.push(ex);
    }
    Ok(out)
}
