use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Scene;
use crate::error::{Error, Result};

/// One line of a dataset manifest. Paths are relative to the manifest's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    pub label: usize,
    pub image: String,
    pub edge: String,
    pub gray: String,
    pub scene: Scene,
}

pub fn write_manifest(path: &Path, records: &[ManifestRecord]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut f, r)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

/// Reads a JSON-lines manifest; blank lines are skipped and errors carry the line number.
pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRecord>> {
    let f = BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in f.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ManifestRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Format(format!("{}: line {}: {e}", path.display(), i + 1)))?;
        out.push(rec);
    }
    Ok(out)
}
