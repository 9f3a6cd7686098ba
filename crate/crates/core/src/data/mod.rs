//! Synthetic scenes of flat-colored shapes, their edge and grayscale
//! conditions, image files, and controllability metrics.

mod manifest;
mod metrics;
mod pnm;

pub use manifest::{read_manifest, write_manifest, ManifestRecord};
pub use metrics::{boundary_extract, edge_extract, hausdorff, mse, EdgeSet, SOBEL_THRESHOLD};
pub use pnm::{decode_pnm, encode_pnm, read_pnm, write_pnm};

use std::fmt;
use std::str::FromStr;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::tensor::{Rng, Scalar, Tensor};

/// Luminance weights `0.299 R + 0.587 G + 0.114 B`.
pub const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

pub fn luminance(rgb: [f64; 3]) -> f64 {
    LUMA[0] * rgb[0] + LUMA[1] * rgb[1] + LUMA[2] * rgb[2]
}

/// Fill colors; a scene's label is the palette index of its first shape.
/// Every entry has luminance at least 0.6.
pub const PALETTE: [[f64; 3]; 4] = [[1.0, 0.9, 0.2], [0.2, 0.95, 0.95], [1.0, 0.55, 0.8], [0.55, 1.0, 0.45]];

pub const BACKGROUND: [f64; 3] = [0.08, 0.08, 0.1];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Rectangle,
    Ellipse,
}

/// An axis-aligned shape occupying (part of) the box `[x, x+w) × [y, y+h)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Primitive {
    pub shape: Shape,
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
    pub color: [f64; 3],
}

impl Primitive {
    /// Whether pixel `(px, py)` is filled. Ellipses test the pixel center
    /// against the ellipse inscribed in the box.
    pub fn covers(&self, px: usize, py: usize) -> bool {
        if px < self.x || py < self.y || px >= self.x + self.w || py >= self.y + self.h {
            return false;
        }
        match self.shape {
            Shape::Rectangle => true,
            Shape::Ellipse => {
                let (rx, ry) = (self.w as f64 / 2.0, self.h as f64 / 2.0);
                let dx = (px as f64 + 0.5 - self.x as f64 - rx) / rx;
                let dy = (py as f64 + 0.5 - self.y as f64 - ry) / ry;
                dx * dx + dy * dy <= 1.0
            }
        }
    }

    /// Boxes separated by at least `gap` empty pixels in x or in y.
    fn separated(&self, other: &Primitive, gap: usize) -> bool {
        self.x + self.w + gap <= other.x
            || other.x + other.w + gap <= self.x
            || self.y + self.h + gap <= other.y
            || other.y + other.h + gap <= self.y
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub side: usize,
    pub background: [f64; 3],
    pub primitives: Vec<Primitive>,
}

impl Scene {
    pub fn empty(side: usize) -> Self {
        Scene { side, background: BACKGROUND, primitives: Vec::new() }
    }

    /// Palette index of the first shape's color, if it is a palette color.
    pub fn label(&self) -> Option<usize> {
        let first = self.primitives.first()?;
        PALETTE.iter().position(|c| *c == first.color)
    }

    pub fn validate(&self) -> Result<()> {
        for p in &self.primitives {
            if p.w == 0 || p.h == 0 || p.x + p.w > self.side || p.y + p.h > self.side {
                return config_err(format!("primitive {p:?} does not fit a {0}×{0} canvas", self.side));
            }
            if p.color.iter().chain(&self.background).any(|c| !(0.0..=1.0).contains(c)) {
                return config_err("colors must lie in [0, 1]");
            }
        }
        Ok(())
    }

    /// Filled-pixel mask, row-major.
    pub fn mask(&self) -> Vec<bool> {
        let s = self.side;
        (0..s * s).map(|i| self.primitives.iter().any(|p| p.covers(i % s, i / s))).collect()
    }
}

/// Draws a scene with one or two shapes of side 4–8 whose boxes keep a
/// one-pixel gap, colored from [`PALETTE`].
pub fn random_scene(rng: &mut Rng, side: usize) -> Scene {
    let mut scene = Scene::empty(side);
    let count = rng.random_range(1..=2);
    let mut attempts = 0;
    while scene.primitives.len() < count && attempts < 64 {
        attempts += 1;
        let shape = if rng.random_bool(0.5) { Shape::Rectangle } else { Shape::Ellipse };
        let max = 8.min(side);
        let (w, h) = (rng.random_range(4.min(max)..=max), rng.random_range(4.min(max)..=max));
        let x = rng.random_range(0..=side - w);
        let y = rng.random_range(0..=side - h);
        let color = PALETTE[rng.random_range(0..PALETTE.len())];
        let p = Primitive { shape, x, y, w, h, color };
        if scene.primitives.iter().all(|q| p.separated(q, 1)) {
            scene.primitives.push(p);
        }
    }
    scene
}

/// Rasterized outputs of a scene, each with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Rendered {
    /// `[3×H×W]`.
    pub image: Tensor<f64>,
    /// `[1×H×W]`, 1 on boundary pixels.
    pub edges: Tensor<f64>,
    /// `[1×H×W]` luminance.
    pub gray: Tensor<f64>,
    pub edge_set: EdgeSet,
}

/// Rasterizes `scene`. A pixel takes the color of the last shape covering it.
/// Edge pixels are filled pixels with a 4-neighbour that is unfilled or off-canvas.
pub fn render(scene: &Scene) -> Rendered {
    let s = scene.side;
    let mut image = vec![0.0; 3 * s * s];
    let mut gray = vec![0.0; s * s];
    for py in 0..s {
        for px in 0..s {
            let color = scene.primitives.iter().rev().find(|p| p.covers(px, py)).map_or(scene.background, |p| p.color);
            for (c, v) in color.iter().enumerate() {
                image[c * s * s + py * s + px] = *v;
            }
            gray[py * s + px] = luminance(color);
        }
    }
    let edge_set = EdgeSet::boundary_of(&scene.mask(), s, s);
    let mut edges = vec![0.0; s * s];
    for &(x, y) in edge_set.points() {
        edges[y as usize * s + x as usize] = 1.0;
    }
    Rendered {
        image: Tensor::new(vec![3, s, s], image).expect("sized"),
        edges: Tensor::new(vec![1, s, s], edges).expect("sized"),
        gray: Tensor::new(vec![1, s, s], gray).expect("sized"),
        edge_set,
    }
}

/// Which condition map a model is trained on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Edge,
    Gray,
}

impl Task {
    pub fn as_str(self) -> &'static str {
        match self {
            Task::Edge => "edge",
            Task::Gray => "gray",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "edge" => Ok(Task::Edge),
            "gray" => Ok(Task::Gray),
            _ => config_err(format!("unknown task `{s}` (expected edge or gray)")),
        }
    }
}

/// Maps `[0, 1]` values to the model's `[-1, 1]`.
pub fn to_model_space<T: Scalar>(x: &Tensor<f64>) -> Tensor<T> {
    Tensor::new(x.shape().to_vec(), x.data().iter().map(|&v| T::from_f64_lossy(2.0 * v - 1.0)).collect())
        .expect("same shape")
}

/// Maps model outputs back to `[0, 1]`, clamping.
pub fn from_model_space<T: Scalar>(x: &Tensor<T>) -> Tensor<f64> {
    let data = x.data().iter().map(|&v| ((v.to_f64_lossy() + 1.0) / 2.0).clamp(0.0, 1.0)).collect();
    Tensor::new(x.shape().to_vec(), data).expect("same shape")
}

/// A single-channel map `[1×H×W]` repeated to `channels` channels in model space.
pub fn condition_input<T: Scalar>(map: &Tensor<f64>, channels: usize) -> Tensor<T> {
    let plane = map.data();
    let (h, w) = (map.shape()[1], map.shape()[2]);
    let data: Vec<f64> = (0..channels).flat_map(|_| plane.iter().copied()).collect();
    to_model_space(&Tensor::new(vec![channels, h, w], data).expect("sized"))
}

/// Luminance of a `[3×H×W]` image as `[1×H×W]`.
pub fn gray_of(image: &Tensor<f64>) -> Result<Tensor<f64>> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 {
        return crate::error::dim_err(format!("expected a [3×H×W] image, got {s:?}"));
    }
    let n = s[1] * s[2];
    let d = image.data();
    let data = (0..n).map(|i| luminance([d[i], d[n + i], d[2 * n + i]])).collect();
    Tensor::new(vec![1, s[1], s[2]], data)
}
