//! A small MM-DiT: patchified image tokens and learned text tokens attend
//! jointly in every block, modulated by the diffusion time.

mod layers;
mod model;

pub use layers::{Init, Linear, INIT_STD};
pub use model::{Backbone, BlockParams, BlockTrace, Forward, ForwardInput, Model, StreamParams};

use serde::{Deserialize, Serialize};

use crate::error::{config_err, dim_err, Result};
use crate::tensor::{Scalar, Tensor};

/// Shape of the toy backbone and its control branches.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiTConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_blocks: usize,
    pub patch_size: usize,
    pub image_channels: usize,
    pub image_side: usize,
    /// Text tokens per class label (`M`).
    pub text_tokens: usize,
    pub mlp_ratio: usize,
    /// Rank of the per-block condition K/V projections.
    pub rank_kv: usize,
    /// Rank of the two condition embedder layers.
    pub rank_embed: usize,
    /// Number of class labels; one extra "null" label is reserved for text dropout.
    pub n_classes: usize,
    /// LoRA rank on condition tokens for the unified-sequence baseline.
    pub unified_lora_rank: usize,
    /// Blocks duplicated by the ControlNet baseline; `None` means `⌈n_blocks/2⌉`.
    pub controlnet_depth: Option<usize>,
}

impl Default for DiTConfig {
    fn default() -> Self {
        DiTConfig {
            d_model: 64,
            n_heads: 4,
            n_blocks: 4,
            patch_size: 2,
            image_channels: 3,
            image_side: 16,
            text_tokens: 4,
            mlp_ratio: 4,
            rank_kv: 4,
            rank_embed: 32,
            n_classes: 4,
            unified_lora_rank: 4,
            controlnet_depth: None,
        }
    }
}

impl DiTConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("n_blocks", self.n_blocks),
            ("patch_size", self.patch_size),
            ("image_channels", self.image_channels),
            ("image_side", self.image_side),
            ("text_tokens", self.text_tokens),
            ("mlp_ratio", self.mlp_ratio),
            ("rank_kv", self.rank_kv),
            ("rank_embed", self.rank_embed),
            ("n_classes", self.n_classes),
            ("unified_lora_rank", self.unified_lora_rank),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return config_err(format!("{name} must be at least 1"));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return config_err(format!("d_model {} is not divisible by n_heads {}", self.d_model, self.n_heads));
        }
        if !self.image_side.is_multiple_of(self.patch_size) {
            return config_err(format!(
                "image_side {} is not divisible by patch_size {}",
                self.image_side, self.patch_size
            ));
        }
        if !self.d_model.is_multiple_of(2) {
            return config_err("d_model must be even for the sinusoidal time features");
        }
        let depth = self.controlnet_depth();
        if depth == 0 || depth > self.n_blocks {
            return config_err(format!("controlnet_depth {depth} must lie in 1..={}", self.n_blocks));
        }
        Ok(())
    }

    /// Image tokens per sample, `(side/patch)²`.
    pub fn n_tokens(&self) -> usize {
        let g = self.grid();
        g * g
    }

    /// Patches per image side.
    pub fn grid(&self) -> usize {
        self.image_side / self.patch_size
    }

    /// Width of a flattened patch, `C·p²`.
    pub fn patch_dim(&self) -> usize {
        self.image_channels * self.patch_size * self.patch_size
    }

    pub fn mlp_hidden(&self) -> usize {
        self.d_model * self.mlp_ratio
    }

    pub fn controlnet_depth(&self) -> usize {
        self.controlnet_depth.unwrap_or(self.n_blocks.div_ceil(2))
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [self.image_channels, self.image_side, self.image_side]
    }

    /// `(row, col)` on the patch grid of every image token, in token order.
    pub fn token_positions(&self) -> Vec<(usize, usize)> {
        let g = self.grid();
        (0..g * g).map(|i| (i / g, i % g)).collect()
    }
}

/// Splits a `[C×H×W]` image into non-overlapping `p×p` patches.
///
/// Patches are ordered row-major over the grid; each patch is flattened
/// channel-major, then row, then column. The result is `[N × C·p²]`.
///
/// ```
/// use nanocontrol::dit::patchify;
/// use nanocontrol::tensor::Tensor;
/// let img = Tensor::<f32>::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
/// let tokens = patchify(&img, 2).unwrap();
/// assert_eq!(tokens.shape(), &[1, 4]);
/// assert_eq!(tokens.data(), &[1.0, 2.0, 3.0, 4.0]);
/// ```
pub fn patchify<T: Scalar>(img: &Tensor<T>, p: usize) -> Result<Tensor<T>> {
    let [c, h, w] = image_dims(img)?;
    if p == 0 || h % p != 0 || w % p != 0 {
        return dim_err(format!("patchify: {h}×{w} image is not divisible into {p}×{p} patches"));
    }
    let (gh, gw) = (h / p, w / p);
    let width = c * p * p;
    let src = img.data();
    let mut out = Vec::with_capacity(gh * gw * width);
    for gy in 0..gh {
        for gx in 0..gw {
            for ch in 0..c {
                for dy in 0..p {
                    let row = ch * h * w + (gy * p + dy) * w + gx * p;
                    out.extend_from_slice(&src[row..row + p]);
                }
            }
        }
    }
    Tensor::new(vec![gh * gw, width], out)
}

/// Inverse of [`patchify`] for a `[C×H×W]` target shape.
pub fn unpatchify<T: Scalar>(tokens: &Tensor<T>, p: usize, shape: [usize; 3]) -> Result<Tensor<T>> {
    let [c, h, w] = shape;
    if p == 0 || h % p != 0 || w % p != 0 {
        return dim_err(format!("unpatchify: {h}×{w} image is not divisible into {p}×{p} patches"));
    }
    let (gh, gw) = (h / p, w / p);
    if tokens.shape() != [gh * gw, c * p * p] {
        return dim_err(format!("unpatchify: tokens {:?} do not fit image {shape:?} with patch {p}", tokens.shape()));
    }
    let src = tokens.data();
    let mut out = vec![T::zero(); c * h * w];
    let mut i = 0;
    for gy in 0..gh {
        for gx in 0..gw {
            for ch in 0..c {
                for dy in 0..p {
                    let row = ch * h * w + (gy * p + dy) * w + gx * p;
                    out[row..row + p].copy_from_slice(&src[i..i + p]);
                    i += p;
                }
            }
        }
    }
    Tensor::new(shape.to_vec(), out)
}

fn image_dims<T: Scalar>(img: &Tensor<T>) -> Result<[usize; 3]> {
    match img.shape() {
        &[c, h, w] => Ok([c, h, w]),
        s => dim_err(format!("expected a [C×H×W] image, got {s:?}")),
    }
}

/// Sinusoidal features of `t·1000`: `dim/2` cosines followed by `dim/2` sines
/// at frequencies `10000^(-i/(dim/2))`.
pub fn timestep_features<T: Scalar>(t: f64, dim: usize) -> Tensor<T> {
    Tensor::from_fn(&[1, dim], |i| T::from_f64_lossy(sinusoid(t * 1000.0, i, dim)))
}

/// Fixed 2-D sin-cos table `[N × d]`: the first `d/2` columns encode the grid
/// row, the rest the column. Used to initialize the learned position embedding.
pub fn grid_position_features<T: Scalar>(cfg: &DiTConfig) -> Tensor<T> {
    let d = cfg.d_model;
    let (rows, cols) = (d / 2, d - d / 2);
    let pos = cfg.token_positions();
    Tensor::from_fn(&[pos.len(), d], |i| {
        let ((r, c), j) = (pos[i / d], i % d);
        let v = if j < rows { sinusoid(r as f64, j, rows) } else { sinusoid(c as f64, j - rows, cols) };
        T::from_f64_lossy(v)
    })
}

fn sinusoid(arg: f64, i: usize, dim: usize) -> f64 {
    let half = (dim / 2).max(1);
    let k = i % half;
    let freq = (-(10_000f64.ln()) * k as f64 / half as f64).exp();
    if i < half {
        (arg * freq).cos()
    } else {
        (arg * freq).sin()
    }
}
