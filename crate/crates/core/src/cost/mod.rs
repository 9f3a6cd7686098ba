//! Closed-form parameter and FLOP counts for a DiT backbone and the cost each
//! control scheme adds to it, without instantiating any weights.
//!
//! The modeled backbone is the one in [`crate::dit`], generalized to a mix of
//! double-stream blocks (separate text/image weights, joint attention) and
//! single-stream blocks (one fused weight set over all tokens):
//!
//! | piece | weights | multiply-accumulates |
//! |---|---|---|
//! | patch embed | `c·d + d` | `N·c·d` |
//! | time MLP | `2(d² + d)` | `2d²` |
//! | double block | `2(6d² + 6d + 4(d² + d) + 2dh + h + d)` | `12d² + L(4d² + 2dh)` |
//! | single block | `3d² + 3d + d(3d+h) + 3d + h + (d+h)d + d` | `3d² + L(4d² + 2dh)` |
//! | final layer | `2d² + 2d + d·c + c` | `2d² + N·d·c` |
//! | attention | | `2·L²·d` per block |
//!
//! with `c` the patch width, `h = mlp_ratio·d`, `N` image tokens, `M` text
//! tokens and `L = M + N`. Modulation runs on one conditioning row per sample.
//!
//! Two accounting modes are reported side by side. `module_only` counts weight
//! matmuls only. `full_attention` also counts attention score and value
//! products (`QKᵀ` and `PV`), which is where extra key/value tokens cost most.


use serde::{Deserialize, Serialize};

use crate::control::ControlScheme;
use crate::dit::DiTConfig;
use crate::error::{config_err, Result};

/// Blocks copied by a duplicated-branch (ControlNet-style) baseline.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DuplicateTemplate {
    pub double_blocks: usize,
    pub single_blocks: usize,
}

impl DuplicateTemplate {
    /// Five double blocks, the size of the InstantX Flux ControlNet.
    pub const INSTANTX: Self = DuplicateTemplate { double_blocks: 5, single_blocks: 0 };
    /// Five double and ten single blocks, the size of Shakker-Union.
    pub const SHAKKER: Self = DuplicateTemplate { double_blocks: 5, single_blocks: 10 };
    /// Two double blocks, the size of the XLabs ControlNet.
    pub const XLAB: Self = DuplicateTemplate { double_blocks: 2, single_blocks: 0 };
}

/// Architecture hyperparameters of a backbone to be costed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchSpec {
    pub name: String,
    pub d_model: usize,
    pub n_double_blocks: usize,
    pub n_single_blocks: usize,
    pub n_heads: usize,
    pub mlp_ratio: usize,
    /// `M`.
    pub text_tokens: usize,
    /// Width of one patch token before embedding (latent channels × patch²).
    pub patch_dim: usize,
    /// Image pixels along one side covered by one token; `N = (res / this)²`.
    pub pixels_per_token: usize,
    /// Default image side in pixels.
    pub resolution: usize,
    /// `P`; `None` means one condition token per image token.
    #[serde(default)]
    pub condition_tokens: Option<usize>,
    /// Published backbone size, used as the percentage denominator when set.
    #[serde(default)]
    pub total_params_reported: Option<u64>,
    /// Lookup-table weights (positions, text tokens) that cost no matmuls.
    #[serde(default)]
    pub table_params: u64,
    pub controlnet: DuplicateTemplate,
    pub unified_lora_rank: usize,
}

impl ArchSpec {
    /// Flux.1: d = 3072, 19 double and 38 single blocks, 512 text tokens,
    /// 16-channel latents at 1/8 scale in 2×2 patches.
    pub fn flux() -> Self {
        ArchSpec {
            name: "flux".into(),
            d_model: 3072,
            n_double_blocks: 19,
            n_single_blocks: 38,
            n_heads: 24,
            mlp_ratio: 4,
            text_tokens: 512,
            patch_dim: 64,
            pixels_per_token: 16,
            resolution: 512,
            condition_tokens: None,
            total_params_reported: Some(12_000_000_000),
            table_params: 0,
            controlnet: DuplicateTemplate::INSTANTX,
            unified_lora_rank: 4,
        }
    }

    /// The toy backbone of [`crate::dit::Model`] with this configuration.
    pub fn toy(cfg: &DiTConfig) -> Self {
        let (d, m, n) = (cfg.d_model, cfg.text_tokens, cfg.n_tokens());
        ArchSpec {
            name: "toy".into(),
            d_model: d,
            n_double_blocks: cfg.n_blocks,
            n_single_blocks: 0,
            n_heads: cfg.n_heads,
            mlp_ratio: cfg.mlp_ratio,
            text_tokens: m,
            patch_dim: cfg.patch_dim(),
            pixels_per_token: cfg.patch_size,
            resolution: cfg.image_side,
            condition_tokens: None,
            total_params_reported: None,
            table_params: ((n + (cfg.n_classes + 1) * m + m) * d) as u64,
            controlnet: DuplicateTemplate { double_blocks: cfg.controlnet_depth(), single_blocks: 0 },
            unified_lora_rank: cfg.unified_lora_rank,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "flux" => Ok(Self::flux()),
            "toy" => Ok(Self::toy(&DiTConfig::default())),
            _ => config_err(format!("unknown preset `{name}` (expected flux or toy)")),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("mlp_ratio", self.mlp_ratio),
            ("text_tokens", self.text_tokens),
            ("patch_dim", self.patch_dim),
            ("pixels_per_token", self.pixels_per_token),
            ("resolution", self.resolution),
            ("unified_lora_rank", self.unified_lora_rank),
            ("n_double_blocks + n_single_blocks", self.n_double_blocks + self.n_single_blocks),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return config_err(format!("{name} must be positive"));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return config_err(format!("d_model {} is not divisible by n_heads {}", self.d_model, self.n_heads));
        }
        if self.condition_tokens == Some(0) {
            return config_err("condition_tokens must be positive");
        }
        let t = self.controlnet;
        if t.double_blocks > self.n_double_blocks || t.single_blocks > self.n_single_blocks {
            return config_err(format!(
                "controlnet copies {}+{} blocks of a {}+{} backbone",
                t.double_blocks, t.single_blocks, self.n_double_blocks, self.n_single_blocks
            ));
        }
        if t.double_blocks + t.single_blocks == 0 {
            return config_err("controlnet must copy at least one block");
        }
        self.image_tokens(self.resolution).map(|_| ())
    }

    /// `N = (resolution / pixels_per_token)²`.
    pub fn image_tokens(&self, resolution: usize) -> Result<usize> {
        if resolution == 0 || !resolution.is_multiple_of(self.pixels_per_token) {
            return config_err(format!(
                "resolution {resolution} is not a positive multiple of {}",
                self.pixels_per_token
            ));
        }
        Ok((resolution / self.pixels_per_token).pow(2))
    }

    fn hidden(&self) -> u64 {
        (self.mlp_ratio * self.d_model) as u64
    }
}

/// Unit of a reported FLOP count.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum FlopConvention {
    /// Multiply-accumulates: `m·k·n` per matmul.
    #[default]
    #[serde(rename = "macs")]
    Macs,
    /// `2·m·k·n` per matmul, as counted by [`crate::tensor::Tape::flops`].
    #[serde(rename = "2mkn")]
    TwoMkn,
}

impl FlopConvention {
    fn factor(self) -> u64 {
        match self {
            FlopConvention::Macs => 1,
            FlopConvention::TwoMkn => 2,
        }
    }
}

impl std::str::FromStr for FlopConvention {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "macs" => Ok(FlopConvention::Macs),
            "2mkn" => Ok(FlopConvention::TwoMkn),
            _ => config_err(format!("unknown FLOP convention `{s}` (expected macs or 2mkn)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AccountingMode {
    ModuleOnly,
    FullAttention,
}

/// Knobs of one costing query.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostOptions {
    /// Image side in pixels; `None` uses the architecture's default.
    pub resolution: Option<usize>,
    pub rank_kv: usize,
    pub rank_embed: usize,
    /// Also give single-stream blocks condition K/V projections.
    pub inject_single_blocks: bool,
    pub convention: FlopConvention,
}

impl Default for CostOptions {
    fn default() -> Self {
        CostOptions {
            resolution: None,
            rank_kv: 4,
            rank_embed: 32,
            inject_single_blocks: true,
            convention: FlopConvention::Macs,
        }
    }
}

/// A FLOP count under both accounting modes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopCount {
    pub module_only: u64,
    pub full_attention: u64,
}

impl FlopCount {
    pub fn get(&self, mode: AccountingMode) -> u64 {
        match mode {
            AccountingMode::ModuleOnly => self.module_only,
            AccountingMode::FullAttention => self.full_attention,
        }
    }

    fn add(self, o: FlopCount) -> FlopCount {
        FlopCount {
            module_only: self.module_only + o.module_only,
            full_attention: self.full_attention + o.full_attention,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FlopPct {
    pub module_only: f64,
    pub full_attention: f64,
}

/// One named part of a control branch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComponentCost {
    pub name: String,
    pub params: u64,
    pub flops: FlopCount,
}

/// Added cost of one scheme over its backbone.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub arch: String,
    pub scheme: ControlScheme,
    pub resolution: usize,
    pub text_tokens: usize,
    pub image_tokens: usize,
    pub condition_tokens: usize,
    pub rank_kv: usize,
    pub rank_embed: usize,
    pub inject_single_blocks: bool,
    pub convention: FlopConvention,
    /// Percentage denominator: the published size when known, else `modeled_base_params`.
    pub base_params: u64,
    pub modeled_base_params: u64,
    pub added_params: u64,
    /// `100 · added_params / base_params`.
    pub added_params_pct: f64,
    pub base_flops: FlopCount,
    pub added_flops: FlopCount,
    /// `100 · added_flops / base_flops`, per mode.
    pub added_flops_pct: FlopPct,
    pub breakdown: Vec<ComponentCost>,
    pub note: String,
}

const NOTE: &str = "module_only counts weight matmuls; full_attention adds attention score/value products";

/// Weight count, weight MACs and attention MACs of one piece.
#[derive(Clone, Copy, Default)]
struct Piece {
    params: u64,
    weight: u64,
    attention: u64,
}

impl Piece {
    fn flops(&self, conv: FlopConvention) -> FlopCount {
        let f = conv.factor();
        FlopCount { module_only: f * self.weight, full_attention: f * (self.weight + self.attention) }
    }
}

/// Per-architecture shorthand, all in `u64`.
struct Dims {
    d: u64,
    h: u64,
    c: u64,
    m: u64,
    n: u64,
    p: u64,
    nd: u64,
    ns: u64,
}

impl Dims {
    fn new(spec: &ArchSpec, opts: &CostOptions) -> Result<(Self, usize)> {
        spec.validate()?;
        let res = opts.resolution.unwrap_or(spec.resolution);
        let n = spec.image_tokens(res)? as u64;
        let p = spec.condition_tokens.map_or(n, |p| p as u64);
        let dims = Dims {
            d: spec.d_model as u64,
            h: spec.hidden(),
            c: spec.patch_dim as u64,
            m: spec.text_tokens as u64,
            n,
            p,
            nd: spec.n_double_blocks as u64,
            ns: spec.n_single_blocks as u64,
        };
        Ok((dims, res))
    }

    fn l(&self) -> u64 {
        self.m + self.n
    }

    /// Per-token weight MACs of one block (either kind).
    fn token_macs(&self) -> u64 {
        4 * self.d * self.d + 2 * self.d * self.h
    }

    fn double_params(&self) -> u64 {
        let (d, h) = (self.d, self.h);
        2 * (6 * d * d + 6 * d + 4 * (d * d + d) + d * h + h + h * d + d)
    }

    fn single_params(&self) -> u64 {
        let (d, h) = (self.d, self.h);
        3 * d * d + 3 * d + d * (3 * d + h) + 3 * d + h + (d + h) * d + d
    }

    fn double_weight(&self, tokens: u64) -> u64 {
        12 * self.d * self.d + tokens * self.token_macs()
    }

    fn single_weight(&self, tokens: u64) -> u64 {
        3 * self.d * self.d + tokens * self.token_macs()
    }

    fn attention(&self, queries: u64, keys: u64) -> u64 {
        2 * queries * keys * self.d
    }

    fn backbone(&self, table_params: u64) -> Piece {
        let (d, c, n, l) = (self.d, self.c, self.n, self.l());
        let blocks = self.nd + self.ns;
        Piece {
            params: (c * d + d)
                + 2 * (d * d + d)
                + self.nd * self.double_params()
                + self.ns * self.single_params()
                + (2 * d * d + 2 * d)
                + (d * c + c)
                + table_params,
            weight: n * c * d
                + 2 * d * d
                + self.nd * self.double_weight(l)
                + self.ns * self.single_weight(l)
                + 2 * d * d
                + n * d * c,
            attention: blocks * self.attention(l, l),
        }
    }
}

/// Components added by `scheme`, in MACs.
fn added_pieces(spec: &ArchSpec, dims: &Dims, scheme: ControlScheme, opts: &CostOptions) -> Vec<(&'static str, Piece)> {
    let Dims { d, h, c, m: _, n, p, nd, ns } = *dims;
    let l = dims.l();
    match scheme {
        ControlScheme::None => Vec::new(),
        ControlScheme::NanoControl | ControlScheme::Additive | ControlScheme::LayerByLayer => {
            let (r, re) = (opts.rank_kv as u64, opts.rank_embed as u64);
            let injected = nd + if opts.inject_single_blocks { ns } else { 0 };
            let embedder = Piece {
                params: (c * re + re * d + d) + (d * re + re * d + d) + 2 * d,
                weight: p * (c * re + re * d + d * re + re * d),
                attention: 0,
            };
            let kv = Piece { params: injected * 2 * (2 * d * r), weight: injected * p * 4 * d * r, attention: 0 };
            let attention = Piece { attention: injected * dims.attention(l, p), ..Piece::default() };
            vec![("embedder", embedder), ("kv_projections", kv), ("attention_extension", attention)]
        }
        ControlScheme::ControlNetDup => {
            let t = spec.controlnet;
            let (kd, ks) = (t.double_blocks as u64, t.single_blocks as u64);
            let copies = Piece {
                params: kd * dims.double_params() + ks * dims.single_params(),
                weight: kd * dims.double_weight(l) + ks * dims.single_weight(l),
                attention: (kd + ks) * dims.attention(l, l),
            };
            let fusion = Piece {
                params: (c * d + d) + (kd + ks) * (d * d + d),
                weight: n * c * d + (kd + ks) * n * d * d,
                attention: 0,
            };
            vec![("duplicated_blocks", copies), ("fusion", fusion)]
        }
        ControlScheme::UnifiedSeq => {
            let r = spec.unified_lora_rank as u64;
            let per_token = nd * (8 * d * r + 2 * (d + h) * r) + ns * r * (6 * d + 2 * h);
            let embed = Piece { params: 0, weight: p * c * d, attention: 0 };
            let sequence = Piece { params: 0, weight: (nd + ns) * p * dims.token_macs(), attention: 0 };
            let lora = Piece { params: per_token, weight: p * per_token, attention: 0 };
            let attention = Piece {
                attention: (nd + ns) * (dims.attention(l + p, l + p) - dims.attention(l, l)),
                ..Piece::default()
            };
            vec![
                ("embedder", embed),
                ("sequence_extension", sequence),
                ("lora", lora),
                ("attention_extension", attention),
            ]
        }
    }
}

/// Parameters added by `scheme`, with their breakdown.
pub fn count_params(spec: &ArchSpec, scheme: ControlScheme, opts: &CostOptions) -> Result<(u64, Vec<ComponentCost>)> {
    let r = cost_report(spec, scheme, opts)?;
    Ok((r.added_params, r.breakdown))
}

/// Backbone and added FLOPs of `scheme` under both modes.
pub fn count_flops(spec: &ArchSpec, scheme: ControlScheme, opts: &CostOptions) -> Result<(FlopCount, FlopCount)> {
    let r = cost_report(spec, scheme, opts)?;
    Ok((r.base_flops, r.added_flops))
}

fn pct(part: u64, whole: u64) -> f64 {
    100.0 * part as f64 / whole as f64
}

pub fn cost_report(spec: &ArchSpec, scheme: ControlScheme, opts: &CostOptions) -> Result<CostReport> {
    if opts.rank_kv == 0 || opts.rank_embed == 0 {
        return config_err("ranks must be positive");
    }
    let (dims, resolution) = Dims::new(spec, opts)?;
    let base = dims.backbone(spec.table_params);
    let breakdown: Vec<ComponentCost> = added_pieces(spec, &dims, scheme, opts)
        .into_iter()
        .map(|(name, piece)| ComponentCost {
            name: name.into(),
            params: piece.params,
            flops: piece.flops(opts.convention),
        })
        .collect();
    let added_params = breakdown.iter().map(|b| b.params).sum();
    let added_flops = breakdown.iter().fold(FlopCount::default(), |acc, b| acc.add(b.flops));
    let base_params = spec.total_params_reported.unwrap_or(base.params);
    let base_flops = base.flops(opts.convention);
    Ok(CostReport {
        arch: spec.name.clone(),
        scheme,
        resolution,
        text_tokens: spec.text_tokens,
        image_tokens: dims.n as usize,
        condition_tokens: dims.p as usize,
        rank_kv: opts.rank_kv,
        rank_embed: opts.rank_embed,
        inject_single_blocks: opts.inject_single_blocks,
        convention: opts.convention,
        base_params,
        modeled_base_params: base.params,
        added_params,
        added_params_pct: pct(added_params, base_params),
        base_flops,
        added_flops,
        added_flops_pct: FlopPct {
            module_only: pct(added_flops.module_only, base_flops.module_only),
            full_attention: pct(added_flops.full_attention, base_flops.full_attention),
        },
        breakdown,
        note: NOTE.into(),
    })
}
