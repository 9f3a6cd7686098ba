//! Run configuration: a JSON document whose every field has a default.
//!
//! ```json
//! {
//!   "model": { "d_model": 64, "n_blocks": 4, "rank_kv": 4, ... },
//!   "scheme": "nanocontrol",
//!   "task": "edge",
//!   "sampler": { "steps": 24, "guidance_scale": 3.5, "seed": 42 },
//!   "optimizer": { "lr": 1e-4, "weight_decay": 0.01, "beta1": 0.9, "beta2": 0.999, "eps": 1e-8 },
//!   "batch_size": 1,
//!   "grad_accum": 4,
//!   "steps": 2000,
//!   "epochs": null,
//!   "dropout": 0.1,
//!   "seed": 42,
//!   "dataset": "data/train",
//!   "backbone": "runs/backbone/checkpoint.nckp",
//!   "out_dir": "runs/nano"
//! }
//! ```
//!
//! Unknown keys are rejected. `steps` counts optimizer updates; when
//! `epochs` is set it overrides `steps` with
//! `⌈epochs · dataset size / (batch_size · grad_accum)⌉`.

use std::path::{Path, PathBuf};

use nanocontrol::control::ControlScheme;
use nanocontrol::data::Task;
use nanocontrol::dit::DiTConfig;
use nanocontrol::flow::SamplerConfig;
use nanocontrol::tensor::AdamWConfig;
use serde::{Deserialize, Serialize};

use crate::error::{io_at, parse_err, CliError, Code, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: DiTConfig,
    pub scheme: ControlScheme,
    pub task: Task,
    pub sampler: SamplerConfig,
    pub optimizer: AdamWConfig,
    pub batch_size: usize,
    pub grad_accum: usize,
    pub steps: usize,
    pub epochs: Option<usize>,
    /// Probability of dropping the text label and, independently, the condition.
    pub dropout: f64,
    pub seed: u64,
    pub dataset: Option<PathBuf>,
    /// Checkpoint whose `backbone.*` weights initialize the model.
    pub backbone: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: DiTConfig::default(),
            scheme: ControlScheme::NanoControl,
            task: Task::Edge,
            sampler: SamplerConfig::default(),
            optimizer: AdamWConfig::default(),
            batch_size: 1,
            grad_accum: 4,
            steps: 2000,
            epochs: None,
            dropout: 0.1,
            seed: 42,
            dataset: None,
            backbone: None,
            out_dir: None,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = io_at(path, std::fs::read_to_string(path))?;
        serde_json::from_str(&text).map_err(|e| parse_err(path, e))
    }

    pub fn effective_batch(&self) -> usize {
        self.batch_size * self.grad_accum
    }

    /// Optimizer updates for a dataset of `n` examples.
    pub fn total_steps(&self, n: usize) -> usize {
        match self.epochs {
            Some(e) => (e * n).div_ceil(self.effective_batch()),
            None => self.steps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.sampler.validate()?;
        let bad = |msg: String| Err(CliError::new(Code::Config, msg));
        if self.batch_size == 0 || self.grad_accum == 0 {
            return bad("batch_size and grad_accum must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.dropout) {
            return bad(format!("dropout must lie in [0, 1], got {}", self.dropout));
        }
        let o = &self.optimizer;
        let rates = [("beta1", o.beta1), ("beta2", o.beta2), ("weight_decay", o.weight_decay)];
        if let Some((name, v)) = rates.iter().find(|(_, v)| !(0.0..=1.0).contains(v)) {
            return bad(format!("{name} must lie in [0, 1], got {v}"));
        }
        if !(o.lr > 0.0 && o.lr.is_finite()) || o.eps.is_nan() || o.eps <= 0.0 {
            return bad(format!("lr and eps must be positive, got {} and {}", o.lr, o.eps));
        }
        if self.epochs == Some(0) || (self.epochs.is_none() && self.steps == 0) {
            return bad("training needs at least one step".into());
        }
        Ok(())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("config serializes");
        io_at(path, std::fs::write(path, text + "\n"))
    }
}
