//! Flow-matching training loop in f32.
//!
//! Each optimizer update averages `batch_size · grad_accum` single-sample
//! gradients. Samples are visited in a fresh permutation every epoch. The
//! model, the data order and the flow draws use independent streams derived
//! from the run seed, so two runs with the same config produce identical
//! weights.

use std::io::Write;
use std::time::Instant;

use nanocontrol::data::{condition_input, to_model_space};
use nanocontrol::dit::Model;
use nanocontrol::flow::{fm_loss_tape, FlowDraw};
use nanocontrol::tensor::{seeded, split_seed, AdamW, ParamStore, Tape, Tensor};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::dataset::Example;
use crate::error::{CliError, Code, Result};

/// Stream indices under the run seed.
const ORDER_STREAM: u64 = 2;
const FLOW_STREAM: u64 = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogLine {
    pub step: usize,
    pub loss: f64,
    pub wall_ms: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub scheme: String,
    pub steps: usize,
    pub examples: usize,
    pub trainable_params: usize,
    pub first_loss: f64,
    pub final_loss: f64,
    /// Mean loss over the last 10% of updates.
    pub tail_loss: f64,
    pub backbone_checksum_before: String,
    pub backbone_checksum_after: String,
    pub wall_secs: f64,
}

/// Model-space training pairs.
struct Prepared {
    x0: Vec<Tensor<f32>>,
    cond: Vec<Tensor<f32>>,
    labels: Vec<usize>,
}

fn prepare(cfg: &RunConfig, data: &[Example]) -> Result<Prepared> {
    let shape = cfg.model.image_shape();
    let mut p = Prepared { x0: Vec::new(), cond: Vec::new(), labels: Vec::new() };
    for ex in data {
        if ex.image.shape() != shape {
            return Err(CliError::new(
                Code::Shape,
                format!("sample {}: image {:?} but the model takes {shape:?}", ex.id, ex.image.shape()),
            ));
        }
        if ex.label >= cfg.model.n_classes {
            return Err(CliError::new(
                Code::Contract,
                format!("sample {}: label {} ≥ n_classes {}", ex.id, ex.label, cfg.model.n_classes),
            ));
        }
        p.x0.push(to_model_space(&ex.image));
        p.cond.push(condition_input(ex.condition_map(cfg.task), cfg.model.image_channels));
        p.labels.push(ex.label);
    }
    Ok(p)
}

fn nan_at(e: nanocontrol::Error, step: usize) -> CliError {
    match e {
        nanocontrol::Error::NonFinite { .. } => {
            CliError::new(Code::Nan, format!("non-finite values at step {step}: {e}"))
        }
        e => e.into(),
    }
}

/// Trains a fresh model of `cfg.scheme`, starting its backbone from
/// `backbone` when given. Writes one JSON line per update to `log`.
pub fn train(
    cfg: &RunConfig,
    data: &[Example],
    backbone: Option<&ParamStore<f32>>,
    mut log: Option<&mut dyn Write>,
) -> Result<(Model<f32>, TrainSummary)> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(CliError::new(Code::Contract, "training needs at least one example"));
    }
    let prepared = prepare(cfg, data)?;
    let mut model = Model::<f32>::new(cfg.model.clone(), cfg.scheme, cfg.seed)?;
    if let Some(store) = backbone {
        model.adopt_backbone(store)?;
    }
    let checksum_before = model.backbone_checksum();
    let mut opt = AdamW::new(cfg.optimizer);
    let mut order_rng = seeded(split_seed(cfg.seed, ORDER_STREAM));
    let mut flow_rng = seeded(split_seed(cfg.seed, FLOW_STREAM));
    let mut order: Vec<usize> = Vec::new();
    let shape = cfg.model.image_shape();
    let micro = cfg.effective_batch();
    let total = cfg.total_steps(data.len());
    let start = Instant::now();
    let mut losses = Vec::with_capacity(total);

    for step in 1..=total {
        model.store.zero_grads();
        let mut sum = 0.0;
        for _ in 0..micro {
            if order.is_empty() {
                order = (0..data.len()).collect();
                order.shuffle(&mut order_rng);
                order.reverse();
            }
            let i = order.pop().expect("refilled");
            let draw = FlowDraw::<f32>::sample(&mut flow_rng, &shape, cfg.dropout);
            let mut tape = Tape::new();
            let loss =
                fm_loss_tape(&model, &mut tape, &prepared.x0[i], Some(&prepared.cond[i]), prepared.labels[i], &draw)
                    .map_err(|e| nan_at(e, step))?;
            let value = tape.value(loss).data()[0] as f64;
            if !value.is_finite() {
                return Err(CliError::new(Code::Nan, format!("non-finite loss at step {step}")));
            }
            sum += value;
            let grads = tape.backward(loss).map_err(|e| nan_at(e, step))?;
            model.store.accumulate(&grads)?;
        }
        model.store.scale_grads(1.0 / micro as f32);
        opt.step(&mut model.store).map_err(|e| nan_at(e, step))?;
        let loss = sum / micro as f64;
        losses.push(loss);
        if let Some(w) = log.as_deref_mut() {
            let line = LogLine { step, loss, wall_ms: start.elapsed().as_millis() as u64 };
            serde_json::to_writer(&mut *w, &line).expect("log line serializes");
            w.write_all(b"\n")?;
        }
    }

    let tail = (total / 10).max(1);
    let summary = TrainSummary {
        scheme: cfg.scheme.to_string(),
        steps: total,
        examples: data.len(),
        trainable_params: model.store.count(|p| p.trainable),
        first_loss: losses[0],
        final_loss: *losses.last().expect("at least one step"),
        tail_loss: losses[total - tail..].iter().sum::<f64>() / tail as f64,
        backbone_checksum_before: checksum_before,
        backbone_checksum_after: model.backbone_checksum(),
        wall_secs: start.elapsed().as_secs_f64(),
    };
    Ok((model, summary))
}
