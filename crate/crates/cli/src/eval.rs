//! Sampling and controllability scoring.
//!
//! Edge task: the generated image's edges are extracted and compared with
//! the conditioning edge map by symmetric Hausdorff distance (HDD, pixels).
//! Gray task: the generated image's luminance is compared with the
//! conditioning gray map by MSE. A sample whose extracted edge set is empty
//! has no HDD; it is flagged, excluded from the mean and counted.

use nanocontrol::data::{
    boundary_extract, condition_input, edge_extract, from_model_space, gray_of, hausdorff, mse, EdgeSet, Task,
};
use nanocontrol::dit::Model;
use nanocontrol::flow::{sample_euler, ModelField, SamplerConfig};
use nanocontrol::tensor::{split_seed, Tensor};
use serde::{Deserialize, Serialize};

use crate::dataset::Example;
use crate::error::{CliError, Code, Result};

/// Luminance threshold of the `analytic` edge method.
pub const ANALYTIC_THRESHOLD: f64 = 0.35;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeMethod {
    /// Sobel magnitude on luminance, see [`nanocontrol::data::edge_extract`].
    Sobel,
    /// Boundary of the bright region, see [`nanocontrol::data::boundary_extract`].
    Analytic,
}

impl std::str::FromStr for EdgeMethod {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sobel" => Ok(EdgeMethod::Sobel),
            "analytic" => Ok(EdgeMethod::Analytic),
            _ => Err(CliError::new(Code::Config, format!("unknown edge method `{s}` (expected sobel or analytic)"))),
        }
    }
}

impl EdgeMethod {
    pub fn extract(self, image: &Tensor<f64>) -> Result<EdgeSet> {
        Ok(match self {
            EdgeMethod::Sobel => edge_extract(image)?,
            EdgeMethod::Analytic => boundary_extract(image, ANALYTIC_THRESHOLD)?,
        })
    }
}

/// Samples one image in `[0, 1]` for `label`, conditioned on `cond_map`
/// (`[1×H×W]`). Without a map, or for scheme `none`, the condition is dropped.
pub fn sample_image(
    model: &Model<f32>,
    cond_map: Option<&Tensor<f64>>,
    label: usize,
    sc: &SamplerConfig,
) -> Result<Tensor<f64>> {
    let cond: Option<Tensor<f32>> = match cond_map {
        Some(map) if model.scheme.is_conditioned() => {
            let shape = model.config.image_shape();
            if map.shape() != [1, shape[1], shape[2]] {
                return Err(CliError::new(
                    Code::Shape,
                    format!("condition map {:?} does not match model resolution {:?}", map.shape(), &shape[1..]),
                ));
            }
            Some(condition_input(map, model.config.image_channels))
        }
        _ => None,
    };
    let field = ModelField { model, label, cond: cond.as_ref() };
    let x = sample_euler(&field, &model.config.image_shape(), sc)?;
    Ok(from_model_space(&x))
}

/// Sampler settings for the `index`-th evaluation scene.
pub fn scene_sampler(sc: &SamplerConfig, index: usize) -> SamplerConfig {
    SamplerConfig { seed: split_seed(sc.seed, index as u64), ..*sc }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleScore {
    pub id: String,
    /// HDD (edge task) or MSE (gray task); `None` when excluded.
    pub score: Option<f64>,
    pub excluded: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: Task,
    pub metric: String,
    pub source: String,
    pub edge_method: EdgeMethod,
    pub n: usize,
    pub n_scored: usize,
    pub n_excluded: usize,
    /// Mean over scored samples; `None` when nothing was scored.
    pub mean: Option<f64>,
    pub samples: Vec<SampleScore>,
}

/// Scores `images[i]` against the condition of `examples[i]`.
pub fn score(
    examples: &[Example],
    images: &[Tensor<f64>],
    task: Task,
    method: EdgeMethod,
    source: &str,
) -> Result<EvalReport> {
    if examples.len() != images.len() {
        return Err(CliError::new(Code::Contract, format!("{} images for {} scenes", images.len(), examples.len())));
    }
    let mut samples = Vec::with_capacity(examples.len());
    for (ex, img) in examples.iter().zip(images) {
        let score = match task {
            Task::Edge => {
                let (h, w) = (ex.edges.shape()[1], ex.edges.shape()[2]);
                let mask: Vec<bool> = ex.edges.data().iter().map(|&v| v > 0.5).collect();
                let truth = EdgeSet::from_mask(&mask, w, h);
                let found = method.extract(img)?;
                if truth.is_empty() || found.is_empty() {
                    None
                } else {
                    Some(hausdorff(&found, &truth)?)
                }
            }
            Task::Gray => Some(mse(&gray_of(img)?, &ex.gray)?),
        };
        samples.push(SampleScore { id: ex.id.clone(), score, excluded: score.is_none() });
    }
    let scored: Vec<f64> = samples.iter().filter_map(|s| s.score).collect();
    Ok(EvalReport {
        task,
        metric: match task {
            Task::Edge => "hdd".into(),
            Task::Gray => "mse".into(),
        },
        source: source.into(),
        edge_method: method,
        n: samples.len(),
        n_scored: scored.len(),
        n_excluded: samples.len() - scored.len(),
        mean: (!scored.is_empty()).then(|| scored.iter().sum::<f64>() / scored.len() as f64),
        samples,
    })
}

/// Samples one image per example (scene `i` uses [`scene_sampler`]`(sc, i)`).
pub fn generate(model: &Model<f32>, examples: &[Example], task: Task, sc: &SamplerConfig) -> Result<Vec<Tensor<f64>>> {
    examples
        .iter()
        .enumerate()
        .map(|(i, ex)| sample_image(model, Some(ex.condition_map(task)), ex.label, &scene_sampler(sc, i)))
        .collect()
}
