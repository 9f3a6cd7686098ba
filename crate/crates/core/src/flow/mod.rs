//! Rectified flow: the linear interpolant between data and noise, its
//! velocity-matching loss, and a deterministic Euler sampler with
//! classifier-free guidance.
//!
//! Conventions: `x_t = (1 − t)·x₀ + t·ε`, target velocity `v = ε − x₀`, and
//! sampling integrates from `t = 1` (pure noise) down to `t = 0`.

#[cfg(test)]
mod tests;

use serde::{Deserialize, Serialize};

use crate::dit::{ForwardInput, Model};
use crate::error::{config_err, dim_err, Result};
use crate::tensor::{normal_tensor, seeded, uniform, Rng, Scalar, Tape, Tensor, Var};

/// `(1 − t)·x₀ + t·ε`, elementwise. Exact at both endpoints.
///
/// ```
/// use nanocontrol::flow::interpolate;
/// use nanocontrol::tensor::Tensor;
/// let x0 = Tensor::<f64>::from_rows(&[&[1.0, 2.0]]);
/// let eps = Tensor::<f64>::from_rows(&[&[-1.0, 0.5]]);
/// assert_eq!(interpolate(&x0, &eps, 0.0).unwrap(), x0);
/// assert_eq!(interpolate(&x0, &eps, 1.0).unwrap(), eps);
/// assert_eq!(interpolate(&x0, &eps, 0.5).unwrap().data(), &[0.0, 1.25]);
/// ```
pub fn interpolate<T: Scalar>(x0: &Tensor<T>, eps: &Tensor<T>, t: f64) -> Result<Tensor<T>> {
    same_shape(x0, eps, "interpolate")?;
    let (a, b) = (T::from_f64_lossy(1.0 - t), T::from_f64_lossy(t));
    let data = x0.data().iter().zip(eps.data()).map(|(&x, &e)| a * x + b * e).collect();
    Tensor::new(x0.shape().to_vec(), data)
}

/// Velocity target `ε − x₀`.
pub fn velocity_target<T: Scalar>(x0: &Tensor<T>, eps: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape(x0, eps, "velocity_target")?;
    let data = x0.data().iter().zip(eps.data()).map(|(&x, &e)| e - x).collect();
    Tensor::new(x0.shape().to_vec(), data)
}

fn same_shape<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, op: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return dim_err(format!("{op}: shapes {:?} and {:?} differ", a.shape(), b.shape()));
    }
    Ok(())
}

/// The random choices behind one training example.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowDraw<T> {
    pub t: f64,
    pub noise: Tensor<T>,
    pub drop_text: bool,
    pub drop_cond: bool,
}

impl<T: Scalar> FlowDraw<T> {
    /// Draws, in this order: `t ~ U(0,1)`, the text-drop coin, the
    /// condition-drop coin (each with probability `p_drop`), then `ε ~ N(0, I)`.
    pub fn sample(rng: &mut Rng, shape: &[usize], p_drop: f64) -> Self {
        let t = uniform(rng);
        let drop_text = uniform(rng) < p_drop;
        let drop_cond = uniform(rng) < p_drop;
        let noise = normal_tensor(rng, shape, 1.0);
        FlowDraw { t, noise, drop_text, drop_cond }
    }

    pub fn x_t(&self, x0: &Tensor<T>) -> Result<Tensor<T>> {
        interpolate(x0, &self.noise, self.t)
    }

    pub fn target(&self, x0: &Tensor<T>) -> Result<Tensor<T>> {
        velocity_target(x0, &self.noise)
    }
}

/// Anything that predicts a velocity at `(x, t)`, with or without its condition.
pub trait VelocityField<T: Scalar> {
    fn velocity(&self, x: &Tensor<T>, t: f64, conditioned: bool) -> Result<Tensor<T>>;

    /// `false` when the conditional and unconditional predictions coincide,
    /// so the sampler evaluates the field once per step.
    fn has_condition(&self) -> bool {
        true
    }
}

impl<T: Scalar, F: Fn(&Tensor<T>, f64, bool) -> Result<Tensor<T>>> VelocityField<T> for F {
    fn velocity(&self, x: &Tensor<T>, t: f64, conditioned: bool) -> Result<Tensor<T>> {
        self(x, t, conditioned)
    }
}

/// A [`Model`] bound to one label and (optional) condition image. Without a
/// condition image a conditioned model predicts with its condition dropped.
pub struct ModelField<'a, T> {
    pub model: &'a Model<T>,
    pub label: usize,
    pub cond: Option<&'a Tensor<T>>,
}

impl<T: Scalar> VelocityField<T> for ModelField<'_, T> {
    fn velocity(&self, x: &Tensor<T>, t: f64, conditioned: bool) -> Result<Tensor<T>> {
        let mut input = ForwardInput::new(x, t, self.label);
        input.cond = self.cond;
        input.drop_cond = !conditioned || self.cond.is_none();
        self.model.velocity(&input)
    }

    fn has_condition(&self) -> bool {
        self.model.scheme.is_conditioned() && self.cond.is_some()
    }
}

/// Velocity-matching loss of a generic field: `mean((v̂(x_t, t) − (ε − x₀))²)`.
pub fn fm_loss<T: Scalar>(field: &impl VelocityField<T>, x0: &Tensor<T>, draw: &FlowDraw<T>) -> Result<f64> {
    let pred = field.velocity(&draw.x_t(x0)?, draw.t, !draw.drop_cond)?;
    let target = draw.target(x0)?;
    same_shape(&pred, &target, "fm_loss")?;
    let n = pred.numel().max(1) as f64;
    Ok(pred.data().iter().zip(target.data()).map(|(&p, &q)| (p - q).to_f64_lossy().powi(2)).sum::<f64>() / n)
}

/// The same loss recorded on a tape for training `model`.
pub fn fm_loss_tape<T: Scalar>(
    model: &Model<T>,
    tape: &mut Tape<T>,
    x0: &Tensor<T>,
    cond: Option<&Tensor<T>>,
    label: usize,
    draw: &FlowDraw<T>,
) -> Result<Var> {
    let x_t = draw.x_t(x0)?;
    let mut input = ForwardInput::new(&x_t, draw.t, label);
    input.cond = if model.scheme.is_conditioned() { cond } else { None };
    input.drop_text = draw.drop_text;
    input.drop_cond = draw.drop_cond;
    model.loss(tape, &input, &draw.target(x0)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub steps: usize,
    pub guidance_scale: f64,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig { steps: 24, guidance_scale: 3.5, seed: 42 }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return config_err("steps must be at least 1");
        }
        if !(self.guidance_scale >= 0.0 && self.guidance_scale.is_finite()) {
            return config_err(format!("guidance_scale must be a finite value ≥ 0, got {}", self.guidance_scale));
        }
        Ok(())
    }

    /// The `steps + 1` times `1, 1 − 1/steps, …, 0`.
    pub fn schedule(&self) -> Vec<f64> {
        (0..=self.steps).map(|i| 1.0 - i as f64 / self.steps as f64).collect()
    }
}

/// Classifier-free guidance `g·v_c + (1 − g)·v_u`, which equals
/// `v_u + g·(v_c − v_u)` and reproduces `v_u` at `g = 0` and `v_c` at `g = 1` exactly.
pub fn guided<T: Scalar>(v_cond: &Tensor<T>, v_uncond: &Tensor<T>, g: f64) -> Result<Tensor<T>> {
    same_shape(v_cond, v_uncond, "guided")?;
    let (a, b) = (T::from_f64_lossy(g), T::from_f64_lossy(1.0 - g));
    let data = v_cond.data().iter().zip(v_uncond.data()).map(|(&c, &u)| a * c + b * u).collect();
    Tensor::new(v_cond.shape().to_vec(), data)
}

/// Integrates from `x = ε ~ N(0, I)` (drawn from `sc.seed`) to `t = 0` with
/// `x ← x − Δt·v̂`. Deterministic given the field and `sc`.
pub fn sample_euler<T: Scalar>(
    field: &impl VelocityField<T>,
    shape: &[usize],
    sc: &SamplerConfig,
) -> Result<Tensor<T>> {
    let noise = normal_tensor(&mut seeded(sc.seed), shape, 1.0);
    sample_euler_from(field, noise, sc)
}

/// [`sample_euler`] starting from a given noise tensor.
pub fn sample_euler_from<T: Scalar>(
    field: &impl VelocityField<T>,
    noise: Tensor<T>,
    sc: &SamplerConfig,
) -> Result<Tensor<T>> {
    sc.validate()?;
    let g = sc.guidance_scale;
    let times = sc.schedule();
    let mut x = noise;
    for w in times.windows(2) {
        let (t, dt) = (w[0], w[0] - w[1]);
        let v = if !field.has_condition() || g == 1.0 {
            field.velocity(&x, t, true)?
        } else if g == 0.0 {
            field.velocity(&x, t, false)?
        } else {
            let vc = field.velocity(&x, t, true)?;
            let vu = field.velocity(&x, t, false)?;
            guided(&vc, &vu, g)?
        };
        same_shape(&x, &v, "sample_euler")?;
        let dt = T::from_f64_lossy(dt);
        for (xi, &vi) in x.data_mut().iter_mut().zip(v.data()) {
            *xi -= dt * vi;
        }
        x.ensure_finite("sample_euler")?;
    }
    Ok(x)
}
