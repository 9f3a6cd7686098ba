use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::tensor::{normal_tensor, ParamId, ParamStore, Rng, Scalar, Tape, Tensor, Var};

/// Standard deviation of the normal initializer used for every weight matrix.
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Init {
    /// `N(0, 0.02²)` weights.
    Normal,
    /// `N(0, 1/fan_in)` weights.
    FanIn,
    /// All-zero weights.
    Zero,
}

/// `y = x·W + b` with `W: [in × out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    /// Registers `{name}.w` and, when `bias`, a zero `{name}.b`.
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut Rng,
        name: &str,
        (fan_in, fan_out): (usize, usize),
        bias: bool,
        init: Init,
        trainable: bool,
    ) -> Self {
        let value = match init {
            Init::Normal => normal_tensor(rng, &[fan_in, fan_out], INIT_STD),
            Init::FanIn => normal_tensor(rng, &[fan_in, fan_out], (fan_in as f64).recip().sqrt()),
            Init::Zero => Tensor::zeros(&[fan_in, fan_out]),
        };
        let w = store.add(format!("{name}.w"), value, trainable);
        let b = bias.then(|| store.add(format!("{name}.b"), Tensor::zeros(&[fan_out]), trainable));
        Linear { w, b }
    }

    pub fn apply<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = tape.param(store, self.w)?;
        let b = self.b.map(|b| tape.param(store, b)).transpose()?;
        tape.linear(x, w, b)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        std::iter::once(self.w).chain(self.b)
    }
}
