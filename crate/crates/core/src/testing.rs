//! Finite-difference gradient oracle shared by unit tests.

use crate::tensor::{Tape, Tensor, Var};
use crate::Result;

pub fn rel_err(a: f64, b: f64) -> f64 {
    let d = (a - b).abs();
    if d == 0.0 {
        0.0
    } else {
        d / a.abs().max(b.abs()).max(1.0)
    }
}

fn eval(base: &Tensor<f64>, f: &impl Fn(&mut Tape<f64>, Var) -> Result<Var>) -> f64 {
    let mut tape = Tape::new();
    let x = tape.leaf(base.clone(), false).unwrap();
    let l = f(&mut tape, x).unwrap();
    tape.value(l).data()[0]
}

/// Compares the tape gradient of the scalar `f(x)` at `base` with central
/// differences (h = 1e-5), element by element.
pub fn assert_grad_matches_fd(base: &Tensor<f64>, tol: f64, f: impl Fn(&mut Tape<f64>, Var) -> Result<Var>) {
    let mut tape = Tape::new();
    let x = tape.leaf(base.clone(), true).unwrap();
    let l = f(&mut tape, x).unwrap();
    let grads = tape.backward(l).unwrap();
    let g = grads.wrt(x).expect("leaf gradient").clone();
    assert_eq!(g.shape(), base.shape());
    let h = 1e-5;
    for i in 0..base.numel() {
        let mut plus = base.clone();
        plus.data_mut()[i] += h;
        let mut minus = base.clone();
        minus.data_mut()[i] -= h;
        let fd = (eval(&plus, &f) - eval(&minus, &f)) / (2.0 * h);
        let an = g.data()[i];
        assert!(rel_err(an, fd) < tol, "element {i}: analytic {an} vs fd {fd}");
    }
}

/// Overwrites every parameter whose name starts with `prefix` with
/// `N(0, std²)` noise, so zero-initialized gates and projections carry signal.
pub fn perturb<T: crate::tensor::Scalar>(store: &mut crate::tensor::ParamStore<T>, prefix: &str, std: f64, seed: u64) {
    let mut rng = crate::tensor::seeded(seed);
    for (_, p) in store.iter_mut().filter(|(_, p)| p.name.starts_with(prefix)) {
        p.value = crate::tensor::normal_tensor(&mut rng, p.value.shape(), std);
    }
}
