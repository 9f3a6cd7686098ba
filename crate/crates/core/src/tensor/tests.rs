use super::*;
use crate::testing::{assert_grad_matches_fd, rel_err};

fn rand_t(seed: u64, shape: &[usize]) -> Tensor<f64> {
    normal_tensor(&mut seeded(seed), shape, 1.0)
}

#[test]
fn matmul_identity_is_exact() {
    let mut tape = Tape::<f64>::new();
    let i = tape.constant(Tensor::eye(2)).unwrap();
    let x = tape.constant(Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]])).unwrap();
    let y = tape.matmul(i, x).unwrap();
    assert_eq!(tape.value(y), tape.value(x));
}

#[test]
fn matmul_projector() {
    let mut tape = Tape::<f32>::new();
    let p = tape.constant(Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 0.0]])).unwrap();
    let x = tape.constant(Tensor::from_rows(&[&[5.0, 6.0], &[7.0, 8.0]])).unwrap();
    let y = tape.matmul(p, x).unwrap();
    assert_eq!(tape.value(y).data(), &[5.0, 6.0, 0.0, 0.0]);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut tape = Tape::<f32>::new();
    let a = tape.constant(Tensor::zeros(&[2, 3])).unwrap();
    let b = tape.constant(Tensor::zeros(&[4, 2])).unwrap();
    let msg = tape.matmul(a, b).unwrap_err().to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
}

#[test]
fn matmul_counts_two_mkn() {
    let mut tape = Tape::<f32>::new();
    let a = tape.constant(Tensor::zeros(&[2, 3])).unwrap();
    let b = tape.constant(Tensor::zeros(&[3, 4])).unwrap();
    tape.matmul(a, b).unwrap();
    assert_eq!(tape.flops(), 48);
}

#[test]
fn matmul_gradient_matches_finite_differences() {
    let a0 = rand_t(1, &[4, 4]);
    let b0 = rand_t(2, &[4, 4]);
    assert_grad_matches_fd(&a0, 1e-6, |tape, a| {
        let b = tape.constant(b0.clone())?;
        let y = tape.matmul(a, b)?;
        tape.sum(y)
    });
    assert_grad_matches_fd(&b0, 1e-6, |tape, b| {
        let a = tape.constant(a0.clone())?;
        let y = tape.matmul(a, b)?;
        tape.sum(y)
    });
}

#[test]
fn softmax_examples() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::from_rows(&[&[0.0; 4]])).unwrap();
    let y = tape.softmax_rows(x).unwrap();
    assert!(tape.value(y).data().iter().all(|&v| (v - 0.25).abs() < 1e-15));

    let x = tape.constant(Tensor::from_rows(&[&[1000.0, 0.0]])).unwrap();
    let y = tape.softmax_rows(x).unwrap();
    let d = tape.value(y).data();
    assert!((d[0] - 1.0).abs() < 1e-6 && d[1].abs() < 1e-6);

    // e^{ln 2} / (e^{ln 2} + 1) = 2/3
    let x = tape.constant(Tensor::from_rows(&[&[std::f64::consts::LN_2, 0.0]])).unwrap();
    let y = tape.softmax_rows(x).unwrap();
    let d = tape.value(y).data();
    assert!((d[0] - 2.0 / 3.0).abs() < 1e-15 && (d[1] - 1.0 / 3.0).abs() < 1e-15);
}

#[test]
fn softmax_gradient() {
    let x0 = rand_t(3, &[3, 5]);
    let w0 = rand_t(4, &[3, 5]);
    assert_grad_matches_fd(&x0, 1e-6, |tape, x| {
        let y = tape.softmax_rows(x)?;
        let w = tape.constant(w0.clone())?;
        let z = tape.mul(y, w)?;
        tape.sum(z)
    });
}

#[test]
fn layer_norm_examples() {
    let mut tape = Tape::<f64>::new();
    let g = tape.constant(Tensor::ones(&[3])).unwrap();
    let b = tape.constant(Tensor::zeros(&[3])).unwrap();
    let x = tape.constant(Tensor::from_rows(&[&[2.5, 2.5, 2.5]])).unwrap();
    let y = tape.layer_norm(x, Some(g), Some(b)).unwrap();
    assert!(tape.value(y).data().iter().all(|&v| v == 0.0));

    let g = tape.constant(Tensor::ones(&[2])).unwrap();
    let b = tape.constant(Tensor::zeros(&[2])).unwrap();
    let x = tape.constant(Tensor::from_rows(&[&[1.0, -1.0]])).unwrap();
    let y = tape.layer_norm(x, Some(g), Some(b)).unwrap();
    let d = tape.value(y).data();
    assert!((d[0] - 1.0).abs() < 1e-5 && (d[1] + 1.0).abs() < 1e-5);

    let x = tape.constant(rand_t(5, &[1, 64]).map(|v| 3.0 * v + 7.0)).unwrap();
    let y = tape.layer_norm(x, None, None).unwrap();
    let d = tape.value(y).data();
    let mean = d.iter().sum::<f64>() / 64.0;
    let var = d.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 64.0;
    assert!(mean.abs() < 1e-5 && (var - 1.0).abs() < 1e-5, "mean {mean} var {var}");
}

#[test]
fn layer_norm_zero_width_is_dimension_error() {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(Tensor::zeros(&[3, 0])).unwrap();
    assert!(matches!(tape.layer_norm(x, None, None), Err(crate::Error::Dimension(_))));
}

#[test]
fn layer_norm_gradients() {
    let x0 = rand_t(6, &[3, 6]);
    let g0 = rand_t(7, &[6]);
    let b0 = rand_t(8, &[6]);
    let w0 = rand_t(9, &[3, 6]);
    let f = |which: usize| {
        let (x0, g0, b0, w0) = (x0.clone(), g0.clone(), b0.clone(), w0.clone());
        move |tape: &mut Tape<f64>, v: Var| {
            let x = if which == 0 { v } else { tape.constant(x0.clone())? };
            let g = if which == 1 { v } else { tape.constant(g0.clone())? };
            let b = if which == 2 { v } else { tape.constant(b0.clone())? };
            let y = tape.layer_norm(x, Some(g), Some(b))?;
            let w = tape.constant(w0.clone())?;
            let z = tape.mul(y, w)?;
            tape.sum(z)
        }
    };
    assert_grad_matches_fd(&x0, 1e-6, f(0));
    assert_grad_matches_fd(&g0, 1e-6, f(1));
    assert_grad_matches_fd(&b0, 1e-6, f(2));
}

#[test]
fn elementwise_and_broadcast_gradients() {
    let x0 = rand_t(10, &[4, 3]);
    let r0 = rand_t(11, &[3]);
    let w0 = rand_t(12, &[4, 3]);
    assert_grad_matches_fd(&x0, 1e-6, |tape, x| {
        let r = tape.constant(r0.clone())?;
        let a = tape.mul_row(x, r)?;
        let b = tape.add_row(a, r)?;
        let c = tape.gelu(b)?;
        let d = tape.silu(c)?;
        let e = tape.add_const(d, 0.5)?;
        let f = tape.scale(e, -1.5)?;
        let w = tape.constant(w0.clone())?;
        let z = tape.mse(f, w)?;
        Ok(z)
    });
    assert_grad_matches_fd(&r0, 1e-6, |tape, r| {
        let x = tape.constant(x0.clone())?;
        let a = tape.mul_row(x, r)?;
        let b = tape.add_row(a, r)?;
        let w = tape.constant(w0.clone())?;
        let z = tape.mul(b, w)?;
        tape.sum(z)
    });
}

#[test]
fn slicing_and_concat_gradients() {
    let x0 = rand_t(13, &[5, 6]);
    let w0 = rand_t(14, &[8, 2]);
    assert_grad_matches_fd(&x0, 1e-6, |tape, x| {
        let a = tape.slice_rows(x, 1, 3)?;
        let b = tape.slice_cols(a, 2, 2)?;
        let c = tape.slice_cols(x, 0, 2)?;
        let d = tape.concat_rows(&[b, c])?;
        let w = tape.constant(w0.clone()).and_then(|w| tape.slice_rows(w, 0, 8))?;
        let z = tape.mul(d, w)?;
        let r = tape.reshape(z, &[16])?;
        tape.mean(r)
    });
}

#[test]
fn attention_gradients_all_inputs() {
    let q0 = rand_t(15, &[3, 8]);
    let k0 = rand_t(16, &[5, 8]);
    let v0 = rand_t(17, &[5, 8]);
    let w0 = rand_t(18, &[3, 8]);
    let mask = [false, false, true, false, false];
    for which in 0..3 {
        let base = [&q0, &k0, &v0][which].clone();
        let (q0, k0, v0, w0) = (q0.clone(), k0.clone(), v0.clone(), w0.clone());
        assert_grad_matches_fd(&base, 1e-6, move |tape, x| {
            let q = if which == 0 { x } else { tape.constant(q0.clone())? };
            let k = if which == 1 { x } else { tape.constant(k0.clone())? };
            let v = if which == 2 { x } else { tape.constant(v0.clone())? };
            let o = tape.attention(q, k, v, 2, Some(&mask))?;
            let w = tape.constant(w0.clone())?;
            let z = tape.mul(o, w)?;
            tape.sum(z)
        });
    }
}

#[test]
fn attention_rows_sum_to_one() {
    let mut tape = Tape::<f32>::new();
    let q = tape.constant(normal_tensor(&mut seeded(1), &[6, 16], 2.0)).unwrap();
    let k = tape.constant(normal_tensor(&mut seeded(2), &[9, 16], 2.0)).unwrap();
    let o = tape.attention(q, k, k, 4, None).unwrap();
    let p = tape.attention_probs(o).unwrap();
    assert_eq!(p.shape(), &[4, 6, 9]);
    for row in p.data().chunks(9) {
        let s: f32 = row.iter().sum();
        assert!((s - 1.0).abs() < 1e-6);
        assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }
}

#[test]
fn attention_single_head_matches_manual_softmax() {
    let q0 = rand_t(20, &[2, 4]);
    let k0 = rand_t(21, &[3, 4]);
    let v0 = rand_t(22, &[3, 4]);
    let mut tape = Tape::<f64>::new();
    let (q, k, v) =
        (tape.constant(q0.clone()).unwrap(), tape.constant(k0.clone()).unwrap(), tape.constant(v0.clone()).unwrap());
    let o = tape.attention(q, k, v, 1, None).unwrap();
    // Composite path: softmax(q kᵀ / 2) v
    let kt = tape.constant(k0.transpose().unwrap()).unwrap();
    let s = tape.matmul(q, kt).unwrap();
    let s = tape.scale(s, 0.5).unwrap();
    let p = tape.softmax_rows(s).unwrap();
    let o2 = tape.matmul(p, v).unwrap();
    assert!(tape.value(o).max_abs_diff(tape.value(o2)) < 1e-14);
}

#[test]
fn attention_rejects_fully_masked_and_bad_heads() {
    let mut tape = Tape::<f32>::new();
    let q = tape.constant(Tensor::zeros(&[2, 4])).unwrap();
    let k = tape.constant(Tensor::zeros(&[2, 4])).unwrap();
    assert!(matches!(tape.attention(q, k, k, 1, Some(&[true, true])), Err(crate::Error::Contract(_))));
    assert!(matches!(tape.attention(q, k, k, 3, None), Err(crate::Error::Dimension(_))));
    let k3 = tape.constant(Tensor::zeros(&[2, 6])).unwrap();
    assert!(matches!(tape.attention(q, k3, k3, 2, None), Err(crate::Error::Dimension(_))));
}

#[test]
fn backward_sum_gives_ones() {
    let mut tape = Tape::<f32>::new();
    let p = tape.leaf(Tensor::from_rows(&[&[1.0, -2.0], &[3.0, 0.5]]), true).unwrap();
    let l = tape.sum(p).unwrap();
    let g = tape.backward(l).unwrap();
    assert_eq!(g.wrt(p).unwrap().data(), &[1.0; 4]);
}

#[test]
fn backward_half_square_gives_identity() {
    let mut tape = Tape::<f64>::new();
    let p0 = rand_t(30, &[3, 2]);
    let p = tape.leaf(p0.clone(), true).unwrap();
    let sq = tape.mul(p, p).unwrap();
    let s = tape.sum(sq).unwrap();
    let l = tape.scale(s, 0.5).unwrap();
    let g = tape.backward(l).unwrap();
    assert_eq!(g.wrt(p).unwrap(), &p0);
}

#[test]
fn backward_requires_scalar_loss() {
    let mut tape = Tape::<f32>::new();
    let p = tape.leaf(Tensor::zeros(&[2]), true).unwrap();
    assert!(matches!(tape.backward(p), Err(crate::Error::Contract(_))));
}

#[test]
fn non_finite_values_are_errors() {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(Tensor::full(&[2], f32::MAX)).unwrap();
    assert!(matches!(tape.scale(x, 10.0), Err(crate::Error::NonFinite { op: "scale" })));
    assert!(tape.constant(Tensor::full(&[1], f32::NAN)).is_err());
}

#[test]
fn shared_parameter_gets_one_accumulated_gradient() {
    let mut store = ParamStore::<f64>::new();
    let id = store.add("w", Tensor::from_rows(&[&[2.0]]), true);
    let mut tape = Tape::new();
    let a = tape.param(&store, id).unwrap();
    let b = tape.param(&store, id).unwrap();
    assert_eq!(a, b);
    let y = tape.mul(a, b).unwrap();
    let l = tape.sum(y).unwrap();
    let g = tape.backward(l).unwrap();
    assert_eq!(g.param(id).unwrap().data(), &[4.0]);
}

#[test]
fn frozen_parameter_gets_no_gradient() {
    let mut store = ParamStore::<f64>::new();
    let frozen = store.add("backbone.w", Tensor::from_rows(&[&[2.0]]), false);
    let live = store.add("control.w", Tensor::from_rows(&[&[3.0]]), true);
    let mut tape = Tape::new();
    let a = tape.param(&store, frozen).unwrap();
    let b = tape.param(&store, live).unwrap();
    let y = tape.mul(a, b).unwrap();
    let l = tape.sum(y).unwrap();
    let g = tape.backward(l).unwrap();
    assert!(g.param(frozen).is_none());
    assert_eq!(g.param(live).unwrap().data(), &[2.0]);
    assert!(rel_err(2.0, 2.0) == 0.0);
}

mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn softmax_rows_are_distributions(seed in 0u64..10_000, rows in 1usize..5, cols in 1usize..9, spread in 0.1f64..50.0) {
            let mut tape = Tape::<f32>::new();
            let x = tape.constant(normal_tensor(&mut seeded(seed), &[rows, cols], spread)).unwrap();
            let y = tape.softmax_rows(x).unwrap();
            for row in tape.value(y).data().chunks(cols) {
                let s: f32 = row.iter().sum();
                prop_assert!((s - 1.0).abs() < 1e-6);
                prop_assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
            }
        }

        #[test]
        fn identity_matmul_is_exact(seed in 0u64..10_000, n in 1usize..8, m in 1usize..8) {
            let x: Tensor<f32> = normal_tensor(&mut seeded(seed), &[n, m], 3.0);
            prop_assert_eq!(Tensor::<f32>::eye(n).matmul(&x).unwrap(), x);
        }
    }
}
