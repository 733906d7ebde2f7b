use super::gradcheck::gradcheck;
use super::*;

fn t64(data: &[f64], shape: &[usize]) -> Tensor<f64> {
    Tensor::from_vec(data.to_vec(), shape).unwrap()
}

#[test]
fn zeros_matches_shape() {
    let z = Tensor::<f32>::zeros(&[2, 3]).unwrap();
    assert_eq!(z.shape(), &[2, 3]);
    assert!(z.data().iter().all(|&v| v == 0.0));
    assert_eq!(z.numel(), 6);
}

#[test]
fn zero_extent_shape_rejected() {
    assert!(matches!(
        Tensor::<f32>::zeros(&[2, 0]),
        Err(TensorError::InvalidShape(_))
    ));
    assert!(matches!(
        Tensor::<f32>::randn(&[0], 1),
        Err(TensorError::InvalidShape(_))
    ));
}

#[test]
fn randn_monte_carlo_moments() {
    let x = Tensor::<f64>::randn(&[100_000], 7).unwrap();
    let n = x.numel() as f64;
    let mean = x.data().iter().sum::<f64>() / n;
    let var = x.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    assert!(mean.abs() < 0.02, "mean {mean}");
    assert!((var - 1.0).abs() < 0.02, "var {var}");
}

#[test]
fn randn_is_deterministic() {
    let a = Tensor::<f32>::randn(&[257], 7).unwrap();
    let b = Tensor::<f32>::randn(&[257], 7).unwrap();
    assert_eq!(a.data(), b.data());
    let c = Tensor::<f32>::randn(&[257], 8).unwrap();
    assert_ne!(a.data(), c.data());
}

#[test]
fn matmul_identity() {
    let eye = t64(&[1., 0., 0., 0., 1., 0., 0., 0., 1.], &[3, 3]);
    let a = t64(&[2., -1., 3., 0.5, 4., 7., -2., 1., 9.], &[3, 3]);
    let prod = eye.matmul(&a).unwrap();
    assert_eq!(prod.data(), a.data());
}

#[test]
fn add_zero_identity() {
    let x = Tensor::<f32>::randn(&[4, 5], 3).unwrap();
    let y = x.add(&x.zeros_like()).unwrap();
    assert_eq!(x.data(), y.data());
}

#[test]
fn leading_axis_broadcast() {
    let x = t64(&[1., 2., 3., 4., 5., 6.], &[2, 3]);
    let b = t64(&[10., 20., 30.], &[3]);
    let y = x.add(&b).unwrap();
    assert_eq!(y.data(), &[11., 22., 33., 14., 25., 36.]);
    // non-suffix shapes are rejected with both shapes named
    let bad = t64(&[1., 2.], &[2]);
    let err = x.add(&bad).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("[2]"), "{msg}");
}

#[test]
fn matmul_grad_of_sum_is_column_sums() {
    // f(A,B) = sum(A·B): dA[i,p] = sum_j B[p,j], the column sums of B
    // broadcast across rows of A.
    let a = Tensor::<f64>::randn(&[3, 4], 11).unwrap();
    let b = Tensor::<f64>::randn(&[4, 2], 12).unwrap();
    let tape = Tape::new();
    let av = tape.var(&a);
    let loss = av.matmul(&b).unwrap().reduce_sum(None).unwrap();
    let grads = loss.backward().unwrap();
    let da = grads.get(&av).unwrap();
    let row_sums: Vec<f64> = (0..4)
        .map(|p| (0..2).map(|j| b.data()[p * 2 + j]).sum())
        .collect();
    for i in 0..3 {
        for p in 0..4 {
            assert!((da.data()[i * 4 + p] - row_sums[p]).abs() < 1e-12);
        }
    }
    // and the same through the finite-difference oracle
    let rep = gradcheck(&[a, b], 1e-5, |v| {
        v[0].matmul(&v[1]).unwrap().reduce_sum(None)
    })
    .unwrap();
    assert!(rep.max_rel_err < 1e-4, "rel err {}", rep.max_rel_err);
}

#[test]
fn softmax_uniform_on_equal_inputs() {
    for n in [2usize, 5, 9] {
        let x = Tensor::<f64>::full(&[n], 0.37).unwrap();
        let y = x.softmax(0).unwrap();
        for &v in y.data() {
            assert!((v - 1.0 / n as f64).abs() < 1e-12);
        }
    }
}

#[test]
fn softmax_lanes_sum_to_one() {
    let x = Tensor::<f64>::randn(&[3, 7], 5).unwrap();
    let y = x.softmax(1).unwrap();
    for lane in 0..3 {
        let s: f64 = y.data()[lane * 7..(lane + 1) * 7].iter().sum();
        assert!((s - 1.0).abs() < 1e-6);
        assert!(y.data()[lane * 7..(lane + 1) * 7].iter().all(|&v| v >= 0.0));
    }
}

#[test]
fn mse_identity_and_nonfinite() {
    let a = Tensor::<f64>::randn(&[4, 4], 9).unwrap();
    assert_eq!(a.mse(&a).unwrap().item(), 0.0);
    let bad = Tensor::from_vec(vec![f64::NAN, 1.0], &[2]).unwrap();
    let ok = t64(&[1., 2.], &[2]);
    assert!(matches!(
        ok.mse(&bad),
        Err(TensorError::NonFinite("mse"))
    ));
}

#[test]
fn silu_at_zero() {
    let x = Tensor::<f64>::scalar(0.0);
    assert_eq!(x.silu().unwrap().item(), 0.0);
    // derivative at 0 is 0.5, via the finite-difference oracle
    let rep = gradcheck(&[x], 1e-5, |v| v[0].silu()).unwrap();
    assert!(rep.max_rel_err < 1e-4);
    let tape = Tape::new();
    let v = tape.var(&Tensor::<f64>::scalar(0.0));
    let g = v.silu().unwrap().backward().unwrap();
    assert!((g.get(&v).unwrap().item() - 0.5).abs() < 1e-12);
}

#[test]
fn backward_linear_case() {
    // loss = sum(w ⊙ x) with fixed x: grad(w) = x
    let x = t64(&[3., -1., 2.], &[3]);
    let tape = Tape::new();
    let w = tape.var(&t64(&[0.5, 0.5, 0.5], &[3]));
    let loss = w.mul(&x).unwrap().reduce_sum(None).unwrap();
    let grads = loss.backward().unwrap();
    assert_eq!(grads.get(&w).unwrap().data(), x.data());
}

#[test]
fn backward_twice_errors() {
    let tape = Tape::new();
    let w = tape.var(&t64(&[1., 2.], &[2]));
    let loss = w.reduce_sum(None).unwrap();
    loss.backward().unwrap();
    assert!(matches!(loss.backward(), Err(TensorError::TapeConsumed)));
    // recording new ops on the consumed tape also errors
    assert!(matches!(
        w.add_scalar(1.0),
        Err(TensorError::TapeConsumed)
    ));
}

#[test]
fn non_scalar_and_detached_losses_error() {
    let tape = Tape::new();
    let w = tape.var(&t64(&[1., 2.], &[2]));
    assert!(matches!(
        w.backward(),
        Err(TensorError::NonScalarLoss(_))
    ));
    let free = t64(&[1.], &[1]);
    assert!(matches!(free.backward(), Err(TensorError::DetachedLoss)));
}

#[test]
fn requires_grad_false_never_receives_gradient() {
    let tape = Tape::new();
    let w = tape.var(&t64(&[1., 2.], &[2]));
    let c = t64(&[5., 6.], &[2]); // plain constant
    let loss = w.mul(&c).unwrap().reduce_sum(None).unwrap();
    let grads = loss.backward().unwrap();
    assert!(grads.get(&c).is_none());
    assert_eq!(grads.len(), 1);
}

#[test]
fn deterministic_forward_and_gradients() {
    let run = || {
        let x = Tensor::<f32>::randn(&[3, 4], 21).unwrap();
        let tape = Tape::new();
        let w = tape.var(&Tensor::<f32>::randn(&[4, 4], 22).unwrap());
        let y = x.matmul(&w).unwrap().silu().unwrap();
        let loss = y.mse(&x.zeros_like()).unwrap();
        let g = loss.backward().unwrap();
        (
            loss.item().to_bits(),
            g.get(&w).unwrap().data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        )
    };
    assert_eq!(run(), run());
}

#[test]
fn mixing_tapes_errors() {
    let t1 = Tape::new();
    let t2 = Tape::new();
    let a = t1.var(&t64(&[1.], &[1]));
    let b = t2.var(&t64(&[2.], &[1]));
    assert!(matches!(a.add(&b), Err(TensorError::TapeMismatch)));
}

#[test]
fn unfold_fold_round_trip_shapes() {
    let x = t64(&[1., 2., 3., 4., 5., 6., 7., 8.], &[2, 4]);
    let u = x.unfold1d(2, 2).unwrap();
    assert_eq!(u.shape(), &[4, 2]);
    // non-overlapping windows fold back to the original exactly
    let f = u.fold1d(2, 2, 4).unwrap();
    assert_eq!(f.data(), x.data());
}

#[test]
fn rms_normalize_unit_rms() {
    let x = Tensor::<f64>::randn(&[5, 16], 2).unwrap();
    let y = x.rms_normalize(0.0).unwrap();
    for lane in 0..5 {
        let row = &y.data()[lane * 16..(lane + 1) * 16];
        let rms = (row.iter().map(|v| v * v).sum::<f64>() / 16.0).sqrt();
        assert!((rms - 1.0).abs() < 1e-5, "lane rms {rms}");
    }
}

mod properties {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn reshape_round_trip(rows in 1usize..6, cols in 1usize..6, seed in 0u64..500) {
            let x = Tensor::<f32>::randn(&[rows, cols], seed).unwrap();
            let y = x.reshape(&[cols * rows]).unwrap().reshape(&[rows, cols]).unwrap();
            prop_assert_eq!(x.data(), y.data());
            prop_assert_eq!(x.shape(), y.shape());
        }

        #[test]
        fn split_concat_identity(extent in 2usize..9, cols in 1usize..5, cut in 1usize..8, seed in 0u64..500) {
            let cut = cut.min(extent - 1);
            let x = Tensor::<f32>::randn(&[extent, cols], seed).unwrap();
            let parts = x.split(0, &[cut, extent - cut]).unwrap();
            let refs: Vec<&Tensor<f32>> = parts.iter().collect();
            let back = Tensor::concat(&refs, 0).unwrap();
            prop_assert_eq!(x.data(), back.data());
        }

        #[test]
        fn permute_inverse_identity(seed in 0u64..500) {
            let x = Tensor::<f32>::randn(&[2, 3, 4], seed).unwrap();
            let y = x.permute(&[2, 0, 1]).unwrap().permute(&[1, 2, 0]).unwrap();
            prop_assert_eq!(x.data(), y.data());
        }
    }
}
