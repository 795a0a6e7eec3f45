use hamf_tensor::{AdamW, AdamWConfig, ParamStore, Tape32, Tape64, Tensor, Tensor64, TensorError, MASK_FILL};
use proptest::prelude::*;

#[test]
fn softmax_of_equal_logits_is_uniform() {
    let mut t = Tape64::new();
    let x = t.constant(Tensor64::zeros(&[3]));
    let p = t.softmax(x, 0).unwrap();
    for &v in t.value(p).data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
}

#[test]
fn layer_norm_of_constant_row_is_zero() {
    let mut t = Tape32::new();
    let x = t.constant(Tensor::full(&[2, 5], 3.25f32));
    let g = t.constant(Tensor::ones(&[5]));
    let b = t.constant(Tensor::zeros(&[5]));
    let y = t.layer_norm(x, g, b, 1e-5).unwrap();
    assert!(t.value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn identity_matmul_is_a_no_op() {
    let a = Tensor64::from_f64(&[3, 3], &[0.3, -1.2, 4.0, 2.5, 0.0, -0.7, 1.1, 9.0, -3.3]).unwrap();
    let mut t = Tape64::new();
    let i = t.constant(Tensor64::eye(3));
    let av = t.constant(a.clone());
    let y = t.matmul(i, av).unwrap();
    assert_eq!(t.value(y), &a);
}

#[test]
fn bilinear_gradient_is_the_other_factor() {
    let x = Tensor64::from_f64(&[2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap();
    let y = Tensor64::from_f64(&[2, 2], &[-0.5, 0.25, 7.0, 0.0]).unwrap();
    let mut t = Tape64::new();
    let xv = t.variable(x);
    let yv = t.constant(y.clone());
    let p = t.mul(xv, yv).unwrap();
    let l = t.sum(p, None).unwrap();
    let g = t.backward(l).unwrap();
    assert_eq!(g.get(xv), y);
}

#[test]
fn sum_of_softmax_has_zero_gradient() {
    let mut t = Tape64::new();
    let x = t.variable(Tensor64::from_f64(&[2, 3], &[0.1, -2.0, 3.0, 0.5, 0.5, -1.0]).unwrap());
    let p = t.softmax(x, 1).unwrap();
    let l = t.sum(p, None).unwrap();
    let g = t.backward(l).unwrap();
    assert!(g.get(x).data().iter().all(|v| v.abs() < 1e-15));
}

#[test]
fn backward_twice_is_an_error() {
    let mut t = Tape64::new();
    let x = t.variable(Tensor64::ones(&[2]));
    let l = t.sum(x, None).unwrap();
    t.backward(l).unwrap();
    assert_eq!(t.backward(l).unwrap_err(), TensorError::BackwardAlreadyRun);
    t.reset();
    assert!(t.is_empty());
}

#[test]
fn backward_rejects_non_scalar_and_empty() {
    let mut t = Tape64::new();
    let x = t.variable(Tensor64::ones(&[2]));
    assert!(matches!(t.backward(x), Err(TensorError::NonScalarLoss(_))));
    let mut empty = Tape64::new();
    let mut other = Tape64::new();
    let v = other.variable(Tensor64::ones(&[]));
    assert_eq!(empty.backward(v).unwrap_err(), TensorError::EmptyTape);
}

#[test]
fn unreachable_variables_get_zero_gradient_of_their_shape() {
    let mut t = Tape64::new();
    let x = t.variable(Tensor64::ones(&[3]));
    let unused = t.variable(Tensor64::ones(&[2, 4]));
    let l = t.sum(x, None).unwrap();
    let g = t.backward(l).unwrap();
    assert!(!g.has(unused));
    assert_eq!(g.get(unused), Tensor64::zeros(&[2, 4]));
}

#[test]
fn shape_mismatch_names_the_op_and_shapes() {
    let mut t = Tape64::new();
    let a = t.constant(Tensor64::zeros(&[2, 3]));
    let b = t.constant(Tensor64::zeros(&[4, 5]));
    match t.matmul(a, b) {
        Err(TensorError::ShapeMismatch { op, lhs, rhs }) => {
            assert_eq!(op, "matmul");
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![4, 5]);
        }
        other => panic!("unexpected {other:?}"),
    }
    let err = t.add(a, b).unwrap_err().to_string();
    assert!(err.contains("add") && err.contains("[2, 3]") && err.contains("[4, 5]"));
}

#[test]
fn non_finite_results_fail_when_checking_is_on() {
    let mut t = Tape64::new();
    t.set_check_finite(true);
    let x = t.constant(Tensor64::from_f64(&[1], &[-1.0]).unwrap());
    assert_eq!(t.log(x).unwrap_err(), TensorError::NonFinite { op: "log" });
}

#[test]
fn masked_attention_keys_get_negligible_probability() {
    let mut t = Tape32::new();
    let x = t.constant(Tensor::from_f64(&[2, 4], &[5.0, 1.0, -2.0, 30.0, 0.0, 0.0, 0.0, 0.0]).unwrap());
    let mask = [false, true, false, true];
    let m = t.mask_fill(x, &mask, MASK_FILL as f32).unwrap();
    let p = t.softmax(m, 1).unwrap();
    let p = t.value(p);
    for r in 0..2 {
        let row = p.row(r);
        assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-6);
        assert!(row[1] < 1e-9 && row[3] < 1e-9);
    }
}

#[test]
fn adamw_step_matches_scalar_recurrence_bitwise() {
    let w0 = [0.7, -1.3, 2.0, 0.0];
    let g = [0.02, -0.5, 1e-4, 3.0];
    let (lr, cfg) = (0.003, AdamWConfig::default());
    let mut store = ParamStore::new();
    let id = store.add("w", Tensor64::from_f64(&[4], &w0).unwrap());
    let mut opt = AdamW::new(&store, cfg);
    let grad = Tensor64::from_f64(&[4], &g).unwrap();
    for _ in 0..3 {
        opt.step(&mut store, &[grad.clone()], lr).unwrap();
    }

    // Scalar reference of the decoupled recurrence.
    for j in 0..4 {
        let (mut w, mut m, mut v) = (w0[j], 0.0f64, 0.0f64);
        for step in 1..=3 {
            w *= 1.0 - lr * cfg.weight_decay;
            m = cfg.beta1 * m + (1.0 - cfg.beta1) * g[j];
            v = cfg.beta2 * v + (1.0 - cfg.beta2) * g[j] * g[j];
            let mh = m / (1.0 - cfg.beta1.powi(step));
            let vh = v / (1.0 - cfg.beta2.powi(step));
            w -= lr * mh / (vh.sqrt() + cfg.eps);
        }
        assert_eq!(store.get(id).data()[j].to_bits(), w.to_bits(), "element {j}");
    }
}

#[test]
fn backward_through_concat_routes_slices_to_their_inputs() {
    let a = Tensor64::from_f64(&[2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap();
    let b = Tensor64::from_f64(&[2, 1], &[5.0, 6.0]).unwrap();
    let w = Tensor64::from_f64(&[2, 3], &[0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap();
    let loss_of = |a: &Tensor64, b: &Tensor64| -> f64 {
        let mut t = Tape64::new();
        let (av, bv, wv) = (t.constant(a.clone()), t.constant(b.clone()), t.constant(w.clone()));
        let c = t.concat(&[av, bv], 1).unwrap();
        let p = t.mul(c, wv).unwrap();
        let l = t.sum(p, None).unwrap();
        t.value(l).item()
    };
    let mut t = Tape64::new();
    let (av, bv, wv) = (t.variable(a.clone()), t.variable(b.clone()), t.constant(w.clone()));
    let c = t.concat(&[av, bv], 1).unwrap();
    let p = t.mul(c, wv).unwrap();
    let l = t.sum(p, None).unwrap();
    let g = t.backward(l).unwrap();
    // Perturbing each input element moves the loss by exactly its routed weight.
    for j in 0..4 {
        let mut ap = a.clone();
        ap.data_mut()[j] += 1.0;
        assert!((loss_of(&ap, &b) - loss_of(&a, &b) - g.get(av).data()[j]).abs() < 1e-12);
    }
    for j in 0..2 {
        let mut bp = b.clone();
        bp.data_mut()[j] += 1.0;
        assert!((loss_of(&a, &bp) - loss_of(&a, &b) - g.get(bv).data()[j]).abs() < 1e-12);
    }
    assert_eq!(g.get(bv).data(), &[0.3, 0.6]);
}

proptest! {
    #[test]
    fn concat_then_split_is_identity(
        rows in 1usize..4,
        widths in proptest::collection::vec(1usize..4, 1..4),
        axis in 0usize..2,
        seed in 0u64..1000,
    ) {
        let mut t = Tape64::new();
        let mut parts = Vec::new();
        let mut vals = Vec::new();
        for (i, &w) in widths.iter().enumerate() {
            let shape = if axis == 1 { vec![rows, w] } else { vec![w, rows] };
            let n = rows * w;
            let data: Vec<f64> = (0..n).map(|k| ((seed + i as u64 * 31 + k as u64) as f64).sin()).collect();
            let tensor = Tensor64::new(shape, data).unwrap();
            vals.push(tensor.clone());
            parts.push(t.constant(tensor));
        }
        let cat = t.concat(&parts, axis).unwrap();
        let back = t.split(cat, axis, &widths).unwrap();
        for (v, orig) in back.iter().zip(&vals) {
            prop_assert_eq!(t.value(*v), orig);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one(data in proptest::collection::vec(-50.0f32..50.0, 12)) {
        let mut t = Tape32::new();
        let x = t.constant(Tensor::new(vec![3, 4], data).unwrap());
        let p = t.softmax(x, 1).unwrap();
        for r in 0..3 {
            let total: f32 = t.value(p).row(r).iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-6);
        }
    }
}
