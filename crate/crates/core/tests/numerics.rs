use proptest::prelude::*;
use rand::Rng as _;
use spin_core::numerics::gradcheck;
use spin_core::numerics::nn::Mlp;
use spin_core::numerics::rng::stream;
use spin_core::numerics::{Adam, AdamConfig, ParamStore, Tape, Tensor};
use spin_core::Error;

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape, data.to_vec()).unwrap()
}

#[test]
fn matmul_identity_and_selector() {
    let mut tape = Tape::new();
    let i2 = tape.constant(t(&[2, 2], &[1., 0., 0., 1.]));
    let m = tape.constant(t(&[2, 2], &[1., 2., 3., 4.]));
    let y = tape.matmul(i2, m).unwrap();
    assert_eq!(tape.value(y).data(), &[1., 2., 3., 4.]);

    let a = tape.constant(t(&[1, 2], &[1., 0.]));
    let b = tape.constant(t(&[2, 1], &[0., 5.]));
    let y = tape.matmul(a, b).unwrap();
    assert_eq!(tape.value(y).data(), &[0.]);
}

#[test]
fn matmul_matches_triple_loop() {
    let mut rng = stream(3, "matmul");
    let a: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
    let b: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut want = [0.0; 6];
    for i in 0..3 {
        for j in 0..2 {
            for k in 0..4 {
                want[i * 2 + j] += a[i * 4 + k] * b[k * 2 + j];
            }
        }
    }
    let mut tape = Tape::new();
    let va = tape.constant(t(&[3, 4], &a));
    let vb = tape.constant(t(&[4, 2], &b));
    let y = tape.matmul(va, vb).unwrap();
    for (x, w) in tape.value(y).data().iter().zip(want) {
        assert!((x - w).abs() < 1e-12);
    }
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[2, 3]));
    match tape.matmul(a, b) {
        Err(Error::Dimension { lhs, rhs, .. }) => {
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![2, 3]);
        }
        other => panic!("expected dimension error, got {other:?}"),
    }
}

#[test]
fn softmax_examples() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[3], &[0., 0., 0.]));
    let y = tape.softmax(x).unwrap();
    for v in tape.value(y).data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }

    let x = tape.constant(t(&[3], &[1000., 0., -1000.]));
    let y = tape.softmax(x).unwrap();
    let d = tape.value(y).data();
    assert!((d[0] - 1.0).abs() < 1e-12 && d[1] < 1e-300 + 1e-12 && d[2] >= 0.0);

    let x = tape.constant(t(&[3], &[1f64.ln(), 2f64.ln(), 3f64.ln()]));
    let y = tape.softmax(x).unwrap();
    for (v, w) in tape.value(y).data().iter().zip([1. / 6., 2. / 6., 3. / 6.]) {
        assert!((v - w).abs() < 1e-12);
    }
}

#[test]
fn cross_entropy_examples_and_gradient() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::zeros(&[4]), true);
    let ce = tape.cross_entropy(x, &[2]).unwrap();
    assert!((tape.value(ce).item() - 4f64.ln()).abs() < 1e-12);
    let loss = tape.sum(ce).unwrap();
    let g = tape.backward(loss).unwrap();
    // softmax - onehot
    assert_eq!(g.get(x).unwrap(), &[0.25, 0.25, -0.75, 0.25]);

    let x = tape.constant(t(&[3], &[0., 1e6, 0.]));
    let ce = tape.cross_entropy(x, &[1]).unwrap();
    assert!(tape.value(ce).item().abs() < 1e-12);

    let x = tape.constant(Tensor::zeros(&[3]));
    assert!(matches!(tape.cross_entropy(x, &[3]), Err(Error::Index { .. })));
}

#[test]
fn cross_entropy_matches_finite_differences() {
    let mut rng = stream(11, "ce");
    let mut store = ParamStore::new();
    store.add("logits", Tensor::from_fn(&[3, 5], |_| rng.random_range(-2.0..2.0)));
    let report = gradcheck::check(&mut store, |tape, p| {
        let ce = tape.cross_entropy(p.vars()[0], &[0, 4, 2])?;
        tape.sum(ce)
    })
    .unwrap();
    assert!(report.max_rel_error < 1e-4, "{report:?}");
}

#[test]
fn layer_norm_examples() {
    let mut tape = Tape::new();
    let ones = tape.constant(Tensor::full(&[2], 1.0));
    let zeros = tape.constant(Tensor::zeros(&[2]));
    let x = tape.constant(t(&[2], &[1., 3.]));
    let y = tape.layer_norm(x, ones, zeros, 1e-5).unwrap();
    let d = tape.value(y).data();
    assert!((d[0] + 1.0).abs() < 1e-5 && (d[1] - 1.0).abs() < 1e-5);

    let ones3 = tape.constant(Tensor::full(&[3], 1.0));
    let zeros3 = tape.constant(Tensor::zeros(&[3]));
    let c = tape.constant(Tensor::full(&[3], 4.2));
    let y = tape.layer_norm(c, ones3, zeros3, 1e-5).unwrap();
    assert!(tape.value(y).data().iter().all(|v| v.abs() < 1e-12));

    let g0 = tape.constant(Tensor::zeros(&[3]));
    let b = tape.constant(t(&[3], &[0.5, -1., 2.]));
    let x = tape.constant(t(&[3], &[9., -3., 0.1]));
    let y = tape.layer_norm(x, g0, b, 1e-5).unwrap();
    assert_eq!(tape.value(y).data(), &[0.5, -1., 2.]);

    let empty = tape.constant(Tensor::zeros(&[2, 0]));
    let e0 = tape.constant(Tensor::zeros(&[0]));
    assert!(tape.layer_norm(empty, e0, e0, 1e-5).is_err());
}

#[test]
fn layer_norm_rows_are_standardized() {
    let mut rng = stream(5, "ln");
    let mut tape = Tape::new();
    let g = tape.constant(Tensor::full(&[16], 1.0));
    let b = tape.constant(Tensor::zeros(&[16]));
    let x = tape.constant(Tensor::from_fn(&[4, 16], |_| rng.random_range(-3.0..5.0)));
    let y = tape.layer_norm(x, g, b, 0.0).unwrap();
    for r in 0..4 {
        let row = tape.value(y).row(r);
        let mean: f64 = row.iter().sum::<f64>() / 16.0;
        let var: f64 = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
        assert!(mean.abs() < 1e-10 && (var - 1.0).abs() < 1e-10);
    }
}

#[test]
fn backward_basic_cases() {
    let mut tape = Tape::new();
    let x = tape.leaf(t(&[2], &[1., 2.]), true);
    let p = tape.leaf(t(&[3], &[5., 6., 7.]), true);
    let sq = tape.square(x).unwrap();
    let loss = tape.sum(sq).unwrap();
    let g = tape.backward(loss).unwrap();
    assert_eq!(g.get(x).unwrap(), &[2., 4.]);
    assert_eq!(g.tensor(p).data(), &[0., 0., 0.]);

    let v = tape.leaf(Tensor::zeros(&[2]), true);
    assert!(matches!(tape.backward(v), Err(Error::Contract(_))));
}

#[test]
fn non_finite_values_are_hard_errors() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[1], &[1000.]));
    assert!(matches!(tape.exp(x), Err(Error::NonFinite { .. })));
}

#[test]
fn mlp_with_cross_entropy_matches_finite_differences() {
    let mut rng = stream(2, "mlp");
    let mut store = ParamStore::new();
    let mlp = Mlp::new(&mut store, "mlp", &[4, 6, 3], &mut rng);
    // larger weights than the 0.02 init so the check is not trivially flat
    for tensor in store.tensors_mut() {
        for v in tensor.data_mut() {
            *v = rng.random_range(-0.8..0.8);
        }
    }
    let x = Tensor::from_fn(&[5, 4], |_| rng.random_range(-1.0..1.0));
    let report = gradcheck::check(&mut store, |tape, p| {
        let xv = tape.constant(x.clone());
        let logits = mlp.forward(tape, p, xv)?;
        let ce = tape.cross_entropy(logits, &[0, 1, 2, 1, 0])?;
        tape.mean(ce)
    })
    .unwrap();
    assert!(report.checked < 500);
    assert!(report.max_rel_error < 1e-4, "{report:?}");
}

#[test]
fn structural_ops_match_finite_differences() {
    let mut rng = stream(9, "ops");
    let mut store = ParamStore::new();
    store.add("a", Tensor::from_fn(&[2, 3, 4], |_| rng.random_range(-1.0..1.0)));
    store.add("b", Tensor::from_fn(&[2, 2, 4], |_| rng.random_range(-1.0..1.0)));
    store.add("g", Tensor::from_fn(&[4], |_| rng.random_range(0.5..1.5)));
    store.add("bias", Tensor::from_fn(&[4], |_| rng.random_range(-0.5..0.5)));
    store.add("tab", Tensor::from_fn(&[5, 4], |_| rng.random_range(-1.0..1.0)));
    let weights: Vec<f64> = (0..40).map(|_| rng.random_range(-1.0..1.0)).collect();
    let report = gradcheck::check(&mut store, |tape, p| {
        let v = p.vars();
        let cat = tape.concat(v[0], v[1], 1)?; // [2,5,4]
        let ln = tape.layer_norm(cat, v[2], v[3], 1e-5)?;
        let perm = tape.permute(ln, &[1, 0, 2])?; // [5,2,4]
        let emb = tape.embedding(v[4], &[4, 0, 0, 2, 1])?; // [5,4]
        let embb = tape.broadcast_axis(emb, 1, 2)?; // [5,2,4]
        let prod = tape.mul(perm, embb)?;
        let att = tape.bmm(prod, embb, true)?; // [5,2,2]
        let sm = tape.softmax(att)?;
        let ctx = tape.bmm(sm, perm, false)?; // [5,2,4]
        let sl = tape.slice(ctx, 0, 1, 3)?; // [3,2,4]
        let nrm = tape.l2_normalize(sl)?;
        let th = tape.tanh(nrm)?;
        let s = tape.sum_axis(th, 1)?; // [3,4]
        let tl = tape.tile(s, 2)?; // [2,3,4]
        let sg = tape.sigmoid(tl)?;
        let ls = tape.log_softmax(sg)?;
        let flat = tape.reshape(ls, &[24])?;
        let more = tape.slice(flat, 0, 0, 24)?;
        let w = tape.mul_const(more, weights[..24].to_vec())?;
        let e = tape.exp(w)?;
        tape.sum(e)
    })
    .unwrap();
    assert!(report.max_rel_error < 1e-4, "{report:?}");
}

#[test]
fn adam_training_is_bitwise_deterministic() {
    let run = || {
        let mut rng = stream(42, "init");
        let mut store = ParamStore::new();
        let mlp = Mlp::new(&mut store, "m", &[3, 8, 2], &mut rng);
        let mut opt = Adam::new(AdamConfig::default(), &store);
        let mut data_rng = stream(42, "data");
        for _ in 0..100 {
            let x = Tensor::from_fn(&[4, 3], |_| data_rng.random_range(-1.0..1.0));
            let mut tape = Tape::new();
            let p = store.bind(&mut tape, true);
            let xv = tape.constant(x);
            let y = mlp.forward(&mut tape, &p, xv).unwrap();
            let ce = tape.cross_entropy(y, &[0, 1, 1, 0]).unwrap();
            let loss = tape.mean(ce).unwrap();
            let g = tape.backward(loss).unwrap();
            let grads = store.gradients(&p, &g);
            opt.step(&mut store, &grads).unwrap();
        }
        store.to_bytes()
    };
    assert_eq!(run(), run());
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(values in prop::collection::vec(-50.0f64..50.0, 1..24), cols in 1usize..6) {
        let rows = values.len() / cols;
        prop_assume!(rows > 0);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(&[rows, cols], values[..rows * cols].to_vec()).unwrap());
        let y = tape.softmax(x).unwrap();
        for r in 0..rows {
            let row = tape.value(y).row(r);
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&p| p >= 0.0));
        }
        let ce = tape.cross_entropy(x, &vec![0; rows]).unwrap();
        prop_assert!(tape.value(ce).data().iter().all(|&l| l >= 0.0));
    }

    #[test]
    fn permute_then_inverse_is_identity(d0 in 1usize..4, d1 in 1usize..4, d2 in 1usize..4) {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_fn(&[d0, d1, d2], |i| i as f64));
        let p = tape.permute(x, &[2, 0, 1]).unwrap();
        let back = tape.permute(p, &[1, 2, 0]).unwrap();
        prop_assert_eq!(tape.value(back), tape.value(x));
    }
}
