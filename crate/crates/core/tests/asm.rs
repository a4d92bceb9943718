use std::collections::BTreeMap;

use proptest::prelude::*;
use spin_core::asm::{
    corrupt, mam_loss, masked_accuracy, pretrain, sample_mask_plan, AsmConfig, AsmModel, CamConfig, CamHead,
    Fate, MaskPlan, Objective, ObjectiveKind, PretrainConfig, VamConfig, VamHead,
};
use spin_core::envs::{generate_dataset, EnvParams, EnvSpec, Tier, Transition};
use spin_core::numerics::gradcheck;
use spin_core::numerics::losses::{gaussian_kl, info_nce};
use spin_core::numerics::rng::stream;
use spin_core::numerics::{Tape, Tensor};
use spin_core::Error;

fn tiny(n: usize, m: usize, s: usize, layers: usize) -> AsmConfig {
    AsmConfig {
        d: 8,
        layers,
        heads: 2,
        ..AsmConfig::new(n, m, s)
    }
}

fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = stream(seed, "test/tensor");
    Tensor::from_fn(shape, |_| spin_core::numerics::rng::standard_normal(&mut rng))
}

fn expert_data(n: usize, m: usize, size: usize, seed: u64) -> Vec<Transition> {
    let params = EnvParams {
        n,
        m,
        kappa: 0.9,
        seed,
        ..EnvParams::default()
    };
    let spec = EnvSpec::new(params).unwrap();
    let mix = BTreeMap::from([(Tier::Expert, 1.0)]);
    generate_dataset(&spec, &mix, size, seed).unwrap().transitions
}

/// Encodes explicit slot vectors and returns slot outputs.
fn encode_slots(model: &AsmModel, states: &Tensor, slots: &Tensor) -> Tensor {
    let mut tape = Tape::new();
    let p = model.bind(&mut tape, false);
    let s = tape.constant(states.clone());
    let x = tape.constant(slots.clone());
    let enc = model.encode(&mut tape, &p, s, x).unwrap();
    tape.value(enc.slots).clone()
}

fn permute_slots(t: &Tensor, perm: &[usize]) -> Tensor {
    let (b, n, d) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    Tensor::from_fn(&[b, n, d], |idx| {
        let (bi, rest) = (idx / (n * d), idx % (n * d));
        let (i, k) = (rest / d, rest % d);
        t.data()[(bi * n + perm[i]) * d + k]
    })
}

#[test]
fn config_validation() {
    let mut c = AsmConfig::new(8, 5, 12);
    assert!(c.validate().is_ok());
    c.heads = 3;
    assert!(matches!(c.validate(), Err(Error::Config(_))));
    let mut c = AsmConfig::new(8, 5, 12);
    c.corruption = [0.8, 0.1, 0.2];
    assert!(c.validate().is_err());
    c = AsmConfig::new(8, 5, 12);
    c.p_mask = 0.0;
    assert!(c.validate().is_err());
}

#[test]
fn zero_layers_is_identity_on_slots() {
    let model = AsmModel::new(tiny(3, 4, 5, 0), 1).unwrap();
    let states = random_tensor(&[2, 5], 1);
    let slots = random_tensor(&[2, 3, 8], 2);
    let out = encode_slots(&model, &states, &slots);
    assert_eq!(out, slots);
}

#[test]
fn encode_rejects_wrong_width() {
    let model = AsmModel::new(tiny(3, 4, 5, 1), 1).unwrap();
    let mut tape = Tape::new();
    let p = model.bind(&mut tape, false);
    let s = tape.constant(random_tensor(&[2, 5], 1));
    let x = tape.constant(random_tensor(&[2, 3, 7], 2));
    assert!(matches!(model.encode(&mut tape, &p, s, x), Err(Error::Dimension { .. })));
    let s = tape.constant(random_tensor(&[2, 4], 1));
    let x = tape.constant(random_tensor(&[2, 3, 8], 2));
    assert!(matches!(model.encode(&mut tape, &p, s, x), Err(Error::Dimension { .. })));
}

#[test]
fn encode_is_bit_stable() {
    let model = AsmModel::new(tiny(4, 3, 6, 2), 9).unwrap();
    let again = AsmModel::new(tiny(4, 3, 6, 2), 9).unwrap();
    let states = random_tensor(&[3, 6], 3);
    let slots = random_tensor(&[3, 4, 8], 4);
    let a = encode_slots(&model, &states, &slots);
    let b = encode_slots(&again, &states, &slots);
    assert_eq!(a.data(), b.data());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn encode_is_permutation_equivariant(seed in 0u64..1000, perm in Just((0..5).collect::<Vec<usize>>()).prop_shuffle()) {
        let model = AsmModel::new(tiny(5, 3, 4, 2), seed).unwrap();
        let states = random_tensor(&[2, 4], seed + 1);
        let slots = random_tensor(&[2, 5, 8], seed + 2);
        let out = encode_slots(&model, &states, &slots);
        let out_perm = encode_slots(&model, &states, &permute_slots(&slots, &perm));
        prop_assert!(out_perm.max_abs_diff(&permute_slots(&out, &perm)) < 1e-9);
    }

    #[test]
    fn plans_are_never_empty(seed in 0u64..10_000, n in 1usize..10) {
        let mut c = AsmConfig::new(n, 3, 4);
        c.p_mask = 0.01;
        let mut rng = stream(seed, "test/plans");
        for _ in 0..50 {
            let plan = sample_mask_plan(&c, &mut rng);
            prop_assert!(!plan.perturbed().is_empty());
            for f in plan.fates().iter().flatten() {
                if let Fate::Random(v) = f {
                    prop_assert!(*v < 3);
                }
            }
        }
    }
}

#[test]
fn full_mask_probability_selects_every_slot() {
    let mut c = AsmConfig::new(6, 3, 4);
    c.p_mask = 1.0;
    let mut rng = stream(0, "test/full");
    for _ in 0..200 {
        assert_eq!(sample_mask_plan(&c, &mut rng).perturbed(), (0..6).collect::<Vec<_>>());
    }
}

#[test]
fn fate_and_selection_frequencies() {
    let c = AsmConfig::new(8, 5, 12);
    let mut rng = stream(42, "test/frequencies");
    let (mut selected, mut counts) = (0usize, [0usize; 3]);
    let mut random_values = [0usize; 5];
    let plans = 100_000;
    for _ in 0..plans {
        for f in sample_mask_plan(&c, &mut rng).fates().iter().flatten() {
            selected += 1;
            match f {
                Fate::Mask => counts[0] += 1,
                Fate::Random(v) => {
                    counts[1] += 1;
                    random_values[*v] += 1;
                }
                Fate::Keep => counts[2] += 1,
            }
        }
    }
    for (k, p) in [0.8, 0.1, 0.1].into_iter().enumerate() {
        let sigma = (selected as f64 * p * (1.0 - p)).sqrt();
        let dev = (counts[k] as f64 - selected as f64 * p).abs();
        assert!(dev < 3.0 * sigma, "fate {k}: {} vs {}", counts[k], selected as f64 * p);
    }
    // Each slot is selected with probability p + (1-p)^N / N.
    let q = 0.3 + 0.7f64.powi(8) / 8.0;
    let trials = (plans * 8) as f64;
    let sigma = (trials * q * (1.0 - q)).sqrt();
    assert!((selected as f64 - trials * q).abs() < 3.0 * sigma);
    let rv: usize = random_values.iter().sum();
    for &c in &random_values {
        let sigma = (rv as f64 * 0.2 * 0.8).sqrt();
        assert!((c as f64 - rv as f64 * 0.2).abs() < 3.0 * sigma);
    }
}

#[test]
fn corrupt_applies_recorded_fates() {
    let c = AsmConfig::new(4, 5, 3);
    let a = [1, 2, 3, 4];
    let keep = MaskPlan::from_fates(vec![Some(Fate::Keep); 4]);
    assert_eq!(corrupt(&c, &a, &keep).unwrap(), vec![1, 7, 13, 19]);
    let plan = MaskPlan::from_fates(vec![None, None, Some(Fate::Mask), Some(Fate::Random(4))]);
    let ids = corrupt(&c, &a, &plan).unwrap();
    assert_eq!(ids, vec![1, 7, c.mask_id(), 19]);
    let plan = MaskPlan::from_fates(vec![Some(Fate::Random(4)), None, None, None]);
    assert_eq!(corrupt(&c, &[0, 2, 3, 4], &plan).unwrap()[0], 4);
}

fn mam_setup(seed: u64) -> (AsmModel, Tensor, Vec<Vec<usize>>, Vec<MaskPlan>) {
    let model = AsmModel::new(tiny(3, 3, 4, 1), seed).unwrap();
    let states = random_tensor(&[4, 4], seed);
    let actions = vec![vec![0, 1, 2], vec![2, 2, 0], vec![1, 0, 1], vec![0, 0, 2]];
    let plans = vec![
        MaskPlan::from_fates(vec![Some(Fate::Mask), None, None]),
        MaskPlan::from_fates(vec![None, Some(Fate::Random(1)), None]),
        MaskPlan::from_fates(vec![Some(Fate::Keep), Some(Fate::Mask), None]),
        MaskPlan::from_fates(vec![Some(Fate::Mask), None, None]),
    ];
    (model, states, actions, plans)
}

#[test]
fn mam_loss_gradients_match_finite_differences() {
    let (mut model, states, actions, plans) = mam_setup(3);
    let shape = model.clone();
    let report = gradcheck::check(&mut model.store, |tape, p| {
        let s = tape.constant(states.clone());
        mam_loss(&shape, tape, p, s, &actions, &plans)
    })
    .unwrap();
    assert!(report.max_rel_error < 1e-4, "{report:?}");
}

#[test]
fn unperturbed_slot_heads_get_zero_gradient() {
    let (model, states, actions, plans) = mam_setup(4);
    // Slot 2 is never perturbed in this batch.
    let mut tape = Tape::new();
    let p = model.bind(&mut tape, true);
    let s = tape.constant(states);
    let loss = mam_loss(&model, &mut tape, &p, s, &actions, &plans).unwrap();
    let grads = tape.backward(loss).unwrap();
    let [w, b] = model.head_params();
    let (gw, gb) = (grads.tensor(p[w]), grads.tensor(p[b]));
    let per_w = gw.numel() / 3;
    let per_b = gb.numel() / 3;
    assert!(gw.data()[2 * per_w..].iter().all(|&g| g == 0.0));
    assert!(gb.data()[2 * per_b..].iter().all(|&g| g == 0.0));
    assert!(gw.data()[..per_w].iter().any(|&g| g != 0.0));
}

#[test]
fn mam_loss_sums_cross_entropy_over_perturbed_slots_only() {
    let (model, states, actions, plans) = mam_setup(5);
    let mut tape = Tape::new();
    let p = model.bind(&mut tape, false);
    let s = tape.constant(states);
    let loss = mam_loss(&model, &mut tape, &p, s, &actions, &plans).unwrap();
    let loss = tape.value(loss).item();
    let mut ids = Vec::new();
    for (a, plan) in actions.iter().zip(&plans) {
        ids.extend(corrupt(&model.config, a, plan).unwrap());
    }
    let x = model.embed_slots(&mut tape, &p, &ids).unwrap();
    let enc = model.encode(&mut tape, &p, s, x).unwrap();
    let logits = model.slot_logits(&mut tape, &p, enc.slots).unwrap();
    let lv = tape.value(logits).data().to_vec();
    let mut expected = 0.0;
    for (b, (a, plan)) in actions.iter().zip(&plans).enumerate() {
        for i in plan.perturbed() {
            let row = &lv[(b * 3 + i) * 3..(b * 3 + i + 1) * 3];
            let lse = row.iter().map(|v| v.exp()).sum::<f64>().ln();
            expected += lse - row[a[i]];
        }
    }
    expected /= actions.len() as f64;
    assert!((loss - expected).abs() < 1e-12, "{loss} vs {expected}");
}

#[test]
fn untrained_loss_is_near_uniform_entropy() {
    let data = expert_data(8, 5, 400, 1);
    let mut model = AsmModel::new(AsmConfig::new(8, 5, 12), 0).unwrap();
    let mut objective = Objective::Mam;
    let cfg = PretrainConfig {
        epochs: 1,
        batch_size: 400,
        lr: 0.0,
        seed: 0,
    };
    let log = pretrain(&mut model, &mut objective, &data, &cfg, |_, _| Ok(())).unwrap();
    let expected_set = 8.0 * (0.3 + 0.7f64.powi(8) / 8.0);
    let expected = expected_set * 5f64.ln();
    assert!((log.initial_loss - expected).abs() < 0.05 * expected, "{} vs {expected}", log.initial_loss);
}

#[test]
fn pretraining_is_deterministic() {
    let data = expert_data(3, 3, 120, 2);
    let cfg = PretrainConfig {
        epochs: 3,
        batch_size: 32,
        lr: 1e-3,
        seed: 5,
    };
    let run = || {
        let mut model = AsmModel::new(tiny(3, 3, 12, 1), 7).unwrap();
        let log = pretrain(&mut model, &mut Objective::Mam, &data, &cfg, |_, _| Ok(())).unwrap();
        (log, model.store)
    };
    let (a, sa) = run();
    let (b, sb) = run();
    assert_eq!(a, b);
    assert_eq!(sa, sb);
}

#[test]
fn epoch_marks_are_reported_in_order() {
    let data = expert_data(3, 3, 60, 2);
    let cfg = PretrainConfig {
        epochs: 4,
        batch_size: 32,
        lr: 1e-3,
        seed: 5,
    };
    let mut model = AsmModel::new(tiny(3, 3, 12, 1), 7).unwrap();
    let mut seen = Vec::new();
    pretrain(&mut model, &mut Objective::Mam, &data, &cfg, |k, _| {
        seen.push(k);
        Ok(())
    })
    .unwrap();
    assert_eq!(seen, vec![0, 1, 2, 3, 4]);
}

#[test]
fn empty_dataset_is_config_error() {
    let mut model = AsmModel::new(tiny(3, 3, 12, 1), 7).unwrap();
    let r = pretrain(&mut model, &mut Objective::Mam, &[], &PretrainConfig::default(), |_, _| Ok(()));
    assert!(matches!(r, Err(Error::Config(_))));
}

#[test]
fn mam_learns_deterministic_expert_mapping() {
    let data = expert_data(4, 3, 2000, 11);
    let mut model = AsmModel::new(AsmConfig::new(4, 3, 12), 3).unwrap();
    let cfg = PretrainConfig {
        epochs: 50,
        batch_size: 64,
        lr: 1e-3,
        seed: 3,
    };
    let log = pretrain(&mut model, &mut Objective::Mam, &data, &cfg, |_, _| Ok(())).unwrap();
    let held_out = expert_data(4, 3, 500, 11);
    let acc = masked_accuracy(&model, &held_out[..], 99).unwrap();
    assert!(acc > 0.95, "masked accuracy {acc}, losses {:?}", log.epoch_losses);
}

#[test]
fn kl_closed_form_examples() {
    let kl = |mu: Vec<f64>, lv: Vec<f64>| {
        let mut tape = Tape::new();
        let d = mu.len();
        let m = tape.constant(Tensor::new(&[1, d], mu).unwrap());
        let l = tape.constant(Tensor::new(&[1, d], lv).unwrap());
        let k = gaussian_kl(&mut tape, m, l).unwrap();
        tape.value(k).data()[0]
    };
    assert_eq!(kl(vec![0.0; 4], vec![0.0; 4]), 0.0);
    assert!((kl(vec![1.0, 1.0], vec![0.0, 0.0]) - 1.0).abs() < 1e-12);
    let v = 2f64.ln();
    assert!((kl(vec![0.0], vec![v]) - 0.5 * (2.0 - v - 1.0)).abs() < 1e-12);
}

fn vam_setup(beta: f64) -> (AsmModel, VamHead, Tensor, Vec<Vec<usize>>) {
    let model = AsmModel::new(tiny(3, 3, 4, 1), 21).unwrap();
    let head = VamHead::new(&model, VamConfig { latent_dim: 2, beta }, 22);
    let states = random_tensor(&[3, 4], 23);
    let actions = vec![vec![0, 1, 2], vec![2, 1, 0], vec![1, 1, 1]];
    (model, head, states, actions)
}

#[test]
fn vam_gradients_match_finite_differences() {
    let (model, mut head, states, actions) = vam_setup(0.5);
    let noise = random_tensor(&[3, 2], 24);
    let vam_shape = head.clone();
    let report = gradcheck::check(&mut head.store, |tape, ph| {
        let pa = model.bind(tape, false);
        let s = tape.constant(states.clone());
        Ok(vam_shape.loss(&model, tape, &pa, ph, s, &actions, &noise)?.total)
    })
    .unwrap();
    assert!(report.max_rel_error < 1e-4, "{report:?}");
    let mut asm = model.clone();
    let report = gradcheck::check(&mut asm.store, |tape, pa| {
        let ph = head.store.bind(tape, false);
        let s = tape.constant(states.clone());
        Ok(head.loss(&model, tape, pa, &ph, s, &actions, &noise)?.total)
    })
    .unwrap();
    assert!(report.max_rel_error < 1e-4, "{report:?}");
}

#[test]
fn zero_beta_cuts_the_kl_path() {
    let (model, head, states, actions) = vam_setup(0.0);
    let noise = Tensor::zeros(&[3, 2]);
    let mut tape = Tape::new();
    let pa = model.bind(&mut tape, false);
    let ph = head.store.bind(&mut tape, true);
    let s = tape.constant(states);
    let terms = head.loss(&model, &mut tape, &pa, &ph, s, &actions, &noise).unwrap();
    assert_eq!(tape.value(terms.total).item(), tape.value(terms.reconstruction).item());
    let grads = tape.backward(terms.total).unwrap();
    for name in ["logvar.w", "logvar.b"] {
        let id = head.store.find(name).unwrap();
        assert!(grads.tensor(ph[id]).data().iter().all(|&g| g == 0.0), "{name}");
    }
}

#[test]
fn info_nce_two_example_value() {
    let mut tape = Tape::new();
    let q = tape.constant(Tensor::new(&[1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
    let k = tape.constant(Tensor::new(&[1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
    let rows = info_nce(&mut tape, q, k, 1.0).unwrap();
    let expected = -(1f64.exp() / (1f64.exp() + 1.0)).ln();
    assert!((tape.value(rows).data()[0] - expected).abs() < 1e-12);
    assert!((expected - 0.3133).abs() < 1e-4);
}

#[test]
fn info_nce_is_rotation_invariant() {
    let q0 = random_tensor(&[3, 4, 2], 30);
    let k0 = random_tensor(&[3, 4, 2], 31);
    let rotate = |t: &Tensor, th: f64| {
        let (c, s) = (th.cos(), th.sin());
        Tensor::from_fn(t.shape(), |i| {
            let (x, y) = (t.data()[i & !1], t.data()[i | 1]);
            if i % 2 == 0 {
                c * x - s * y
            } else {
                s * x + c * y
            }
        })
    };
    let loss = |q: Tensor, k: Tensor| {
        let mut tape = Tape::new();
        let (q, k) = (tape.constant(q), tape.constant(k));
        let r = info_nce(&mut tape, q, k, 0.1).unwrap();
        let m = tape.mean(r).unwrap();
        tape.value(m).item()
    };
    let base = loss(q0.clone(), k0.clone());
    let rotated = loss(rotate(&q0, 0.7), rotate(&k0, 0.7));
    assert!((base - rotated).abs() < 1e-10);
}

#[test]
fn cam_needs_two_examples() {
    let model = AsmModel::new(tiny(3, 3, 4, 1), 1).unwrap();
    let head = CamHead::new(&model, CamConfig::default(), 2);
    let mut tape = Tape::new();
    let pa = model.bind(&mut tape, false);
    let ph = head.store.bind(&mut tape, false);
    let s = tape.constant(random_tensor(&[1, 4], 1));
    let r = head.loss(&model, &mut tape, &pa, &ph, s, &[vec![0, 1, 2]]);
    assert!(matches!(r, Err(Error::Config(_))));
    let mut model = model;
    let mut obj = Objective::new(ObjectiveKind::Cam, &model, 1);
    let cfg = PretrainConfig { batch_size: 1, ..PretrainConfig::default() };
    let data = expert_data(3, 3, 10, 1);
    let r = pretrain(&mut model, &mut obj, &data, &cfg, |_, _| Ok(()));
    assert!(matches!(r, Err(Error::Config(_))));
}

#[test]
fn cam_projections_have_unit_norm_and_exact_gradients() {
    let mut model = AsmModel::new(tiny(3, 3, 4, 1), 40).unwrap();
    let mut head = CamHead::new(&model, CamConfig { proj_dim: 4, temperature: 0.5 }, 41);
    let states = random_tensor(&[3, 4], 42);
    let actions = vec![vec![0, 1, 2], vec![2, 1, 0], vec![1, 1, 1]];
    let shape = head.clone();
    let report = gradcheck::check(&mut head.store, |tape, ph| {
        let pa = model.bind(tape, false);
        let s = tape.constant(states.clone());
        shape.loss(&model, tape, &pa, ph, s, &actions)
    })
    .unwrap();
    assert!(report.max_rel_error < 1e-4, "{report:?}");
    let asm_shape = model.clone();
    let report = gradcheck::check(&mut model.store, |tape, pa| {
        let ph = head.store.bind(tape, false);
        let s = tape.constant(states.clone());
        head.loss(&asm_shape, tape, pa, &ph, s, &actions)
    })
    .unwrap();
    assert!(report.max_rel_error < 1e-4, "{report:?}");
    let mut tape = Tape::new();
    let x = tape.constant(random_tensor(&[5, 4], 43));
    let y = tape.l2_normalize(x).unwrap();
    for row in tape.value(y).data().chunks(4) {
        let norm: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-9);
    }
}

#[test]
fn cam_loss_at_init_is_near_log_batch() {
    let data = expert_data(8, 5, 6400, 3);
    let model = AsmModel::new(AsmConfig::new(8, 5, 12), 50).unwrap();
    let head = CamHead::new(&model, CamConfig::default(), 51);
    let mut total = 0.0;
    for chunk in data.chunks(64) {
        let actions: Vec<Vec<usize>> = chunk.iter().map(|t| t.a.clone()).collect();
        let states = spin_core::asm::state_batch(chunk.iter().map(|t| t.s.as_slice()), 12).unwrap();
        let mut tape = Tape::new();
        let pa = model.bind(&mut tape, false);
        let ph = head.store.bind(&mut tape, false);
        let s = tape.constant(states);
        let l = head.loss(&model, &mut tape, &pa, &ph, s, &actions).unwrap();
        total += tape.value(l).item();
    }
    let mean = total / 100.0;
    assert!((mean - 64f64.ln()).abs() < 0.2, "mean loss {mean} vs ln 64 = {}", 64f64.ln());
}

fn monotone_fraction(losses: &[f64]) -> f64 {
    let ups = losses.windows(2).filter(|w| w[1] > w[0]).count();
    ups as f64 / (losses.len() - 1) as f64
}

#[test]
fn all_objectives_decrease_on_expert_data() {
    let data = expert_data(4, 3, 6000, 13);
    for kind in ObjectiveKind::ALL {
        let mut model = AsmModel::new(AsmConfig { d: 32, ..AsmConfig::new(4, 3, 12) }, 8).unwrap();
        let mut obj = Objective::new(kind, &model, 9);
        let cfg = PretrainConfig {
            epochs: 8,
            batch_size: 64,
            lr: 5e-4,
            seed: 10,
        };
        let log = pretrain(&mut model, &mut obj, &data, &cfg, |_, _| Ok(())).unwrap();
        let frac = monotone_fraction(&log.epoch_losses);
        assert!(frac <= 0.05, "{kind}: {:?}", log.epoch_losses);
        assert!(log.epoch_losses.last() < log.epoch_losses.first(), "{kind}");
    }
}
