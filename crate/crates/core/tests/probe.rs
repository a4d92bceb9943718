use std::collections::BTreeMap;
use std::sync::Arc;

use proptest::prelude::*;
use rand::Rng as _;
use spin_core::asm::{pretrain, AsmConfig, AsmModel, Objective, ObjectiveKind, PretrainConfig};
use spin_core::envs::{generate_dataset, EnvParams, EnvSpec, OfflineDataset, Tier, Transition};
use spin_core::numerics::rng::{standard_normal, stream};
use spin_core::numerics::Tape;
use spin_core::policy::{Features, Policy};
use spin_core::probe::{
    binomial_upper_tail, eval_probe, fit_probe, independence_product, log10_chance, split_by_episode, ProbeConfig,
    ProbeReport, Representation,
};
use spin_core::Error;

fn expert_dataset(n: usize, m: usize, size: usize, seed: u64) -> OfflineDataset {
    let spec = EnvSpec::new(EnvParams {
        n,
        m,
        kappa: 0.9,
        seed,
        ..EnvParams::default()
    })
    .unwrap();
    generate_dataset(&spec, &BTreeMap::from([(Tier::Expert, 1.0)]), size, seed).unwrap()
}

fn pretrained(config: AsmConfig, data: &[Transition], epochs: usize, lr: f64) -> AsmModel {
    let mut model = AsmModel::new(config, 3).unwrap();
    let mut objective = Objective::new(ObjectiveKind::Mam, &model, 3);
    let cfg = PretrainConfig {
        epochs,
        batch_size: 64,
        lr,
        seed: 3,
    };
    pretrain(&mut model, &mut objective, data, &cfg, |_, _| Ok(())).unwrap();
    model
}

#[test]
fn perfect_predictions_score_one() {
    let labels = vec![vec![0, 1, 2], vec![2, 2, 0]];
    let r = ProbeReport::from_predictions(&labels, &labels, 3, "random").unwrap();
    assert_eq!(r.per_slot_accuracy, 1.0);
    assert_eq!(r.exact_match_accuracy, 1.0);
    assert_eq!(r.independence_product, 1.0);
    assert_eq!(r.dataset_size, 2);
}

#[test]
fn independence_product_at_ninety_percent_over_38_slots() {
    let p = independence_product(&[0.9; 38]);
    assert!((p - 0.0183).abs() < 1e-4, "{p}");
    assert!((p - 0.9f64.powi(38)).abs() < 1e-15);
}

#[test]
fn chance_baseline_for_38_slots_of_30() {
    let log = log10_chance(38, 30);
    let mantissa = 10f64.powf(log - log.floor());
    assert_eq!(log.floor(), -57.0);
    assert!((mantissa - 7.0).abs() < 0.5, "{mantissa}e{}", log.floor());
}

#[test]
fn empty_split_is_a_config_error() {
    let err = ProbeReport::from_predictions(&[], &[], 3, "random").unwrap_err();
    assert!(matches!(err, Error::Config(_)));
}

#[test]
fn binomial_tail_matches_direct_sum() {
    let (k, n, p) = (7u64, 20u64, 0.2f64);
    let choose = |n: u64, r: u64| (0..r).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64);
    let direct: f64 = (k..=n).map(|j| choose(n, j) * p.powi(j as i32) * (1.0 - p).powi((n - j) as i32)).sum();
    assert!((binomial_upper_tail(k, n, p) - direct).abs() < 1e-12);
    assert_eq!(binomial_upper_tail(0, n, p), 1.0);
}

proptest! {
    #[test]
    fn exact_match_never_exceeds_the_worst_slot(seed in 0u64..10_000, n in 1usize..6, m in 2usize..4) {
        let mut rng = stream(seed, "test/probe");
        let rows = 50;
        let labels: Vec<Vec<usize>> = (0..rows).map(|_| (0..n).map(|_| rng.random_range(0..m)).collect()).collect();
        let preds: Vec<Vec<usize>> = labels
            .iter()
            .map(|l| l.iter().map(|&v| if rng.random::<f64>() < 0.7 { v } else { rng.random_range(0..m) }).collect())
            .collect();
        let r = ProbeReport::from_predictions(&preds, &labels, m, "random").unwrap();
        let worst = r.slot_accuracy.iter().copied().fold(1.0, f64::min);
        prop_assert!(r.exact_match_accuracy <= worst);
        for x in r.slot_accuracy.iter().chain([&r.per_slot_accuracy, &r.exact_match_accuracy, &r.independence_product]) {
            prop_assert!((0.0..=1.0).contains(x));
        }
    }
}

#[test]
fn split_is_a_disjoint_partition_of_episodes() {
    let data = expert_dataset(3, 3, 1000, 1);
    let (fit, held) = split_by_episode(&data, 0.8, 5).unwrap();
    assert_eq!(fit.len() + held.len(), data.len());
    assert_eq!(fit.episodes().len() + held.episodes().len(), data.episodes().len());
    assert_eq!(fit.episodes().len(), 40);
    for t in &held.transitions {
        assert!(!fit.transitions.contains(t));
    }
    assert!(matches!(split_by_episode(&data, 1.0, 5), Err(Error::Config(_))));
}

#[test]
fn probe_training_leaves_the_representation_untouched() {
    let data = expert_dataset(3, 3, 200, 2);
    let asm = Arc::new(AsmModel::new(AsmConfig { d: 8, heads: 2, ..AsmConfig::new(3, 3, 12) }, 1).unwrap());
    let before = asm.store.clone();
    let cfg = ProbeConfig { epochs: 2, ..ProbeConfig::default() };
    let probe = fit_probe(Features::Frozen(asm.clone()), 3, Representation::Random, &data.transitions, &cfg).unwrap();
    assert_eq!(asm.store.to_bytes(), before.to_bytes());

    let policy: &Policy = &probe.policy;
    let mut tape = Tape::new();
    let pb = policy.bind(&mut tape, true);
    let states = spin_core::asm::state_batch(data.transitions[..8].iter().map(|t| t.s.as_slice()), 12).unwrap();
    let actions: Vec<Vec<usize>> = data.transitions[..8].iter().map(|t| t.a.clone()).collect();
    let s = tape.constant(states);
    let lp = policy.log_prob(&mut tape, &pb, s, &actions).unwrap();
    let loss = tape.sum(lp).unwrap();
    let grads = tape.backward(loss).unwrap();
    for &v in pb.features.as_ref().unwrap().vars() {
        assert!(grads.get(v).is_none_or(|g| g.iter().all(|&x| x == 0.0)));
    }
}

#[test]
fn pretrained_probe_is_accurate_on_expert_data() {
    let data = expert_dataset(4, 3, 2500, 4);
    let (fit, held) = split_by_episode(&data, 0.8, 0).unwrap();
    let asm = pretrained(AsmConfig { d: 32, ..AsmConfig::new(4, 3, 12) }, &fit.transitions, 50, 1e-3);
    let probe = fit_probe(
        Features::Frozen(Arc::new(asm)),
        3,
        Representation::Pretrained(50),
        &fit.transitions,
        &ProbeConfig::default(),
    )
    .unwrap();
    let report = eval_probe(&probe, &held.transitions).unwrap();
    assert!(report.per_slot_accuracy > 0.95, "{report:?}");
    assert_eq!(report.representation, "pretrained_epoch_50");
}

#[test]
fn random_features_beat_chance_per_slot() {
    let data = expert_dataset(4, 3, 2500, 4);
    let (fit, held) = split_by_episode(&data, 0.8, 0).unwrap();
    let asm = AsmModel::new(AsmConfig { d: 32, ..AsmConfig::new(4, 3, 12) }, 9).unwrap();
    let probe = fit_probe(Features::Frozen(Arc::new(asm)), 3, Representation::Random, &fit.transitions, &ProbeConfig::default()).unwrap();
    let report = eval_probe(&probe, &held.transitions).unwrap();
    assert!(report.per_slot_accuracy > 1.0 / 3.0, "{report:?}");
}

/// Two slots that always agree; the state only partly reveals their value.
fn coupled_dataset(size: usize, seed: u64) -> Vec<Transition> {
    let mut rng = stream(seed, "test/coupled");
    (0..size)
        .map(|i| {
            let s: Vec<f64> = (0..2).map(|_| standard_normal(&mut rng)).collect();
            let bucket = if s[0] < -0.43 { 0 } else if s[0] < 0.43 { 1 } else { 2 };
            let v = if rng.random::<f64>() < 0.6 { bucket } else { rng.random_range(0..3) };
            Transition {
                s: s.clone(),
                a: vec![v, v],
                r: 0.0,
                s_next: s,
                done: i % 10 == 9,
            }
        })
        .collect()
}

#[test]
fn coupled_slots_are_detected_only_by_the_probe() {
    let fit = coupled_dataset(3000, 1);
    let held = coupled_dataset(1000, 2);
    let asm = pretrained(AsmConfig { d: 16, heads: 2, ..AsmConfig::new(2, 3, 2) }, &fit, 10, 1e-3);
    let probe = fit_probe(Features::Frozen(Arc::new(asm)), 3, Representation::Pretrained(10), &fit, &ProbeConfig::default()).unwrap();
    let report = eval_probe(&probe, &held).unwrap();
    assert!(report.per_slot_accuracy < 1.0);
    assert!(report.exact_match_accuracy > report.independence_product, "{report:?}");
    assert!(report.dependency_p_value() < 0.01, "{report:?}");

    // Per-slot predictions drawn independently of each other.
    let mut rng = stream(3, "test/independent");
    let preds: Vec<Vec<usize>> = held.iter().map(|_| vec![rng.random_range(0..3), rng.random_range(0..3)]).collect();
    let labels: Vec<Vec<usize>> = held.iter().map(|t| t.a.clone()).collect();
    let independent = ProbeReport::from_predictions(&preds, &labels, 3, "independent").unwrap();
    assert!(independent.dependency_p_value() >= 0.01, "{independent:?}");
}
