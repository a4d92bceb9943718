use std::collections::BTreeMap;

use proptest::prelude::*;
use spin_core::envs::*;
use spin_core::numerics::rng::stream;
use spin_core::Error;

fn params(n: usize, m: usize, kappa: f64) -> EnvParams {
    EnvParams {
        n,
        m,
        state_dim: 12,
        horizon: 20,
        kappa,
        noise_std: 0.05,
        seed: 11,
    }
}

fn mix(entries: &[(Tier, f64)]) -> BTreeMap<Tier, f64> {
    entries.iter().copied().collect()
}

#[test]
fn target_pattern_is_deterministic_and_covers_every_bin() {
    let spec = EnvSpec::new(params(4, 5, 0.9)).unwrap();
    let mut rng = stream(0, "states");
    let mut counts = vec![[0usize; 5]; 4];
    for _ in 0..10_000 {
        let s = spec.initial_state(&mut rng);
        let t = spec.target_pattern(&s);
        assert_eq!(t, spec.target_pattern(&s));
        for (i, &v) in t.iter().enumerate() {
            counts[i][v] += 1;
        }
    }
    for slot in &counts {
        assert!(slot.iter().all(|&c| c > 0), "{counts:?}");
    }
}

#[test]
fn noiseless_dynamics_are_deterministic() {
    let mut p = params(4, 5, 0.9);
    p.noise_std = 0.0;
    let spec = EnvSpec::new(p).unwrap();
    let s = spec.initial_state(&mut stream(1, "s"));
    let a = vec![1, 2, 3, 4];
    let x = spec.transition(&s, &a, &mut stream(2, "x")).unwrap();
    let y = spec.transition(&s, &a, &mut stream(3, "y")).unwrap();
    assert_eq!(x, y);
}

#[test]
fn noisy_states_stay_within_five_sigma_of_tanh_range() {
    let spec = EnvSpec::new(params(8, 5, 0.9)).unwrap();
    let mut rng = stream(4, "roll");
    let bound = 1.0 + 5.0 * spec.params.noise_std;
    let mut steps = 0;
    while steps < 10_000 {
        let mut ep = Episode::reset(&spec, &mut rng);
        while !ep.is_done() {
            let a = behavior_action(&spec, ep.state(), Tier::Random, &mut rng);
            let out = ep.step(&a, &mut rng).unwrap();
            assert!(out.s_next.iter().all(|v| v.abs() < bound));
            steps += 1;
        }
    }
}

#[test]
fn zero_action_response_decouples_dynamics_from_actions() {
    let p = EnvParams {
        noise_std: 0.0,
        ..params(3, 4, 0.5)
    };
    let base = EnvSpec::new(p.clone()).unwrap();
    let json = serde_json::to_value(&base).unwrap();
    let get = |k: &str| -> Vec<f64> { serde_json::from_value(json[k].clone()).unwrap() };
    let spec = EnvSpec::from_parts(p, get("target_map"), get("dyn_map"), vec![0.0; 12], get("dyn_bias")).unwrap();
    let s = spec.initial_state(&mut stream(5, "s"));
    let x = spec.transition(&s, &[0, 0, 0], &mut stream(6, "n")).unwrap();
    let y = spec.transition(&s, &[3, 1, 2], &mut stream(6, "n")).unwrap();
    assert_eq!(x, y);
}

#[test]
fn expert_behavior_always_earns_full_reward() {
    let spec = EnvSpec::new(params(8, 5, 0.9)).unwrap();
    let mut rng = stream(7, "b");
    for _ in 0..500 {
        let s = spec.initial_state(&mut rng);
        let a = behavior_action(&spec, &s, Tier::Expert, &mut rng);
        assert_eq!(spec.reward(&s, &a).unwrap(), 1.0);
    }
}

#[test]
fn random_behavior_is_uniform_over_joint_actions() {
    let spec = EnvSpec::new(params(2, 3, 0.9)).unwrap();
    let mut rng = stream(8, "uniform");
    let s = spec.initial_state(&mut rng);
    let total = 90_000usize;
    let mut counts = [0usize; 9];
    for _ in 0..total {
        let a = behavior_action(&spec, &s, Tier::Random, &mut rng);
        counts[a[0] * 3 + a[1]] += 1;
    }
    let p = 1.0 / 9.0;
    let sigma = (total as f64 * p * (1.0 - p)).sqrt();
    let mut chi2 = 0.0;
    for &c in &counts {
        let e = total as f64 * p;
        assert!((c as f64 - e).abs() < 3.0 * sigma, "{counts:?}");
        chi2 += (c as f64 - e).powi(2) / e;
    }
    // 8 degrees of freedom, 0.999 quantile
    assert!(chi2 < 26.12, "chi2 = {chi2}");
}

#[test]
fn medium_behavior_match_rate_follows_corruption_law() {
    let m = 5;
    let spec = EnvSpec::new(params(8, m, 0.9)).unwrap();
    let mut rng = stream(9, "medium");
    let draws = 10_000;
    let mut hits = 0usize;
    for _ in 0..draws {
        let s = spec.initial_state(&mut rng);
        let t = spec.target_pattern(&s);
        let a = behavior_action(&spec, &s, Tier::Medium, &mut rng);
        hits += usize::from(a[0] == t[0]);
    }
    let p = 1.0 - MEDIUM_CORRUPTION + MEDIUM_CORRUPTION / m as f64;
    let sigma = (p * (1.0 - p) / draws as f64).sqrt();
    let rate = hits as f64 / draws as f64;
    assert!((rate - p).abs() < 3.0 * sigma, "rate {rate} vs {p}");
}

#[test]
fn expert_target_maximizes_reward_by_enumeration() {
    for (n, m) in [(2, 2), (2, 4), (3, 3), (3, 4)] {
        let spec = EnvSpec::new(params(n, m, 0.5)).unwrap();
        let mut rng = stream(10, "enum");
        for _ in 0..1000 {
            let s = spec.initial_state(&mut rng);
            let best = spec.reward(&s, &spec.target_pattern(&s)).unwrap();
            for code in 0..m.pow(n as u32) {
                let a: Vec<usize> = (0..n).map(|i| code / m.pow(i as u32) % m).collect();
                assert!(spec.reward(&s, &a).unwrap() <= best);
            }
        }
    }
}

#[test]
fn pure_expert_single_episode() {
    let spec = EnvSpec::new(params(8, 5, 0.9)).unwrap();
    let ds = generate_dataset(&spec, &mix(&[(Tier::Expert, 1.0)]), 20, 1).unwrap();
    assert_eq!(ds.len(), 20);
    assert_eq!(ds.mean_reward(), 1.0);
    assert_eq!(ds.episodes().len(), 1);
    assert!(ds.transitions.last().unwrap().done);
}

#[test]
fn equal_thirds_mix_counts_by_manifest() {
    let spec = EnvSpec::new(params(4, 5, 0.9)).unwrap();
    let third = 1.0 / 3.0;
    let m = mix(&[(Tier::Random, third), (Tier::Medium, third), (Tier::Expert, third)]);
    let ds = generate_dataset(&spec, &m, 9 * 20, 2).unwrap();
    for t in Tier::ALL {
        assert_eq!(ds.manifest.tier_counts[&t], 60);
        assert_eq!(ds.manifest.episode_tiers.iter().filter(|&&x| x == t).count(), 3);
    }
}

#[test]
fn bad_mixes_are_config_errors() {
    let spec = EnvSpec::new(params(4, 5, 0.9)).unwrap();
    let m = mix(&[(Tier::Medium, 0.6), (Tier::Expert, 0.5)]);
    assert!(matches!(generate_dataset(&spec, &m, 40, 0), Err(Error::Config(_))));
    assert!(matches!(parse_tier_mix("medium=0.6,expert=0.5"), Err(Error::Config(_))));
    assert!(matches!(parse_tier_mix("oracle=1"), Err(Error::Config(_))));
    assert_eq!(parse_tier_mix("expert=1").unwrap(), mix(&[(Tier::Expert, 1.0)]));
}

#[test]
fn partial_final_episode_keeps_exact_size() {
    let spec = EnvSpec::new(params(4, 5, 0.9)).unwrap();
    let ds = generate_dataset(&spec, &mix(&[(Tier::Medium, 1.0)]), 45, 3).unwrap();
    assert_eq!(ds.len(), 45);
    let eps = ds.episodes();
    assert_eq!(eps.len(), 3);
    assert_eq!(eps[2].len(), 5);
    assert_eq!(ds.successor(44), None);
    assert_eq!(ds.successor(0), Some(1));
    assert_eq!(ds.successor(19), None);
}

#[test]
fn regeneration_is_byte_identical_and_round_trips() {
    let spec = EnvSpec::new(params(8, 5, 0.9)).unwrap();
    let m = mix(&[(Tier::Medium, 0.5), (Tier::Expert, 0.5)]);
    let a = generate_dataset(&spec, &m, 200, 5).unwrap();
    let b = generate_dataset(&spec, &m, 200, 5).unwrap();
    assert_eq!(a.to_jsonl(), b.to_jsonl());

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.jsonl");
    a.save(&path).unwrap();
    let back = OfflineDataset::load(&path, Some(&spec)).unwrap();
    assert_eq!(back, a);
    assert_eq!(std::fs::read_to_string(&path).unwrap().lines().count(), 201);
}

#[test]
fn corrupted_files_are_rejected() {
    let spec = EnvSpec::new(params(4, 5, 0.9)).unwrap();
    let ds = generate_dataset(&spec, &mix(&[(Tier::Random, 1.0)]), 40, 6).unwrap();
    let text = ds.to_jsonl();

    let truncated = &text[..text.len() - 30];
    assert!(matches!(OfflineDataset::from_jsonl(truncated, None), Err(Error::Parse { .. })));

    let dropped: String = text.lines().take(30).map(|l| format!("{l}\n")).collect();
    assert!(matches!(OfflineDataset::from_jsonl(&dropped, None), Err(Error::Corruption(_))));

    let tampered = text.replacen("\"done\":false", "\"done\":true", 1);
    assert!(matches!(OfflineDataset::from_jsonl(&tampered, None), Err(Error::Corruption(_))));

    let garbage = text.replacen("\"r\":", "\"reward\":", 1);
    match OfflineDataset::from_jsonl(&garbage, None) {
        Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
        other => panic!("expected parse error, got {other:?}"),
    }

    let other = EnvSpec::new(EnvParams { seed: 99, ..params(4, 5, 0.9) }).unwrap();
    assert!(matches!(OfflineDataset::from_jsonl(&text, Some(&other)), Err(Error::Incompatible(_))));
}

proptest! {
    #[test]
    fn reward_is_bounded_and_full_only_on_target(
        seed in 0u64..50,
        kappa in 0.01f64..=1.0,
        a in prop::collection::vec(0usize..5, 4),
    ) {
        let spec = EnvSpec::new(EnvParams { seed, ..params(4, 5, kappa) }).unwrap();
        let s = spec.initial_state(&mut stream(seed, "p"));
        let r = spec.reward(&s, &a).unwrap();
        prop_assert!((0.0..=1.0).contains(&r));
        prop_assert_eq!(r == 1.0, a == spec.target_pattern(&s));
    }
}
