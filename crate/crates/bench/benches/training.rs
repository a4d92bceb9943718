use std::collections::BTreeMap;
use std::hint::black_box;
use std::sync::Arc;

use criterion::{criterion_group, criterion_main, Criterion};
use spin_core::asm::{AsmConfig, AsmModel};
use spin_core::envs::{generate_dataset, EnvParams, EnvSpec, Tier};
use spin_core::numerics::rng::stream;
use spin_core::policy::{evaluate_policy, make_batch, AlgoConfig, Critic, HeadInit, Policy};
use spin_core::policy::{actor_update, ActorOptimizer};

fn bench_policy_steps(c: &mut Criterion) {
    let spec = EnvSpec::new(EnvParams::default()).unwrap();
    let mix = BTreeMap::from([(Tier::Expert, 0.5), (Tier::Medium, 0.5)]);
    let data = generate_dataset(&spec, &mix, 2000, 0).unwrap();
    let idx: Vec<usize> = (0..128).map(|i| (i * 13) % data.len()).collect();
    let batch = make_batch(&data, &idx).unwrap();
    let asm = Arc::new(AsmModel::new(AsmConfig { d: 32, ..AsmConfig::new(8, 5, 12) }, 0).unwrap());
    let algo = AlgoConfig { batch_size: 128, critic_hidden: 128, ..AlgoConfig::default() };

    let policies = [
        ("spin", Policy::spin(asm.clone(), HeadInit::Fresh, 0)),
        ("factored", Policy::factored(8, 5, 12, 64, 0)),
        ("autoregressive", Policy::autoregressive(8, 5, 12, 64, (0..8).collect(), 0).unwrap()),
    ];
    for (name, policy) in policies {
        let mut policy = policy;
        let mut opt = ActorOptimizer::new(&policy, 3e-4);
        let mut critic = Critic::new(algo.clone(), 8, 5, 12, 0).unwrap();
        let mut rng = stream(0, "bench");
        c.bench_function(&format!("iql step {name} B128"), |bench| {
            bench.iter(|| {
                let cs = critic.update(&batch, &policy, &mut rng).unwrap();
                black_box(actor_update(&mut policy, &mut opt, &batch.states, &batch.actions, &cs.weights).unwrap());
            })
        });
        c.bench_function(&format!("eval 20 episodes {name}"), |bench| {
            bench.iter(|| black_box(evaluate_policy(&policy, &spec, 20, 0, None).unwrap()))
        });
    }
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = bench_policy_steps
}
criterion_main!(benches);
