use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use crpo_core::env::{CharacterUniverse, UniverseParams};
use crpo_core::objective::{objective_gradient, ObjectiveOptions};
use crpo_core::policy::{PolicyParams, PriorConfig};
use crpo_core::sampler::batch_groups;
use crpo_core::Execution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const MODES: [(&str, Execution); 2] = [
    ("sequential", Execution::Sequential),
    ("parallel", Execution::Parallel),
];

fn setup() -> (CharacterUniverse, PolicyParams, Vec<crpo_core::env::Prompt>) {
    let u = CharacterUniverse::build(&UniverseParams::default()).unwrap();
    let params = PolicyParams::pretrained(&u, &PriorConfig::default(), 1);
    let train = u.training_prompts();
    let prompts = (0..512).map(|i| train[i % train.len()]).collect();
    (u, params, prompts)
}

fn sampling(c: &mut Criterion) {
    let (_, params, prompts) = setup();
    let mut group = c.benchmark_group("batch_groups");
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| batch_groups(&params, black_box(&prompts), 7, 1, 1.0, 3, exec).unwrap())
        });
    }
    group.finish();
}

fn gradient(c: &mut Criterion) {
    let (u, params, prompts) = setup();
    let groups = batch_groups(&params, &prompts, 7, 1, 1.0, 3, Execution::Sequential).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let adv: Vec<Vec<f64>> = groups
        .iter()
        .map(|g| (0..g.len()).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect();
    let betas = vec![0.05; u.num_characters()];
    let opts = ObjectiveOptions::default();
    let mut group = c.benchmark_group("objective_gradient");
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| {
                objective_gradient(
                    &groups,
                    black_box(&adv),
                    &params,
                    &params,
                    &params,
                    &betas,
                    &opts,
                    exec,
                )
                .unwrap()
            })
        });
    }
    group.finish();
}

criterion_group!(benches, sampling, gradient);
criterion_main!(benches);
