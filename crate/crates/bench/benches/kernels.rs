use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::Rng;

use concept_core::data::{make_synthetic, SyntheticSpec};
use concept_core::episode::sample_episode;
use concept_core::params::seeded_rng;
use concept_core::trainer::{reinforce_gradient, run_episode, RewardConfig, Rollout};
use concept_core::{
    Array, EmbedderConfig, EpisodeSpec, LabelScheme, Labeling, Model, ModelConfig, Tape,
};

fn random(shape: &[usize], seed: u64) -> Array {
    let mut rng = seeded_rng(seed);
    let n = shape.iter().product();
    Array::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul");
    for n in [32usize, 128] {
        let a = random(&[n, n], 1);
        let b = random(&[n, n], 2);
        group.bench_with_input(BenchmarkId::new("forward_backward", n), &n, |bench, _| {
            bench.iter(|| {
                let mut tape = Tape::new();
                let x = tape.param(&a);
                let y = tape.param(&b);
                let z = tape.matmul(x, y).unwrap();
                let s = tape.sum(z);
                tape.backward(s).unwrap();
                tape.grad(x)
            })
        });
    }
    group.finish();
}

fn conv3x3(c: &mut Criterion) {
    let mut group = c.benchmark_group("conv3x3");
    group.sample_size(20);
    for (batch, c_in, c_out, side) in [(1usize, 1usize, 128usize, 28usize), (8, 16, 32, 14)] {
        let input = random(&[batch, c_in, side, side], 3);
        let kernels = random(&[c_out, c_in, 3, 3], 4);
        let bias = random(&[c_out], 5);
        let id = format!("{batch}x{c_in}x{side}x{side}->{c_out}");
        group.bench_function(BenchmarkId::new("forward_backward", id), |bench| {
            bench.iter(|| {
                let mut tape = Tape::new();
                let x = tape.constant_ref(&input);
                let k = tape.param(&kernels);
                let b = tape.param(&bias);
                let y = tape.conv3x3(x, k, b).unwrap();
                let s = tape.sum(y);
                tape.backward(s).unwrap();
                tape.grad(k)
            })
        });
    }
    group.finish();
}

fn rollout(c: &mut Criterion) {
    let spec = SyntheticSpec {
        n_classes: 20,
        dimension: 16,
        center_scale: 1.0,
        sigma: 0.5,
        samples_per_class: 20,
    };
    let (dataset, _) = make_synthetic(&spec, 1).unwrap();
    let model = Model::build(
        ModelConfig {
            embedder: EmbedderConfig::Mlp {
                input_dim: 16,
                widths: vec![32, 16],
            },
            att_hidden: 32,
        },
        2,
    )
    .unwrap();
    let episode = sample_episode(
        &dataset,
        &EpisodeSpec {
            n_classes: 5,
            length: 10,
            labeling: Labeling::Seed,
            scheme: LabelScheme::OneHot,
            label_len: 10,
            pool: None,
            seed: 3,
        },
    )
    .unwrap();
    let rewards = RewardConfig::default();

    let mut group = c.benchmark_group("episode");
    group.bench_function("greedy_5x10", |bench| {
        let mut rng = seeded_rng(4);
        bench.iter(|| run_episode(&model, &episode, 10, &Rollout::Greedy, &rewards, &mut rng).unwrap().ret)
    });
    group.bench_function("sample_and_gradient_5x10", |bench| {
        let mut rng = seeded_rng(5);
        bench.iter(|| {
            let trace = run_episode(&model, &episode, 10, &Rollout::Sample, &rewards, &mut rng).unwrap();
            reinforce_gradient(&mut [trace], &model.params, 0.0).unwrap()
        })
    });
    group.finish();
}

criterion_group!(benches, matmul, conv3x3, rollout);
criterion_main!(benches);
