//! Acceptance criteria. Each test prints one `PASS`/`FAIL` line to stderr
//! (uncaptured, so it shows in normal `cargo test` output) and then asserts.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::Path;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use rand::{Rng, RngCore};

use concept_core::data::{make_synthetic, SyntheticSpec};
use concept_core::eval::{f1, label_transfer_eval, nway_kshot_eval, tradeoff_experiment, TradeoffSpec};
use concept_core::gradcheck::suite;
use concept_core::label::capacity;
use concept_core::params::seeded_rng;
use concept_core::pipeline::{run_train, CHECKPOINT_DIR, LOG_FILE, MODEL_FILE};
use concept_core::trainer::{reinforce_gradient, run_episode, Rollout};
use concept_core::{
    encode_label, AdamConfig, Array, CurriculumStage, DataSource, Dataset, EmbedderConfig, Episode, EpisodeSpec,
    EvalConfig, LabelPool, LabelScheme, LabelVector, Labeling, Memory, Model, ModelConfig, NwaySpec, RewardConfig,
    RunConfig, Task, TrainConfig,
};

fn report(n: u32, title: &str, passed: bool, detail: String) {
    let line = format!(
        "{} criterion {n:>2} ({title}): {detail}\n",
        if passed { "PASS" } else { "FAIL" }
    );
    let _ = std::io::stderr().write_all(line.as_bytes());
    assert!(passed, "criterion {n} ({title}) failed: {detail}");
}

fn stage(n_classes: usize, length: usize, episodes: usize, labeling: Labeling) -> CurriculumStage {
    CurriculumStage {
        n_classes,
        length,
        episodes,
        labeling,
    }
}

fn train_config(curriculum: Vec<CurriculumStage>, learning_rate: f64, seed: u64) -> TrainConfig {
    TrainConfig {
        curriculum,
        rewards: RewardConfig::default(),
        optimizer: AdamConfig {
            learning_rate,
            ..AdamConfig::default()
        },
        batch_size: 16,
        baseline: true,
        scheme: LabelScheme::OneHot,
        label_len: 10,
        label_pool: None,
        slots: None,
        seed,
        checkpoint_every: None,
    }
}

fn eval_config(seed: u64) -> EvalConfig {
    EvalConfig {
        seed,
        episodes: 1000,
        n_way: 5,
        k_shot: 1,
        mann_length: 50,
        zeroshot_length: 10,
        finetune_episodes: 16000,
        finetune_interval: 4000,
        transfer: None,
    }
}

fn mlp() -> ModelConfig {
    ModelConfig {
        embedder: EmbedderConfig::Mlp {
            input_dim: 16,
            widths: vec![32, 16],
        },
        att_hidden: 32,
    }
}

fn synthetic_spec(center_scale: f64) -> SyntheticSpec {
    SyntheticSpec {
        n_classes: 200,
        dimension: 16,
        center_scale,
        sigma: 0.5,
        samples_per_class: 30,
    }
}

fn synthetic_run_config(output_dir: &Path, curriculum: Vec<CurriculumStage>) -> RunConfig {
    RunConfig {
        task: Task::Synthetic,
        data: DataSource::Synthetic {
            spec: synthetic_spec(1.0),
            seed: 1,
        },
        train_classes: Some(150),
        model: mlp(),
        model_seed: 1,
        train: train_config(curriculum, 3e-3, 3),
        eval: eval_config(11),
        output_dir: output_dir.to_path_buf(),
    }
}

// ---- shared trained models ----------------------------------------------

struct LabelRun {
    model: Model,
    train_time: Duration,
}

/// Label attention trained on ten one-hot labels with featureless samples.
fn label_run() -> &'static LabelRun {
    static RUN: OnceLock<LabelRun> = OnceLock::new();
    RUN.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let config = RunConfig {
            task: Task::LabelTransfer,
            data: DataSource::Blank {
                n_classes: 20,
                samples_per_class: 20,
                dimension: 1,
            },
            train_classes: Some(10),
            model: ModelConfig {
                embedder: EmbedderConfig::Identity { input_shape: vec![1] },
                att_hidden: 32,
            },
            model_seed: 1,
            train: train_config(
                vec![
                    stage(2, 3, 6000, Labeling::Full),
                    stage(3, 6, 6000, Labeling::Full),
                    stage(5, 10, 12000, Labeling::Full),
                ],
                3e-3,
                3,
            ),
            eval: EvalConfig {
                transfer: Some(concept_core::config::TransferConfig {
                    scheme: LabelScheme::Binary,
                    label_len: 15,
                    pool: Some(transfer_pool()),
                }),
                ..eval_config(11)
            },
            output_dir: dir.path().to_path_buf(),
        };
        let start = Instant::now();
        let outcome = run_train(&config).unwrap();
        let train_time = start.elapsed();
        LabelRun {
            model: Model::load(&outcome.model_path).unwrap(),
            train_time,
        }
    })
}

/// Every non-zero binary label of length 15.
fn transfer_pool() -> LabelPool {
    LabelPool {
        start: 1,
        end: capacity(LabelScheme::Binary, 15),
    }
}

fn blank_dataset(n_classes: usize, dim: usize) -> Dataset {
    let classes = vec![vec![Array::zeros(&[dim]); 20]; n_classes];
    Dataset::new(vec![dim], classes, (0..n_classes).map(|c| format!("c{c}")).collect()).unwrap()
}

struct SynthRun {
    model: Model,
    train: Dataset,
    eval: Dataset,
    config: TrainConfig,
    separability: f64,
    train_time: Duration,
}

fn synth_run() -> &'static SynthRun {
    static RUN: OnceLock<SynthRun> = OnceLock::new();
    RUN.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let config = synthetic_run_config(
            dir.path(),
            vec![
                stage(2, 3, 8000, Labeling::Seed),
                stage(3, 6, 8000, Labeling::Seed),
                stage(5, 10, 16000, Labeling::Seed),
            ],
        );
        let start = Instant::now();
        let outcome = run_train(&config).unwrap();
        let train_time = start.elapsed();
        let (all, meta) = make_synthetic(&synthetic_spec(1.0), 1).unwrap();
        let (train, eval) = all.split_classes(150).unwrap();
        SynthRun {
            model: Model::load(&outcome.model_path).unwrap(),
            train,
            eval,
            config: config.train,
            separability: meta.separability,
            train_time,
        }
    })
}

fn nway(n_way: usize, k_shot: usize, seed: u64) -> NwaySpec {
    NwaySpec {
        n_way,
        k_shot,
        scheme: LabelScheme::OneHot,
        label_len: 10,
        pool: None,
        seed,
    }
}

// ---- brute-force oracles --------------------------------------------------

/// Return and perfect-cluster flag of an action path, scored from scratch.
fn brute_score(classes: &[usize], actions: &[usize], slots: usize) -> (f64, bool) {
    let mut held: Vec<Vec<usize>> = vec![Vec::new(); slots];
    let mut g = 0.0;
    for (&c, &a) in classes.iter().zip(actions) {
        if held[a].is_empty() {
            g -= 1.0;
        } else if held[a].iter().any(|&x| x != c) {
            g -= 3.0;
        }
        held[a].push(c);
    }
    let pure = held.iter().all(|h| h.iter().all(|&x| x == h[0]));
    let appearing: BTreeSet<usize> = classes.iter().copied().collect();
    let one_home = appearing
        .iter()
        .all(|c| held.iter().filter(|h| h.contains(c)).count() == 1);
    let perfect = pure && one_home;
    if perfect {
        g += 100.0;
    }
    (g, perfect)
}

fn episode_of(samples: Vec<Array>, labels: Vec<LabelVector>, classes: &[usize]) -> Episode {
    let label_len = labels[0].len();
    let steps = samples
        .into_iter()
        .zip(labels)
        .zip(classes)
        .map(|((sample, label), &class)| concept_core::episode::Step {
            sample,
            label,
            class,
            label_id: class,
        })
        .collect();
    Episode {
        steps,
        spec: EpisodeSpec {
            n_classes: classes.iter().collect::<BTreeSet<_>>().len(),
            length: classes.len(),
            labeling: Labeling::None,
            scheme: LabelScheme::Binary,
            label_len,
            pool: None,
            seed: 0,
        },
    }
}

fn identity_model(dim: usize) -> Model {
    Model::build(
        ModelConfig {
            embedder: EmbedderConfig::Identity { input_shape: vec![dim] },
            att_hidden: 4,
        },
        0,
    )
    .unwrap()
}

// ---- criteria -----------------------------------------------------------

#[test]
fn criterion_01_gradient_suite() {
    let start = Instant::now();
    let results = suite(100, 1e-4).unwrap();
    let elapsed = start.elapsed();
    let failed: Vec<String> = results
        .iter()
        .filter(|r| !r.passed())
        .map(|r| format!("{} ({:.2e} at seed {})", r.op, r.max_rel_err, r.worst_seed))
        .collect();
    let worst = results.iter().map(|r| r.max_rel_err).fold(0.0, f64::max);
    report(
        1,
        "gradient suite",
        failed.is_empty() && elapsed < Duration::from_secs(120),
        format!(
            "{} ops x 100 seeds, worst rel. err {worst:.2e} < 1e-4, {:.1}s < 120s{}",
            results.len(),
            elapsed.as_secs_f64(),
            if failed.is_empty() { String::new() } else { format!("; failing: {}", failed.join(", ")) }
        ),
    );
}

#[test]
fn criterion_02_memory_oracle() {
    let mut rng = seeded_rng(2);
    let mut worst = 0.0f64;
    let mut counts_exact = true;
    for _ in 0..1000 {
        let slots = rng.random_range(1..=6);
        let dim = rng.random_range(1..=4);
        let len = rng.random_range(1..=4);
        let length = rng.random_range(1..=20);
        let mut memory = Memory::new(slots, dim, len).unwrap();
        let mut written: Vec<Vec<(Vec<f64>, Vec<f64>)>> = vec![Vec::new(); slots];
        let (mut samples, mut labels, mut actions) = (Vec::new(), Vec::new(), Vec::new());
        for _ in 0..length {
            let slot = rng.random_range(0..slots);
            let h: Vec<f64> = (0..dim).map(|_| rng.random_range(-5.0..5.0)).collect();
            let id = rng.random_range(1..capacity(LabelScheme::Binary, len));
            let y = encode_label(id, LabelScheme::Binary, len).unwrap();
            let h_arr = Array::vector(h.clone()).unwrap();
            memory.write(slot, &h_arr, &y).unwrap();
            written[slot].push((h, y.values().data().to_vec()));
            samples.push(h_arr);
            labels.push(y);
            actions.push(slot);
        }

        // The same writes made by forced-action rollouts.
        let classes: Vec<usize> = actions.clone();
        let model = identity_model(dim);
        let trace = run_episode(
            &model,
            &episode_of(samples, labels, &classes),
            slots,
            &Rollout::Forced(actions),
            &RewardConfig::default(),
            &mut seeded_rng(0),
        )
        .unwrap();

        for m in [&memory, &trace.memory] {
            for (slot, rows) in m.slots().iter().zip(&written) {
                counts_exact &= slot.count == rows.len();
                let n = rows.len().max(1) as f64;
                for k in 0..dim {
                    let mean = rows.iter().map(|r| r.0[k]).sum::<f64>() / n;
                    worst = worst.max((slot.m_h.data()[k] - mean).abs());
                }
                for k in 0..len {
                    let mean = rows.iter().map(|r| r.1[k]).sum::<f64>() / n;
                    worst = worst.max((slot.m_y.data()[k] - mean).abs());
                }
            }
        }
    }
    report(
        2,
        "memory oracle",
        worst <= 1e-12 && counts_exact,
        format!("1000 sequences, max |mean error| {worst:.2e} <= 1e-12, counters exact: {counts_exact}"),
    );
}

#[test]
fn criterion_03_reward_oracle() {
    let start = Instant::now();
    let model = identity_model(1);
    let rewards = RewardConfig::default();
    let (mut paths, mut mismatches, mut perfect_paths) = (0usize, 0usize, 0usize);
    for t in 1..=4usize {
        for n in 1..=2usize {
            for slots in 1..=4usize {
                for seq in 0..n.pow(t as u32) {
                    let classes: Vec<usize> = (0..t).map(|i| (seq / n.pow(i as u32)) % n).collect();
                    let samples = classes.iter().map(|&c| Array::vector(vec![c as f64]).unwrap()).collect();
                    let episode = episode_of(samples, vec![LabelVector::zero(2); t], &classes);
                    for code in 0..slots.pow(t as u32) {
                        let actions: Vec<usize> = (0..t).map(|i| (code / slots.pow(i as u32)) % slots).collect();
                        let (g, perfect) = brute_score(&classes, &actions, slots);
                        let trace = run_episode(
                            &model,
                            &episode,
                            slots,
                            &Rollout::Forced(actions),
                            &rewards,
                            &mut seeded_rng(0),
                        )
                        .unwrap();
                        let summed = trace.steps.iter().map(|s| s.reward).sum::<f64>() + trace.terminal;
                        let bonus_ok = (trace.terminal == rewards.terminal_bonus) == perfect
                            && (trace.terminal == 0.0) == !perfect;
                        if trace.ret != g || summed != trace.ret || trace.perfect != perfect || !bonus_ok {
                            mismatches += 1;
                        }
                        paths += 1;
                        perfect_paths += usize::from(perfect);
                    }
                }
            }
        }
    }
    let elapsed = start.elapsed();
    report(
        3,
        "reward/return oracle",
        mismatches == 0 && elapsed < Duration::from_secs(60),
        format!(
            "{paths} paths ({perfect_paths} perfect), {mismatches} mismatches, {:.1}s < 60s",
            elapsed.as_secs_f64()
        ),
    );
}

/// Exact expected return of the two-class toy problem at temperature `w`,
/// by enumerating every class sequence and action path.
fn toy_objective(w: f64, xs: [f64; 2], length: usize, slots: usize) -> f64 {
    let seqs = 2usize.pow(length as u32);
    let mut j = 0.0;
    for seq in 0..seqs {
        let classes: Vec<usize> = (0..length).map(|i| (seq >> i) & 1).collect();
        for code in 0..slots.pow(length as u32) {
            let actions: Vec<usize> = (0..length).map(|i| (code / slots.pow(i as u32)) % slots).collect();
            let mut means = vec![0.0; slots];
            let mut counts = vec![0usize; slots];
            let mut prob = 1.0;
            for (&c, &a) in classes.iter().zip(&actions) {
                let h = w * xs[c];
                let scores: Vec<f64> = means.iter().map(|m| -(h - m).abs()).collect();
                let top = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = scores.iter().map(|s| (s - top).exp()).sum();
                prob *= (scores[a] - top).exp() / z;
                means[a] = (means[a] * counts[a] as f64 + h) / (counts[a] + 1) as f64;
                counts[a] += 1;
            }
            j += prob * brute_score(&classes, &actions, slots).0 / seqs as f64;
        }
    }
    j
}

#[test]
fn criterion_04_reinforce_gradient() {
    const W: &str = "embedder.fc1.w";
    let (w, xs, length, slots) = (1.5, [1.0, -0.5], 3, 2);
    let mut model = Model::build(
        ModelConfig {
            embedder: EmbedderConfig::Mlp {
                input_dim: 1,
                widths: vec![1],
            },
            att_hidden: 4,
        },
        0,
    )
    .unwrap();
    *model.params.get_mut(W).unwrap() = Array::new(vec![1, 1], vec![w]).unwrap();
    *model.params.get_mut("embedder.fc1.b").unwrap() = Array::zeros(&[1]);
    model.params.set_trainable("embedder.fc1.b", false).unwrap();
    let classes = xs
        .iter()
        .map(|&x| vec![Array::vector(vec![x]).unwrap(); 5])
        .collect();
    let dataset = Dataset::new(vec![1], classes, vec!["a".into(), "b".into()]).unwrap();

    let step = 1e-5;
    let exact = (toy_objective(w + step, xs, length, slots) - toy_objective(w - step, xs, length, slots)) / (2.0 * step);
    let baseline = toy_objective(w, xs, length, slots);

    let (episodes, chunk) = (100_000usize, 1000usize);
    let mut rng = seeded_rng(4);
    let mut estimate = 0.0;
    let mut att_y_grad = 0.0f64;
    for _ in 0..episodes / chunk {
        let mut traces = Vec::with_capacity(chunk);
        for _ in 0..chunk {
            let spec = EpisodeSpec {
                n_classes: 2,
                length,
                labeling: Labeling::None,
                scheme: LabelScheme::OneHot,
                label_len: 2,
                pool: None,
                seed: rng.next_u64(),
            };
            let episode = concept_core::episode::sample_episode(&dataset, &spec).unwrap();
            let mut action_rng = seeded_rng(rng.next_u64());
            traces.push(
                run_episode(&model, &episode, slots, &Rollout::Sample, &RewardConfig::default(), &mut action_rng).unwrap(),
            );
        }
        let g = reinforce_gradient(&mut traces, &model.params, baseline).unwrap();
        estimate += g.get(W).unwrap().data()[0] * chunk as f64 / episodes as f64;
        for (name, a) in g.iter() {
            if name.starts_with("att_y.") {
                att_y_grad = att_y_grad.max(a.max_abs());
            }
        }
    }
    let rel = (estimate - exact).abs() / exact.abs();
    report(
        4,
        "REINFORCE correctness",
        rel < 0.05 && att_y_grad == 0.0,
        format!(
            "exact dJ/dw {exact:.5}, Monte Carlo over 1e5 episodes {estimate:.5}, rel. err {rel:.4} < 0.05 (J = {baseline:.4})"
        ),
    );
}

#[test]
fn criterion_05_f1_reproduction() {
    let cases = [((68.4, 62.5), 65.3), ((36.4, 82.8), 50.6), ((4.9, 98.4), 9.3)];
    let mut ok = true;
    let mut parts = Vec::new();
    for ((z, o), want) in cases {
        let got = 100.0 * f1(z / 100.0, o / 100.0);
        ok &= (got - want).abs() <= 0.05;
        parts.push(format!("({z}, {o}) -> {got:.3} vs {want}"));
    }
    report(5, "F1 reproduction", ok, parts.join("; "));
}

#[test]
fn criterion_06_label_transfer() {
    let run = label_run();
    let start = Instant::now();
    let data = blank_dataset(10, 1);
    let spec = NwaySpec {
        n_way: 5,
        k_shot: 1,
        scheme: LabelScheme::Binary,
        label_len: 15,
        pool: Some(transfer_pool()),
        seed: 11,
    };
    let transfer = label_transfer_eval(&run.model, &data, &spec, 1000).unwrap();
    let in_distribution = label_transfer_eval(&run.model, &data, &nway(5, 1, 11), 1000).unwrap();
    let total = run.train_time + start.elapsed();
    report(
        6,
        "label transfer",
        transfer >= 0.99 && total < Duration::from_secs(600),
        format!(
            "binary length-15 accuracy {transfer:.3} (need >= 0.99), one-hot length-10 accuracy {in_distribution:.3}, {:.0}s < 600s",
            total.as_secs_f64()
        ),
    );
}

#[test]
fn criterion_07_synthetic_end_to_end() {
    let run = synth_run();
    let r = nway_kshot_eval(&run.model, &run.eval, &nway(5, 1, 11), None, 2000).unwrap();
    report(
        7,
        "synthetic end-to-end",
        r.accuracy >= 0.95 && run.separability >= 4.0 && run.train_time < Duration::from_secs(1800),
        format!(
            "separability {:.2} >= 4, 5-way 1-shot {:.4} ± {:.4} over 2000 episodes (need >= 0.95), training {:.0}s < 1800s",
            run.separability,
            r.accuracy,
            r.ci95,
            run.train_time.as_secs_f64()
        ),
    );
}

#[test]
fn criterion_08_tradeoff_trend() {
    let run = synth_run();
    let mut model = run.model.clone();
    let spec = TradeoffSpec {
        n_classes: 5,
        length: 10,
        finetune_episodes: 16000,
        interval: 4000,
        eval_episodes: 500,
        seed: 9,
    };
    let series = tradeoff_experiment(&mut model, &run.train, &run.eval, &run.config, &spec).unwrap();
    let (first, last) = (&series[0], &series[series.len() - 1]);
    let gain = last.zero_shot - first.zero_shot;
    let points: Vec<String> = series
        .iter()
        .map(|p| format!("{}: zero {:.3} / one {:.3}", p.episodes, p.zero_shot, p.one_shot))
        .collect();
    report(
        8,
        "trade-off trend",
        gain >= 0.20 && last.one_shot < first.one_shot,
        format!(
            "zero-shot +{gain:.3} (need >= 0.20), one-shot {:.3} -> {:.3} (must decrease); {}",
            first.one_shot,
            last.one_shot,
            points.join(", ")
        ),
    );
}

#[test]
fn criterion_09_protocol_sanity() {
    // Random parameters on classes that share one distribution.
    let (noise, _) = make_synthetic(
        &SyntheticSpec {
            n_classes: 50,
            ..synthetic_spec(0.0)
        },
        2,
    )
    .unwrap();
    let random = Model::build(mlp(), 5).unwrap();
    let episodes = 2000;
    let chance = nway_kshot_eval(&random, &noise, &nway(5, 1, 13), None, episodes).unwrap();
    let sigma = (0.2f64 * 0.8 / episodes as f64).sqrt();
    let chance_ok = (chance.accuracy - 0.2).abs() <= 3.0 * sigma;

    // Identity embedder on orthogonal class vectors, with trained label attention.
    let dim = 10;
    let classes = (0..dim)
        .map(|c| {
            let mut v = vec![0.0; dim];
            v[c] = 1.0;
            vec![Array::vector(v).unwrap(); 6]
        })
        .collect();
    let orthogonal = Dataset::new(vec![dim], classes, (0..dim).map(|c| format!("e{c}")).collect()).unwrap();
    let oracle = Model {
        config: ModelConfig {
            embedder: EmbedderConfig::Identity { input_shape: vec![dim] },
            att_hidden: 32,
        },
        params: label_run().model.params.clone(),
    };
    let mut oracle_scores = Vec::new();
    for (n, k) in [(5, 1), (5, 3), (3, 5)] {
        oracle_scores.push(nway_kshot_eval(&oracle, &orthogonal, &nway(n, k, 17), None, 500).unwrap().accuracy);
    }
    let oracle_ok = oracle_scores.iter().all(|&a| a == 1.0);
    report(
        9,
        "protocol sanity",
        chance_ok && oracle_ok,
        format!(
            "random 5-way 1-shot {:.4} within 0.2 ± {:.4}; oracle (5,1)/(5,3)/(3,5) {:?} (need exactly 1.0)",
            chance.accuracy,
            3.0 * sigma,
            oracle_scores
        ),
    );
}

fn read_tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files = vec![
        (MODEL_FILE.to_string(), std::fs::read(dir.join(MODEL_FILE)).unwrap()),
        (LOG_FILE.to_string(), std::fs::read(dir.join(LOG_FILE)).unwrap()),
    ];
    let mut checkpoints: Vec<_> = std::fs::read_dir(dir.join(CHECKPOINT_DIR))
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    checkpoints.sort();
    for p in checkpoints {
        files.push((p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()));
    }
    files
}

#[test]
fn criterion_10_determinism() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let curriculum = vec![stage(2, 3, 320, Labeling::Seed), stage(3, 6, 320, Labeling::Seed)];
    let mut config = synthetic_run_config(a.path(), curriculum);
    config.train.checkpoint_every = Some(10);
    run_train(&config).unwrap();
    config.output_dir = b.path().to_path_buf();
    run_train(&config).unwrap();
    let (first, second) = (read_tree(a.path()), read_tree(b.path()));
    let identical = first == second;
    report(
        10,
        "determinism",
        identical && first.len() > 2,
        format!(
            "{} files compared byte for byte (model, log, {} checkpoints): identical {identical}",
            first.len(),
            first.len() - 2
        ),
    );
}
