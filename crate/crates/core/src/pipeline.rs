//! End-to-end runs driven by a [`RunConfig`]: data loading, training with
//! checkpoints, evaluation reports, inspection and synthetic generation.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::array::Array;
use crate::config::{DataSource, RunConfig};
use crate::data::{augment_rotations, load_omniglot, make_synthetic, read_csv_dataset, write_csv_dataset, SyntheticMeta, SyntheticSpec};
use crate::episode::{sample_episode, Dataset, EpisodeSpec, LabelPool, Labeling, NwaySpec};
use crate::error::{Error, Result};
use crate::eval::{
    label_transfer_eval, mann_eval, nway_kshot_eval, tradeoff_experiment, zeroshot_eval, MannSpec, TradeoffSpec,
    ZeroShotSpec,
};
use crate::model::Model;
use crate::params::seeded_rng;
use crate::trainer::{default_slots, run_episode, train, RewardConfig, Rollout, TrainLog};

pub const CONFIG_FILE: &str = "config.json";
pub const MODEL_FILE: &str = "model.cpt";
pub const LOG_FILE: &str = "train_log.csv";
pub const CHECKPOINT_DIR: &str = "checkpoints";

pub struct Data {
    pub train: Dataset,
    pub eval: Dataset,
}

fn split(all: Dataset, n_train: Option<usize>) -> Result<Data> {
    let n = n_train.ok_or_else(|| Error::Config("train_classes: required for non-Omniglot data".into()))?;
    let (train, eval) = all.split_classes(n)?;
    Ok(Data { train, eval })
}

/// Loads and splits the configured data, checking it fits the model input.
pub fn load_data(config: &RunConfig) -> Result<Data> {
    let data = match &config.data {
        DataSource::Synthetic { spec, seed } => split(make_synthetic(spec, *seed)?.0, config.train_classes)?,
        DataSource::Csv { dir } => split(read_csv_dataset(dir)?, config.train_classes)?,
        DataSource::Omniglot { root, augment } => {
            let root = DataSource::omniglot_root(root)
                .ok_or_else(|| Error::Config("data.root: not set and no data directory in the environment".into()))?;
            let (train, eval) = load_omniglot(&root)?;
            let train = if *augment { augment_rotations(&train)? } else { train };
            Data { train, eval }
        }
        DataSource::Blank {
            n_classes,
            samples_per_class,
            dimension,
        } => {
            let classes = vec![vec![Array::zeros(&[*dimension]); *samples_per_class]; *n_classes];
            let names = (0..*n_classes).map(|c| format!("blank{c}")).collect();
            split(Dataset::new(vec![*dimension], classes, names)?, config.train_classes)?
        }
    };
    let want = config.model.embedder.input_shape();
    if data.train.input_shape() != want.as_slice() {
        return Err(Error::Config(format!(
            "model.embedder: input shape {want:?} does not match the data's {:?}",
            data.train.input_shape()
        )));
    }
    Ok(data)
}

pub struct TrainOutcome {
    pub log: TrainLog,
    pub model_path: PathBuf,
    pub checkpoints: Vec<PathBuf>,
}

/// Trains from scratch, writing the config copy, periodic checkpoints, the
/// final model and the training log under `output_dir`.
pub fn run_train(config: &RunConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let data = load_data(config)?;
    let out = &config.output_dir;
    fs::create_dir_all(out.join(CHECKPOINT_DIR))?;
    fs::write(out.join(CONFIG_FILE), config.to_json()?)?;

    let mut model = Model::build(config.model.clone(), config.model_seed)?;
    let mut checkpoints = Vec::new();
    let log = train(&mut model, &data.train, &config.train, &mut |m, batch| {
        let path = out.join(CHECKPOINT_DIR).join(format!("batch_{batch:06}.cpt"));
        m.save(&path)?;
        checkpoints.push(path);
        Ok(())
    })?;
    let model_path = out.join(MODEL_FILE);
    model.save(&model_path)?;
    log.write_csv(fs::File::create(out.join(LOG_FILE))?)?;
    Ok(TrainOutcome {
        log,
        model_path,
        checkpoints,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Protocol {
    Mann,
    Nway,
    Zeroshot,
    Tradeoff,
    LabelTransfer,
}

pub struct EvalOutcome {
    /// Human-readable summary.
    pub table: String,
    pub files: Vec<PathBuf>,
}

fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    if !path.is_file() {
        return Err(Error::Load {
            path: path.to_path_buf(),
            reason: "checkpoint not found".into(),
        });
    }
    Model::load(path)
}

#[derive(Serialize)]
struct ShotRow {
    shot: usize,
    accuracy: f64,
    ci95: f64,
    count: usize,
}

#[derive(Serialize)]
struct TransferRow {
    n: usize,
    accuracy: f64,
    episodes: usize,
}

#[derive(Serialize)]
struct CurveRow {
    zero_shot: f64,
    one_shot: f64,
}

/// Runs one evaluation protocol on the held-out classes and writes its CSV
/// report(s) into `output_dir`.
pub fn run_eval(config: &RunConfig, checkpoint: &Path, protocol: Protocol) -> Result<EvalOutcome> {
    config.validate()?;
    let mut model = load_checkpoint(checkpoint)?;
    let mut config = config.clone();
    config.model = model.config.clone();
    let data = load_data(&config)?;
    let out = &config.output_dir;
    fs::create_dir_all(out)?;
    let (e, t) = (&config.eval, &config.train);
    let nway = NwaySpec {
        n_way: e.n_way,
        k_shot: e.k_shot,
        scheme: t.scheme,
        label_len: t.label_len,
        pool: t.label_pool,
        seed: e.seed,
    };
    let mut table = String::new();
    let mut files = Vec::new();
    match protocol {
        Protocol::Mann => {
            let spec = MannSpec {
                n_classes: e.n_way,
                length: e.mann_length,
                scheme: t.scheme,
                label_len: t.label_len,
                pool: t.label_pool,
                slots: t.slots,
            };
            let r = mann_eval(&model, &data.eval, &spec, e.episodes, e.seed)?;
            let rows: Vec<ShotRow> = (0..r.accuracy.len())
                .filter(|&j| r.counts[j] > 0)
                .map(|j| ShotRow {
                    shot: j,
                    accuracy: r.accuracy[j],
                    ci95: r.ci95[j],
                    count: r.counts[j],
                })
                .collect();
            let _ = writeln!(table, "shot\taccuracy\tci95\tcount");
            for row in &rows {
                let _ = writeln!(table, "{}\t{:.4}\t{:.4}\t{}", row.shot, row.accuracy, row.ci95, row.count);
            }
            files.push(out.join("mann_report.csv"));
            write_rows(&files[0], &rows)?;
        }
        Protocol::Nway => {
            let r = nway_kshot_eval(&model, &data.eval, &nway, t.slots, e.episodes)?;
            let _ = writeln!(
                table,
                "{}-way {}-shot: {:.4} ± {:.4} over {} episodes",
                r.n, r.k, r.accuracy, r.ci95, r.episodes
            );
            files.push(out.join("nway_report.csv"));
            write_rows(&files[0], &[r])?;
        }
        Protocol::Zeroshot => {
            let spec = ZeroShotSpec {
                n_classes: e.n_way,
                length: e.zeroshot_length,
                label_len: t.label_len,
                slots: t.slots,
            };
            let r = zeroshot_eval(&model, &data.eval, &spec, e.episodes, e.seed)?;
            let _ = writeln!(
                table,
                "zero-shot {:.4}  one-shot {:.4}  f1 {:.4}  ({} episodes)",
                r.zero_shot_accuracy, r.one_shot_accuracy, r.f1, r.episodes
            );
            files.push(out.join("zeroshot_report.csv"));
            write_rows(&files[0], &[r])?;
        }
        Protocol::Tradeoff => {
            let spec = TradeoffSpec {
                n_classes: e.n_way,
                length: e.zeroshot_length,
                finetune_episodes: e.finetune_episodes,
                interval: e.finetune_interval,
                eval_episodes: e.episodes,
                seed: e.seed,
            };
            let series = tradeoff_experiment(&mut model, &data.train, &data.eval, t, &spec)?;
            let _ = writeln!(table, "episodes\tzero_shot\tone_shot\tnway");
            for p in &series {
                let _ = writeln!(table, "{}\t{:.4}\t{:.4}\t{:.4}", p.episodes, p.zero_shot, p.one_shot, p.nway);
            }
            files.push(out.join("tradeoff.csv"));
            files.push(out.join("tradeoff_curve.csv"));
            write_rows(&files[0], &series)?;
            let curve: Vec<CurveRow> = series
                .iter()
                .map(|p| CurveRow {
                    zero_shot: p.zero_shot,
                    one_shot: p.one_shot,
                })
                .collect();
            write_rows(&files[1], &curve)?;
        }
        Protocol::LabelTransfer => {
            let tc = e
                .transfer
                .as_ref()
                .ok_or_else(|| Error::Config("eval.transfer: required for the label-transfer protocol".into()))?;
            let spec = NwaySpec {
                k_shot: 1,
                scheme: tc.scheme,
                label_len: tc.label_len,
                pool: tc.pool,
                ..nway
            };
            let acc = label_transfer_eval(&model, &data.eval, &spec, e.episodes)?;
            let _ = writeln!(table, "label transfer {}-way: {acc:.4} over {} episodes", e.n_way, e.episodes);
            files.push(out.join("label_transfer_report.csv"));
            write_rows(
                &files[0],
                &[TransferRow {
                    n: e.n_way,
                    accuracy: acc,
                    episodes: e.episodes,
                }],
            )?;
        }
    }
    Ok(EvalOutcome { table, files })
}

/// Parameter shapes, then the memory after one greedy unlabelled episode.
/// Without `data`, the episode draws from small synthetic clusters shaped
/// like the model input.
pub fn inspect(model: &Model, data: Option<&Dataset>) -> Result<String> {
    let mut out = String::new();
    let _ = writeln!(out, "embedder: {:?}", model.config.embedder);
    let _ = writeln!(out, "parameter\tshape\ttrainable");
    for (name, p) in model.params.iter() {
        let _ = writeln!(out, "{name}\t{:?}\t{}", p.value.shape(), p.trainable);
    }
    let _ = writeln!(out, "trainable values: {}", model.params.trainable_count());

    let owned;
    let dataset = match data {
        Some(d) => d,
        None => {
            owned = probe_dataset(model)?;
            &owned
        }
    };
    let n = dataset.n_classes().min(5);
    let spec = EpisodeSpec {
        n_classes: n,
        length: 2 * n,
        labeling: Labeling::None,
        scheme: crate::label::LabelScheme::OneHot,
        label_len: n,
        pool: Some(LabelPool { start: 0, end: n }),
        seed: 0,
    };
    let episode = sample_episode(dataset, &spec)?;
    let mut rng = seeded_rng(0);
    let trace = run_episode(model, &episode, default_slots(n), &Rollout::Greedy, &RewardConfig::default(), &mut rng)?;
    let _ = writeln!(out, "\ngreedy episode: classes {:?}", episode.classes());
    let actions: Vec<usize> = trace.steps.iter().map(|s| s.action).collect();
    let _ = writeln!(out, "actions {actions:?}  return {}  perfect {}", trace.ret, trace.perfect);
    out.push_str(&trace.memory.dump_table());
    Ok(out)
}

fn probe_dataset(model: &Model) -> Result<Dataset> {
    let shape = model.config.embedder.input_shape();
    let spec = SyntheticSpec {
        n_classes: 5,
        dimension: shape.iter().product(),
        center_scale: 1.0,
        sigma: 0.1,
        samples_per_class: 10,
    };
    let (flat, _) = make_synthetic(&spec, 0)?;
    let classes = (0..flat.n_classes())
        .map(|c| flat.samples(c).iter().map(|s| s.reshaped(&shape)).collect::<Result<Vec<_>>>())
        .collect::<Result<Vec<_>>>()?;
    let names = (0..flat.n_classes()).map(|c| flat.name(c).to_string()).collect();
    Dataset::new(shape, classes, names)
}

/// Input of `synth-gen`: a synthetic spec plus its seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthGenSpec {
    #[serde(flatten)]
    pub spec: SyntheticSpec,
    pub seed: u64,
}

pub fn synth_gen(spec_path: &Path, out_dir: &Path) -> Result<SyntheticMeta> {
    let text = fs::read_to_string(spec_path).map_err(|e| Error::Load {
        path: spec_path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let gen: SynthGenSpec = serde_json::from_str(&text).map_err(|e| Error::Config(format!("invalid spec: {e}")))?;
    gen.spec.validate()?;
    let (dataset, meta) = make_synthetic(&gen.spec, gen.seed)?;
    write_csv_dataset(out_dir, &dataset, &meta)?;
    Ok(meta)
}
