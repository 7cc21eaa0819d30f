//! Evaluation protocols. Everything here runs greedily against fixed
//! parameters, except the explicit fine-tuning in [`tradeoff_experiment`].

use std::collections::BTreeMap;

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::array::Array;
use crate::episode::{
    nway_kshot_episode, sample_episode, Dataset, EpisodeSpec, LabelPool, Labeling, NwaySpec, Step,
};
use crate::error::{Error, Result};
use crate::label::{encode_label, LabelScheme, LabelVector};
use crate::memory::{argmax, attend, classify, Memory};
use crate::model::Model;
use crate::params::seeded_rng;
use crate::trainer::{default_slots, run_episode, CurriculumStage, EpisodeTrace, RewardConfig, Rollout, TrainConfig, Trainer};

/// Normal-approximation 95% half-width for a proportion over `n` trials.
pub fn ci95(p: f64, n: usize) -> f64 {
    if n == 0 {
        return 0.0;
    }
    1.96 * (p * (1.0 - p) / n as f64).sqrt()
}

/// Harmonic mean of zero-shot and one-shot accuracy; 0 when both are 0.
pub fn f1(zero_shot: f64, one_shot: f64) -> f64 {
    let total = zero_shot + one_shot;
    if total == 0.0 {
        0.0
    } else {
        2.0 * zero_shot * one_shot / total
    }
}

/// Stores a labelled step: greedy label-channel routing, then a write.
/// Returns the chosen slot.
fn store(memory: &mut Memory, model: &Model, h: &Array, label: &LabelVector) -> Result<usize> {
    let probs = attend(memory, h, label, &model.params)?;
    let slot = argmax(&probs);
    memory.write(slot, h, label)?;
    Ok(slot)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShotAccuracyReport {
    /// Entry `j` is the accuracy of predictions made after `j` earlier
    /// examples of the class were stored. Entry 0 (first appearances) can
    /// only be right by accident.
    pub accuracy: Vec<f64>,
    pub counts: Vec<usize>,
    pub ci95: Vec<f64>,
    pub episodes: usize,
    /// Predictions made (every step but each episode's first).
    pub predictions: usize,
}

impl ShotAccuracyReport {
    /// Accuracy after `j` shots, if any such prediction was made.
    pub fn shot(&self, j: usize) -> Option<f64> {
        self.counts.get(j).filter(|&&n| n > 0).map(|_| self.accuracy[j])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MannSpec {
    pub n_classes: usize,
    pub length: usize,
    pub scheme: LabelScheme,
    pub label_len: usize,
    #[serde(default)]
    pub pool: Option<LabelPool>,
    #[serde(default)]
    pub slots: Option<usize>,
}

impl MannSpec {
    pub fn standard(label_len: usize) -> Self {
        MannSpec {
            n_classes: 5,
            length: 50,
            scheme: LabelScheme::OneHot,
            label_len,
            pool: None,
            slots: None,
        }
    }
}

/// Predict-then-store over fully labelled episodes. Each step classifies
/// the sample against memory, then writes it with its true label.
pub fn mann_eval(model: &Model, dataset: &Dataset, spec: &MannSpec, episodes: usize, seed: u64) -> Result<ShotAccuracyReport> {
    let mut rng = seeded_rng(seed);
    let slots = spec.slots.unwrap_or_else(|| default_slots(spec.n_classes));
    let mut correct: Vec<usize> = Vec::new();
    let mut counts: Vec<usize> = Vec::new();
    let mut predictions = 0;
    for _ in 0..episodes {
        let ep = sample_episode(
            dataset,
            &EpisodeSpec {
                n_classes: spec.n_classes,
                length: spec.length,
                labeling: Labeling::Full,
                scheme: spec.scheme,
                label_len: spec.label_len,
                pool: spec.pool,
                seed: rng.next_u64(),
            },
        )?;
        let samples: Vec<&Array> = ep.steps.iter().map(|s| &s.sample).collect();
        let hs = model.embed_all(&samples)?;
        let mut memory = Memory::new(slots, model.hidden(), spec.label_len)?;
        let mut seen: BTreeMap<usize, usize> = BTreeMap::new();
        for (step, h) in ep.steps.iter().zip(&hs) {
            let shots = seen.entry(step.class).or_insert(0);
            if memory.any_occupied() {
                let (_, predicted) = classify(&memory, h, &model.params)?;
                if counts.len() <= *shots {
                    counts.resize(*shots + 1, 0);
                    correct.resize(*shots + 1, 0);
                }
                counts[*shots] += 1;
                correct[*shots] += usize::from(predicted == step.label_id);
                predictions += 1;
            }
            *shots += 1;
            store(&mut memory, model, h, &step.label)?;
        }
    }
    let accuracy: Vec<f64> = correct
        .iter()
        .zip(&counts)
        .map(|(&c, &n)| if n == 0 { 0.0 } else { c as f64 / n as f64 })
        .collect();
    let ci95 = accuracy.iter().zip(&counts).map(|(&p, &n)| ci95(p, n)).collect();
    Ok(ShotAccuracyReport {
        accuracy,
        counts,
        ci95,
        episodes,
        predictions,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NwayReport {
    pub n: usize,
    pub k: usize,
    pub accuracy: f64,
    pub ci95: f64,
    pub episodes: usize,
}

fn embed_steps(model: &Model, steps: &[&Step]) -> Result<Vec<Array>> {
    let samples: Vec<&Array> = steps.iter().map(|s| &s.sample).collect();
    model.embed_all(&samples)
}

/// N-way k-shot: store the labelled support set, then classify the query.
/// `slots` defaults to `2N`.
pub fn nway_kshot_eval(
    model: &Model,
    dataset: &Dataset,
    spec: &NwaySpec,
    slots: Option<usize>,
    episodes: usize,
) -> Result<NwayReport> {
    let mut rng = seeded_rng(spec.seed);
    let slots = slots.unwrap_or_else(|| default_slots(spec.n_way));
    let mut hits = 0usize;
    for _ in 0..episodes {
        let ep = nway_kshot_episode(dataset, &NwaySpec { seed: rng.next_u64(), ..spec.clone() })?;
        let mut all: Vec<&Step> = ep.support.iter().collect();
        all.push(&ep.query);
        let hs = embed_steps(model, &all)?;
        let mut memory = Memory::new(slots, model.hidden(), spec.label_len)?;
        for (step, h) in ep.support.iter().zip(&hs) {
            store(&mut memory, model, h, &step.label)?;
        }
        let (_, predicted) = classify(&memory, &hs[hs.len() - 1], &model.params)?;
        hits += usize::from(predicted == ep.query.label_id);
    }
    let accuracy = if episodes == 0 { 0.0 } else { hits as f64 / episodes as f64 };
    Ok(NwayReport {
        n: spec.n_way,
        k: spec.k_shot,
        accuracy,
        ci95: ci95(accuracy, episodes),
        episodes,
    })
}

/// Label-channel transfer: store a labelled 1-shot support set, then route
/// the query *with its label* and check it lands in its class's slot.
pub fn label_transfer_eval(model: &Model, dataset: &Dataset, spec: &NwaySpec, episodes: usize) -> Result<f64> {
    let mut rng = seeded_rng(spec.seed);
    let slots = default_slots(spec.n_way);
    let mut hits = 0usize;
    for _ in 0..episodes {
        let ep = nway_kshot_episode(dataset, &NwaySpec { seed: rng.next_u64(), ..spec.clone() })?;
        let mut all: Vec<&Step> = ep.support.iter().collect();
        all.push(&ep.query);
        let hs = embed_steps(model, &all)?;
        let mut memory = Memory::new(slots, model.hidden(), spec.label_len)?;
        let mut homes: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (step, h) in ep.support.iter().zip(&hs) {
            let slot = store(&mut memory, model, h, &step.label)?;
            homes.entry(slot).or_default().push(step.class);
        }
        let label = encode_label(ep.query.label_id, spec.scheme, spec.label_len)?;
        let probs = attend(&memory, &hs[hs.len() - 1], &label, &model.params)?;
        let slot = argmax(&probs);
        let pure_home = homes.get(&slot).is_some_and(|cs| cs.iter().all(|&c| c == ep.query.class));
        hits += usize::from(pure_home);
    }
    Ok(if episodes == 0 { 0.0 } else { hits as f64 / episodes as f64 })
}

/// Running tally of outlier detection and second-appearance routing.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ZeroShotTally {
    pub first_appearances: usize,
    pub fresh_first: usize,
    pub second_appearances: usize,
    pub routed_second: usize,
}

impl ZeroShotTally {
    pub fn add(&mut self, trace: &EpisodeTrace<'_>) {
        let mut first_slot: BTreeMap<usize, usize> = BTreeMap::new();
        let mut seen: BTreeMap<usize, usize> = BTreeMap::new();
        for s in &trace.steps {
            let n = seen.entry(s.class).or_insert(0);
            *n += 1;
            match *n {
                1 => {
                    self.first_appearances += 1;
                    self.fresh_first += usize::from(s.fresh);
                    first_slot.insert(s.class, s.action);
                }
                2 => {
                    self.second_appearances += 1;
                    self.routed_second += usize::from(first_slot[&s.class] == s.action);
                }
                _ => {}
            }
        }
    }

    pub fn zero_shot(&self) -> f64 {
        ratio(self.fresh_first, self.first_appearances)
    }

    pub fn one_shot(&self) -> f64 {
        ratio(self.routed_second, self.second_appearances)
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FewZeroReport {
    pub zero_shot_accuracy: f64,
    /// Second appearances routed to the slot of the class's first one.
    pub one_shot_accuracy: f64,
    pub f1: f64,
    pub episodes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ZeroShotSpec {
    pub n_classes: usize,
    pub length: usize,
    pub label_len: usize,
    #[serde(default)]
    pub slots: Option<usize>,
}

/// Greedy unlabelled episodes: how often a class's first sample goes to an
/// empty slot, and its second to the first one's slot.
pub fn zeroshot_eval(model: &Model, dataset: &Dataset, spec: &ZeroShotSpec, episodes: usize, seed: u64) -> Result<FewZeroReport> {
    let mut rng = seeded_rng(seed);
    let slots = spec.slots.unwrap_or_else(|| default_slots(spec.n_classes));
    let mut tally = ZeroShotTally::default();
    let rewards = RewardConfig::default();
    for _ in 0..episodes {
        let ep = sample_episode(
            dataset,
            &EpisodeSpec {
                n_classes: spec.n_classes,
                length: spec.length,
                labeling: Labeling::None,
                scheme: LabelScheme::OneHot,
                label_len: spec.label_len,
                pool: None,
                seed: rng.next_u64(),
            },
        )?;
        let trace = run_episode(model, &ep, slots, &Rollout::Greedy, &rewards, &mut rng)?;
        tally.add(&trace);
    }
    let (z, o) = (tally.zero_shot(), tally.one_shot());
    Ok(FewZeroReport {
        zero_shot_accuracy: z,
        one_shot_accuracy: o,
        f1: f1(z, o),
        episodes,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TradeoffPoint {
    /// Fine-tuning episodes completed.
    pub episodes: usize,
    pub zero_shot: f64,
    /// Second-appearance routing in unlabelled episodes.
    pub one_shot: f64,
    /// N-way 1-shot accuracy on the evaluation classes.
    pub nway: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TradeoffSpec {
    /// Fine-tuning runs unlabelled episodes of this shape.
    pub n_classes: usize,
    pub length: usize,
    pub finetune_episodes: usize,
    pub interval: usize,
    pub eval_episodes: usize,
    pub seed: u64,
}

/// Continues training on unlabelled episodes, measuring zero-shot and
/// few-shot accuracy on `eval` before fine-tuning and after every
/// `interval` episodes.
pub fn tradeoff_experiment(
    model: &mut Model,
    train: &Dataset,
    eval: &Dataset,
    base: &TrainConfig,
    spec: &TradeoffSpec,
) -> Result<Vec<TradeoffPoint>> {
    if spec.interval == 0 {
        return Err(Error::Config("tradeoff interval must be positive".into()));
    }
    let zs = ZeroShotSpec {
        n_classes: spec.n_classes,
        length: spec.length,
        label_len: base.label_len,
        slots: base.slots,
    };
    let nway = NwaySpec {
        n_way: spec.n_classes,
        k_shot: 1,
        scheme: base.scheme,
        label_len: base.label_len,
        pool: base.label_pool,
        seed: spec.seed ^ 0x5eed,
    };
    let measure = |model: &Model, done: usize| -> Result<TradeoffPoint> {
        let z = zeroshot_eval(model, eval, &zs, spec.eval_episodes, spec.seed)?;
        let n = nway_kshot_eval(model, eval, &nway, base.slots, spec.eval_episodes)?;
        Ok(TradeoffPoint {
            episodes: done,
            zero_shot: z.zero_shot_accuracy,
            one_shot: z.one_shot_accuracy,
            nway: n.accuracy,
        })
    };

    let stage = |episodes| CurriculumStage {
        n_classes: spec.n_classes,
        length: spec.length,
        episodes,
        labeling: Labeling::None,
    };
    let config = TrainConfig {
        curriculum: vec![stage(spec.interval)],
        seed: spec.seed,
        checkpoint_every: None,
        ..base.clone()
    };
    let mut trainer = Trainer::new(config)?;
    let mut series = vec![measure(model, 0)?];
    let mut done = 0;
    while done < spec.finetune_episodes {
        let chunk = spec.interval.min(spec.finetune_episodes - done);
        trainer.run_stage(model, train, 0, &stage(chunk), &mut |_, _| Ok(()))?;
        done += chunk;
        series.push(measure(model, done)?);
    }
    Ok(series)
}
