//! Policy-gradient training of the embedder and label attention.
//!
//! An episode is a sequence of slot choices. Each step is scored by the
//! slot it lands in (fresh, wrong merge, correct merge) and the episode
//! earns a terminal bonus when it ends perfectly clustered. The whole
//! return `G` weights every step's log-probability:
//!
//! ```text
//! ∇J ≈ 1/B · Σ_episodes Σ_t ∇ log π(a_t | S_t) · (G − b)
//! ```

use std::collections::{BTreeMap, BTreeSet};

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::array::Array;
use crate::embedder::{apply_bn_updates, embed_batch, stack_inputs, Mode};
use crate::episode::{sample_episode, Dataset, Episode, EpisodeSpec, LabelPool, Labeling};
use crate::error::{Error, Result};
use crate::label::LabelScheme;
use crate::memory::{attention_scores, choose_slot, Memory, Selection};
use crate::model::Model;
use crate::params::{seeded_rng, Bindings, Gradients, ParamSet, SeededRng};
use crate::tape::{softmax, BatchStats, Node, Tape};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RewardConfig {
    pub fresh_slot_penalty: f64,
    pub wrong_merge_penalty: f64,
    pub correct_merge_reward: f64,
    pub terminal_bonus: f64,
    /// Must be 1.
    pub discount: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        RewardConfig {
            fresh_slot_penalty: -1.0,
            wrong_merge_penalty: -3.0,
            correct_merge_reward: 0.0,
            terminal_bonus: 100.0,
            discount: 1.0,
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<()> {
        if self.discount != 1.0 {
            return Err(Error::Config(format!(
                "rewards.discount: episodes are undiscounted, got {}",
                self.discount
            )));
        }
        let all = [
            self.fresh_slot_penalty,
            self.wrong_merge_penalty,
            self.correct_merge_reward,
            self.terminal_bonus,
        ];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("rewards must be finite".into()));
        }
        Ok(())
    }
}

/// True class ids written to each slot. Ground truth lives here rather than
/// in [`Memory`] so evaluation memory never needs it.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Purity {
    slots: Vec<BTreeSet<usize>>,
}

impl Purity {
    pub fn new(slots: usize) -> Self {
        Purity {
            slots: vec![BTreeSet::new(); slots],
        }
    }

    pub fn record(&mut self, slot: usize, class: usize) {
        self.slots[slot].insert(class);
    }

    pub fn classes(&self, slot: usize) -> &BTreeSet<usize> {
        &self.slots[slot]
    }

    /// Every appearing class sits in exactly one slot and no slot mixes
    /// classes.
    pub fn is_perfect(&self) -> bool {
        let mut homes: BTreeMap<usize, usize> = BTreeMap::new();
        for set in &self.slots {
            if set.len() > 1 {
                return false;
            }
            for &c in set {
                *homes.entry(c).or_default() += 1;
            }
        }
        homes.values().all(|&n| n == 1)
    }
}

/// Reward for writing `class` into `slot`, judged before the write.
pub fn step_reward(purity: &Purity, slot: usize, class: usize, rewards: &RewardConfig) -> f64 {
    let held = purity.classes(slot);
    if held.is_empty() {
        rewards.fresh_slot_penalty
    } else if held.iter().any(|&c| c != class) {
        rewards.wrong_merge_penalty
    } else {
        rewards.correct_merge_reward
    }
}

pub fn terminal_reward(purity: &Purity, rewards: &RewardConfig) -> f64 {
    if purity.is_perfect() {
        rewards.terminal_bonus
    } else {
        0.0
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Rollout {
    /// Sample actions and keep the computation record for a gradient.
    Sample,
    Greedy,
    /// Replay a fixed action sequence.
    Forced(Vec<usize>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub probabilities: Vec<f64>,
    pub action: usize,
    pub log_prob: f64,
    pub reward: f64,
    pub class: usize,
    /// Whether the chosen slot was empty before the write.
    pub fresh: bool,
}

struct Live<'a> {
    tape: Tape<'a>,
    bindings: Bindings,
    log_probs: Vec<Node>,
    bn_updates: Vec<(String, BatchStats)>,
}

pub struct EpisodeTrace<'a> {
    pub steps: Vec<StepRecord>,
    pub terminal: f64,
    /// `Σ r_t + terminal`.
    pub ret: f64,
    pub perfect: bool,
    pub memory: Memory,
    pub purity: Purity,
    live: Option<Live<'a>>,
}

impl EpisodeTrace<'_> {
    pub fn is_live(&self) -> bool {
        self.live.is_some()
    }

    /// Train-mode batchnorm statistics gathered during a sampled rollout.
    pub fn bn_updates(&self) -> &[(String, BatchStats)] {
        self.live.as_ref().map_or(&[], |l| &l.bn_updates)
    }
}

/// Default memory size: twice the number of classes per episode.
pub fn default_slots(n_classes: usize) -> usize {
    2 * n_classes
}

/// Runs one episode against a fresh memory of `slots` slots.
///
/// In [`Rollout::Sample`] all samples are embedded as one train-mode batch
/// and the computation record is kept for [`reinforce_gradient`]; the other
/// modes embed in eval mode.
pub fn run_episode<'a>(
    model: &'a Model,
    episode: &Episode,
    slots: usize,
    rollout: &Rollout,
    rewards: &RewardConfig,
    rng: &mut SeededRng,
) -> Result<EpisodeTrace<'a>> {
    rewards.validate()?;
    let first = episode
        .steps
        .first()
        .ok_or_else(|| Error::Sampling("episode has no steps".into()))?;
    if let Rollout::Forced(actions) = rollout {
        if actions.len() != episode.len() {
            return Err(Error::Contract(format!(
                "{} forced actions for an episode of length {}",
                actions.len(),
                episode.len()
            )));
        }
    }
    let hidden = model.hidden();
    let mut memory = Memory::new(slots, hidden, first.label.len())?;
    let mut purity = Purity::new(slots);

    let mut tape = Tape::new();
    let bindings = model.params.bind(&mut tape);
    let samples: Vec<&Array> = episode.steps.iter().map(|s| &s.sample).collect();
    let batch = stack_inputs(&model.config.embedder, &samples)?;
    let mode = if *rollout == Rollout::Sample { Mode::Train } else { Mode::Eval };
    let fwd = embed_batch(&mut tape, &model.config.embedder, &model.params, &bindings, batch, mode)?;

    // Prototypes as tape nodes, so gradients reach earlier embeddings
    // through the running means.
    let zero = tape.constant(Array::zeros(&[hidden]));
    let mut protos = vec![zero; slots];
    let mut steps = Vec::with_capacity(episode.len());
    let mut log_probs = Vec::with_capacity(episode.len());
    for (t, step) in episode.steps.iter().enumerate() {
        let h = tape.row(fwd.embeddings, t)?;
        let matrix = tape.stack_rows(&protos)?;
        let scores = attention_scores(&mut tape, &bindings, &memory, h, &step.label, matrix)?;
        let probabilities = softmax(tape.value(scores).data());
        let action = match rollout {
            Rollout::Sample => choose_slot(&probabilities, Selection::Sample, rng)?,
            Rollout::Greedy => choose_slot(&probabilities, Selection::Greedy, rng)?,
            Rollout::Forced(actions) => {
                let a = actions[t];
                if a >= slots {
                    return Err(Error::Contract(format!("forced action {a} out of range for L={slots}")));
                }
                a
            }
        };
        let logp = tape.log_softmax(scores)?;
        let chosen = tape.pick(logp, action)?;
        let log_prob = tape.value(chosen).data()[0];
        if !log_prob.is_finite() {
            return Err(Error::Contract(format!("log-probability of slot {action} is not finite")));
        }
        log_probs.push(chosen);

        let reward = step_reward(&purity, action, step.class, rewards);
        let fresh = memory.slots()[action].is_empty();
        purity.record(action, step.class);

        let c = memory.slots()[action].count as f64;
        let kept = tape.scale(protos[action], c / (c + 1.0));
        let added = tape.scale(h, 1.0 / (c + 1.0));
        protos[action] = tape.add(kept, added)?;
        let h_value = tape.value(h).clone();
        memory.write(action, &h_value, &step.label)?;

        steps.push(StepRecord {
            probabilities,
            action,
            log_prob,
            reward,
            class: step.class,
            fresh,
        });
    }
    let terminal = terminal_reward(&purity, rewards);
    let ret = steps.iter().map(|s| s.reward).sum::<f64>() + terminal;
    let live = (*rollout == Rollout::Sample).then_some(Live {
        tape,
        bindings,
        log_probs,
        bn_updates: fwd.bn_updates,
    });
    Ok(EpisodeTrace {
        steps,
        terminal,
        ret,
        perfect: purity.is_perfect(),
        memory,
        purity,
        live,
    })
}

/// `weight · ∇ Σ_t log π(a_t | S_t)` for one sampled trace.
fn trace_gradient(trace: &mut EpisodeTrace<'_>, params: &ParamSet, weight: f64) -> Result<Option<Gradients>> {
    let live = trace
        .live
        .as_mut()
        .ok_or_else(|| Error::Contract("REINFORCE needs sampled traces with a live computation record".into()))?;
    if weight == 0.0 {
        return Ok(None);
    }
    let stacked = live.tape.stack_rows(&live.log_probs)?;
    let total = live.tape.sum(stacked);
    live.tape.backward_scaled(total, weight)?;
    Ok(Some(live.bindings.gradients(&live.tape, params)))
}

/// Batch estimate of `∇J`: the mean over traces of
/// `Σ_t ∇ log π(a_t | S_t) · (G − b)`. This is an ascent direction.
pub fn reinforce_gradient(traces: &mut [EpisodeTrace<'_>], params: &ParamSet, baseline: f64) -> Result<Gradients> {
    let mut total = Gradients::zeros_like(params);
    if traces.is_empty() {
        return Ok(total);
    }
    let scale = 1.0 / traces.len() as f64;
    for trace in traces.iter_mut() {
        let weight = (trace.ret - baseline) * scale;
        if let Some(g) = trace_gradient(trace, params, weight)? {
            total.add_scaled(&g, 1.0)?;
        }
    }
    Ok(total)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate >= 0.0
            && self.learning_rate.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.epsilon > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("optimizer settings out of range: {self:?}")))
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub config: AdamConfig,
    first: BTreeMap<String, Array>,
    second: BTreeMap<String, Array>,
    pub step: u64,
    /// Moving average of episode returns.
    pub baseline: f64,
    pub use_baseline: bool,
}

impl OptimizerState {
    pub fn new(config: AdamConfig, use_baseline: bool) -> Self {
        OptimizerState {
            config,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
            step: 0,
            baseline: 0.0,
            use_baseline,
        }
    }

    /// The `b` to subtract from returns in the next batch.
    pub fn current_baseline(&self) -> f64 {
        if self.use_baseline {
            self.baseline
        } else {
            0.0
        }
    }
}

/// One Adam ascent step on every parameter in `grads`, then the baseline
/// update `b ← 0.99·b + 0.01·mean_return`.
pub fn apply_update(
    state: &mut OptimizerState,
    params: &mut ParamSet,
    grads: &Gradients,
    mean_return: f64,
) -> Result<()> {
    for (name, g) in grads.iter() {
        if !g.all_finite() {
            return Err(Error::NonFiniteGradient { name: name.to_string() });
        }
        let p = params.get(name)?;
        if p.shape() != g.shape() {
            return Err(Error::shapes("apply_update", p.shape(), g.shape()));
        }
    }
    let AdamConfig {
        learning_rate,
        beta1,
        beta2,
        epsilon,
    } = state.config;
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    for (name, g) in grads.iter() {
        let m = state
            .first
            .entry(name.to_string())
            .or_insert_with(|| Array::zeros(g.shape()));
        for (m, g) in m.data_mut().iter_mut().zip(g.data()) {
            *m = beta1 * *m + (1.0 - beta1) * g;
        }
        let v = state
            .second
            .entry(name.to_string())
            .or_insert_with(|| Array::zeros(g.shape()));
        for (v, g) in v.data_mut().iter_mut().zip(g.data()) {
            *v = beta2 * *v + (1.0 - beta2) * g * g;
        }
        let (m, v) = (&state.first[name], &state.second[name]);
        let p = params.get_mut(name)?;
        for ((p, m), v) in p.data_mut().iter_mut().zip(m.data()).zip(v.data()) {
            *p += learning_rate * (m / c1) / ((v / c2).sqrt() + epsilon);
        }
    }
    if state.use_baseline {
        state.baseline = 0.99 * state.baseline + 0.01 * mean_return;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CurriculumStage {
    pub n_classes: usize,
    pub length: usize,
    pub episodes: usize,
    pub labeling: Labeling,
}

fn default_batch() -> usize {
    16
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub curriculum: Vec<CurriculumStage>,
    #[serde(default)]
    pub rewards: RewardConfig,
    #[serde(default)]
    pub optimizer: AdamConfig,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_true")]
    pub baseline: bool,
    pub scheme: LabelScheme,
    pub label_len: usize,
    #[serde(default)]
    pub label_pool: Option<LabelPool>,
    /// Memory size; `2·n_classes` of each stage when absent.
    #[serde(default)]
    pub slots: Option<usize>,
    pub seed: u64,
    /// Checkpoint every this many update batches.
    #[serde(default)]
    pub checkpoint_every: Option<usize>,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.curriculum.is_empty() {
            return Err(Error::Config("curriculum: at least one stage is required".into()));
        }
        for (i, s) in self.curriculum.iter().enumerate() {
            if s.n_classes == 0 || s.length == 0 || s.episodes == 0 {
                return Err(Error::Config(format!("curriculum[{i}]: counts must be positive, got {s:?}")));
            }
            if let Some(l) = self.slots {
                if l == 0 {
                    return Err(Error::Config("slots must be positive".into()));
                }
            }
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.checkpoint_every == Some(0) {
            return Err(Error::Config("checkpoint_every must be positive".into()));
        }
        self.rewards.validate()?;
        self.optimizer.validate()
    }

    pub fn slots_for(&self, n_classes: usize) -> usize {
        self.slots.unwrap_or_else(|| default_slots(n_classes))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub stage: usize,
    pub episode_batch: usize,
    pub mean_return: f64,
    pub perfect_rate: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageSummary {
    pub stage: usize,
    pub episodes: usize,
    pub mean_return: f64,
    pub perfect_rate: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
    pub stages: Vec<StageSummary>,
}

impl TrainLog {
    pub fn write_csv(&self, w: impl std::io::Write) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        for row in &self.rows {
            out.serialize(row)?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Stateful training loop: optimizer moments, baseline, and the episode
/// stream persist across calls to [`Trainer::run_stage`].
pub struct Trainer {
    config: TrainConfig,
    optimizer: OptimizerState,
    rng: SeededRng,
    batches_done: usize,
    log: TrainLog,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        Ok(Trainer {
            optimizer: OptimizerState::new(config.optimizer.clone(), config.baseline),
            rng: seeded_rng(config.seed),
            batches_done: 0,
            log: TrainLog::default(),
            config,
        })
    }

    pub fn optimizer(&self) -> &OptimizerState {
        &self.optimizer
    }

    pub fn log(&self) -> &TrainLog {
        &self.log
    }

    pub fn into_log(self) -> TrainLog {
        self.log
    }

    /// Runs `stage.episodes` sampled episodes, updating every `batch_size`.
    /// `on_checkpoint(model, batch)` fires every `checkpoint_every` update
    /// batches, counted over the trainer's lifetime.
    pub fn run_stage(
        &mut self,
        model: &mut Model,
        dataset: &Dataset,
        stage_index: usize,
        stage: &CurriculumStage,
        on_checkpoint: &mut dyn FnMut(&Model, usize) -> Result<()>,
    ) -> Result<StageSummary> {
        let config = &self.config;
        let slots = config.slots_for(stage.n_classes);
        let mut stage_return = 0.0;
        let mut stage_perfect = 0usize;
        let mut remaining = stage.episodes;
        let mut batch_index = 0;
        while remaining > 0 {
            let size = remaining.min(config.batch_size);
            remaining -= size;
            let baseline = self.optimizer.current_baseline();
            let mut grads = Gradients::zeros_like(&model.params);
            let mut bn_updates = Vec::new();
            let mut returns = 0.0;
            let mut perfect = 0usize;
            for _ in 0..size {
                let spec = EpisodeSpec {
                    n_classes: stage.n_classes,
                    length: stage.length,
                    labeling: stage.labeling,
                    scheme: config.scheme,
                    label_len: config.label_len,
                    pool: config.label_pool,
                    seed: self.rng.next_u64(),
                };
                let mut action_rng = seeded_rng(self.rng.next_u64());
                let episode = sample_episode(dataset, &spec)?;
                let mut trace = run_episode(model, &episode, slots, &Rollout::Sample, &config.rewards, &mut action_rng)?;
                let weight = (trace.ret - baseline) / size as f64;
                if let Some(g) = trace_gradient(&mut trace, &model.params, weight)? {
                    grads.add_scaled(&g, 1.0)?;
                }
                bn_updates.extend(trace.bn_updates().iter().cloned());
                returns += trace.ret;
                perfect += usize::from(trace.perfect);
            }
            let mean_return = returns / size as f64;
            apply_bn_updates(&mut model.params, &bn_updates)?;
            apply_update(&mut self.optimizer, &mut model.params, &grads, mean_return)?;

            stage_return += returns;
            stage_perfect += perfect;
            self.log.rows.push(LogRow {
                stage: stage_index,
                episode_batch: batch_index,
                mean_return,
                perfect_rate: perfect as f64 / size as f64,
            });
            batch_index += 1;
            self.batches_done += 1;
            if config.checkpoint_every.is_some_and(|k| self.batches_done.is_multiple_of(k)) {
                on_checkpoint(model, self.batches_done)?;
            }
        }
        let summary = StageSummary {
            stage: stage_index,
            episodes: stage.episodes,
            mean_return: stage_return / stage.episodes.max(1) as f64,
            perfect_rate: stage_perfect as f64 / stage.episodes.max(1) as f64,
        };
        self.log.stages.push(summary.clone());
        Ok(summary)
    }
}

/// Trains `model` through the whole curriculum.
///
/// All randomness derives from `config.seed`, so runs are bit-reproducible.
pub fn train(
    model: &mut Model,
    dataset: &Dataset,
    config: &TrainConfig,
    on_checkpoint: &mut dyn FnMut(&Model, usize) -> Result<()>,
) -> Result<TrainLog> {
    let mut trainer = Trainer::new(config.clone())?;
    for (i, stage) in config.curriculum.iter().enumerate() {
        trainer.run_stage(model, dataset, i, stage, on_checkpoint)?;
    }
    Ok(trainer.into_log())
}
