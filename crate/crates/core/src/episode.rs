//! Episode generation: class sampling, ordering, label encoding, and the
//! three labelling regimes.

use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::array::Array;
use crate::error::{Error, Result};
use crate::label::{capacity, encode_label, LabelScheme, LabelVector};
use crate::params::seeded_rng;

/// Samples grouped by dense class id.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    input_shape: Vec<usize>,
    classes: Vec<Vec<Array>>,
    names: Vec<String>,
}

impl Dataset {
    pub fn new(input_shape: Vec<usize>, classes: Vec<Vec<Array>>, names: Vec<String>) -> Result<Self> {
        if names.len() != classes.len() {
            return Err(Error::Config("one name per class required".into()));
        }
        let per: usize = input_shape.iter().product();
        for (id, samples) in classes.iter().enumerate() {
            if samples.is_empty() {
                return Err(Error::Config(format!("class {id} has no samples")));
            }
            if let Some(bad) = samples.iter().find(|s| s.len() != per) {
                return Err(Error::shapes("dataset", &input_shape, bad.shape()));
            }
        }
        Ok(Dataset {
            input_shape,
            classes,
            names,
        })
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn samples(&self, class: usize) -> &[Array] {
        &self.classes[class]
    }

    pub fn name(&self, class: usize) -> &str {
        &self.names[class]
    }

    pub fn n_samples(&self) -> usize {
        self.classes.iter().map(Vec::len).sum()
    }

    /// Splits into the first `n_train` classes and the rest, with dense ids
    /// in both halves.
    pub fn split_classes(mut self, n_train: usize) -> Result<(Dataset, Dataset)> {
        if n_train == 0 || n_train >= self.classes.len() {
            return Err(Error::Config(format!(
                "cannot split {} classes with {n_train} for training",
                self.classes.len()
            )));
        }
        let rest = self.classes.split_off(n_train);
        let rest_names = self.names.split_off(n_train);
        let eval = Dataset {
            input_shape: self.input_shape.clone(),
            classes: rest,
            names: rest_names,
        };
        Ok((self, eval))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Labeling {
    /// Every step carries its label vector.
    Full,
    /// Only each class's first occurrence is labelled.
    Seed,
    /// Zero label vectors throughout.
    None,
}

/// Half-open range of label ids assigned to an episode's classes. Each
/// episode maps its classes to distinct ids drawn uniformly from the pool.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelPool {
    pub start: usize,
    pub end: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSpec {
    pub n_classes: usize,
    pub length: usize,
    pub labeling: Labeling,
    pub scheme: LabelScheme,
    pub label_len: usize,
    /// Defaults to every id the scheme can encode at `label_len`.
    #[serde(default)]
    pub pool: Option<LabelPool>,
    pub seed: u64,
}

impl EpisodeSpec {
    pub fn label_pool(&self) -> LabelPool {
        self.pool.unwrap_or(LabelPool {
            start: 0,
            end: capacity(self.scheme, self.label_len),
        })
    }

    fn validate(&self) -> Result<()> {
        if self.n_classes == 0 || self.length == 0 {
            return Err(Error::Sampling("episode needs at least one class and one step".into()));
        }
        let pool = self.label_pool();
        if pool.end > capacity(self.scheme, self.label_len) || pool.start >= pool.end {
            return Err(Error::Config(format!(
                "label pool {pool:?} does not fit {:?} labels of length {}",
                self.scheme, self.label_len
            )));
        }
        if pool.end - pool.start < self.n_classes {
            return Err(Error::Sampling(format!(
                "label pool {pool:?} is smaller than {} classes",
                self.n_classes
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Step {
    pub sample: Array,
    /// The label vector presented to the model (possibly zero).
    pub label: LabelVector,
    /// Dataset class id.
    pub class: usize,
    /// Episode-local label id of the class.
    pub label_id: usize,
}

impl Step {
    pub fn is_labelled(&self) -> bool {
        !self.label.is_zero()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub steps: Vec<Step>,
    pub spec: EpisodeSpec,
}

impl Episode {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn classes(&self) -> Vec<usize> {
        self.steps.iter().map(|s| s.class).collect()
    }
}

fn draw_label_ids(pool: LabelPool, n: usize, rng: &mut impl Rng) -> Vec<usize> {
    index::sample(rng, pool.end - pool.start, n)
        .into_iter()
        .map(|i| pool.start + i)
        .collect()
}

/// Draws `n` distinct classes with at least `min_samples` samples each.
fn draw_classes(dataset: &Dataset, n: usize, min_samples: usize, rng: &mut impl Rng) -> Result<Vec<usize>> {
    let eligible: Vec<usize> = (0..dataset.n_classes())
        .filter(|&c| dataset.samples(c).len() >= min_samples)
        .collect();
    if eligible.len() < n {
        return Err(Error::Sampling(format!(
            "need {n} classes with at least {min_samples} samples, dataset has {}",
            eligible.len()
        )));
    }
    Ok(index::sample(rng, eligible.len(), n)
        .into_iter()
        .map(|i| eligible[i])
        .collect())
}

/// Generates one episode; a pure function of `(dataset, spec)`.
///
/// Steps are assigned to the chosen classes i.i.d. uniformly, so a class
/// may fail to appear in short episodes. Samples within a class are drawn
/// without replacement.
pub fn sample_episode(dataset: &Dataset, spec: &EpisodeSpec) -> Result<Episode> {
    spec.validate()?;
    let mut rng = seeded_rng(spec.seed);
    let classes = draw_classes(dataset, spec.n_classes, 1, &mut rng)?;
    let label_ids = draw_label_ids(spec.label_pool(), spec.n_classes, &mut rng);
    let assignment: Vec<usize> = (0..spec.length).map(|_| rng.random_range(0..spec.n_classes)).collect();

    let mut counts = vec![0usize; spec.n_classes];
    for &k in &assignment {
        counts[k] += 1;
    }
    let mut orders = Vec::with_capacity(spec.n_classes);
    for (k, &c) in classes.iter().enumerate() {
        let available = dataset.samples(c).len();
        if counts[k] > available {
            return Err(Error::Sampling(format!(
                "class {c} has {available} samples but the episode needs {}",
                counts[k]
            )));
        }
        orders.push(index::sample(&mut rng, available, counts[k]).into_vec());
    }

    let mut seen = vec![false; spec.n_classes];
    let mut cursor = vec![0usize; spec.n_classes];
    let mut steps = Vec::with_capacity(spec.length);
    for &k in &assignment {
        let class = classes[k];
        let sample = dataset.samples(class)[orders[k][cursor[k]]].clone();
        cursor[k] += 1;
        let first = !seen[k];
        seen[k] = true;
        let labelled = match spec.labeling {
            Labeling::Full => true,
            Labeling::Seed => first,
            Labeling::None => false,
        };
        let label = if labelled {
            encode_label(label_ids[k], spec.scheme, spec.label_len)?
        } else {
            LabelVector::zero(spec.label_len)
        };
        steps.push(Step {
            sample,
            label,
            class,
            label_id: label_ids[k],
        });
    }
    Ok(Episode {
        steps,
        spec: spec.clone(),
    })
}

/// Support set of `N·k` labelled pairs plus one unlabelled query.
#[derive(Clone, Debug, PartialEq)]
pub struct NwayEpisode {
    pub support: Vec<Step>,
    pub query: Step,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NwaySpec {
    pub n_way: usize,
    pub k_shot: usize,
    pub scheme: LabelScheme,
    pub label_len: usize,
    #[serde(default)]
    pub pool: Option<LabelPool>,
    pub seed: u64,
}

pub fn nway_kshot_episode(dataset: &Dataset, spec: &NwaySpec) -> Result<NwayEpisode> {
    if spec.n_way == 0 || spec.k_shot == 0 {
        return Err(Error::Sampling("N-way k-shot needs N ≥ 1 and k ≥ 1".into()));
    }
    let as_episode = EpisodeSpec {
        n_classes: spec.n_way,
        length: 1,
        labeling: Labeling::Full,
        scheme: spec.scheme,
        label_len: spec.label_len,
        pool: spec.pool,
        seed: spec.seed,
    };
    as_episode.validate()?;
    let mut rng = seeded_rng(spec.seed);
    let classes = draw_classes(dataset, spec.n_way, spec.k_shot + 1, &mut rng)?;
    let label_ids = draw_label_ids(as_episode.label_pool(), spec.n_way, &mut rng);
    let query_k = rng.random_range(0..spec.n_way);

    let mut support = Vec::with_capacity(spec.n_way * spec.k_shot);
    let mut query = None;
    for (k, &class) in classes.iter().enumerate() {
        let take = if k == query_k { spec.k_shot + 1 } else { spec.k_shot };
        let picks = index::sample(&mut rng, dataset.samples(class).len(), take).into_vec();
        let label = encode_label(label_ids[k], spec.scheme, spec.label_len)?;
        for (j, &s) in picks.iter().enumerate() {
            let sample = dataset.samples(class)[s].clone();
            if j == spec.k_shot {
                query = Some(Step {
                    sample,
                    label: LabelVector::zero(spec.label_len),
                    class,
                    label_id: label_ids[k],
                });
            } else {
                support.push(Step {
                    sample,
                    label: label.clone(),
                    class,
                    label_id: label_ids[k],
                });
            }
        }
    }
    support.shuffle(&mut rng);
    Ok(NwayEpisode {
        support,
        query: query.expect("query class always draws k + 1 samples"),
    })
}
