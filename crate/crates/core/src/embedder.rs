//! The embedding function mapping a raw sample to its hidden vector.
//!
//! Three architectures share one interface:
//!
//! * `cnn`: two conv-conv-batchnorm-relu-pool modules followed by
//!   FC → relu → batchnorm → FC. The full profile (128/256 filters, FC 300)
//!   targets 28×28 glyphs; a reduced profile exists for fast gradient checks.
//! * `mlp`: fully connected layers with relu between them.
//! * `identity`: the flattened input, with no parameters.
//!
//! All parameter names live under `embedder.`.

use serde::{Deserialize, Serialize};

use crate::array::Array;
use crate::error::{Error, Result};
use crate::label::LabelVector;
use crate::params::{glorot_uniform, seeded_rng, Bindings, ParamSet, SeededRng};
use crate::tape::{BatchStats, BnMode, Node, Tape};

pub const PREFIX: &str = "embedder";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EmbedderConfig {
    Cnn {
        /// Side length of the square single-channel input.
        side: usize,
        /// Filter counts of the two convolutional modules.
        filters: [usize; 2],
        /// Width of both fully connected layers (the embedding length).
        hidden: usize,
    },
    Mlp {
        input_dim: usize,
        /// Output widths of each layer; the last one is the embedding length.
        widths: Vec<usize>,
    },
    Identity {
        input_shape: Vec<usize>,
    },
}

impl EmbedderConfig {
    /// The 28×28 glyph network: 128/256 filters, FC 300.
    pub fn omniglot() -> Self {
        EmbedderConfig::Cnn {
            side: 28,
            filters: [128, 256],
            hidden: 300,
        }
    }

    /// Same topology at 8×8 with 8/16 filters and FC 32.
    pub fn cnn_reduced() -> Self {
        EmbedderConfig::Cnn {
            side: 8,
            filters: [8, 16],
            hidden: 32,
        }
    }

    pub fn input_shape(&self) -> Vec<usize> {
        match self {
            EmbedderConfig::Cnn { side, .. } => vec![1, *side, *side],
            EmbedderConfig::Mlp { input_dim, .. } => vec![*input_dim],
            EmbedderConfig::Identity { input_shape } => input_shape.clone(),
        }
    }

    /// Embedding length `l_hidden`.
    pub fn hidden_size(&self) -> usize {
        match self {
            EmbedderConfig::Cnn { hidden, .. } => *hidden,
            EmbedderConfig::Mlp { widths, .. } => widths.last().copied().unwrap_or(0),
            EmbedderConfig::Identity { input_shape } => input_shape.iter().product(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            EmbedderConfig::Cnn { side, filters, hidden } => {
                if *side < 4 || side % 4 != 0 {
                    return Err(Error::Config(format!("cnn input side must be a positive multiple of 4, got {side}")));
                }
                if filters.contains(&0) || *hidden == 0 {
                    return Err(Error::Config("cnn filter counts and hidden size must be positive".into()));
                }
            }
            EmbedderConfig::Mlp { input_dim, widths } => {
                if *input_dim == 0 || widths.is_empty() || widths.contains(&0) {
                    return Err(Error::Config("mlp needs a positive input size and non-empty positive widths".into()));
                }
            }
            EmbedderConfig::Identity { input_shape } => {
                if input_shape.is_empty() || input_shape.contains(&0) {
                    return Err(Error::Config(format!("identity input shape {input_shape:?} is invalid")));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// A hidden vector `h` for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Embedding {
    pub vector: Array,
}

fn name(suffix: &str) -> String {
    format!("{PREFIX}.{suffix}")
}

fn insert_fc(p: &mut ParamSet, layer: &str, fan_in: usize, fan_out: usize, rng: &mut SeededRng) -> Result<()> {
    p.insert(name(&format!("{layer}.w")), glorot_uniform(&[fan_in, fan_out], fan_in, fan_out, rng), true)?;
    p.insert(name(&format!("{layer}.b")), Array::zeros(&[fan_out]), true)
}

fn insert_conv(p: &mut ParamSet, layer: &str, c_in: usize, c_out: usize, rng: &mut SeededRng) -> Result<()> {
    let k = glorot_uniform(&[c_out, c_in, 3, 3], c_in * 9, c_out * 9, rng);
    p.insert(name(&format!("{layer}.k")), k, true)?;
    p.insert(name(&format!("{layer}.b")), Array::zeros(&[c_out]), true)
}

fn insert_bn(p: &mut ParamSet, layer: &str, features: usize) -> Result<()> {
    p.insert(name(&format!("{layer}.gamma")), Array::full(&[features], 1.0), true)?;
    p.insert(name(&format!("{layer}.beta")), Array::zeros(&[features]), true)?;
    p.insert(name(&format!("{layer}.mean")), Array::zeros(&[features]), false)?;
    p.insert(name(&format!("{layer}.var")), Array::full(&[features], 1.0), false)
}

/// Instantiates the embedder's parameters.
pub fn build_embedder(config: &EmbedderConfig, seed: u64) -> Result<ParamSet> {
    config.validate()?;
    let mut rng = seeded_rng(seed);
    let mut p = ParamSet::new(seed);
    match config {
        EmbedderConfig::Cnn { side, filters, hidden } => {
            let [f1, f2] = *filters;
            insert_conv(&mut p, "conv1", 1, f1, &mut rng)?;
            insert_conv(&mut p, "conv2", f1, f1, &mut rng)?;
            insert_bn(&mut p, "bn1", f1)?;
            insert_conv(&mut p, "conv3", f1, f2, &mut rng)?;
            insert_conv(&mut p, "conv4", f2, f2, &mut rng)?;
            insert_bn(&mut p, "bn2", f2)?;
            let flat = f2 * (side / 4) * (side / 4);
            insert_fc(&mut p, "fc1", flat, *hidden, &mut rng)?;
            insert_bn(&mut p, "bn3", *hidden)?;
            insert_fc(&mut p, "fc2", *hidden, *hidden, &mut rng)?;
        }
        EmbedderConfig::Mlp { input_dim, widths } => {
            let mut fan_in = *input_dim;
            for (i, &w) in widths.iter().enumerate() {
                insert_fc(&mut p, &format!("fc{}", i + 1), fan_in, w, &mut rng)?;
                fan_in = w;
            }
        }
        EmbedderConfig::Identity { .. } => {}
    }
    Ok(p)
}

/// Result of a batched forward pass.
pub struct Forward {
    /// `[B × l_hidden]`
    pub embeddings: Node,
    /// Batch statistics per batchnorm layer (train mode only), keyed by the
    /// layer prefix, e.g. `embedder.bn1`.
    pub bn_updates: Vec<(String, BatchStats)>,
}

/// Stacks samples of the configured input shape into one `[B × ...]` array.
pub fn stack_inputs(config: &EmbedderConfig, samples: &[&Array]) -> Result<Array> {
    let shape = config.input_shape();
    let per: usize = shape.iter().product();
    let mut data = Vec::with_capacity(per * samples.len());
    for s in samples {
        if s.len() != per {
            return Err(Error::shapes("embed", &shape, s.shape()));
        }
        data.extend_from_slice(s.data());
    }
    let mut full = vec![samples.len()];
    full.extend(shape);
    Array::new(full, data)
}

/// Embeds a batch `[B × input_shape]` on `tape`.
pub fn embed_batch<'a>(
    tape: &mut Tape<'a>,
    config: &EmbedderConfig,
    params: &ParamSet,
    bindings: &Bindings,
    batch: Array,
    mode: Mode,
) -> Result<Forward> {
    let input_shape = config.input_shape();
    if batch.rank() != input_shape.len() + 1 || batch.shape()[1..] != input_shape[..] {
        return Err(Error::dim(
            "embed",
            format!("batch {:?} does not match input shape {input_shape:?}", batch.shape()),
        ));
    }
    let x = tape.constant(batch);
    embed_node(tape, config, params, bindings, x, mode)
}

/// Embeds a batch that is already a node on `tape`, so the input itself can
/// receive gradients.
pub fn embed_node<'a>(
    tape: &mut Tape<'a>,
    config: &EmbedderConfig,
    params: &ParamSet,
    bindings: &Bindings,
    x: Node,
    mode: Mode,
) -> Result<Forward> {
    let input_shape = config.input_shape();
    let shape = tape.shape(x);
    if shape.len() != input_shape.len() + 1 || shape[1..] != input_shape[..] {
        return Err(Error::dim(
            "embed",
            format!("batch {shape:?} does not match input shape {input_shape:?}"),
        ));
    }
    let b = shape[0];
    let mut bn_updates = Vec::new();
    let mut bn = |tape: &mut Tape<'a>, input: Node, layer: &str| -> Result<Node> {
        let prefix = name(layer);
        let gamma = bindings.get(&format!("{prefix}.gamma"))?;
        let beta = bindings.get(&format!("{prefix}.beta"))?;
        let bn_mode = match mode {
            Mode::Train => BnMode::Train,
            Mode::Eval => BnMode::Eval {
                mean: params.get(&format!("{prefix}.mean"))?,
                var: params.get(&format!("{prefix}.var"))?,
            },
        };
        let (out, stats) = tape.batchnorm(input, gamma, beta, bn_mode)?;
        if let Some(stats) = stats {
            bn_updates.push((prefix, stats));
        }
        Ok(out)
    };
    let fc = |tape: &mut Tape<'a>, input: Node, layer: &str| -> Result<Node> {
        let w = bindings.get(&name(&format!("{layer}.w")))?;
        let bias = bindings.get(&name(&format!("{layer}.b")))?;
        let xw = tape.matmul(input, w)?;
        tape.add_row(xw, bias)
    };
    let conv = |tape: &mut Tape<'a>, input: Node, layer: &str| -> Result<Node> {
        let k = bindings.get(&name(&format!("{layer}.k")))?;
        let bias = bindings.get(&name(&format!("{layer}.b")))?;
        tape.conv3x3(input, k, bias)
    };

    let embeddings = match config {
        EmbedderConfig::Cnn { .. } => {
            let c1 = conv(tape, x, "conv1")?;
            let c2 = conv(tape, c1, "conv2")?;
            let n1 = bn(tape, c2, "bn1")?;
            let r1 = tape.relu(n1);
            let p1 = tape.maxpool2(r1)?;
            let c3 = conv(tape, p1, "conv3")?;
            let c4 = conv(tape, c3, "conv4")?;
            let n2 = bn(tape, c4, "bn2")?;
            let r2 = tape.relu(n2);
            let p2 = tape.maxpool2(r2)?;
            let flat_len: usize = tape.shape(p2)[1..].iter().product();
            let flat = tape.reshape(p2, &[b, flat_len])?;
            let f1 = fc(tape, flat, "fc1")?;
            let r3 = tape.relu(f1);
            let n3 = bn(tape, r3, "bn3")?;
            fc(tape, n3, "fc2")?
        }
        EmbedderConfig::Mlp { widths, .. } => {
            let mut h = x;
            for i in 0..widths.len() {
                h = fc(tape, h, &format!("fc{}", i + 1))?;
                if i + 1 < widths.len() {
                    h = tape.relu(h);
                }
            }
            h
        }
        EmbedderConfig::Identity { .. } => {
            let per: usize = input_shape.iter().product();
            tape.reshape(x, &[b, per])?
        }
    };
    Ok(Forward {
        embeddings,
        bn_updates,
    })
}

/// Applies train-mode batch statistics to the running estimates in `params`.
pub fn apply_bn_updates(params: &mut ParamSet, updates: &[(String, BatchStats)]) -> Result<()> {
    for (prefix, stats) in updates {
        let mut mean = params.get(&format!("{prefix}.mean"))?.clone();
        let mut var = params.get(&format!("{prefix}.var"))?.clone();
        stats.fold_into(&mut mean, &mut var);
        *params.get_mut(&format!("{prefix}.mean"))? = mean;
        *params.get_mut(&format!("{prefix}.var"))? = var;
    }
    Ok(())
}

/// Eval-mode embedding of a single sample.
pub fn embed(config: &EmbedderConfig, params: &ParamSet, x: &Array) -> Result<Embedding> {
    let batch = stack_inputs(config, &[x])?;
    let mut tape = Tape::new();
    let bindings = params.bind(&mut tape);
    let fwd = embed_batch(&mut tape, config, params, &bindings, batch, Mode::Eval)?;
    let vector = tape.value(fwd.embeddings).reshaped(&[config.hidden_size()])?;
    Ok(Embedding { vector })
}

/// Pairs a sample's embedding with its label vector. The two halves stay
/// separate so the attention can treat them as distinct channels.
pub fn embed_with_label(
    config: &EmbedderConfig,
    params: &ParamSet,
    x: &Array,
    y: &LabelVector,
    label_len: usize,
) -> Result<(Embedding, LabelVector)> {
    if y.len() != label_len {
        return Err(Error::dim(
            "embed_with_label",
            format!("label vector has length {}, expected {label_len}", y.len()),
        ));
    }
    Ok((embed(config, params, x)?, y.clone()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::label::{encode_label, LabelScheme};

    #[test]
    fn identity_passes_through() {
        let cfg = EmbedderConfig::Identity { input_shape: vec![3] };
        let p = build_embedder(&cfg, 0).unwrap();
        assert!(p.is_empty());
        let x = Array::vector(vec![1.0, 0.0, 0.0]).unwrap();
        assert_eq!(embed(&cfg, &p, &x).unwrap().vector, x);

        let grid = Array::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let cfg = EmbedderConfig::Identity { input_shape: vec![2, 2] };
        assert_eq!(embed(&cfg, &p, &grid).unwrap().vector.data(), grid.data());
    }

    #[test]
    fn mlp_shapes_and_parameter_count() {
        let cfg = EmbedderConfig::Mlp { input_dim: 4, widths: vec![16, 8] };
        let p = build_embedder(&cfg, 1).unwrap();
        assert_eq!(p.trainable_count(), 4 * 16 + 16 + 16 * 8 + 8);
        let x = Array::vector(vec![0.1, -0.2, 0.3, 0.4]).unwrap();
        let e = embed(&cfg, &p, &x).unwrap();
        assert_eq!(e.vector.shape(), &[8]);
        assert_eq!(e, embed(&cfg, &p, &x).unwrap());
        assert!(embed(&cfg, &p, &Array::vector(vec![1.0; 5]).unwrap()).is_err());
    }

    #[test]
    fn cnn_validation() {
        let bad = EmbedderConfig::Cnn { side: 30, filters: [4, 4], hidden: 8 };
        assert!(matches!(build_embedder(&bad, 0), Err(Error::Config(_))));
    }

    #[test]
    fn reduced_cnn_eval_is_deterministic() {
        let cfg = EmbedderConfig::cnn_reduced();
        let p = build_embedder(&cfg, 2).unwrap();
        let x = Array::new(vec![1, 8, 8], (0..64).map(|i| (i % 7) as f64 / 7.0).collect()).unwrap();
        let a = embed(&cfg, &p, &x).unwrap();
        assert_eq!(a.vector.shape(), &[32]);
        assert_eq!(a, embed(&cfg, &p, &x).unwrap());
    }

    #[test]
    fn batchnorm_stats_only_move_in_train_mode() {
        let cfg = EmbedderConfig::cnn_reduced();
        let mut p = build_embedder(&cfg, 3).unwrap();
        let xs: Vec<Array> = (0..3)
            .map(|k| Array::new(vec![1, 8, 8], (0..64).map(|i| ((i + k) % 5) as f64).collect()).unwrap())
            .collect();
        let refs: Vec<&Array> = xs.iter().collect();
        let before = p.clone();
        embed(&cfg, &p, &xs[0]).unwrap();
        assert_eq!(p, before);

        let updates = {
            let mut tape = Tape::new();
            let b = p.bind(&mut tape);
            let batch = stack_inputs(&cfg, &refs).unwrap();
            embed_batch(&mut tape, &cfg, &p, &b, batch, Mode::Train).unwrap().bn_updates
        };
        assert_eq!(updates.len(), 3);
        apply_bn_updates(&mut p, &updates).unwrap();
        assert_ne!(p.get("embedder.bn1.mean").unwrap(), before.get("embedder.bn1.mean").unwrap());
    }

    #[test]
    fn with_label_pairs() {
        let cfg = EmbedderConfig::Identity { input_shape: vec![1] };
        let p = build_embedder(&cfg, 0).unwrap();
        let x = Array::vector(vec![2.0]).unwrap();
        let y = encode_label(0, LabelScheme::OneHot, 2).unwrap();
        let (h, back) = embed_with_label(&cfg, &p, &x, &y, 2).unwrap();
        assert_eq!(h.vector.data(), &[2.0]);
        assert_eq!(back.values().data(), &[1.0, 0.0]);

        let zero = LabelVector::zero(2);
        let (_, back) = embed_with_label(&cfg, &p, &x, &zero, 2).unwrap();
        assert!(back.is_zero());
        assert!(embed_with_label(&cfg, &p, &x, &zero, 3).is_err());
    }
}
