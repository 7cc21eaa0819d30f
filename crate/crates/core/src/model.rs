//! An embedder plus label-attention parameters, as one checkpointable unit.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::array::Array;
use crate::attention::{build_att_y, DEFAULT_HIDDEN};
use crate::embedder::{build_embedder, embed_batch, stack_inputs, EmbedderConfig, Mode};
use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::tape::Tape;

fn default_att_hidden() -> usize {
    DEFAULT_HIDDEN
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub embedder: EmbedderConfig,
    /// GRU hidden size of the label attention.
    #[serde(default = "default_att_hidden")]
    pub att_hidden: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    /// `embedder.*` and `att_y.*` entries.
    pub params: ParamSet,
}

impl Model {
    pub fn build(config: ModelConfig, seed: u64) -> Result<Self> {
        config.embedder.validate()?;
        let mut params = build_embedder(&config.embedder, seed)?;
        params.extend(build_att_y(config.att_hidden, seed.wrapping_add(1))?)?;
        Ok(Model { config, params })
    }

    pub fn hidden(&self) -> usize {
        self.config.embedder.hidden_size()
    }

    /// Eval-mode embeddings, one `[l_hidden]` array per sample.
    pub fn embed_all(&self, samples: &[&Array]) -> Result<Vec<Array>> {
        if samples.is_empty() {
            return Ok(Vec::new());
        }
        let batch = stack_inputs(&self.config.embedder, samples)?;
        let mut tape = Tape::new();
        let bindings = self.params.bind(&mut tape);
        let fwd = embed_batch(&mut tape, &self.config.embedder, &self.params, &bindings, batch, Mode::Eval)?;
        let out = tape.value(fwd.embeddings);
        let d = self.hidden();
        (0..samples.len())
            .map(|i| Array::new(vec![d], out.row(i).to_vec()))
            .collect()
    }

    pub fn embed(&self, x: &Array) -> Result<Array> {
        Ok(self.embed_all(&[x])?.remove(0))
    }

    /// Writes the checkpoint container with the model config as metadata.
    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = serde_json::to_string(&self.config)?;
        self.params.save(path, &meta)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (params, meta) = ParamSet::load(path)?;
        let config: ModelConfig = serde_json::from_str(&meta).map_err(|e| Error::Checkpoint(format!(
            "{}: metadata is not a model description ({e})",
            path.display()
        )))?;
        let expected = Model::build(config.clone(), params.seed())?;
        for (name, p) in expected.params.iter() {
            let got = params
                .get(name)
                .map_err(|_| Error::Checkpoint(format!("{}: missing parameter `{name}`", path.display())))?;
            if got.shape() != p.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "{}: parameter `{name}` has shape {:?}, expected {:?}",
                    path.display(),
                    got.shape(),
                    p.value.shape()
                )));
            }
        }
        Ok(Model { config, params })
    }
}
