//! Few-shot concept learning with an episodic slot memory.
//!
//! Samples are embedded, routed into memory slots by a two-channel
//! attention (content distance, or a learned comparison of label vectors),
//! and the embedder is trained with policy gradients to form class-pure
//! clusters.

pub mod array;
pub mod attention;
pub mod config;
pub mod data;
pub mod embedder;
pub mod episode;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod gru;
pub(crate) mod kernels;
pub mod label;
pub mod memory;
pub mod model;
pub mod params;
pub mod pipeline;
pub mod tape;
pub mod trainer;

pub use array::Array;
pub use config::{DataSource, EvalConfig, RunConfig, Task};
pub use embedder::EmbedderConfig;
pub use episode::{Dataset, Episode, EpisodeSpec, LabelPool, Labeling, NwaySpec};
pub use error::{Error, Result};
pub use label::{encode_label, LabelScheme, LabelVector};
pub use memory::Memory;
pub use model::{Model, ModelConfig};
pub use params::{Gradients, ParamSet};
pub use pipeline::Protocol;
pub use tape::{Node, Tape};
pub use trainer::{AdamConfig, CurriculumStage, RewardConfig, TrainConfig};
