//! Desk-scale paired-modality retrieval with a unified dual and cross
//! encoder: joint contrastive, matching, and masked-token training, online
//! hard-negative mining, and cross-to-dual score distillation, all on
//! synthetic token corpora small enough to train on one core.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod model;
pub mod negatives;
pub mod objectives;
pub mod tape;
pub mod teacher;
pub mod trainer;

pub use error::{Error, Result};
pub use model::{Binding, Model, ModelConfig};
pub use tape::{NodeId, Real, Tape, Tensor};
