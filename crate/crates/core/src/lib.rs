//! Training laboratory for attribute-aware face embeddings.
//!
//! A shared encoder maps inputs to an identity embedding supervised three
//! ways: a margin-based cosine softmax over identity prototypes, direct
//! prediction heads for selected attribute groups, and adversarial heads
//! behind a gradient reversal layer for groups whose information should be
//! driven out of the embedding. Synthetic identity/attribute data with a
//! controllable attribute–identity correlation makes the resulting effects
//! measurable at desk scale: verification protocols, linear probes, and
//! attribute-only predictiveness analyses live in [`eval`].

pub mod autodiff;
pub mod data;
pub mod error;
pub mod eval;
pub mod losses;
pub mod model;
pub mod rng;
pub mod trainer;

pub use autodiff::{Parameter, Precision, Tape, Tensor, TensorId};
pub use data::{AttributeSpec, DatasetConfig, Sample, Split, SyntheticDataset};
pub use error::{Error, Result};
pub use eval::{FoldReport, Table, VerificationPair};
pub use losses::LossWeights;
pub use model::{EncoderConfig, HeadMode, MultiTaskModel};
pub use trainer::{GroupMode, GroupModeAssignment, ModeSpec, TrainConfig, TrainedModel};
