pub mod autodiff;
pub mod data;
pub mod error;
pub mod init;
pub mod io;
pub mod knowledge;
pub mod model;
pub mod rollout;
pub mod suppression;
pub mod tensor;
pub mod train;
pub mod vit;

pub use autodiff::{Gradients, ParamId, ParamStore, Tape, Var};
pub use error::{Error, Result};
pub use knowledge::{ForwardArtifacts, KnowledgeHead, LinearHead};
pub use model::{Mode, Model};
pub use rollout::{class_token_map, rollout, PatchAttentionMap, RolloutMap};
pub use suppression::{build_mask, suppressed_step, SuppressionMask};
pub use tensor::{Real, Tensor};
pub use vit::{AttentionStack, Encoder, EncoderOutput, KeyMask, ModelConfig};
pub use data::{generate_dataset, Dataset, DatasetSpec};
pub use train::{cosine_lr, evaluate, EpochMetrics, Evaluation, Sgd, TrainConfig, Trainer};
pub use io::RunConfig;
