//! Knowledge distillation for small transformer encoders: a tape-based
//! autodiff core, a BERT-style encoder, the distillation loss zoo, layer
//! matching, student initialization schemes, synthetic tasks and sizing.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod init;
pub mod losses;
pub mod matching;
pub mod model;
pub mod objective;
pub mod optim;
pub mod sizing;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use losses::{KnowledgeKind, LayerPair, ProjectionBank, ProjectionInit, RelationSource};
pub use matching::{build_plan, LayerPairPlan, Strategy};
pub use model::{FeatureTrace, HeadKind, ModelConfig, TransformerModel};
pub use objective::{DistillObjective, LossBreakdown, Targets, Term};
pub use optim::{AdamW, AdamWConfig, LinearSchedule};
pub use sizing::{configs_at_budget, Budget};
pub use tensor::{Activation, Tape, Tensor, Var};
pub use trainer::{distill, evaluate, train_supervised, DistillOutcome, TrainConfig, TrainReport};
