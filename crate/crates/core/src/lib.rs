pub mod config;
pub mod episodes;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod nets;
pub mod plot;
pub mod selfcheck;
pub mod taft;
pub mod tensor;
pub mod train;

pub use config::{EvalConfig, ExperimentConfig, ModelConfig, TrainConfig, TransformMode, WorldConfig};
pub use episodes::{sample_episode, ClassCatalog, Episode, LabelMap, Phase, SceneSource, ShapeWorld};
pub use error::{Error, Result};
pub use eval::{MetricsReport, StabilityTrace};
pub use nets::{Checkpoint, Model, ParamGroup};
pub use tensor::{Graph, Tensor, Var};
pub use train::{train_run, LossBundle, TrainOptions, TrainOutcome};
