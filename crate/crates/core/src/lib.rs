//! Explainer-predictor graph classification meta-trained on N-way K-shot episodes.
//!
//! The crate is organised bottom-up: [`tensor`] provides dense matrices with
//! reverse-mode differentiation, [`graphdata`] holds graphs, synthetic
//! generators and episode sampling, [`encoders`] the message-passing layers,
//! [`model`] the explainer/predictor pair, [`objective`] the losses,
//! [`metatrain`] the episodic training loop and [`evalkit`] the metrics.

#![allow(clippy::needless_range_loop)]

pub mod encoders;
pub mod evalkit;
pub mod graphdata;
pub mod metatrain;
pub mod model;
pub mod objective;
pub mod params;
pub mod tensor;

pub use encoders::EncoderKind;
pub use evalkit::{MetricError, MetricReport};
pub use graphdata::{
    DataError, Dataset, DatasetSplit, Episode, FeatureKind, Graph, Shot, SplitRole, SyntheticConfig,
};
pub use metatrain::{EvalSummary, LogRecord, MetaConfig, MetaError, OptimizerKind, TrainOutcome};
pub use model::{Checkpoint, ModelConfig, MseGnn, Phase};
pub use objective::{LossWeights, ObjectiveError};
pub use params::{ModelError, ParamTag, ParameterSet, TensorMap};
pub use tensor::{Tape, Tensor, TensorError, Var};
