//! Generator-regularized conditional GANs.
//!
//! A small tape-based autodiff engine drives MLP generators and discriminators. The
//! generator loss adds a penalty on how fast the output moves with the condition,
//! which keeps the conditional law close to Lipschitz in the label.

pub mod adam;
pub mod data;
pub mod error;
pub mod experiment;
pub mod gan;
pub mod gradcheck;
pub mod graph;
pub mod linalg;
pub mod metrics;
pub mod nn;
pub mod rng;
pub mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use data::{CircularSpec, GaussianSpec, LabeledDataset, MvnSpec};
pub use error::{Error, Result};
pub use experiment::{Checkpoint, ExperimentId, RunManifest, Variant};
pub use gan::{
    CondDiscriminator, CondGenerator, ConditionEncoding, ConditionalGenerator, GanConfig,
    LossKind, Perturbation, RegForm, TrainerState, TrainingLog,
};
pub use graph::{Graph, Var};
pub use metrics::{ExperimentReport, LipschitzAudit, MvnReport};
pub use nn::{Activation, HiddenLayer, MlpSpec, Mode, Network};
pub use tensor::Tensor;
