//! Intrusion detection for CAN bus traffic by fusing raw frame fields with
//! learned payload prediction errors and windowed ID statistics.

// Negated float comparisons are used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod codec;
pub mod error;
pub mod fusion;
pub mod gaopt;
pub mod ingest;
pub mod matrix;
pub mod ml;
pub mod pipeline;
pub mod spatial;
pub mod stats;
pub mod synth;
pub mod temporal;

pub use error::{Error, Result};
pub use fusion::{apply_mask, assemble, Column, FeatureMask, FeatureMatrix};
pub use gaopt::{Chromosome, EvalContext, GaConfig, GaResult, Subspace};
pub use ingest::{CanFrame, Label, Normalizer, Split, SplitSpec};
pub use matrix::Matrix;
pub use ml::{EvalReport, ForestParams, Model, ModelSpec, TreeParams};
pub use pipeline::{FittedClassifier, PipelineConfig};
pub use spatial::{PredictorModel, TrainConfig};
pub use stats::{FiveByTwoResult, Metric};
pub use synth::{AttackKind, AttackSpec, SynthConfig, TrafficProfile};
