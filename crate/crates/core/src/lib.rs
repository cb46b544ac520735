//! Semi-supervised teacher-student training over volumetric slice stacks.
//!
//! A teacher trained on sparsely annotated stacks supervises a student on
//! every slice through knowledge distillation, and pseudo-label filtering
//! decides which unannotated or weakly labelled slices enter training.
//!
//! The numeric core ([`model`], [`losses`], [`eval`], [`train`]) is generic
//! over [`Scalar`]; the aliases below fix the precision used by the harness.

pub mod datamodel;
pub mod error;
pub mod eval;
pub mod harness;
pub mod image;
pub mod losses;
pub mod model;
pub mod sampling;
pub mod scalar;
pub mod seed;
pub mod synthgen;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Training precision.
pub type Real = f32;

pub type Model = model::DualHeadModel<Real>;
pub type Model64 = model::DualHeadModel<f64>;
pub type Example = train::TrainingExample<Real>;
pub type Breakdown = losses::LossBreakdown<Real>;
pub type Outcome = train::TrainOutcome<Real>;

pub use datamodel::{AnnotationLevel, Dataset, Domain, Split, StackRecord, Subgroup};
pub use eval::EvalResult;
pub use losses::LossConfig;
pub use model::{ArchDescriptor, OptimizerConfig};
pub use sampling::{PseudoLabelCache, Setting, SliceSelection};
pub use synthgen::SynthConfig;
