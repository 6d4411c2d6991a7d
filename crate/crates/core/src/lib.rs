//! Attribute-conditioned layout generation: domain types, differentiable
//! wireframe rendering, design losses, the conditional generator and
//! two-branch discriminator, adversarial training, evaluation metrics and
//! the candidate-generation / retargeting pipeline.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod geometry;
pub mod layout;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod pipeline;
pub mod render;
pub mod training;

pub use error::{Error, Result};
pub use layout::{AspectClass, AttributeVector, Canvas, ClassVocab, Element, ElementClass, Extras, Geometry, Layout};
pub use metrics::MetricReport;
pub use model::{ModelCheckpoint, ModelConfig};
pub use pipeline::{CandidateSet, ElementSpec, PipelineConfig, RankOrder};
pub use training::TrainingConfig;
