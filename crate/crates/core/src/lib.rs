//! Differentiable architecture search over a DAG of 1-D convolution and pooling
//! operations for text classification, with per-node discretization heads
//! trained by mutual-information maximization.
//!
//! The pipeline: [`text`] turns `label<TAB>text` corpora into fixed-length
//! examples, [`model::Classifier`] runs embeddings through a [`dag::SearchDag`]
//! of softmax-mixed [`ops`], [`trainer`] alternates weight and architecture
//! updates and retrains the derived architecture from scratch, and [`eval`]
//! scores and serializes the results.

pub mod autograd;
pub mod config;
pub mod dag;
pub mod discretization;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod model;
pub mod ops;
pub mod optim;
pub mod params;
pub mod rng;
pub mod synthetic;
pub mod text;
pub mod trainer;

pub use autograd::{Tape, Tensor, Var};
pub use config::{LossKind, TrainConfig};
pub use dag::{DerivedArchitecture, SearchDag};
pub use discretization::DiscretizationHead;
pub use error::{Error, Result};
pub use model::{BatchOutput, Classifier};
pub use ops::{OpFamily, OpKind, Operation};
pub use params::{ParamGroup, ParamId, ParamStore};
