//! Hierarchical multi-label classification of chest radiographs over a
//! concept taxonomy.
//!
//! The pipeline: parse a [`taxonomy`], turn report labels into
//! ancestor-closed training targets ([`labels`]), preprocess radiographs
//! ([`imaging`]), split patients and generate synthetic data ([`dataset`],
//! [`synth`]), train a convolutional multi-label classifier ([`model`]),
//! evaluate per-node ROC/AUC ([`metrics`]) and explain predictions with
//! gradient-weighted class activation maps ([`explain`]).

pub mod dataset;
pub mod error;
pub mod explain;
pub mod imaging;
pub mod labels;
pub mod metrics;
pub mod model;
pub mod plot;
pub mod predictions;
pub mod synth;
pub mod taxonomy;

pub use error::{Error, Result};
