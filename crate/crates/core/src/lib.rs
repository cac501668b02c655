//! Heterogeneous treatment effects with instrumental causal forests.
//!
//! The crate covers the whole estimation chain: ingesting an experiment's
//! data, growing honest forests, solving forest-weighted local moment
//! equations for conditional local average treatment effects, variance
//! estimation by little bags, doubly robust aggregation to average and
//! group effects, and learning treatment-assignment rules from doubly
//! robust scores. A linear two-stage least squares baseline and a
//! synthetic data generator with known ground truth round it out.

pub mod aggregate;
pub mod dataset;
pub mod error;
pub mod forest;
pub mod inference;
pub mod ivforest;
pub mod linear;
pub mod policy;
pub mod stats;
pub mod synth;

mod linalg;

pub use dataset::{ObservationFrame, Schema, SubgroupSpec};
pub use error::{Error, ErrorKind, Result};
pub use forest::{ForestModel, TreeParams};
pub use inference::LittleBagsConfig;
pub use ivforest::{fit_iv_forest, predict_ite, IteEstimate, IvForestModel};
