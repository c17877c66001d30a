//! Multi-task hypergraph for semi-supervised learning over raster task
//! layers.
//!
//! Input and output layers are nodes; edges and hyperedges are learnable
//! links between them. Per output node, the predictions of every pathway
//! form a candidate pool that a selection-gated ensemble combines into a
//! teacher output. Teacher outputs on unlabeled timestamps become
//! pseudolabels for retraining every link in the next iteration.

pub mod cli;
pub mod dataset;
pub mod engine;
pub mod ensembles;
pub mod error;
pub mod gradcheck;
pub mod grid;
pub mod hypergraph;
pub mod links;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod seed;
pub mod serial;
pub mod synth;

pub use error::{Error, Result};
