//! Direct links: learnable maps from a multi-channel volume to one output
//! layer. Every edge and hyperedge owns one.
//!
//! Two reference learners implement [`LinkModel`]: a closed-form ridge
//! regression over a replicate-padded patch ([`LinearPatchLink`]) and a
//! two-layer 3x3 convolutional network trained by gradient descent
//! ([`TinyConvLink`]). [`MteBaseline`] is the monolithic all-inputs to
//! all-outputs comparison model.
//!
//! Shared conventions:
//! - invalid input cells are replaced by the channel's valid mean before
//!   any patch or convolution is read;
//! - the loss is the mean over samples of the masked L2 against the
//!   target's own mask;
//! - predictions are dense and clamped to `[0, 1]`.

mod linear;
mod mte;
mod tiny_conv;

use std::fmt::Debug;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{LayerGrid, Volume};
use crate::optim::{TrainConfig, TrainReport};
use crate::serial::ModelRecord;

pub use linear::LinearPatchLink;
pub use mte::{MteBaseline, MteSample};
pub use tiny_conv::TinyConvLink;

/// One training pair for a link.
#[derive(Debug, Clone)]
pub struct Sample {
    pub input: Volume,
    pub target: LayerGrid,
}

impl Sample {
    pub fn new(input: Volume, target: LayerGrid) -> Self {
        Self { input, target }
    }
}

pub trait LinkModel: Debug + Send + Sync {
    fn kind(&self) -> &'static str;

    fn input_channels(&self) -> usize;

    /// Fits the link from scratch; gradient learners re-initialize from
    /// `config.seed`.
    fn fit(&mut self, samples: &[Sample], config: &TrainConfig) -> Result<TrainReport>;

    fn predict(&self, input: &Volume) -> Result<LayerGrid>;

    fn parameters(&self) -> &[f64];

    fn to_record(&self, channel_order: &[String]) -> ModelRecord;
}

/// Which learner backs every link of a hypergraph.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LinkSpec {
    LinearPatch { patch_radius: usize, ridge_lambda: f64 },
    TinyConv { hidden: usize },
}

impl Default for LinkSpec {
    fn default() -> Self {
        LinkSpec::LinearPatch {
            patch_radius: 1,
            ridge_lambda: 1e-3,
        }
    }
}

impl LinkSpec {
    pub fn tiny_conv() -> Self {
        LinkSpec::TinyConv { hidden: 8 }
    }

    pub fn build(&self, channels: usize, seed: u64) -> Box<dyn LinkModel> {
        match *self {
            LinkSpec::LinearPatch {
                patch_radius,
                ridge_lambda,
            } => Box::new(LinearPatchLink::new(channels, patch_radius, ridge_lambda)),
            LinkSpec::TinyConv { hidden } => Box::new(TinyConvLink::new(channels, hidden, seed)),
        }
    }
}

/// Rebuilds a link from its serialized record.
pub fn link_from_record(record: &ModelRecord) -> Result<Box<dyn LinkModel>> {
    match record.kind.as_str() {
        linear::KIND => Ok(Box::new(LinearPatchLink::from_record(record)?)),
        tiny_conv::KIND => Ok(Box::new(TinyConvLink::from_record(record)?)),
        other => Err(Error::Config(format!("unknown link kind {other:?}"))),
    }
}

/// Checks sample consistency and returns the samples that carry at least
/// one valid target cell.
pub(crate) fn usable_samples<'a>(samples: &'a [Sample], channels: usize) -> Result<Vec<&'a Sample>> {
    if samples.is_empty() {
        return Err(Error::UndefinedObjective("no training samples".into()));
    }
    let (w, h) = (samples[0].input.width(), samples[0].input.height());
    for (i, s) in samples.iter().enumerate() {
        if s.input.channel_count() != channels {
            return Err(Error::structural(format!(
                "sample {i} has {} channels, link expects {channels}",
                s.input.channel_count()
            )));
        }
        if s.input.width() != w || s.input.height() != h || s.target.width() != w || s.target.height() != h {
            return Err(Error::structural(format!("sample {i} dimensions differ")));
        }
    }
    let usable: Vec<&Sample> = samples.iter().filter(|s| s.target.valid_count() > 0).collect();
    if usable.is_empty() {
        return Err(Error::UndefinedObjective("every training target is entirely invalid".into()));
    }
    Ok(usable)
}

pub(crate) fn check_channels(input: &Volume, channels: usize) -> Result<()> {
    if input.channel_count() != channels {
        return Err(Error::structural(format!(
            "input has {} channels, link expects {channels}",
            input.channel_count()
        )));
    }
    Ok(())
}

/// Mean over samples of the masked L2 of the link's predictions.
pub fn mean_masked_l2(model: &dyn LinkModel, samples: &[Sample]) -> Result<f64> {
    let mut total = 0.0;
    let mut n = 0usize;
    for s in samples.iter().filter(|s| s.target.valid_count() > 0) {
        total += crate::grid::masked_l2(&model.predict(&s.input)?, &s.target)?;
        n += 1;
    }
    if n == 0 {
        return Err(Error::UndefinedMetric("no sample with valid targets".into()));
    }
    Ok(total / n as f64)
}
