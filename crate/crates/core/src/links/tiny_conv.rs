use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{check_channels, usable_samples, LinkModel, Sample};
use crate::error::{Error, Result};
use crate::gradcheck::{gradient_check_piecewise, GradCheckReport, DEFAULT_STEP};
use crate::grid::{LayerGrid, Volume};
use crate::nn::{relu_backward, relu_in_place, Conv3x3, Neighbours};
use crate::optim::{minimize, TrainConfig, TrainReport};
use crate::serial::ModelRecord;

pub(super) const KIND: &str = "tiny-conv";

/// `conv3x3(C -> hidden) -> ReLU -> conv3x3(hidden -> 1)`, trained with
/// Adam on the masked L2 of the unclamped output. Predictions are clamped.
#[derive(Debug, Clone, PartialEq)]
pub struct TinyConvLink {
    channels: usize,
    hidden: usize,
    params: Vec<f64>,
}

pub(crate) struct Prepared {
    pub planes: Vec<f64>,
    pub target: Vec<f64>,
    pub mask: Vec<bool>,
    /// d(loss)/d(residual) factor: `2 / (samples * valid cells)`.
    pub scale: f64,
}

pub(crate) fn prepare(samples: &[&Sample]) -> Vec<Prepared> {
    let n = samples.len() as f64;
    samples
        .iter()
        .map(|s| Prepared {
            planes: s.input.substituted_planes(),
            target: s.target.values().to_vec(),
            mask: s.target.mask().to_vec(),
            scale: 2.0 / (n * s.target.valid_count() as f64),
        })
        .collect()
}

impl TinyConvLink {
    pub fn new(channels: usize, hidden: usize, seed: u64) -> Self {
        let mut link = Self {
            channels,
            hidden,
            params: vec![0.0; Conv3x3::new(channels, hidden).param_count() + Conv3x3::new(hidden, 1).param_count()],
        };
        link.initialize(seed);
        link
    }

    fn layers(&self) -> (Conv3x3, Conv3x3) {
        (Conv3x3::new(self.channels, self.hidden), Conv3x3::new(self.hidden, 1))
    }

    fn initialize(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (c1, c2) = self.layers();
        let split = c1.param_count();
        c1.init(&mut rng, &mut self.params[..split]);
        c2.init(&mut rng, &mut self.params[split..]);
        // small positive hidden biases keep units active at the start
        let b1 = split - self.hidden;
        self.params[b1..split].iter_mut().for_each(|b| *b = 0.1);
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn set_parameters(&mut self, params: Vec<f64>) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::structural("tiny-conv parameter count mismatch"));
        }
        self.params = params;
        Ok(())
    }

    fn forward_raw(&self, params: &[f64], nb: &Neighbours, planes: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let (c1, c2) = self.layers();
        let split = c1.param_count();
        let mut hidden = c1.forward(nb, &params[..split], planes);
        relu_in_place(&mut hidden);
        let out = c2.forward(nb, &params[split..], &hidden);
        (hidden, out)
    }

    pub(crate) fn loss_and_grad(&self, params: &[f64], nb: &Neighbours, data: &[Prepared], grad: &mut [f64]) -> f64 {
        let (c1, c2) = self.layers();
        let split = c1.param_count();
        let cells = nb.cells();
        let mut loss = 0.0;
        let mut g_hidden = vec![0.0; self.hidden * cells];
        for d in data {
            let (hidden, out) = self.forward_raw(params, nb, &d.planes);
            let mut g_out = vec![0.0; cells];
            for i in 0..cells {
                if d.mask[i] {
                    let r = out[i] - d.target[i];
                    loss += 0.5 * d.scale * r * r;
                    g_out[i] = d.scale * r;
                }
            }
            g_hidden.iter_mut().for_each(|g| *g = 0.0);
            let (g1, g2) = grad.split_at_mut(split);
            c2.backward(nb, &params[split..], &hidden, &g_out, g2, Some(&mut g_hidden));
            relu_backward(&hidden, &mut g_hidden);
            c1.backward(nb, &params[..split], &d.planes, &g_hidden, g1, None);
        }
        loss
    }

    /// Finite-difference check of the masked-L2 gradient on `probe`.
    pub fn gradient_check(&self, probe: &[Sample], seed: u64) -> Result<GradCheckReport> {
        let usable = usable_samples(probe, self.channels)?;
        let nb = Neighbours::new(usable[0].input.width(), usable[0].input.height());
        let data = prepare(&usable);
        let pattern = |p: &[f64]| -> Vec<bool> {
            data.iter()
                .flat_map(|d| self.forward_raw(p, &nb, &d.planes).0)
                .map(|h| h > 0.0)
                .collect()
        };
        Ok(gradient_check_piecewise(
            &self.params,
            |p, g| self.loss_and_grad(p, &nb, &data, g),
            |a, b| pattern(a) == pattern(b),
            DEFAULT_STEP,
            seed,
        ))
    }

    pub(super) fn from_record(record: &ModelRecord) -> Result<Self> {
        record.expect_kind(KIND)?;
        let [channels, hidden] = record.hyperparams[..] else {
            return Err(Error::Config("tiny-conv record needs 2 hyperparameters".into()));
        };
        let mut link = TinyConvLink::new(channels as usize, hidden as usize, 0);
        link.set_parameters(record.params.clone())?;
        Ok(link)
    }
}

impl LinkModel for TinyConvLink {
    fn kind(&self) -> &'static str {
        KIND
    }

    fn input_channels(&self) -> usize {
        self.channels
    }

    fn fit(&mut self, samples: &[Sample], config: &TrainConfig) -> Result<TrainReport> {
        let usable = usable_samples(samples, self.channels)?;
        self.initialize(config.seed);
        let nb = Neighbours::new(usable[0].input.width(), usable[0].input.height());
        let data = prepare(&usable);
        let mut params = self.params.clone();
        let this = self.clone();
        let report = minimize(&mut params, config, usable.len(), |p, g| {
            this.loss_and_grad(p, &nb, &data, g)
        })?;
        self.params = params;
        Ok(report)
    }

    fn predict(&self, input: &Volume) -> Result<LayerGrid> {
        check_channels(input, self.channels)?;
        let nb = Neighbours::new(input.width(), input.height());
        let (_, out) = self.forward_raw(&self.params, &nb, &input.substituted_planes());
        LayerGrid::dense(input.width(), input.height(), out.into_iter().map(|v| v.clamp(0.0, 1.0)).collect())
    }

    fn parameters(&self) -> &[f64] {
        &self.params
    }

    fn to_record(&self, channel_order: &[String]) -> ModelRecord {
        ModelRecord {
            kind: KIND.into(),
            hyperparams: vec![self.channels as f64, self.hidden as f64],
            channel_order: channel_order.to_vec(),
            params: self.params.clone(),
        }
    }
}
