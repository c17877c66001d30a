use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::gradcheck::{gradient_check_piecewise, GradCheckReport, DEFAULT_STEP};
use crate::grid::{LayerGrid, Volume};
use crate::nn::{relu_backward, relu_in_place, Conv3x3, Neighbours};
use crate::optim::{minimize, TrainConfig, TrainReport};
use crate::serial::ModelRecord;

const KIND: &str = "mte";

/// Training pair for the monolithic baseline. A `None` target is an output
/// layer that is missing at that timestamp.
#[derive(Debug, Clone)]
pub struct MteSample {
    pub input: Volume,
    pub targets: Vec<Option<LayerGrid>>,
}

/// Single network mapping every input layer to every output layer jointly:
/// `conv3x3(N_i -> hidden) -> ReLU -> conv3x3(hidden -> N_o)`. Output
/// channel order follows the output node order.
#[derive(Debug, Clone, PartialEq)]
pub struct MteBaseline {
    inputs: usize,
    outputs: usize,
    hidden: usize,
    params: Vec<f64>,
}

struct Prepared {
    planes: Vec<f64>,
    targets: Vec<Option<(Vec<f64>, Vec<bool>, f64)>>,
}

impl MteBaseline {
    pub fn new(inputs: usize, outputs: usize, hidden: usize, seed: u64) -> Self {
        let n = Conv3x3::new(inputs, hidden).param_count() + Conv3x3::new(hidden, outputs).param_count();
        let mut m = Self {
            inputs,
            outputs,
            hidden,
            params: vec![0.0; n],
        };
        m.initialize(seed);
        m
    }

    fn layers(&self) -> (Conv3x3, Conv3x3) {
        (Conv3x3::new(self.inputs, self.hidden), Conv3x3::new(self.hidden, self.outputs))
    }

    fn initialize(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (c1, c2) = self.layers();
        let split = c1.param_count();
        c1.init(&mut rng, &mut self.params[..split]);
        c2.init(&mut rng, &mut self.params[split..]);
        let b1 = split - self.hidden;
        self.params[b1..split].iter_mut().for_each(|b| *b = 0.1);
    }

    pub fn parameters(&self) -> &[f64] {
        &self.params
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    fn prepare(&self, samples: &[MteSample]) -> Result<(Neighbours, Vec<Prepared>)> {
        let first = samples
            .first()
            .ok_or_else(|| Error::UndefinedObjective("no training samples".into()))?;
        let (w, h) = (first.input.width(), first.input.height());
        let terms = samples
            .iter()
            .flat_map(|s| s.targets.iter().flatten())
            .filter(|t| t.valid_count() > 0)
            .count();
        if terms == 0 {
            return Err(Error::UndefinedObjective("no valid target in any sample".into()));
        }
        let mut data = Vec::with_capacity(samples.len());
        for (i, s) in samples.iter().enumerate() {
            if s.input.channel_count() != self.inputs || s.targets.len() != self.outputs {
                return Err(Error::structural(format!("sample {i} does not match the MTE shape")));
            }
            if s.input.width() != w || s.input.height() != h {
                return Err(Error::structural(format!("sample {i} dimensions differ")));
            }
            let targets = s
                .targets
                .iter()
                .map(|t| {
                    t.as_ref().filter(|t| t.valid_count() > 0).map(|t| {
                        let scale = 2.0 / (terms as f64 * t.valid_count() as f64);
                        (t.values().to_vec(), t.mask().to_vec(), scale)
                    })
                })
                .collect();
            data.push(Prepared {
                planes: s.input.substituted_planes(),
                targets,
            });
        }
        Ok((Neighbours::new(w, h), data))
    }

    fn forward_raw(&self, params: &[f64], nb: &Neighbours, planes: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let (c1, c2) = self.layers();
        let split = c1.param_count();
        let mut hidden = c1.forward(nb, &params[..split], planes);
        relu_in_place(&mut hidden);
        let out = c2.forward(nb, &params[split..], &hidden);
        (hidden, out)
    }

    fn loss_and_grad(&self, params: &[f64], nb: &Neighbours, data: &[Prepared], grad: &mut [f64]) -> f64 {
        let (c1, c2) = self.layers();
        let split = c1.param_count();
        let cells = nb.cells();
        let mut loss = 0.0;
        let mut g_hidden = vec![0.0; self.hidden * cells];
        for d in data {
            let (hidden, out) = self.forward_raw(params, nb, &d.planes);
            let mut g_out = vec![0.0; self.outputs * cells];
            for (o, t) in d.targets.iter().enumerate() {
                let Some((target, mask, scale)) = t else { continue };
                for i in 0..cells {
                    if mask[i] {
                        let r = out[o * cells + i] - target[i];
                        loss += 0.5 * scale * r * r;
                        g_out[o * cells + i] = scale * r;
                    }
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

    /// Re-initializes from `config.seed` and minimizes the mean masked L2
    /// over all available `(sample, output)` targets.
    pub fn fit(&mut self, samples: &[MteSample], config: &TrainConfig) -> Result<TrainReport> {
        let (nb, data) = self.prepare(samples)?;
        self.initialize(config.seed);
        let mut params = self.params.clone();
        let this = self.clone();
        let report = minimize(&mut params, config, samples.len(), |p, g| this.loss_and_grad(p, &nb, &data, g))?;
        self.params = params;
        Ok(report)
    }

    /// One clamped layer per output node.
    pub fn predict(&self, input: &Volume) -> Result<Vec<LayerGrid>> {
        if input.channel_count() != self.inputs {
            return Err(Error::structural(format!(
                "MTE expects {} input channels, got {}",
                self.inputs,
                input.channel_count()
            )));
        }
        let nb = Neighbours::new(input.width(), input.height());
        let (_, out) = self.forward_raw(&self.params, &nb, &input.substituted_planes());
        let cells = nb.cells();
        (0..self.outputs)
            .map(|o| {
                let vals = out[o * cells..(o + 1) * cells].iter().map(|v| v.clamp(0.0, 1.0)).collect();
                LayerGrid::dense(input.width(), input.height(), vals)
            })
            .collect()
    }

    pub fn gradient_check(&self, probe: &[MteSample], seed: u64) -> Result<GradCheckReport> {
        let (nb, data) = self.prepare(probe)?;
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

    pub fn to_record(&self, channel_order: &[String]) -> ModelRecord {
        ModelRecord {
            kind: KIND.into(),
            hyperparams: vec![self.inputs as f64, self.outputs as f64, self.hidden as f64],
            channel_order: channel_order.to_vec(),
            params: self.params.clone(),
        }
    }

    pub fn from_record(record: &ModelRecord) -> Result<Self> {
        record.expect_kind(KIND)?;
        let [inputs, outputs, hidden] = record.hyperparams[..] else {
            return Err(Error::Config("mte record needs 3 hyperparameters".into()));
        };
        let mut m = Self::new(inputs as usize, outputs as usize, hidden as usize, 0);
        if record.params.len() != m.params.len() {
            return Err(Error::structural("mte parameter count mismatch"));
        }
        m.params = record.params.clone();
        Ok(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn samples(seed: u64) -> Vec<MteSample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..3)
            .map(|k| {
                let a = LayerGrid::from_fn(8, 6, |_, _| rng.random_range(0.0..1.0));
                let b = LayerGrid::from_fn(8, 6, |_, _| rng.random_range(0.0..1.0));
                let y0 = LayerGrid::from_fn(8, 6, |x, y| 0.5 * a.value(x, y) + 0.2 * b.value(x, y));
                let y1 = LayerGrid::from_fn(8, 6, |x, y| a.value(x, y) * b.value(x, y));
                let y1 = (k != 1).then_some(y1);
                MteSample {
                    input: Volume::new(vec![a, b]).unwrap(),
                    targets: vec![Some(y0), y1],
                }
            })
            .collect()
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let m = MteBaseline::new(2, 2, 6, 3);
        let r = m.gradient_check(&samples(1), 2).unwrap();
        assert!(r.max_relative_error < 1e-4, "{r:?}");
    }

    #[test]
    fn fit_improves_and_predicts_every_output() {
        let data = samples(2);
        let mut m = MteBaseline::new(2, 2, 6, 3);
        let report = m
            .fit(
                &data,
                &TrainConfig {
                    max_epochs: 40,
                    ..TrainConfig::default()
                },
            )
            .unwrap();
        assert!(report.final_loss < report.initial_loss());
        let preds = m.predict(&data[0].input).unwrap();
        assert_eq!(preds.len(), 2);
        assert!(preds.iter().all(|p| p.values().iter().all(|v| (0.0..=1.0).contains(v))));
        let back = MteBaseline::from_record(&m.to_record(&[])).unwrap();
        assert_eq!(back, m);
    }
}
