use nalgebra::{DMatrix, DVector};

use super::{check_channels, usable_samples, LinkModel, Sample};
use crate::error::{Error, Result};
use crate::grid::{masked_l2, LayerGrid, Volume};
use crate::nn::patch_indices;
use crate::optim::{TrainConfig, TrainReport};
use crate::serial::ModelRecord;

pub(super) const KIND: &str = "linear-patch";

/// Affine map of the replicate-padded `(2r+1)^2` patch of every channel,
/// fitted in closed form by ridge regression.
///
/// The objective weights each sample so that all samples count equally:
/// `sum_s (n_mean / n_s) * sum_{valid i} (phi_i . w - y_i)^2 + lambda * |w|^2`,
/// where `n_s` is the sample's valid-target count and the bias is not
/// penalized. Up to the constant `n_mean`, the data term is the mean masked
/// L2 over samples.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearPatchLink {
    channels: usize,
    patch_radius: usize,
    ridge_lambda: f64,
    /// `[channel][patch tap]` coefficients followed by the bias.
    weights: Vec<f64>,
}

impl LinearPatchLink {
    pub fn new(channels: usize, patch_radius: usize, ridge_lambda: f64) -> Self {
        let taps = (2 * patch_radius + 1).pow(2);
        Self {
            channels,
            patch_radius,
            ridge_lambda,
            weights: vec![0.0; channels * taps + 1],
        }
    }

    pub fn taps(&self) -> usize {
        (2 * self.patch_radius + 1).pow(2)
    }

    pub fn feature_count(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn set_weights(&mut self, weights: Vec<f64>) -> Result<()> {
        if weights.len() != self.weights.len() {
            return Err(Error::structural(format!(
                "expected {} weights, got {}",
                self.weights.len(),
                weights.len()
            )));
        }
        self.weights = weights;
        Ok(())
    }

    pub fn ridge_lambda(&self) -> f64 {
        self.ridge_lambda
    }

    pub fn patch_radius(&self) -> usize {
        self.patch_radius
    }

    /// Feature rows (one per cell, bias last) for a volume.
    pub fn design_rows(&self, input: &Volume) -> Vec<Vec<f64>> {
        let planes = input.substituted_planes();
        let cells = input.width() * input.height();
        let patches = patch_indices(input.width(), input.height(), self.patch_radius);
        patches
            .iter()
            .map(|taps| {
                let mut row = Vec::with_capacity(self.feature_count());
                for c in 0..self.channels {
                    let plane = &planes[c * cells..(c + 1) * cells];
                    row.extend(taps.iter().map(|&t| plane[t]));
                }
                row.push(1.0);
                row
            })
            .collect()
    }

    fn raw_predictions(&self, input: &Volume) -> Vec<f64> {
        let planes = input.substituted_planes();
        let cells = input.width() * input.height();
        let patches = patch_indices(input.width(), input.height(), self.patch_radius);
        let taps = self.taps();
        let bias = self.weights[self.weights.len() - 1];
        patches
            .iter()
            .map(|patch| {
                let mut acc = bias;
                for c in 0..self.channels {
                    let plane = &planes[c * cells..(c + 1) * cells];
                    let w = &self.weights[c * taps..(c + 1) * taps];
                    for (k, &t) in patch.iter().enumerate() {
                        acc += w[k] * plane[t];
                    }
                }
                acc
            })
            .collect()
    }

    pub(super) fn from_record(record: &ModelRecord) -> Result<Self> {
        record.expect_kind(KIND)?;
        let [channels, radius, lambda] = record.hyperparams[..] else {
            return Err(Error::Config("linear-patch record needs 3 hyperparameters".into()));
        };
        let mut link = LinearPatchLink::new(channels as usize, radius as usize, lambda);
        link.set_weights(record.params.clone())?;
        Ok(link)
    }
}

impl LinkModel for LinearPatchLink {
    fn kind(&self) -> &'static str {
        KIND
    }

    fn input_channels(&self) -> usize {
        self.channels
    }

    fn fit(&mut self, samples: &[Sample], _config: &TrainConfig) -> Result<TrainReport> {
        let usable = usable_samples(samples, self.channels)?;
        let d = self.feature_count();
        let mean_valid =
            usable.iter().map(|s| s.target.valid_count()).sum::<usize>() as f64 / usable.len() as f64;
        // upper triangle of the weighted Gram matrix and the moment vector
        let mut gram = vec![0.0; d * d];
        let mut moment = vec![0.0; d];
        for s in &usable {
            let weight = mean_valid / s.target.valid_count() as f64;
            let rows = self.design_rows(&s.input);
            for (i, row) in rows.iter().enumerate() {
                let Some(y) = s.target.get(i) else { continue };
                for a in 0..d {
                    let wa = weight * row[a];
                    moment[a] += wa * y;
                    let g = &mut gram[a * d..(a + 1) * d];
                    for b in a..d {
                        g[b] += wa * row[b];
                    }
                }
            }
        }
        let mut m = DMatrix::<f64>::zeros(d, d);
        for a in 0..d {
            for b in a..d {
                m[(a, b)] = gram[a * d + b];
                m[(b, a)] = gram[a * d + b];
            }
        }
        for a in 0..d - 1 {
            m[(a, a)] += self.ridge_lambda;
        }
        let rhs = DVector::from_vec(moment);
        let solution = match m.clone().cholesky() {
            Some(chol) => chol.solve(&rhs),
            None => m
                .lu()
                .solve(&rhs)
                .ok_or_else(|| Error::Training("singular normal equations".into()))?,
        };
        self.weights = solution.iter().copied().collect();

        let loss = usable
            .iter()
            .map(|s| masked_l2(&self.predict(&s.input)?, &s.target))
            .sum::<Result<f64>>()?
            / usable.len() as f64;
        Ok(TrainReport {
            epoch_losses: vec![loss],
            learning_rates: vec![],
            final_loss: loss,
            samples: usable.len(),
        })
    }

    fn predict(&self, input: &Volume) -> Result<LayerGrid> {
        check_channels(input, self.channels)?;
        let values = self.raw_predictions(input).into_iter().map(|v| v.clamp(0.0, 1.0)).collect();
        LayerGrid::dense(input.width(), input.height(), values)
    }

    fn parameters(&self) -> &[f64] {
        &self.weights
    }

    fn to_record(&self, channel_order: &[String]) -> ModelRecord {
        ModelRecord {
            kind: KIND.into(),
            hyperparams: vec![self.channels as f64, self.patch_radius as f64, self.ridge_lambda],
            channel_order: channel_order.to_vec(),
            params: self.weights.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_grid(rng: &mut ChaCha8Rng, w: usize, h: usize, hole_rate: f64) -> LayerGrid {
        let values = (0..w * h).map(|_| rng.random_range(0.0..1.0)).collect();
        let mask = (0..w * h).map(|_| rng.random::<f64>() >= hole_rate).collect();
        LayerGrid::new(w, h, values, mask).unwrap()
    }

    /// Dense oracle: explicit design matrix, normal equations solved by
    /// Gaussian elimination with partial pivoting.
    fn oracle_fit(link: &LinearPatchLink, samples: &[Sample]) -> Vec<f64> {
        let d = link.feature_count();
        let usable: Vec<&Sample> = samples.iter().filter(|s| s.target.valid_count() > 0).collect();
        let mean_valid =
            usable.iter().map(|s| s.target.valid_count()).sum::<usize>() as f64 / usable.len() as f64;
        let mut rows = Vec::new();
        let mut ys = Vec::new();
        let mut ws = Vec::new();
        for s in &usable {
            let design = link.design_rows(&s.input);
            for i in 0..s.target.len() {
                if s.target.mask()[i] {
                    rows.push(design[i].clone());
                    ys.push(s.target.values()[i]);
                    ws.push(mean_valid / s.target.valid_count() as f64);
                }
            }
        }
        let mut a = vec![vec![0.0; d + 1]; d];
        for r in 0..d {
            for c in 0..d {
                a[r][c] = (0..rows.len()).map(|k| ws[k] * rows[k][r] * rows[k][c]).sum();
            }
            if r < d - 1 {
                a[r][r] += link.ridge_lambda();
            }
            a[r][d] = (0..rows.len()).map(|k| ws[k] * rows[k][r] * ys[k]).sum();
        }
        for col in 0..d {
            let piv = (col..d).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs())).unwrap();
            a.swap(col, piv);
            for r in 0..d {
                if r != col {
                    let f = a[r][col] / a[col][col];
                    for c in col..=d {
                        a[r][c] -= f * a[col][c];
                    }
                }
            }
        }
        (0..d).map(|r| a[r][d] / a[r][r]).collect()
    }

    #[test]
    fn matches_dense_normal_equation_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for trial in 0..5 {
            let channels = 1 + trial % 3;
            let samples: Vec<Sample> = (0..3)
                .map(|_| {
                    let input = Volume::new((0..channels).map(|_| random_grid(&mut rng, 8, 6, 0.1)).collect()).unwrap();
                    Sample::new(input, random_grid(&mut rng, 8, 6, 0.2))
                })
                .collect();
            let mut link = LinearPatchLink::new(channels, 1, 1e-3);
            link.fit(&samples, &TrainConfig::default()).unwrap();
            let oracle = oracle_fit(&link, &samples);
            for (a, b) in link.weights().iter().zip(&oracle) {
                assert!((a - b).abs() < 1e-8, "trial {trial}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn exact_affine_target_is_recovered() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let coeffs: Vec<f64> = (0..9).map(|_| rng.random_range(-0.05..0.08)).collect();
        let truth = {
            let mut l = LinearPatchLink::new(1, 1, 0.0);
            let mut w = coeffs.clone();
            w.push(0.2);
            l.set_weights(w).unwrap();
            l
        };
        let samples: Vec<Sample> = (0..4)
            .map(|_| {
                let x = Volume::single(random_grid(&mut rng, 16, 16, 0.0));
                let y = truth.predict(&x).unwrap();
                Sample::new(x, y)
            })
            .collect();
        let mut link = LinearPatchLink::new(1, 1, 1e-3);
        let report = link.fit(&samples, &TrainConfig::default()).unwrap();
        assert!(report.final_loss < 1e-8, "{}", report.final_loss);
    }

    #[test]
    fn identity_target() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let samples: Vec<Sample> = (0..4)
            .map(|_| {
                let x = random_grid(&mut rng, 16, 12, 0.0);
                Sample::new(Volume::single(x.clone()), x)
            })
            .collect();
        let mut link = LinearPatchLink::new(1, 1, 1e-3);
        link.fit(&samples, &TrainConfig::default()).unwrap();
        let probe = random_grid(&mut rng, 16, 12, 0.0);
        let pred = link.predict(&Volume::single(probe.clone())).unwrap();
        assert!(masked_l2(&pred, &probe).unwrap() < 1e-6);
    }

    #[test]
    fn zero_initialized_link_predicts_zero() {
        let link = LinearPatchLink::new(2, 1, 1e-3);
        let x = Volume::new(vec![LayerGrid::filled(4, 4, 0.0), LayerGrid::filled(4, 4, 0.0)]).unwrap();
        let p = link.predict(&x).unwrap();
        assert!(p.values().iter().all(|&v| v == 0.0));
        assert_eq!(p.valid_count(), 16);
    }

    #[test]
    fn invalid_target_cells_do_not_affect_fit() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = Volume::single(random_grid(&mut rng, 8, 8, 0.1));
        let y = random_grid(&mut rng, 8, 8, 0.3);
        let mut perturbed_vals = y.values().to_vec();
        for (v, &m) in perturbed_vals.iter_mut().zip(y.mask()) {
            if !m {
                *v = 123.0;
            }
        }
        let y2 = LayerGrid::new(8, 8, perturbed_vals, y.mask().to_vec()).unwrap();
        let mut a = LinearPatchLink::new(1, 1, 1e-3);
        let mut b = a.clone();
        a.fit(&[Sample::new(x.clone(), y)], &TrainConfig::default()).unwrap();
        b.fit(&[Sample::new(x, y2)], &TrainConfig::default()).unwrap();
        assert_eq!(a.weights(), b.weights());
    }

    #[test]
    fn errors() {
        let mut link = LinearPatchLink::new(2, 1, 1e-3);
        let x = Volume::single(LayerGrid::filled(4, 4, 0.5));
        assert!(link.predict(&x).is_err());
        let bad_target = LayerGrid::new(4, 4, vec![0.0; 16], vec![false; 16]).unwrap();
        let mut one = LinearPatchLink::new(1, 1, 1e-3);
        assert!(matches!(
            one.fit(&[Sample::new(x.clone(), bad_target)], &TrainConfig::default()),
            Err(Error::UndefinedObjective(_))
        ));
        assert!(link.fit(&[Sample::new(x, LayerGrid::filled(4, 4, 0.5))], &TrainConfig::default()).is_err());
    }

    #[test]
    fn record_round_trip() {
        let mut link = LinearPatchLink::new(2, 1, 1e-3);
        link.set_weights((0..19).map(|i| i as f64 * 0.01).collect()).unwrap();
        let rec = link.to_record(&["A".into(), "B".into()]);
        let back = LinearPatchLink::from_record(&ModelRecord::from_bytes(&rec.to_bytes(), "m").unwrap()).unwrap();
        assert_eq!(back, link);
    }
}
