//! Synthetic Earth-observation-like dataset generator.
//!
//! A handful of latent spatial fields carry a seasonal cycle whose phase
//! flips between hemispheres. Input and output layers are distinct sigmoid
//! mixtures of those latents, so every output is partly predictable from
//! every input but no single input explains it. Drift moves the latent
//! means and grows the seasonal amplitude linearly in time.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dataset::{LayerEntry, LayerInfo, Manifest, SplitSpec, MANIFEST_FORMAT_VERSION};
use crate::error::{Error, Result};
use crate::grid::LayerGrid;
use crate::hypergraph::NodeKind;

/// Amplitude of the month-to-month latent anomaly, in units of `noise_sigma`.
const ANOMALY_SCALE: f64 = 1.0;

pub const OUTPUT_NAMES: [&str; 7] = ["AOD", "CM", "FIRE", "LAI", "LSTD_AN", "LSTN_AN", "WV"];
pub const INPUT_NAMES: [&str; 12] = [
    "NDVI", "SNOWC", "LSTD", "LSTN", "CLD_OT", "CLD_RD", "CLD_FR", "CLD_WP", "NO2", "OZONE", "CHLORA", "SST",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskStyle {
    Dense,
    LandSparse,
    OceanSparse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub width: usize,
    pub height: usize,
    pub months: usize,
    pub n_inputs: usize,
    pub n_outputs: usize,
    pub seasonal_period: usize,
    /// Per-month shift of latent statistics.
    pub drift_rate: f64,
    pub noise_sigma: f64,
    pub latents: usize,
    /// One style per layer, inputs first; `None` cycles a default pattern.
    pub mask_styles: Option<Vec<MaskStyle>>,
    /// Explicit `(labeled, test)` month counts; the rest is unlabeled.
    pub split: Option<(usize, usize)>,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            width: 64,
            height: 32,
            months: 106,
            n_inputs: 4,
            n_outputs: 3,
            seasonal_period: 12,
            drift_rate: 0.0,
            noise_sigma: 0.02,
            latents: 5,
            mask_styles: None,
            split: None,
            seed: 0,
        }
    }
}

const INPUT_MASKS: [MaskStyle; 4] = [MaskStyle::Dense, MaskStyle::LandSparse, MaskStyle::Dense, MaskStyle::OceanSparse];
const OUTPUT_MASKS: [MaskStyle; 3] = [MaskStyle::Dense, MaskStyle::LandSparse, MaskStyle::Dense];

/// `(labeled, test, unlabeled)` in the 119:30:62 pattern.
pub fn default_split(months: usize) -> (usize, usize, usize) {
    let labeled = (months as f64 * 119.0 / 211.0).round() as usize;
    let test = (months as f64 * 30.0 / 211.0).round() as usize;
    (labeled, test, months - labeled - test)
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width < 8 || self.height < 8 {
            return Err(Error::Config(format!("grid must be at least 8x8, got {}x{}", self.width, self.height)));
        }
        if !(self.drift_rate >= 0.0 && self.drift_rate.is_finite()) {
            return Err(Error::Config(format!("drift rate must be >= 0, got {}", self.drift_rate)));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Config(format!("noise sigma must be >= 0, got {}", self.noise_sigma)));
        }
        if self.seasonal_period < 2 {
            return Err(Error::Config(format!("seasonal period must be >= 2, got {}", self.seasonal_period)));
        }
        if self.n_inputs == 0 || self.n_outputs == 0 || self.latents == 0 {
            return Err(Error::Config("need at least one input, output and latent".into()));
        }
        if let Some(styles) = &self.mask_styles {
            if styles.len() != self.n_inputs + self.n_outputs {
                return Err(Error::Config(format!(
                    "{} mask styles for {} layers",
                    styles.len(),
                    self.n_inputs + self.n_outputs
                )));
            }
        }
        let (l, t, u) = self.split_counts()?;
        if l == 0 || t == 0 || u == 0 {
            return Err(Error::Config(format!("split {l}/{t}/{u} leaves an empty set")));
        }
        Ok(())
    }

    pub fn split_counts(&self) -> Result<(usize, usize, usize)> {
        match self.split {
            None => Ok(default_split(self.months)),
            Some((l, t)) if l + t < self.months => Ok((l, t, self.months - l - t)),
            Some((l, t)) => Err(Error::Config(format!("split {l}+{t} does not fit in {} months", self.months))),
        }
    }

    pub fn input_names(&self) -> Vec<String> {
        (0..self.n_inputs)
            .map(|j| INPUT_NAMES.get(j).map(|s| s.to_string()).unwrap_or_else(|| format!("IN{j}")))
            .collect()
    }

    pub fn output_names(&self) -> Vec<String> {
        (0..self.n_outputs)
            .map(|i| OUTPUT_NAMES.get(i).map(|s| s.to_string()).unwrap_or_else(|| format!("OUT{i}")))
            .collect()
    }

    fn styles(&self) -> Vec<MaskStyle> {
        self.mask_styles.clone().unwrap_or_else(|| {
            (0..self.n_inputs)
                .map(|j| INPUT_MASKS[j % INPUT_MASKS.len()])
                .chain((0..self.n_outputs).map(|i| OUTPUT_MASKS[i % OUTPUT_MASKS.len()]))
                .collect()
        })
    }
}

/// Sum of a few low-frequency plane waves, periodic in longitude.
#[derive(Debug, Clone)]
struct SmoothField {
    modes: Vec<(f64, f64, f64, f64)>,
}

impl SmoothField {
    fn random(rng: &mut impl Rng, n: usize) -> Self {
        let norm = (2.0 / n as f64).sqrt();
        let modes = (0..n)
            .map(|_| {
                let kx = rng.random_range(0..3) as f64;
                let ky = rng.random_range(if kx == 0.0 { 1 } else { 0 }..3) as f64;
                let amp: f64 = rng.sample::<f64, _>(StandardNormal) * norm;
                (kx, ky * 0.5, amp, rng.random_range(0.0..2.0 * PI))
            })
            .collect();
        Self { modes }
    }

    fn eval(&self, u: f64, v: f64) -> f64 {
        self.modes
            .iter()
            .map(|&(kx, ky, a, p)| a * (2.0 * PI * (kx * u + ky * v) + p).sin())
            .sum()
    }

    fn sample(&self, w: usize, h: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(w * h);
        for y in 0..h {
            for x in 0..w {
                out.push(self.eval(x as f64 / w as f64, y as f64 / h as f64));
            }
        }
        out
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

struct Latent {
    base: Vec<f64>,
    season_amp: Vec<f64>,
    phase: f64,
    shift: Vec<f64>,
}

struct Mixture {
    weights: Vec<f64>,
    offset: f64,
    /// `(p, q, c)`: adds `c * L_p * L_q`
    interaction: Option<(usize, usize, f64)>,
}

impl Mixture {
    fn random(rng: &mut impl Rng, latents: usize, interaction: bool) -> Self {
        let weights = (0..latents)
            .map(|_| {
                let z: f64 = rng.sample(StandardNormal);
                z * 0.8
            })
            .collect();
        let interaction = (interaction && latents > 1).then(|| {
            let p = rng.random_range(0..latents);
            let q = (p + rng.random_range(1..latents)) % latents;
            (p, q, rng.random_range(-0.5..0.5))
        });
        Self {
            weights,
            offset: rng.random_range(-0.3..0.3),
            interaction,
        }
    }

    fn apply(&self, l: &[f64]) -> f64 {
        let mut z = self.offset + self.weights.iter().zip(l).map(|(w, v)| w * v).sum::<f64>();
        if let Some((p, q, c)) = self.interaction {
            z += c * l[p] * l[q];
        }
        sigmoid(z)
    }
}

/// Generated rasters, layer-major: `layers[k][t]`, inputs first.
pub struct SynthData {
    pub config: SynthConfig,
    pub names: Vec<String>,
    pub kinds: Vec<NodeKind>,
    pub layers: Vec<Vec<LayerGrid>>,
}

/// Deterministic in `config.seed`; writes nothing.
pub fn generate_grids(config: &SynthConfig) -> Result<SynthData> {
    config.validate()?;
    let (w, h) = (config.width, config.height);
    let cells = w * h;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let latents: Vec<Latent> = (0..config.latents)
        .map(|_| {
            let base = SmoothField::random(&mut rng, 4).sample(w, h);
            let amp_field = SmoothField::random(&mut rng, 2).sample(w, h);
            let shift_field = SmoothField::random(&mut rng, 2).sample(w, h);
            let amp0 = rng.random_range(0.5..1.2);
            let shift0 = if rng.random_bool(0.5) { 1.0 } else { -1.0 } * rng.random_range(0.6..1.2);
            Latent {
                base,
                season_amp: amp_field.iter().map(|a| amp0 * (1.0 + 0.3 * a)).collect(),
                phase: rng.random_range(0.0..2.0 * PI),
                shift: shift_field.iter().map(|s| shift0 + 0.3 * s).collect(),
            }
        })
        .collect();
    let inputs: Vec<Mixture> = (0..config.n_inputs).map(|_| Mixture::random(&mut rng, config.latents, false)).collect();
    let outputs: Vec<Mixture> = (0..config.n_outputs).map(|_| Mixture::random(&mut rng, config.latents, true)).collect();
    let land: Vec<bool> = {
        let f = SmoothField::random(&mut rng, 3).sample(w, h);
        let mut sorted = f.clone();
        sorted.sort_by(f64::total_cmp);
        let cut = sorted[cells * 2 / 5];
        f.iter().map(|&v| v >= cut).collect()
    };
    // hemisphere factor: seasons are opposite across the equator
    let hemi: Vec<f64> = (0..cells)
        .map(|i| {
            let v = (i / w) as f64 / (h - 1) as f64;
            1.0 - 2.0 * v
        })
        .collect();

    let styles = config.styles();
    let n_layers = config.n_inputs + config.n_outputs;
    let mut layers: Vec<Vec<LayerGrid>> = vec![Vec::with_capacity(config.months); n_layers];
    let mut lat = vec![vec![0.0; cells]; config.latents];
    let mut noise_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x6e6f_6973_6521);
    let period = config.seasonal_period;
    for t in 0..config.months {
        let angle = 2.0 * PI * (t % period) as f64 / period as f64;
        let drift = config.drift_rate * t as f64;
        for (k, l) in latents.iter().enumerate() {
            let season = (angle + l.phase).sin();
            let anomaly = SmoothField::random(&mut noise_rng, 3).sample(w, h);
            for i in 0..cells {
                lat[k][i] = l.base[i]
                    + (1.0 + 2.0 * drift) * l.season_amp[i] * season * hemi[i]
                    + drift * l.shift[i]
                    + config.noise_sigma * ANOMALY_SCALE * anomaly[i];
            }
        }
        let mut point = vec![0.0; config.latents];
        for (idx, mix) in inputs.iter().chain(&outputs).enumerate() {
            let is_input = idx < config.n_inputs;
            let mut values = Vec::with_capacity(cells);
            for i in 0..cells {
                for k in 0..config.latents {
                    point[k] = lat[k][i];
                }
                let mut v = mix.apply(&point);
                if is_input {
                    let z: f64 = noise_rng.sample(StandardNormal);
                    v += config.noise_sigma * z;
                }
                values.push(v.clamp(0.0, 1.0));
            }
            let mask: Vec<bool> = match styles[idx] {
                MaskStyle::Dense => vec![true; cells],
                MaskStyle::LandSparse => land.clone(),
                MaskStyle::OceanSparse => land.iter().map(|l| !l).collect(),
            };
            let values = values.iter().zip(&mask).map(|(&v, &m)| if m { v } else { f64::NAN }).collect();
            layers[idx].push(LayerGrid::new(w, h, values, mask)?);
        }
    }
    let kinds = (0..n_layers)
        .map(|k| if k < config.n_inputs { NodeKind::Input } else { NodeKind::Output })
        .collect();
    let names = config.input_names().into_iter().chain(config.output_names()).collect();
    Ok(SynthData {
        config: config.clone(),
        names,
        kinds,
        layers,
    })
}

/// Generates the dataset under `out_dir` and writes `manifest.json`.
/// Output layers at unlabeled timestamps are written as hidden truth and
/// flagged unavailable.
pub fn generate(config: &SynthConfig, out_dir: &Path) -> Result<Manifest> {
    let data = generate_grids(config)?;
    let (l, t, _) = config.split_counts()?;
    let split = SplitSpec {
        labeled: (0..l).collect(),
        test: (l..l + t).collect(),
        unlabeled: (l + t..config.months).collect(),
    };
    let mut entries = Vec::new();
    for (k, name) in data.names.iter().enumerate() {
        let dir = out_dir.join("layers").join(name);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for (ts, grid) in data.layers[k].iter().enumerate() {
            let rel = format!("layers/{name}/{ts:04}.grd1");
            grid.save_grd1(&out_dir.join(&rel))?;
            let available = data.kinds[k] == NodeKind::Input || ts < l + t;
            entries.push(LayerEntry {
                timestamp: ts,
                layer: name.clone(),
                path: rel,
                available,
            });
        }
    }
    let manifest = Manifest {
        format_version: MANIFEST_FORMAT_VERSION,
        width: config.width,
        height: config.height,
        timestamps: config.months,
        layers: data
            .names
            .iter()
            .zip(&data.kinds)
            .map(|(name, &kind)| LayerInfo { name: name.clone(), kind })
            .collect(),
        entries,
        split,
        synth: Some(config.clone()),
    };
    manifest.save(&out_dir.join("manifest.json"))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            width: 16,
            height: 8,
            months: 30,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn default_split_follows_the_pattern() {
        assert_eq!(default_split(106), (60, 15, 31));
        assert_eq!(default_split(211), (119, 30, 62));
    }

    #[test]
    fn no_drift_no_noise_is_periodic() {
        let c = SynthConfig {
            noise_sigma: 0.0,
            ..small()
        };
        let d = generate_grids(&c).unwrap();
        for layer in &d.layers {
            for t in 0..c.months - 12 {
                assert_eq!(layer[t].to_grd1_bytes(), layer[t + 12].to_grd1_bytes());
            }
        }
    }

    #[test]
    fn values_are_in_unit_range_and_masks_follow_styles() {
        let c = SynthConfig {
            drift_rate: 0.05,
            noise_sigma: 0.2,
            ..small()
        };
        let d = generate_grids(&c).unwrap();
        for layer in &d.layers {
            for g in layer {
                assert!(g.valid_values().all(|v| (0.0..=1.0).contains(&v)));
            }
        }
        let land = d.layers[1][0].mask();
        let ocean = d.layers[3][0].mask();
        assert!(land.iter().zip(ocean).all(|(a, b)| a != b));
        assert_eq!(d.layers[0][0].valid_count(), 128);
        assert!(land.iter().filter(|&&m| m).count() > 50);
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_grids(&small()).unwrap();
        let b = generate_grids(&small()).unwrap();
        for (x, y) in a.layers.iter().zip(&b.layers) {
            for (g, h) in x.iter().zip(y) {
                assert_eq!(g.to_grd1_bytes(), h.to_grd1_bytes());
            }
        }
        let c = generate_grids(&SynthConfig { seed: 1, ..small() }).unwrap();
        assert_ne!(a.layers[4][0].to_grd1_bytes(), c.layers[4][0].to_grd1_bytes());
    }

    #[test]
    fn config_validation() {
        assert!(SynthConfig { width: 7, ..small() }.validate().is_err());
        assert!(SynthConfig { drift_rate: -0.1, ..small() }.validate().is_err());
        assert!(SynthConfig { seasonal_period: 1, ..small() }.validate().is_err());
        assert!(SynthConfig { split: Some((20, 10)), ..small() }.validate().is_err());
        assert!(SynthConfig { split: Some((10, 5)), ..small() }.validate().is_ok());
        assert_eq!(small().output_names(), vec!["AOD", "CM", "FIRE"]);
    }
}
