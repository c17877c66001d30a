//! Selection-gated ensembles over the candidate predictions of one output
//! node.
//!
//! Every learned variant first scales candidate `c` by the gate weight
//! `s_c = 1 / (1 + exp(-alpha_c))` and is trained end-to-end (gate
//! included) on the masked L2 against ground truth. At a pixel where a
//! candidate is invalid its contribution is dropped: normalized variants
//! renormalize, the others see a zero.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradcheck::{gradient_check_piecewise, GradCheckReport, DEFAULT_STEP};
use crate::grid::LayerGrid;
use crate::nn::{relu_backward, relu_in_place, Conv3x3, Dense, Neighbours};
use crate::optim::{minimize, TrainConfig, TrainReport};
use crate::serial::ModelRecord;

const KIND: &str = "ensemble";

/// Hidden width of the S-NN_DW weight network.
pub const DW_HIDDEN: usize = 16;
/// Hidden feature maps of the convolutional ensemble networks.
pub const CONV_HIDDEN: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EnsembleVariant {
    #[serde(rename = "plain-mean")]
    PlainMean,
    #[serde(rename = "s-mean")]
    SMean,
    #[serde(rename = "s-lr-fw")]
    SLrFw,
    #[serde(rename = "s-nn-dw")]
    SNnDw,
    #[serde(rename = "s-nn-dpw")]
    SNnDpw,
    #[serde(rename = "s-nn-d")]
    SNnD,
}

impl EnsembleVariant {
    pub const ALL: [EnsembleVariant; 6] = [
        EnsembleVariant::PlainMean,
        EnsembleVariant::SMean,
        EnsembleVariant::SLrFw,
        EnsembleVariant::SNnDw,
        EnsembleVariant::SNnDpw,
        EnsembleVariant::SNnD,
    ];

    pub fn name(self) -> &'static str {
        match self {
            EnsembleVariant::PlainMean => "plain-mean",
            EnsembleVariant::SMean => "s-mean",
            EnsembleVariant::SLrFw => "s-lr-fw",
            EnsembleVariant::SNnDw => "s-nn-dw",
            EnsembleVariant::SNnDpw => "s-nn-dpw",
            EnsembleVariant::SNnD => "s-nn-d",
        }
    }

    fn code(self) -> f64 {
        Self::ALL.iter().position(|&v| v == self).unwrap() as f64
    }

    fn from_code(code: f64) -> Result<Self> {
        Self::ALL
            .get(code as usize)
            .copied()
            .filter(|_| code >= 0.0 && code.fract() == 0.0)
            .ok_or_else(|| Error::Config(format!("unknown ensemble variant code {code}")))
    }

    pub fn has_gate(self) -> bool {
        self != EnsembleVariant::PlainMean
    }

    fn default_hidden(self) -> usize {
        match self {
            EnsembleVariant::SNnDw => DW_HIDDEN,
            EnsembleVariant::SNnDpw | EnsembleVariant::SNnD => CONV_HIDDEN,
            _ => 0,
        }
    }
}

impl fmt::Display for EnsembleVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EnsembleVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        EnsembleVariant::ALL
            .into_iter()
            .find(|v| v.name() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::Parameter(format!("unknown ensemble variant {s:?}")))
    }
}

#[inline]
pub fn sigmoid(a: f64) -> f64 {
    1.0 / (1.0 + (-a).exp())
}

/// Per-candidate sigmoid gate.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectionGate {
    pub alphas: Vec<f64>,
}

impl SelectionGate {
    pub fn new(alphas: Vec<f64>) -> Self {
        Self { alphas }
    }

    pub fn weights(&self) -> Vec<f64> {
        self.alphas.iter().map(|&a| sigmoid(a)).collect()
    }

    /// Scales channel `c` by `s_c`; masks are unchanged.
    pub fn apply(&self, candidates: &[LayerGrid]) -> Result<Vec<LayerGrid>> {
        if candidates.len() != self.alphas.len() {
            return Err(Error::structural(format!(
                "gate has {} alphas for {} candidates",
                self.alphas.len(),
                candidates.len()
            )));
        }
        candidates
            .iter()
            .zip(self.weights())
            .map(|(c, s)| {
                let vals = c.values().iter().zip(c.mask()).map(|(&v, &m)| if m { s * v } else { v }).collect();
                LayerGrid::new(c.width(), c.height(), vals, c.mask().to_vec())
            })
            .collect()
    }
}

/// A fitted ensemble: variant, candidate order and the flat parameter
/// vector (gate alphas first, then the variant's own parameters).
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleModel {
    variant: EnsembleVariant,
    channels: usize,
    hidden: usize,
    candidate_order: Vec<String>,
    params: Vec<f64>,
}

/// Candidate stack in the layout the forward pass uses.
struct Stack {
    width: usize,
    height: usize,
    /// `C x cells`, invalid cells hold 0.
    values: Vec<f64>,
    masks: Vec<bool>,
    any_valid: Vec<bool>,
    /// valid-mean and valid-variance of each ungated candidate
    means: Vec<f64>,
    vars: Vec<f64>,
}

impl Stack {
    fn new(candidates: &[LayerGrid]) -> Result<Self> {
        let first = candidates
            .first()
            .ok_or_else(|| Error::structural("empty candidate stack"))?;
        if candidates.iter().any(|c| !c.same_dims(first)) {
            return Err(Error::structural("candidate dimensions differ"));
        }
        let cells = first.len();
        let mut values = Vec::with_capacity(candidates.len() * cells);
        let mut masks = Vec::with_capacity(candidates.len() * cells);
        let mut any_valid = vec![false; cells];
        let mut means = Vec::with_capacity(candidates.len());
        let mut vars = Vec::with_capacity(candidates.len());
        for c in candidates {
            for i in 0..cells {
                let m = c.mask()[i];
                values.push(if m { c.values()[i] } else { 0.0 });
                masks.push(m);
                any_valid[i] |= m;
            }
            means.push(c.valid_mean().unwrap_or(0.0));
            vars.push(c.valid_variance().unwrap_or(0.0));
        }
        Ok(Self {
            width: first.width(),
            height: first.height(),
            values,
            masks,
            any_valid,
            means,
            vars,
        })
    }

    fn cells(&self) -> usize {
        self.width * self.height
    }
}

/// Training target in the forward-pass layout.
struct Target {
    values: Vec<f64>,
    mask: Vec<bool>,
}

struct Prepared {
    stack: Stack,
    target: Target,
    /// `2 / (samples * cells valid in target and output)`
    scale: f64,
}

impl EnsembleModel {
    /// Freshly initialized model whose output starts at the plain mean of
    /// dense candidates (all gates at 0.5).
    pub fn new(variant: EnsembleVariant, candidate_order: Vec<String>, seed: u64) -> Self {
        let channels = candidate_order.len();
        let hidden = variant.default_hidden();
        let mut m = Self {
            variant,
            channels,
            hidden,
            candidate_order,
            params: Vec::new(),
        };
        m.params = vec![0.0; m.param_count()];
        m.initialize(seed);
        m
    }

    pub fn variant(&self) -> EnsembleVariant {
        self.variant
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn candidate_order(&self) -> &[String] {
        &self.candidate_order
    }

    pub fn parameters(&self) -> &[f64] {
        &self.params
    }

    pub fn set_parameters(&mut self, params: Vec<f64>) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::structural(format!(
                "{} expects {} parameters, got {}",
                self.variant,
                self.params.len(),
                params.len()
            )));
        }
        self.params = params;
        Ok(())
    }

    pub fn gate(&self) -> Option<SelectionGate> {
        self.variant
            .has_gate()
            .then(|| SelectionGate::new(self.params[..self.channels].to_vec()))
    }

    fn gate_len(&self) -> usize {
        if self.variant.has_gate() {
            self.channels
        } else {
            0
        }
    }

    fn dw_layers(&self) -> (Dense, Dense) {
        (Dense::new(2 * self.channels, self.hidden), Dense::new(self.hidden, self.channels))
    }

    fn conv_layers(&self) -> (Conv3x3, Conv3x3) {
        let out = if self.variant == EnsembleVariant::SNnDpw { self.channels } else { 1 };
        (Conv3x3::new(self.channels, self.hidden), Conv3x3::new(self.hidden, out))
    }

    fn param_count(&self) -> usize {
        let c = self.channels;
        self.gate_len()
            + match self.variant {
                EnsembleVariant::PlainMean | EnsembleVariant::SMean => 0,
                EnsembleVariant::SLrFw => c + 1,
                EnsembleVariant::SNnDw => {
                    let (a, b) = self.dw_layers();
                    a.param_count() + b.param_count()
                }
                EnsembleVariant::SNnDpw | EnsembleVariant::SNnD => {
                    let (a, b) = self.conv_layers();
                    a.param_count() + b.param_count()
                }
            }
    }

    fn initialize(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = self.channels;
        let g = self.gate_len();
        self.params.iter_mut().for_each(|p| *p = 0.0);
        let mean_weight = 2.0 / c as f64;
        let body = &mut self.params[g..];
        match self.variant {
            EnsembleVariant::PlainMean | EnsembleVariant::SMean => {}
            EnsembleVariant::SLrFw => body[..c].iter_mut().for_each(|w| *w = mean_weight),
            EnsembleVariant::SNnDw => {
                let d1 = Dense::new(2 * c, self.hidden);
                let split = d1.param_count();
                d1.init(&mut rng, &mut body[..split]);
                body[split - self.hidden..split].iter_mut().for_each(|b| *b = 0.1);
                // zero weight rows: the dynamic weights start at the mean weight
                let w2 = &mut body[split..];
                let bias_at = self.hidden * c;
                w2[bias_at..].iter_mut().for_each(|b| *b = mean_weight);
            }
            EnsembleVariant::SNnDpw => {
                let (c1, _) = (Conv3x3::new(c, self.hidden), Conv3x3::new(self.hidden, c));
                let split = c1.param_count();
                c1.init(&mut rng, &mut body[..split]);
                body[split - self.hidden..split].iter_mut().for_each(|b| *b = 0.1);
                let bias_at = split + c * self.hidden * 9;
                body[bias_at..].iter_mut().for_each(|b| *b = mean_weight);
            }
            EnsembleVariant::SNnD => {
                let c1 = Conv3x3::new(c, self.hidden);
                let split = c1.param_count();
                c1.init(&mut rng, &mut body[..split]);
                // hidden unit 0 starts as the centre-tap mean of the gated stack
                for ch in 0..c {
                    let w = &mut body[ch * 9..ch * 9 + 9];
                    w.iter_mut().for_each(|v| *v = 0.0);
                    w[4] = mean_weight;
                }
                body[split - self.hidden..split].iter_mut().for_each(|b| *b = 0.0);
                body[split + 4] = 1.0;
            }
        }
    }

    /// Adds `N(0, scale^2)` noise to every parameter.
    pub fn perturb_parameters(&mut self, seed: u64, scale: f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for p in &mut self.params {
            let z: f64 = rng.sample(StandardNormal);
            *p += scale * z;
        }
    }

    /// The same model with candidates reordered: new candidate `k` is old
    /// candidate `perm[k]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let c = self.channels;
        let mut sorted = perm.to_vec();
        sorted.sort_unstable();
        if sorted != (0..c).collect::<Vec<_>>() {
            return Err(Error::Parameter("not a permutation of the candidates".into()));
        }
        let mut out = self.clone();
        out.candidate_order = perm.iter().map(|&p| self.candidate_order[p].clone()).collect();
        let g = self.gate_len();
        for k in 0..g {
            out.params[k] = self.params[perm[k]];
        }
        let src = &self.params[g..];
        let dst = &mut out.params[g..];
        match self.variant {
            EnsembleVariant::PlainMean | EnsembleVariant::SMean => {}
            EnsembleVariant::SLrFw => {
                for k in 0..c {
                    dst[k] = src[perm[k]];
                }
            }
            EnsembleVariant::SNnDw => {
                let h = self.hidden;
                let (d1, _) = self.dw_layers();
                let split = d1.param_count();
                for j in 0..h {
                    for k in 0..c {
                        dst[j * 2 * c + k] = src[j * 2 * c + perm[k]];
                        dst[j * 2 * c + c + k] = src[j * 2 * c + c + perm[k]];
                    }
                }
                for k in 0..c {
                    for j in 0..h {
                        dst[split + k * h + j] = src[split + perm[k] * h + j];
                    }
                    dst[split + h * c + k] = src[split + h * c + perm[k]];
                }
            }
            EnsembleVariant::SNnDpw | EnsembleVariant::SNnD => {
                let h = self.hidden;
                let (c1, _) = self.conv_layers();
                let split = c1.param_count();
                for o in 0..h {
                    for k in 0..c {
                        let (d, s) = ((o * c + k) * 9, (o * c + perm[k]) * 9);
                        dst[d..d + 9].copy_from_slice(&src[s..s + 9]);
                    }
                }
                if self.variant == EnsembleVariant::SNnDpw {
                    for k in 0..c {
                        let (d, s) = (split + k * h * 9, split + perm[k] * h * 9);
                        dst[d..d + h * 9].copy_from_slice(&src[s..s + h * 9]);
                        dst[split + c * h * 9 + k] = src[split + c * h * 9 + perm[k]];
                    }
                }
            }
        }
        Ok(out)
    }

    fn check_stack(&self, candidates: &[LayerGrid]) -> Result<()> {
        if candidates.len() != self.channels {
            return Err(Error::structural(format!(
                "ensemble trained on {} candidates, got {}",
                self.channels,
                candidates.len()
            )));
        }
        Ok(())
    }

    /// Output before clamping, with its validity mask.
    pub fn forward_unclamped(&self, candidates: &[LayerGrid]) -> Result<LayerGrid> {
        self.check_stack(candidates)?;
        let stack = Stack::new(candidates)?;
        let (out, mask) = self.run(&self.params, &stack, None, None);
        let vals = out.iter().zip(&mask).map(|(&v, &m)| if m { v } else { f64::NAN }).collect();
        LayerGrid::new(stack.width, stack.height, vals, mask)
    }

    /// Teacher output, clamped to `[0, 1]`.
    pub fn forward(&self, candidates: &[LayerGrid]) -> Result<LayerGrid> {
        Ok(self.forward_unclamped(candidates)?.clamped_unit())
    }

    /// Checks names against the training-time order before running.
    pub fn forward_named(&self, names: &[String], candidates: &[LayerGrid]) -> Result<LayerGrid> {
        if names != self.candidate_order.as_slice() {
            return Err(Error::structural("candidate order differs from the training order"));
        }
        self.forward(candidates)
    }

    /// Forward pass and, when `target` and `grad` are given, accumulation
    /// of `d loss / d params` where loss = `scale/2 * sum r^2`.
    fn run(
        &self,
        params: &[f64],
        stack: &Stack,
        target: Option<(&Target, f64)>,
        grad: Option<&mut [f64]>,
    ) -> (Vec<f64>, Vec<bool>) {
        let c = self.channels;
        let cells = stack.cells();
        let g = self.gate_len();
        let s: Vec<f64> = if g > 0 { params[..g].iter().map(|&a| sigmoid(a)).collect() } else { vec![1.0; c] };
        let body = &params[g..];
        // gated stack
        let mut gated = stack.values.clone();
        for ch in 0..c {
            gated[ch * cells..(ch + 1) * cells].iter_mut().for_each(|v| *v *= s[ch]);
        }
        let mut out = vec![0.0; cells];
        let mask = stack.any_valid.clone();

        // per-variant forward, keeping what the backward pass needs
        enum Cache {
            None,
            Mean { den: Vec<f64> },
            Dw { z: Vec<f64>, h: Vec<f64>, w: Vec<f64> },
            Conv { nb: Neighbours, h: Vec<f64>, maps: Vec<f64> },
        }
        let cache = match self.variant {
            EnsembleVariant::PlainMean | EnsembleVariant::SMean => {
                let mut den = vec![0.0; cells];
                for ch in 0..c {
                    for i in 0..cells {
                        if stack.masks[ch * cells + i] {
                            // running weighted mean: exact when all valid values agree
                            den[i] += s[ch];
                            out[i] += s[ch] / den[i] * (stack.values[ch * cells + i] - out[i]);
                        }
                    }
                }
                Cache::Mean { den }
            }
            EnsembleVariant::SLrFw => {
                let b = body[c];
                out.iter_mut().for_each(|o| *o = b);
                for ch in 0..c {
                    let w = body[ch];
                    for i in 0..cells {
                        out[i] += w * gated[ch * cells + i];
                    }
                }
                Cache::None
            }
            EnsembleVariant::SNnDw => {
                let (d1, d2) = self.dw_layers();
                let split = d1.param_count();
                let mut z = Vec::with_capacity(2 * c);
                z.extend((0..c).map(|ch| s[ch] * stack.means[ch]));
                z.extend((0..c).map(|ch| s[ch] * s[ch] * stack.vars[ch]));
                let mut h = d1.forward(&body[..split], &z);
                relu_in_place(&mut h);
                let w = d2.forward(&body[split..], &h);
                for ch in 0..c {
                    for i in 0..cells {
                        out[i] += w[ch] * gated[ch * cells + i];
                    }
                }
                Cache::Dw { z, h, w }
            }
            EnsembleVariant::SNnDpw | EnsembleVariant::SNnD => {
                let nb = Neighbours::new(stack.width, stack.height);
                let (c1, c2) = self.conv_layers();
                let split = c1.param_count();
                let mut h = c1.forward(&nb, &body[..split], &gated);
                relu_in_place(&mut h);
                let maps = c2.forward(&nb, &body[split..], &h);
                if self.variant == EnsembleVariant::SNnDpw {
                    for ch in 0..c {
                        for i in 0..cells {
                            out[i] += maps[ch * cells + i] * gated[ch * cells + i];
                        }
                    }
                } else {
                    out.copy_from_slice(&maps);
                }
                Cache::Conv { nb, h, maps }
            }
        };

        let (Some((target, scale)), Some(grad)) = (target, grad) else {
            return (out, mask);
        };
        let mut g_out = vec![0.0; cells];
        for i in 0..cells {
            if mask[i] && target.mask[i] {
                g_out[i] = scale * (out[i] - target.values[i]);
            }
        }
        // d loss / d s_c, filled per variant, then chained through the sigmoid
        let mut g_s = vec![0.0; c];
        let (g_gate, g_body) = grad.split_at_mut(g);
        match (&self.variant, cache) {
            (EnsembleVariant::PlainMean, _) => {}
            (EnsembleVariant::SMean, Cache::Mean { den }) => {
                for ch in 0..c {
                    let mut acc = 0.0;
                    for i in 0..cells {
                        if stack.masks[ch * cells + i] && g_out[i] != 0.0 {
                            acc += g_out[i] * (stack.values[ch * cells + i] - out[i]) / den[i];
                        }
                    }
                    g_s[ch] = acc;
                }
            }
            (EnsembleVariant::SLrFw, _) => {
                g_body[c] += g_out.iter().sum::<f64>();
                for ch in 0..c {
                    let mut dg = 0.0;
                    let mut dy = 0.0;
                    for i in 0..cells {
                        dg += g_out[i] * gated[ch * cells + i];
                        dy += g_out[i] * stack.values[ch * cells + i];
                    }
                    g_body[ch] += dg;
                    g_s[ch] = body[ch] * dy;
                }
            }
            (EnsembleVariant::SNnDw, Cache::Dw { z, h, w }) => {
                let (d1, d2) = self.dw_layers();
                let split = d1.param_count();
                let mut g_w = vec![0.0; c];
                for ch in 0..c {
                    let mut dg = 0.0;
                    let mut dy = 0.0;
                    for i in 0..cells {
                        dg += g_out[i] * gated[ch * cells + i];
                        dy += g_out[i] * stack.values[ch * cells + i];
                    }
                    g_w[ch] = dg;
                    g_s[ch] = w[ch] * dy;
                }
                let (gb1, gb2) = g_body.split_at_mut(split);
                let mut g_h = vec![0.0; self.hidden];
                d2.backward(&body[split..], &h, &g_w, gb2, &mut g_h);
                relu_backward(&h, &mut g_h);
                let mut g_z = vec![0.0; 2 * c];
                d1.backward(&body[..split], &z, &g_h, gb1, &mut g_z);
                for ch in 0..c {
                    g_s[ch] += g_z[ch] * stack.means[ch] + g_z[c + ch] * 2.0 * s[ch] * stack.vars[ch];
                }
            }
            (EnsembleVariant::SNnDpw | EnsembleVariant::SNnD, Cache::Conv { nb, h, maps }) => {
                let (c1, c2) = self.conv_layers();
                let split = c1.param_count();
                let mut g_gated = vec![0.0; c * cells];
                let g_maps = if self.variant == EnsembleVariant::SNnDpw {
                    let mut gm = vec![0.0; c * cells];
                    for ch in 0..c {
                        for i in 0..cells {
                            gm[ch * cells + i] = g_out[i] * gated[ch * cells + i];
                            g_gated[ch * cells + i] = g_out[i] * maps[ch * cells + i];
                        }
                    }
                    gm
                } else {
                    g_out.clone()
                };
                let (gb1, gb2) = g_body.split_at_mut(split);
                let mut g_h = vec![0.0; self.hidden * cells];
                c2.backward(&nb, &body[split..], &h, &g_maps, gb2, Some(&mut g_h));
                relu_backward(&h, &mut g_h);
                c1.backward(&nb, &body[..split], &gated, &g_h, gb1, Some(&mut g_gated));
                for ch in 0..c {
                    let mut acc = 0.0;
                    for i in 0..cells {
                        acc += g_gated[ch * cells + i] * stack.values[ch * cells + i];
                    }
                    g_s[ch] = acc;
                }
            }
            _ => unreachable!("cache always matches the variant"),
        }
        for ch in 0..g {
            g_gate[ch] += g_s[ch] * s[ch] * (1.0 - s[ch]);
        }
        (out, mask)
    }

    fn prepare(&self, stacks: &[Vec<LayerGrid>], targets: &[LayerGrid]) -> Result<Vec<Prepared>> {
        if stacks.is_empty() {
            return Err(Error::UndefinedObjective("empty labeled set".into()));
        }
        if stacks.len() != targets.len() {
            return Err(Error::structural(format!(
                "{} candidate stacks for {} targets",
                stacks.len(),
                targets.len()
            )));
        }
        let mut data = Vec::with_capacity(stacks.len());
        for (stack, target) in stacks.iter().zip(targets) {
            self.check_stack(stack)?;
            let stack = Stack::new(stack)?;
            if stack.width != target.width() || stack.height != target.height() {
                return Err(Error::structural("target dimensions differ from candidates"));
            }
            let n = (0..stack.cells()).filter(|&i| stack.any_valid[i] && target.mask()[i]).count();
            if n == 0 {
                continue;
            }
            data.push((stack, Target { values: target.values().to_vec(), mask: target.mask().to_vec() }, n));
        }
        if data.is_empty() {
            return Err(Error::UndefinedObjective("no target cell overlaps a valid candidate".into()));
        }
        let total = data.len() as f64;
        Ok(data
            .into_iter()
            .map(|(stack, target, n)| Prepared {
                stack,
                target,
                scale: 2.0 / (total * n as f64),
            })
            .collect())
    }

    fn loss_and_grad(&self, params: &[f64], data: &[Prepared], grad: &mut [f64]) -> f64 {
        let mut loss = 0.0;
        for d in data {
            let (out, mask) = self.run(params, &d.stack, Some((&d.target, d.scale)), Some(grad));
            for i in 0..out.len() {
                if mask[i] && d.target.mask[i] {
                    let r = out[i] - d.target.values[i];
                    loss += 0.5 * d.scale * r * r;
                }
            }
        }
        loss
    }

    /// Mean masked L2 (unclamped output) over aligned stacks and targets.
    pub fn loss(&self, stacks: &[Vec<LayerGrid>], targets: &[LayerGrid]) -> Result<f64> {
        let data = self.prepare(stacks, targets)?;
        let mut scratch = vec![0.0; self.params.len()];
        Ok(self.loss_and_grad(&self.params, &data, &mut scratch))
    }

    pub fn gradient_check(&self, stacks: &[Vec<LayerGrid>], targets: &[LayerGrid], seed: u64) -> Result<GradCheckReport> {
        let data = self.prepare(stacks, targets)?;
        let pattern = |p: &[f64]| -> Vec<bool> { data.iter().flat_map(|d| self.relu_pattern(p, &d.stack)).collect() };
        Ok(gradient_check_piecewise(
            &self.params,
            |p, g| self.loss_and_grad(p, &data, g),
            |a, b| pattern(a) == pattern(b),
            DEFAULT_STEP,
            seed,
        ))
    }

    /// Which hidden units are active; empty for variants without ReLU.
    fn relu_pattern(&self, params: &[f64], stack: &Stack) -> Vec<bool> {
        let c = self.channels;
        let g = self.gate_len();
        let s: Vec<f64> = params[..g].iter().map(|&a| sigmoid(a)).collect();
        let body = &params[g..];
        let pre = match self.variant {
            EnsembleVariant::SNnDw => {
                let (d1, _) = self.dw_layers();
                let mut z: Vec<f64> = (0..c).map(|ch| s[ch] * stack.means[ch]).collect();
                z.extend((0..c).map(|ch| s[ch] * s[ch] * stack.vars[ch]));
                d1.forward(&body[..d1.param_count()], &z)
            }
            EnsembleVariant::SNnDpw | EnsembleVariant::SNnD => {
                let cells = stack.cells();
                let mut gated = stack.values.clone();
                for ch in 0..c {
                    gated[ch * cells..(ch + 1) * cells].iter_mut().for_each(|v| *v *= s[ch]);
                }
                let (c1, _) = self.conv_layers();
                let nb = Neighbours::new(stack.width, stack.height);
                c1.forward(&nb, &body[..c1.param_count()], &gated)
            }
            _ => Vec::new(),
        };
        pre.into_iter().map(|h| h > 0.0).collect()
    }

    pub fn to_record(&self) -> ModelRecord {
        ModelRecord {
            kind: KIND.into(),
            hyperparams: vec![self.variant.code(), self.channels as f64, self.hidden as f64],
            channel_order: self.candidate_order.clone(),
            params: self.params.clone(),
        }
    }

    pub fn from_record(record: &ModelRecord) -> Result<Self> {
        record.expect_kind(KIND)?;
        let [code, channels, hidden] = record.hyperparams[..] else {
            return Err(Error::Config("ensemble record needs 3 hyperparameters".into()));
        };
        let variant = EnsembleVariant::from_code(code)?;
        if channels as usize != record.channel_order.len() {
            return Err(Error::Config("ensemble channel count differs from its candidate order".into()));
        }
        let mut m = Self {
            variant,
            channels: channels as usize,
            hidden: hidden as usize,
            candidate_order: record.channel_order.clone(),
            params: Vec::new(),
        };
        m.params = vec![0.0; m.param_count()];
        m.set_parameters(record.params.clone())?;
        Ok(m)
    }
}

/// Fits `variant` on labeled candidate stacks against their ground truth.
/// `PlainMean` has nothing to learn and is returned as is.
pub fn fit_ensemble(
    variant: EnsembleVariant,
    candidate_order: Vec<String>,
    stacks: &[Vec<LayerGrid>],
    targets: &[LayerGrid],
    config: &TrainConfig,
) -> Result<(EnsembleModel, TrainReport)> {
    let mut model = EnsembleModel::new(variant, candidate_order, config.seed);
    let data = model.prepare(stacks, targets)?;
    if variant == EnsembleVariant::PlainMean {
        let mut scratch = vec![];
        let loss = model.loss_and_grad(&[], &data, &mut scratch);
        let report = TrainReport {
            epoch_losses: vec![loss],
            learning_rates: vec![],
            final_loss: loss,
            samples: data.len(),
        };
        return Ok((model, report));
    }
    let mut params = model.params.clone();
    let report = minimize(&mut params, config, data.len(), |p, g| model.loss_and_grad(p, &data, g))?;
    model.params = params;
    Ok((model, report))
}

#[cfg(test)]
mod tests;
