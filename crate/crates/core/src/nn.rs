//! Hand-differentiated building blocks shared by the convolutional links
//! and ensemble networks. Planes are stored channel-major, row-major.

use rand::Rng;
use rand_distr::StandardNormal;

/// Replicate-padded 3x3 neighbourhood indices for every cell.
#[derive(Debug, Clone)]
pub struct Neighbours {
    pub width: usize,
    pub height: usize,
    idx: Vec<[u32; 9]>,
}

impl Neighbours {
    pub fn new(width: usize, height: usize) -> Self {
        Self::with_radius(width, height, 1)
    }

    /// `(2r+1)^2` taps are only supported for `r == 1` in the stored table;
    /// larger radii go through [`patch_indices`].
    fn with_radius(width: usize, height: usize, r: isize) -> Self {
        let mut idx = Vec::with_capacity(width * height);
        for y in 0..height as isize {
            for x in 0..width as isize {
                let mut taps = [0u32; 9];
                let mut k = 0;
                for dy in -r..=r {
                    for dx in -r..=r {
                        let sy = (y + dy).clamp(0, height as isize - 1) as usize;
                        let sx = (x + dx).clamp(0, width as isize - 1) as usize;
                        taps[k] = (sy * width + sx) as u32;
                        k += 1;
                    }
                }
                idx.push(taps);
            }
        }
        Self { width, height, idx }
    }

    pub fn cells(&self) -> usize {
        self.width * self.height
    }

    #[inline]
    pub fn taps(&self, cell: usize) -> &[u32; 9] {
        &self.idx[cell]
    }
}

/// Replicate-padded neighbourhood of radius `r` around every cell, row
/// major over the patch.
pub fn patch_indices(width: usize, height: usize, r: usize) -> Vec<Vec<usize>> {
    let r = r as isize;
    let mut out = Vec::with_capacity(width * height);
    for y in 0..height as isize {
        for x in 0..width as isize {
            let mut taps = Vec::with_capacity(((2 * r + 1) * (2 * r + 1)) as usize);
            for dy in -r..=r {
                for dx in -r..=r {
                    let sy = (y + dy).clamp(0, height as isize - 1) as usize;
                    let sx = (x + dx).clamp(0, width as isize - 1) as usize;
                    taps.push(sy * width + sx);
                }
            }
            out.push(taps);
        }
    }
    out
}

/// 3x3 convolution, `in_c -> out_c`, replicate padding, with bias.
/// Parameter layout: weights `[out][in][tap]` followed by `out_c` biases.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv3x3 {
    pub in_c: usize,
    pub out_c: usize,
}

impl Conv3x3 {
    pub fn new(in_c: usize, out_c: usize) -> Self {
        Self { in_c, out_c }
    }

    pub fn param_count(&self) -> usize {
        self.out_c * self.in_c * 9 + self.out_c
    }

    fn bias_offset(&self) -> usize {
        self.out_c * self.in_c * 9
    }

    /// He-style initialization; biases start at zero.
    pub fn init(&self, rng: &mut impl Rng, params: &mut [f64]) {
        let scale = (2.0 / (self.in_c * 9) as f64).sqrt();
        let b = self.bias_offset();
        for p in &mut params[..b] {
            let z: f64 = rng.sample(StandardNormal);
            *p = z * scale;
        }
        params[b..].iter_mut().for_each(|p| *p = 0.0);
    }

    pub fn forward(&self, nb: &Neighbours, params: &[f64], input: &[f64]) -> Vec<f64> {
        let cells = nb.cells();
        debug_assert_eq!(input.len(), self.in_c * cells);
        let mut out = vec![0.0; self.out_c * cells];
        let bias = &params[self.bias_offset()..];
        for o in 0..self.out_c {
            let dst = &mut out[o * cells..(o + 1) * cells];
            dst.iter_mut().for_each(|v| *v = bias[o]);
            for c in 0..self.in_c {
                let w = &params[(o * self.in_c + c) * 9..(o * self.in_c + c) * 9 + 9];
                let src = &input[c * cells..(c + 1) * cells];
                for (cell, d) in dst.iter_mut().enumerate() {
                    let t = nb.taps(cell);
                    let mut acc = 0.0;
                    for k in 0..9 {
                        acc += w[k] * src[t[k] as usize];
                    }
                    *d += acc;
                }
            }
        }
        out
    }

    /// Accumulates parameter gradients into `grad` and, when requested,
    /// input gradients into `grad_in`.
    pub fn backward(
        &self,
        nb: &Neighbours,
        params: &[f64],
        input: &[f64],
        grad_out: &[f64],
        grad: &mut [f64],
        mut grad_in: Option<&mut [f64]>,
    ) {
        let cells = nb.cells();
        let b = self.bias_offset();
        for o in 0..self.out_c {
            let g = &grad_out[o * cells..(o + 1) * cells];
            grad[b + o] += g.iter().sum::<f64>();
            for c in 0..self.in_c {
                let base = (o * self.in_c + c) * 9;
                let src = &input[c * cells..(c + 1) * cells];
                let mut gw = [0.0; 9];
                for (cell, &gv) in g.iter().enumerate() {
                    if gv == 0.0 {
                        continue;
                    }
                    let t = nb.taps(cell);
                    for k in 0..9 {
                        gw[k] += gv * src[t[k] as usize];
                    }
                }
                for k in 0..9 {
                    grad[base + k] += gw[k];
                }
                if let Some(gi) = grad_in.as_deref_mut() {
                    let w = &params[base..base + 9];
                    let dst = &mut gi[c * cells..(c + 1) * cells];
                    for (cell, &gv) in g.iter().enumerate() {
                        if gv == 0.0 {
                            continue;
                        }
                        let t = nb.taps(cell);
                        for k in 0..9 {
                            dst[t[k] as usize] += w[k] * gv;
                        }
                    }
                }
            }
        }
    }
}

pub fn relu_in_place(x: &mut [f64]) {
    x.iter_mut().for_each(|v| *v = v.max(0.0));
}

/// Zeroes gradient entries whose forward activation was clipped.
pub fn relu_backward(activated: &[f64], grad: &mut [f64]) {
    for (g, &a) in grad.iter_mut().zip(activated) {
        if a <= 0.0 {
            *g = 0.0;
        }
    }
}

/// Dense layer `y = W x + b`, parameter layout `[out][in]` then biases.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dense {
    pub in_n: usize,
    pub out_n: usize,
}

impl Dense {
    pub fn new(in_n: usize, out_n: usize) -> Self {
        Self { in_n, out_n }
    }

    pub fn param_count(&self) -> usize {
        self.in_n * self.out_n + self.out_n
    }

    pub fn init(&self, rng: &mut impl Rng, params: &mut [f64]) {
        let scale = (2.0 / self.in_n as f64).sqrt();
        let b = self.in_n * self.out_n;
        for p in &mut params[..b] {
            let z: f64 = rng.sample(StandardNormal);
            *p = z * scale;
        }
        params[b..].iter_mut().for_each(|p| *p = 0.0);
    }

    pub fn forward(&self, params: &[f64], x: &[f64]) -> Vec<f64> {
        let b = self.in_n * self.out_n;
        (0..self.out_n)
            .map(|o| {
                let row = &params[o * self.in_n..(o + 1) * self.in_n];
                params[b + o] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>()
            })
            .collect()
    }

    pub fn backward(&self, params: &[f64], x: &[f64], grad_out: &[f64], grad: &mut [f64], grad_in: &mut [f64]) {
        let b = self.in_n * self.out_n;
        for o in 0..self.out_n {
            let g = grad_out[o];
            grad[b + o] += g;
            for i in 0..self.in_n {
                grad[o * self.in_n + i] += g * x[i];
                grad_in[i] += g * params[o * self.in_n + i];
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Loss = sum(out * probe). Central differences on every parameter and
    /// input entry.
    #[test]
    fn conv_backward_matches_finite_differences() {
        let (w, h) = (5, 4);
        let nb = Neighbours::new(w, h);
        let conv = Conv3x3::new(2, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut params = vec![0.0; conv.param_count()];
        conv.init(&mut rng, &mut params);
        params.iter_mut().for_each(|p| *p += rng.random_range(-0.1..0.1));
        let input: Vec<f64> = (0..2 * w * h).map(|_| rng.random_range(0.0..1.0)).collect();
        let probe: Vec<f64> = (0..3 * w * h).map(|_| rng.random_range(-1.0..1.0)).collect();
        let loss = |p: &[f64], x: &[f64]| -> f64 {
            conv.forward(&nb, p, x).iter().zip(&probe).map(|(a, b)| a * b).sum()
        };
        let mut grad = vec![0.0; params.len()];
        let mut gin = vec![0.0; input.len()];
        conv.backward(&nb, &params, &input, &probe, &mut grad, Some(&mut gin));
        let h_step = 1e-5;
        for i in 0..params.len() {
            let mut p = params.clone();
            p[i] += h_step;
            let up = loss(&p, &input);
            p[i] -= 2.0 * h_step;
            let down = loss(&p, &input);
            let fd = (up - down) / (2.0 * h_step);
            assert!((fd - grad[i]).abs() < 1e-7, "param {i}: {fd} vs {}", grad[i]);
        }
        for i in 0..input.len() {
            let mut x = input.clone();
            x[i] += h_step;
            let up = loss(&params, &x);
            x[i] -= 2.0 * h_step;
            let down = loss(&params, &x);
            let fd = (up - down) / (2.0 * h_step);
            assert!((fd - gin[i]).abs() < 1e-7, "input {i}: {fd} vs {}", gin[i]);
        }
    }

    #[test]
    fn replicate_padding_at_corner() {
        let nb = Neighbours::new(3, 3);
        assert_eq!(nb.taps(0), &[0, 0, 1, 0, 0, 1, 3, 3, 4]);
        let patch = patch_indices(3, 3, 1);
        assert_eq!(patch[0], vec![0, 0, 1, 0, 0, 1, 3, 3, 4]);
    }

    #[test]
    fn dense_backward() {
        let d = Dense::new(3, 2);
        let params = vec![0.1, -0.2, 0.3, 0.5, 0.4, -0.6, 0.05, -0.05];
        let x = [1.0, 2.0, -1.0];
        let y = d.forward(&params, &x);
        assert!((y[0] - (0.1 - 0.4 - 0.3 + 0.05)).abs() < 1e-15);
        let mut g = vec![0.0; params.len()];
        let mut gi = vec![0.0; 3];
        d.backward(&params, &x, &[1.0, 0.0], &mut g, &mut gi);
        assert_eq!(&g[..3], &x);
        assert_eq!(gi, vec![0.1, -0.2, 0.3]);
    }
}
