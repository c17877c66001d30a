//! Central finite-difference check of analytic gradients.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const DEFAULT_STEP: f64 = 1e-4;
pub const MIN_CHECKED: usize = 50;

/// Denominator floor for the relative error, so parameters with vanishing
/// gradient do not amplify round-off.
const REL_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub checked: usize,
    /// Parameters passed over because their probes straddle a kink.
    pub skipped: usize,
    /// Euclidean norm of the analytic gradient.
    pub gradient_norm: f64,
    pub worst_index: usize,
}

/// Compares the analytic gradient of `objective` at `params` against
/// central differences on a random subset of at least [`MIN_CHECKED`]
/// parameters (all of them when there are fewer).
pub fn gradient_check(
    params: &[f64],
    objective: impl Fn(&[f64], &mut [f64]) -> f64,
    step: f64,
    seed: u64,
) -> GradCheckReport {
    gradient_check_piecewise(params, objective, |_, _| true, step, seed)
}

/// [`gradient_check`] for piecewise-smooth objectives. A parameter is only
/// compared when `same_piece(up, down)` holds for its two probes; otherwise
/// another parameter is drawn in its place.
pub fn gradient_check_piecewise(
    params: &[f64],
    objective: impl Fn(&[f64], &mut [f64]) -> f64,
    same_piece: impl Fn(&[f64], &[f64]) -> bool,
    step: f64,
    seed: u64,
) -> GradCheckReport {
    let n = params.len();
    let mut analytic = vec![0.0; n];
    objective(params, &mut analytic);
    let gradient_norm = analytic.iter().map(|g| g * g).sum::<f64>().sqrt();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let wanted = if n <= MIN_CHECKED { n } else { MIN_CHECKED.max(n / 10) };

    let mut scratch = vec![0.0; n];
    let mut up = params.to_vec();
    let mut down = params.to_vec();
    let mut worst = (0.0f64, 0usize);
    let (mut checked, mut skipped) = (0, 0);
    for &i in &order {
        if checked == wanted {
            break;
        }
        up[i] = params[i] + step;
        down[i] = params[i] - step;
        let smooth = same_piece(&up, &down);
        let (f_up, f_down) = if smooth {
            (objective(&up, &mut scratch), objective(&down, &mut scratch))
        } else {
            (0.0, 0.0)
        };
        up[i] = params[i];
        down[i] = params[i];
        if !smooth {
            skipped += 1;
            continue;
        }
        checked += 1;
        let numeric = (f_up - f_down) / (2.0 * step);
        let denom = analytic[i].abs().max(numeric.abs()).max(REL_FLOOR);
        let rel = (analytic[i] - numeric).abs() / denom;
        if rel > worst.0 {
            worst = (rel, i);
        }
    }
    GradCheckReport {
        max_relative_error: worst.0,
        checked,
        skipped,
        gradient_norm,
        worst_index: worst.1,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_on_quadratic() {
        let target = [0.3, -0.7, 1.1];
        let r = gradient_check(
            &[0.0, 0.5, 2.0],
            |p, g| {
                let mut l = 0.0;
                for i in 0..3 {
                    g[i] = 2.0 * (p[i] - target[i]);
                    l += (p[i] - target[i]).powi(2);
                }
                l
            },
            DEFAULT_STEP,
            1,
        );
        assert_eq!(r.checked, 3);
        assert!(r.max_relative_error < 1e-9);
    }

    #[test]
    fn detects_wrong_gradient() {
        let r = gradient_check(
            &[1.0, 2.0],
            |p, g| {
                g[0] = 2.0 * p[0];
                g[1] = p[1];
                p[0] * p[0] + p[1] * p[1]
            },
            DEFAULT_STEP,
            1,
        );
        assert!(r.max_relative_error > 0.4);
        assert_eq!(r.worst_index, 1);
    }

    #[test]
    fn samples_at_least_fifty() {
        let params = vec![0.1; 400];
        let r = gradient_check(
            &params,
            |p, g| {
                g.iter_mut().zip(p).for_each(|(g, x)| *g = 2.0 * x);
                p.iter().map(|x| x * x).sum()
            },
            DEFAULT_STEP,
            9,
        );
        assert!(r.checked >= MIN_CHECKED);
    }

    #[test]
    fn kinked_parameters_are_replaced() {
        // |x| has a kink at 0; the first parameter sits on it
        let params = [0.0, 0.4, -0.8];
        let abs = |p: &[f64], g: &mut [f64]| {
            g.iter_mut().zip(p).for_each(|(g, x)| *g = x.signum());
            p.iter().map(|x| x.abs()).sum()
        };
        let naive = gradient_check(&params, abs, DEFAULT_STEP, 3);
        assert!(naive.max_relative_error > 0.5);
        let same = |a: &[f64], b: &[f64]| a.iter().zip(b).all(|(x, y)| (*x > 0.0) == (*y > 0.0));
        let r = gradient_check_piecewise(&params, abs, same, DEFAULT_STEP, 3);
        assert_eq!((r.checked, r.skipped), (2, 1));
        assert!(r.max_relative_error < 1e-9);
    }
}
