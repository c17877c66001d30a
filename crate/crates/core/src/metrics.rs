//! Evaluation metrics: relative performance improvement, temporal
//! consistency and error-trend analysis.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::LayerGrid;

/// Moving-average window used to cancel the seasonal cycle.
pub const SMOOTHING_WINDOW: usize = 12;
/// Minimum series length for trend fitting.
pub const MIN_TREND_POINTS: usize = 24;
pub const DEFAULT_CONSISTENCY_WINDOW: usize = 3;

/// `(baseline / pred - 1) * 100`.
pub fn rpi(pred_l2: f64, baseline_l2: f64) -> Result<f64> {
    if !(pred_l2 > 0.0 && baseline_l2 > 0.0) || !pred_l2.is_finite() || !baseline_l2.is_finite() {
        return Err(Error::UndefinedMetric(format!(
            "RPI needs positive L2 values, got pred {pred_l2} and baseline {baseline_l2}"
        )));
    }
    Ok((baseline_l2 / pred_l2 - 1.0) * 100.0)
}

/// Mean of per-task RPI values.
pub fn arpi(task_rpis: &[f64]) -> Result<f64> {
    if task_rpis.is_empty() {
        return Err(Error::Parameter("ARPI of an empty task list".into()));
    }
    Ok(task_rpis.iter().sum::<f64>() / task_rpis.len() as f64)
}

/// One timestamp of a task evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimestampScore {
    pub timestamp: usize,
    pub l2: f64,
    pub baseline_l2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskEvaluation {
    pub task: String,
    pub scores: Vec<TimestampScore>,
    pub l2: f64,
    pub baseline_l2: f64,
    pub rpi: f64,
}

impl TaskEvaluation {
    /// Aggregates per-timestamp scores by their mean and takes the RPI of
    /// the two means.
    pub fn new(task: impl Into<String>, scores: Vec<TimestampScore>) -> Result<Self> {
        let task = task.into();
        if scores.is_empty() {
            return Err(Error::UndefinedMetric(format!("no scored timestamps for task {task}")));
        }
        let n = scores.len() as f64;
        let l2 = scores.iter().map(|s| s.l2).sum::<f64>() / n;
        let baseline_l2 = scores.iter().map(|s| s.baseline_l2).sum::<f64>() / n;
        let rpi = rpi(l2, baseline_l2)?;
        Ok(Self {
            task,
            scores,
            l2,
            baseline_l2,
            rpi,
        })
    }
}

/// ARPI over a set of task evaluations.
pub fn arpi_of(evals: &[TaskEvaluation]) -> Result<f64> {
    arpi(&evals.iter().map(|e| e.rpi).collect::<Vec<_>>())
}

/// CSV with one row per (task, timestamp), one `all` summary row per task
/// and a final `ARPI` row.
pub fn report_csv(evals: &[TaskEvaluation]) -> Result<String> {
    let mut out = String::from("task,timestamp,l2,baseline_l2,rpi\n");
    for e in evals {
        for s in &e.scores {
            let r = rpi(s.l2, s.baseline_l2).map(|r| r.to_string()).unwrap_or_default();
            writeln!(out, "{},{},{:.9e},{:.9e},{}", e.task, s.timestamp, s.l2, s.baseline_l2, r).unwrap();
        }
    }
    for e in evals {
        writeln!(out, "{},all,{:.9e},{:.9e},{}", e.task, e.l2, e.baseline_l2, e.rpi).unwrap();
    }
    writeln!(out, "ARPI,all,,,{}", arpi_of(evals)?).unwrap();
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyReport {
    pub task: String,
    pub window: usize,
    pub mean_variance: f64,
    /// (cell, centre) pairs that entered the mean
    pub pairs: usize,
}

impl ConsistencyReport {
    /// Consistency as the inverse of the variance.
    pub fn inverse(&self) -> f64 {
        1.0 / self.mean_variance
    }
}

/// Mean population variance over every centred window and every cell
/// valid across that window.
pub fn temporal_consistency(task: &str, predictions: &[LayerGrid], window: usize) -> Result<ConsistencyReport> {
    if window == 0 || window % 2 == 0 {
        return Err(Error::Parameter(format!("consistency window must be odd, got {window}")));
    }
    if predictions.len() < window {
        return Err(Error::Parameter(format!(
            "{} predictions are fewer than the window {window}",
            predictions.len()
        )));
    }
    if predictions.iter().any(|p| !p.same_dims(&predictions[0])) {
        return Err(Error::structural("prediction dimensions differ"));
    }
    let cells = predictions[0].len();
    let mut total = 0.0;
    let mut pairs = 0usize;
    for span in predictions.windows(window) {
        for i in 0..cells {
            if span.iter().any(|p| !p.mask()[i]) {
                continue;
            }
            let mean = span.iter().map(|p| p.values()[i]).sum::<f64>() / window as f64;
            total += span.iter().map(|p| (p.values()[i] - mean).powi(2)).sum::<f64>() / window as f64;
            pairs += 1;
        }
    }
    if pairs == 0 {
        return Err(Error::UndefinedMetric("no cell is valid across any window".into()));
    }
    Ok(ConsistencyReport {
        task: task.into(),
        window,
        mean_variance: total / pairs as f64,
        pairs,
    })
}

/// Ordinary least squares `y = slope * t + intercept`.
pub fn least_squares(t: &[f64], y: &[f64]) -> Result<(f64, f64)> {
    if t.len() != y.len() || t.len() < 2 {
        return Err(Error::Parameter("least squares needs at least two aligned points".into()));
    }
    let n = t.len() as f64;
    let tm = t.iter().sum::<f64>() / n;
    let ym = y.iter().sum::<f64>() / n;
    let sxx: f64 = t.iter().map(|v| (v - tm).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::Parameter("least squares over a single abscissa".into()));
    }
    let sxy: f64 = t.iter().zip(y).map(|(a, b)| (a - tm) * (b - ym)).sum();
    let slope = sxy / sxx;
    Ok((slope, ym - slope * tm))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorTrend {
    /// Change of the fitted error per month.
    pub slope: f64,
    pub intercept: f64,
    /// `(centre time, 12-month mean)` points the line was fitted to.
    pub smoothed: Vec<(f64, f64)>,
    pub start: f64,
    pub end: f64,
    /// `fit(end) / fit(start) - 1`, in percent.
    pub relative_increase: f64,
}

impl ErrorTrend {
    pub fn fitted(&self, t: f64) -> f64 {
        self.slope * t + self.intercept
    }
}

/// Trailing 12-month means placed at their window centre.
pub fn smooth(times: &[f64], values: &[f64]) -> Vec<(f64, f64)> {
    let w = SMOOTHING_WINDOW;
    (w - 1..values.len())
        .map(|end| {
            let span = end + 1 - w..=end;
            let t = times[span.clone()].iter().sum::<f64>() / w as f64;
            let v = values[span].iter().sum::<f64>() / w as f64;
            (t, v)
        })
        .collect()
}

/// Linear trend of a monthly error series (month `i` at time `times[i]`),
/// fitted to its 12-month moving average. Relative increase compares the
/// fitted line at the first and last original timestamps.
pub fn error_trend(times: &[f64], monthly_l2: &[f64]) -> Result<ErrorTrend> {
    if times.len() != monthly_l2.len() {
        return Err(Error::Parameter("times and values differ in length".into()));
    }
    if monthly_l2.len() < MIN_TREND_POINTS {
        return Err(Error::Parameter(format!(
            "trend needs at least {MIN_TREND_POINTS} points, got {}",
            monthly_l2.len()
        )));
    }
    let smoothed = smooth(times, monthly_l2);
    let (ts, vs): (Vec<f64>, Vec<f64>) = smoothed.iter().copied().unzip();
    let (slope, intercept) = least_squares(&ts, &vs)?;
    let start = times[0];
    let end = *times.last().unwrap();
    let f0 = slope * start + intercept;
    let f1 = slope * end + intercept;
    if f0 <= 0.0 {
        return Err(Error::UndefinedMetric(format!("fitted error at the start is {f0}")));
    }
    Ok(ErrorTrend {
        slope,
        intercept,
        smoothed,
        start,
        end,
        relative_increase: (f1 / f0 - 1.0) * 100.0,
    })
}

/// Fraction of `resamples` bootstrap resamples of the smoothed points
/// whose least-squares slope is positive.
pub fn bootstrap_slope_confidence(trend: &ErrorTrend, resamples: usize, seed: u64) -> f64 {
    let n = trend.smoothed.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut positive = 0usize;
    let mut valid = 0usize;
    let mut t = vec![0.0; n];
    let mut y = vec![0.0; n];
    for _ in 0..resamples {
        for k in 0..n {
            let (a, b) = trend.smoothed[rng.random_range(0..n)];
            t[k] = a;
            y[k] = b;
        }
        if let Ok((slope, _)) = least_squares(&t, &y) {
            valid += 1;
            if slope > 0.0 {
                positive += 1;
            }
        }
    }
    if valid == 0 {
        0.0
    } else {
        positive as f64 / valid as f64
    }
}

/// Mean per calendar year (`timestamp / 12`) of a monthly series.
pub fn yearly_means(timestamps: &[usize], values: &[f64]) -> Vec<(usize, f64)> {
    let mut out: Vec<(usize, f64, usize)> = Vec::new();
    for (&t, &v) in timestamps.iter().zip(values) {
        let year = t / 12;
        match out.last_mut() {
            Some((y, sum, n)) if *y == year => {
                *sum += v;
                *n += 1;
            }
            _ => out.push((year, v, 1)),
        }
    }
    out.into_iter().map(|(y, s, n)| (y, s / n as f64)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use proptest::prelude::*;

    #[test]
    fn rpi_examples() {
        assert_eq!(rpi(0.3, 0.3).unwrap(), 0.0);
        assert!((rpi(1.0, 2.0).unwrap() - 100.0).abs() < 1e-12);
        assert!((rpi(2.0, 1.0).unwrap() + 50.0).abs() < 1e-12);
        assert!(matches!(rpi(0.0, 1.0), Err(Error::UndefinedMetric(_))));
        assert!(matches!(rpi(1.0, -1.0), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn arpi_examples() {
        assert_eq!(arpi(&[0.0, 0.0, 0.0]).unwrap(), 0.0);
        assert_eq!(arpi(&[4.77]).unwrap(), 4.77);
        let table = [4.79, 14.80, 12.39, 9.50, 0.25, 4.91, 6.03];
        assert!((arpi(&table).unwrap() - 7.52).abs() < 0.01);
        assert!(matches!(arpi(&[]), Err(Error::Parameter(_))));
    }

    #[test]
    fn task_evaluation_uses_mean_of_per_timestamp_l2() {
        let scores = vec![
            TimestampScore { timestamp: 3, l2: 1.0, baseline_l2: 2.0 },
            TimestampScore { timestamp: 4, l2: 3.0, baseline_l2: 2.0 },
        ];
        let e = TaskEvaluation::new("AOD", scores).unwrap();
        assert_eq!(e.l2, 2.0);
        assert_eq!(e.rpi, 0.0);
        let csv = report_csv(&[e]).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "task,timestamp,l2,baseline_l2,rpi");
        assert_eq!(lines.len(), 5);
        assert!(lines[1].starts_with("AOD,3,") && lines[1].ends_with(",100"));
        assert_eq!(lines[4], "ARPI,all,,,0");
    }

    #[test]
    fn constant_series_is_perfectly_consistent() {
        let preds = vec![LayerGrid::filled(3, 3, 0.0); 5];
        assert_eq!(temporal_consistency("t", &preds, 3).unwrap().mean_variance, 0.0);
    }

    #[test]
    fn alternating_cell_variance() {
        let preds: Vec<LayerGrid> = (0..3).map(|k| LayerGrid::filled(1, 1, (k % 2) as f64)).collect();
        let r = temporal_consistency("t", &preds, 3).unwrap();
        assert!((r.mean_variance - 2.0 / 9.0).abs() < 1e-15);
        assert_eq!(r.pairs, 1);
    }

    #[test]
    fn consistency_skips_cells_invalid_in_the_window() {
        let a = LayerGrid::dense(2, 1, vec![0.0, 5.0]).unwrap();
        let b = LayerGrid::new(2, 1, vec![1.0, f64::NAN], vec![true, false]).unwrap();
        let r = temporal_consistency("t", &[a.clone(), b, a], 3).unwrap();
        assert_eq!(r.pairs, 1);
        assert!((r.mean_variance - 2.0 / 9.0).abs() < 1e-15);
    }

    #[test]
    fn consistency_errors() {
        let preds = vec![LayerGrid::filled(2, 2, 0.5); 2];
        assert!(matches!(temporal_consistency("t", &preds, 3), Err(Error::Parameter(_))));
        assert!(matches!(temporal_consistency("t", &preds, 2), Err(Error::Parameter(_))));
    }

    #[test]
    fn constant_series_has_no_trend() {
        let t: Vec<f64> = (0..40).map(f64::from).collect();
        let tr = error_trend(&t, &vec![0.2; 40]).unwrap();
        assert!(tr.slope.abs() < 1e-15);
        assert!(tr.relative_increase.abs() < 1e-12);
    }

    #[test]
    fn linear_series_doubles_over_a_hundred_steps() {
        let t: Vec<f64> = (0..=100).map(f64::from).collect();
        let y: Vec<f64> = t.iter().map(|v| 1.0 + 0.01 * v).collect();
        let tr = error_trend(&t, &y).unwrap();
        assert!((tr.slope - 0.01).abs() < 1e-12);
        assert!((tr.relative_increase - 100.0).abs() < 1e-9);
    }

    #[test]
    fn smoothing_cancels_a_twelve_month_cycle() {
        let t: Vec<f64> = (0..60).map(f64::from).collect();
        let y: Vec<f64> = t
            .iter()
            .map(|v| 1.0 + 0.3 * (2.0 * std::f64::consts::PI * v / 12.0).sin())
            .collect();
        let tr = error_trend(&t, &y).unwrap();
        assert!(tr.relative_increase.abs() < 1e-9, "{}", tr.relative_increase);
    }

    #[test]
    fn short_series_is_rejected() {
        let t: Vec<f64> = (0..23).map(f64::from).collect();
        assert!(matches!(error_trend(&t, &[1.0; 23]), Err(Error::Parameter(_))));
    }

    #[test]
    fn bootstrap_detects_a_clear_upward_trend() {
        let t: Vec<f64> = (0..48).map(f64::from).collect();
        let y: Vec<f64> = t.iter().map(|v| 1.0 + 0.02 * v + 0.05 * ((v * 7.3).sin())).collect();
        let tr = error_trend(&t, &y).unwrap();
        assert!(bootstrap_slope_confidence(&tr, 200, 1) >= 0.95);
        let down: Vec<f64> = y.iter().rev().copied().collect();
        let tr = error_trend(&t, &down).unwrap();
        assert!(bootstrap_slope_confidence(&tr, 200, 1) <= 0.05);
    }

    #[test]
    fn yearly_means_group_by_twelve() {
        let ts = [10, 11, 12, 13, 25];
        let v = [1.0, 3.0, 2.0, 4.0, 7.0];
        assert_eq!(yearly_means(&ts, &v), vec![(0, 2.0), (1, 3.0), (2, 7.0)]);
    }

    proptest! {
        #[test]
        fn rpi_reciprocal_signs(a in 1e-6f64..10.0, b in 1e-6f64..10.0) {
            let x = rpi(a, b).unwrap();
            let y = rpi(b, a).unwrap();
            prop_assert_eq!(x >= 0.0, y <= 0.0);
        }

        #[test]
        fn arpi_is_permutation_invariant(mut v in proptest::collection::vec(-50.0f64..50.0, 1..12), seed in 0u64..100) {
            let a = arpi(&v).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for i in (1..v.len()).rev() {
                v.swap(i, rng.random_range(0..=i));
            }
            prop_assert!((arpi(&v).unwrap() - a).abs() < 1e-12);
        }

        #[test]
        fn consistency_is_translation_invariant(seed in 0u64..500, shift in -3.0f64..3.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let preds: Vec<LayerGrid> = (0..6).map(|_| LayerGrid::from_fn(4, 3, |_, _| rng.random_range(0.0..1.0))).collect();
            let shifted: Vec<LayerGrid> = preds
                .iter()
                .map(|p| LayerGrid::dense(4, 3, p.values().iter().map(|v| v + shift).collect()).unwrap())
                .collect();
            let a = temporal_consistency("t", &preds, 3).unwrap().mean_variance;
            let b = temporal_consistency("t", &shifted, 3).unwrap().mean_variance;
            prop_assert!((a - b).abs() < 1e-10);
        }

        #[test]
        fn consistency_ignores_spatial_permutation(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let preds: Vec<LayerGrid> = (0..5).map(|_| LayerGrid::from_fn(4, 3, |_, _| rng.random_range(0.0..1.0))).collect();
            let perm: Vec<usize> = (0..12).map(|i| (i * 5) % 12).collect();
            let moved: Vec<LayerGrid> = preds
                .iter()
                .map(|p| LayerGrid::dense(4, 3, perm.iter().map(|&j| p.values()[j]).collect()).unwrap())
                .collect();
            let a = temporal_consistency("t", &preds, 3).unwrap().mean_variance;
            let b = temporal_consistency("t", &moved, 3).unwrap().mean_variance;
            prop_assert!((a - b).abs() < 1e-12);
        }
    }
}
