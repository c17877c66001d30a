//! A supervised edge trained on early months degrades year after year when
//! the generator drifts.

use mthg::dataset::Dataset;
use mthg::engine::{Engine, EngineConfig};
use mthg::metrics::yearly_means;
use mthg::synth::{generate, SynthConfig};

fn yearly_edge_error(seed: u64, drift: f64) -> Vec<f64> {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SynthConfig {
        width: 32,
        height: 16,
        months: 96,
        drift_rate: drift,
        split: Some((24, 12)),
        seed,
        ..SynthConfig::default()
    };
    generate(&cfg, dir.path()).unwrap();
    let ds = Dataset::open(&dir.path().join("manifest.json")).unwrap();
    let engine = Engine::new(&ds, EngineConfig { seed, ..EngineConfig::default() }).unwrap();
    let state = engine.initialize_hypergraph().unwrap();
    let edges = engine.baseline_from(&state).unwrap().edges;
    let monthly = engine.monthly_analysis(&state, &edges).unwrap();
    let (t, l2): (Vec<usize>, Vec<f64>) = monthly.into_iter().unzip();
    // complete calendar years after the labeled period
    yearly_means(&t, &l2).into_iter().filter(|&(y, _)| y >= 2).map(|(_, v)| v).collect()
}

#[test]
fn drift_makes_yearly_error_strictly_increase() {
    let increasing = (1..=5)
        .filter(|&s| {
            let years = yearly_edge_error(s, 0.03);
            years.windows(2).all(|w| w[1] > w[0])
        })
        .count();
    assert!(increasing >= 4, "{increasing} of 5 seeds");
}
