use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use serde::{Deserialize, Serialize};

use super::{Baseline, Engine, EngineConfig, IterationState, IterationSummary, LinkSet, Provenance, PseudolabelStore};
use crate::dataset::Dataset;
use crate::ensembles::EnsembleModel;
use crate::error::{Error, Result};
use crate::grid::LayerGrid;
use crate::hypergraph::HypergraphTopology;
use crate::links::{link_from_record, LinkModel};
use crate::metrics::report_csv;
use crate::optim::TrainReport;
use crate::serial::ModelRecord;

pub const RUN_FORMAT_VERSION: u32 = 1;

/// Everything needed to reproduce a run; stored as `run.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub format_version: u32,
    pub dataset: PathBuf,
    pub engine: EngineConfig,
    pub jobs: usize,
}

impl RunConfig {
    pub fn new(dataset: PathBuf, engine: EngineConfig, jobs: usize) -> Self {
        Self {
            format_version: RUN_FORMAT_VERSION,
            dataset,
            engine,
            jobs,
        }
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Json {
        path: path.into(),
        source: e,
    })?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(path.into()),
        _ => Error::io(path, e),
    })?;
    serde_json::from_str(&text).map_err(|e| Error::Json {
        path: path.into(),
        source: e,
    })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn mkdir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Paths inside a run directory.
#[derive(Debug, Clone)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn run_json(&self) -> PathBuf {
        self.root.join("run.json")
    }

    pub fn topology_json(&self) -> PathBuf {
        self.root.join("topology.json")
    }

    pub fn iter_dir(&self, k: usize) -> PathBuf {
        self.root.join(format!("iter_{k}"))
    }

    pub fn link_path(&self, k: usize, link_ref: &str) -> PathBuf {
        self.iter_dir(k).join("links").join(format!("{link_ref}.bin"))
    }

    pub fn ensemble_path(&self, k: usize, node: &str) -> PathBuf {
        self.iter_dir(k).join("ensembles").join(format!("{node}.bin"))
    }

    pub fn pseudolabel_path(&self, k: usize, node: &str, t: usize) -> PathBuf {
        self.iter_dir(k).join("pseudolabels").join(node).join(format!("{t:04}.grd1"))
    }

    pub fn provenance_path(&self, k: usize) -> PathBuf {
        self.iter_dir(k).join("pseudolabels").join("provenance.json")
    }

    pub fn summary_path(&self, k: usize) -> PathBuf {
        self.iter_dir(k).join("summary.json")
    }

    pub fn report_path(&self, k: usize) -> PathBuf {
        self.iter_dir(k).join("report.csv")
    }

    pub fn teacher_report_path(&self, k: usize) -> PathBuf {
        self.iter_dir(k).join("teacher.csv")
    }

    pub fn report_dir(&self) -> PathBuf {
        self.root.join("report")
    }

    pub fn load_summary(&self, k: usize) -> Result<IterationSummary> {
        read_json(&self.summary_path(k))
    }

    /// Summaries of `iter_1`, `iter_2`, ... up to the first missing one.
    pub fn summaries(&self) -> Result<Vec<IterationSummary>> {
        let mut out = Vec::new();
        let mut k = 1;
        while self.summary_path(k).is_file() {
            out.push(self.load_summary(k)?);
            k += 1;
        }
        if out.is_empty() {
            return Err(Error::MissingFile(self.summary_path(1)));
        }
        Ok(out)
    }

    fn save_links(&self, k: usize, topology: &HypergraphTopology, links: &LinkSet) -> Result<()> {
        mkdir(&self.iter_dir(k).join("links"))?;
        for (h, spec) in topology.hyperedges().iter().enumerate() {
            let order: Vec<String> = spec.inputs.iter().map(|&s| topology.source_name(s)).collect();
            links.get(h).to_record(&order).save(&self.link_path(k, &spec.link_ref))?;
        }
        write_json(&self.iter_dir(k).join("links").join("reports.json"), &links.reports)
    }

    fn load_links(&self, k: usize, topology: &HypergraphTopology) -> Result<Option<LinkSet>> {
        let paths: Vec<PathBuf> = topology.hyperedges().iter().map(|h| self.link_path(k, &h.link_ref)).collect();
        if !paths.iter().all(|p| p.is_file()) {
            return Ok(None);
        }
        let models = paths
            .iter()
            .map(|p| link_from_record(&ModelRecord::load(p)?))
            .collect::<Result<Vec<Box<dyn LinkModel>>>>()?;
        let reports = self.load_reports(&self.iter_dir(k).join("links"), models.len())?;
        Ok(Some(LinkSet { models, reports }))
    }

    /// Training reports stored beside a model directory; absent reports
    /// load as `None`.
    fn load_reports(&self, dir: &Path, n: usize) -> Result<Vec<Option<TrainReport>>> {
        let path = dir.join("reports.json");
        if !path.is_file() {
            return Ok(vec![None; n]);
        }
        let reports: Vec<Option<TrainReport>> = read_json(&path)?;
        if reports.len() != n {
            return Err(Error::Format {
                path: path.display().to_string(),
                offset: 0,
                message: format!("{} reports for {n} models", reports.len()),
            });
        }
        Ok(reports)
    }

    fn save_ensembles(&self, k: usize, topology: &HypergraphTopology, state: &IterationState) -> Result<()> {
        mkdir(&self.iter_dir(k).join("ensembles"))?;
        for (node, e) in topology.output_nodes().iter().zip(&state.ensembles) {
            e.to_record().save(&self.ensemble_path(k, &node.name))?;
        }
        write_json(&self.iter_dir(k).join("ensembles").join("reports.json"), &state.ensemble_reports)
    }

    fn load_ensembles(
        &self,
        k: usize,
        topology: &HypergraphTopology,
    ) -> Result<Option<(Vec<EnsembleModel>, Vec<Option<TrainReport>>)>> {
        let paths: Vec<PathBuf> = topology.output_nodes().iter().map(|n| self.ensemble_path(k, &n.name)).collect();
        if !paths.iter().all(|p| p.is_file()) {
            return Ok(None);
        }
        let models = paths
            .iter()
            .map(|p| EnsembleModel::from_record(&ModelRecord::load(p)?))
            .collect::<Result<Vec<_>>>()?;
        let reports = self.load_reports(&self.iter_dir(k).join("ensembles"), models.len())?;
        Ok(Some((models, reports)))
    }

    fn save_pseudolabels(&self, k: usize, topology: &HypergraphTopology, store: &PseudolabelStore) -> Result<()> {
        for node in topology.output_nodes() {
            mkdir(&self.iter_dir(k).join("pseudolabels").join(&node.name))?;
        }
        for (&t, row) in &store.labels {
            for (node, grid) in topology.output_nodes().iter().zip(row) {
                grid.save_grd1(&self.pseudolabel_path(k, &node.name, t))?;
            }
        }
        let record = StoredProvenance {
            provenance: store.provenance.clone(),
            timestamps: store.labels.keys().copied().collect(),
        };
        write_json(&self.provenance_path(k), &record)
    }

    fn load_pseudolabels(&self, k: usize, topology: &HypergraphTopology) -> Result<Option<PseudolabelStore>> {
        let path = self.provenance_path(k);
        if !path.is_file() {
            return Ok(None);
        }
        let record: StoredProvenance = read_json(&path)?;
        let mut labels = BTreeMap::new();
        for &t in &record.timestamps {
            let mut row = Vec::new();
            for node in topology.output_nodes() {
                let p = self.pseudolabel_path(k, &node.name, t);
                if !p.is_file() {
                    return Ok(None);
                }
                row.push(LayerGrid::load_grd1(&p)?);
            }
            labels.insert(t, row);
        }
        Ok(Some(PseudolabelStore {
            provenance: record.provenance,
            labels,
        }))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct StoredProvenance {
    provenance: Provenance,
    timestamps: Vec<usize>,
}

/// Written per iteration alongside the report tables.
#[derive(Debug, Clone)]
pub struct IterationArtifacts {
    pub summary: IterationSummary,
    /// Phases recomputed rather than loaded.
    pub recomputed: Vec<&'static str>,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub iterations: Vec<IterationArtifacts>,
}

impl RunOutcome {
    pub fn summaries(&self) -> Vec<&IterationSummary> {
        self.iterations.iter().map(|i| &i.summary).collect()
    }
}

/// Runs (or resumes) the full semi-supervised experiment described by
/// `config` under `run_dir`. Completed phases are detected from their
/// artifacts and skipped unless `force` is set; once a phase is recomputed
/// everything after it is recomputed too.
pub fn run_experiment(config: &RunConfig, run_dir: &Path, force: bool) -> Result<RunOutcome> {
    let dataset = Dataset::open(&config.dataset)?;
    run_with_dataset(config, &dataset, run_dir, force)
}

/// [`run_experiment`] over an already opened dataset, so callers can inspect
/// its access audit afterwards.
pub fn run_with_dataset(config: &RunConfig, dataset: &Dataset, run_dir: &Path, force: bool) -> Result<RunOutcome> {
    let dir = RunDir::new(run_dir);
    mkdir(&dir.root)?;
    let engine = Engine::new(dataset, config.engine.clone())?;
    let mut dirty = force;
    if dir.run_json().is_file() && !force {
        let previous: RunConfig = read_json(&dir.run_json())?;
        if previous.engine != config.engine || previous.dataset != config.dataset {
            return Err(Error::Config(format!(
                "{} holds a different configuration; use --force to overwrite",
                dir.run_json().display()
            )));
        }
    } else {
        dirty = true;
    }
    write_json(&dir.run_json(), config)?;
    engine.topology.save(&dir.topology_json())?;

    let mut outcomes = Vec::new();
    let mut baseline: Option<Baseline> = None;
    let mut pseudolabels: Option<PseudolabelStore> = None;
    for k in 1..=config.engine.iterations {
        mkdir(&dir.iter_dir(k))?;
        let mut recomputed = Vec::new();
        let links = match (!dirty).then(|| dir.load_links(k, &engine.topology)).transpose()?.flatten() {
            Some(l) => l,
            None => {
                dirty = true;
                recomputed.push("links");
                info!("iteration {k}: training links");
                let state = match &pseudolabels {
                    None => engine.initialize_hypergraph()?,
                    Some(p) => engine.retrain_links(k, p)?,
                };
                dir.save_links(k, &engine.topology, &state.links)?;
                state.links
            }
        };
        let mut state = IterationState {
            k,
            links,
            ensembles: Vec::new(),
            ensemble_reports: Vec::new(),
        };
        match (!dirty).then(|| dir.load_ensembles(k, &engine.topology)).transpose()?.flatten() {
            Some((models, reports)) => {
                state.ensembles = models;
                state.ensemble_reports = reports;
            }
            None => {
                dirty = true;
                recomputed.push("ensembles");
                info!("iteration {k}: fitting {} ensembles", config.engine.variant);
                state = engine.train_ensembles(state)?;
                dir.save_ensembles(k, &engine.topology, &state)?;
            }
        }
        let store = match (!dirty).then(|| dir.load_pseudolabels(k, &engine.topology)).transpose()?.flatten() {
            Some(s) => s,
            None => {
                dirty = true;
                recomputed.push("pseudolabels");
                info!("iteration {k}: generating pseudolabels");
                let s = engine.generate_pseudolabels(&state)?;
                dir.save_pseudolabels(k, &engine.topology, &s)?;
                s
            }
        };
        if baseline.is_none() {
            baseline = Some(if k == 1 && dirty {
                engine.baseline_from(&state)?
            } else {
                dir.load_summary(1)?.baseline(&engine.topology)?
            });
        }
        let b = baseline.as_ref().unwrap();
        let summary = match (!dirty && dir.summary_path(k).is_file()).then(|| dir.load_summary(k)).transpose()? {
            Some(s) => s,
            None => {
                dirty = true;
                recomputed.push("evaluation");
                let s = engine.evaluate(&state, b)?;
                write_json(&dir.summary_path(k), &s)?;
                write_text(&dir.report_path(k), &report_csv(&s.distilled)?)?;
                if !s.teacher.is_empty() {
                    write_text(&dir.teacher_report_path(k), &report_csv(&s.teacher)?)?;
                }
                s
            }
        };
        info!(
            "iteration {k}: distilled ARPI {:.4}, teacher ARPI {:.4}",
            summary.distilled_arpi, summary.teacher_arpi
        );
        let stop = match (config.engine.convergence_tol, outcomes.last()) {
            (Some(tol), Some(prev)) => {
                let prev: &IterationArtifacts = prev;
                summary.validation_arpi - prev.summary.validation_arpi < tol
            }
            _ => false,
        };
        outcomes.push(IterationArtifacts { summary, recomputed });
        pseudolabels = Some(store);
        if stop {
            info!("iteration {k}: validation ARPI gain below tolerance, stopping");
            break;
        }
    }
    Ok(RunOutcome { iterations: outcomes })
}

fn fmt_f(v: f64) -> String {
    if v.is_finite() {
        v.to_string()
    } else {
        String::new()
    }
}

/// Writes the summary tables of a completed run under `run_dir/report`
/// and returns their paths.
pub fn write_report(run_dir: &Path) -> Result<Vec<PathBuf>> {
    let dir = RunDir::new(run_dir);
    if !dir.run_json().is_file() {
        return Err(Error::MissingFile(dir.run_json()));
    }
    let summaries = dir.summaries()?;
    let out_dir = dir.report_dir();
    mkdir(&out_dir)?;
    let tasks = summaries[0].tasks.clone();
    let mut written = Vec::new();

    let per_task = |pick: fn(&IterationSummary) -> (&[crate::metrics::TaskEvaluation], f64)| -> Result<String> {
        let mut s = format!("iteration,{},ARPI\n", tasks.join(","));
        for it in &summaries {
            let (evals, arpi) = pick(it);
            if evals.is_empty() {
                continue;
            }
            let cells: Vec<String> = evals.iter().map(|e| fmt_f(e.rpi)).collect();
            writeln!(s, "{},{},{}", it.iteration, cells.join(","), fmt_f(arpi)).unwrap();
        }
        Ok(s)
    };
    let mut emit = |name: &str, text: String| -> Result<()> {
        let p = out_dir.join(name);
        write_text(&p, &text)?;
        written.push(p);
        Ok(())
    };
    emit("per_task_rpi.csv", per_task(|s| (&s.distilled, s.distilled_arpi))?)?;
    emit("teacher_rpi.csv", per_task(|s| (&s.teacher, s.teacher_arpi))?)?;

    let mut s = String::from("iteration,distilled_arpi,teacher_arpi,validation_arpi\n");
    for it in &summaries {
        writeln!(
            s,
            "{},{},{},{}",
            it.iteration,
            fmt_f(it.distilled_arpi),
            fmt_f(it.teacher_arpi),
            fmt_f(it.validation_arpi)
        )
        .unwrap();
    }
    emit("arpi_by_iteration.csv", s)?;

    let mut s = String::from("iteration,timestamp,l2,fitted\n");
    let mut trend = String::from("iteration,slope,relative_increase_percent,start,end\n");
    for it in &summaries {
        for &(t, l2) in &it.monthly_l2 {
            let fitted = it.trend.as_ref().map(|tr| fmt_f(tr.fitted(t as f64))).unwrap_or_default();
            writeln!(s, "{},{},{:.9e},{}", it.iteration, t, l2, fitted).unwrap();
        }
        if let Some(tr) = &it.trend {
            writeln!(trend, "{},{:.9e},{},{},{}", it.iteration, tr.slope, fmt_f(tr.relative_increase), tr.start, tr.end)
                .unwrap();
        }
    }
    emit("error_trend.csv", s)?;
    emit("error_trend_fit.csv", trend)?;

    let mut s = String::from("iteration,task,variance\n");
    for it in &summaries {
        for c in &it.consistency {
            writeln!(s, "{},{},{:.9e}", it.iteration, c.task, c.mean_variance).unwrap();
        }
    }
    emit("consistency.csv", s)?;
    Ok(written)
}
