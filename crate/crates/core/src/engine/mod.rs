//! The semi-supervised loop over a hypergraph.
//!
//! Iteration 1 trains every link on the labeled set. Each iteration then
//! fits one ensemble per output node on labeled candidate stacks, runs the
//! teacher over the unlabeled set to produce pseudolabels and, in the next
//! iteration, retrains every link from scratch on ground truth plus those
//! pseudolabels. Test timestamps are only ever read for evaluation.

mod run_dir;

use std::collections::BTreeMap;

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Purpose};
use crate::ensembles::{fit_ensemble, EnsembleModel, EnsembleVariant};
use crate::error::{Error, Result};
use crate::grid::{masked_l2, pixelwise_median, LayerGrid, Volume};
use crate::hypergraph::{HyperedgeKind, HypergraphTopology, PlanStep, Product};
use crate::links::{LinkModel, LinkSpec, MteBaseline, MteSample, Sample};
use crate::metrics::{
    arpi, arpi_of, error_trend, temporal_consistency, ConsistencyReport, ErrorTrend, TaskEvaluation, TimestampScore,
    DEFAULT_CONSISTENCY_WINDOW, MIN_TREND_POINTS,
};
use crate::optim::{TrainConfig, TrainReport};
use crate::seed::derive_seed;

pub use run_dir::{run_experiment, run_with_dataset, write_report, IterationArtifacts, RunConfig, RunDir, RunOutcome, RUN_FORMAT_VERSION};

/// Fraction of the labeled set, taken from its end, used to pick edges.
pub const VALIDATION_FRACTION: f64 = 0.2;
pub const MTE_HIDDEN: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngineConfig {
    pub link: LinkSpec,
    pub train: TrainConfig,
    pub variant: EnsembleVariant,
    pub include_complex: bool,
    pub iterations: usize,
    pub seed: u64,
    /// Stop early when validation ARPI gains less than this.
    pub convergence_tol: Option<f64>,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            link: LinkSpec::default(),
            train: TrainConfig::default(),
            variant: EnsembleVariant::SNnDw,
            include_complex: false,
            iterations: 3,
            seed: 0,
            convergence_tol: None,
        }
    }
}

impl EngineConfig {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.iterations == 0 {
            return Err(Error::Config("at least one iteration is required".into()));
        }
        Ok(())
    }
}

/// Trained links indexed by hyperedge.
#[derive(Debug)]
pub struct LinkSet {
    pub models: Vec<Box<dyn LinkModel>>,
    pub reports: Vec<Option<TrainReport>>,
}

impl LinkSet {
    pub fn get(&self, hyperedge: usize) -> &dyn LinkModel {
        self.models[hyperedge].as_ref()
    }
}

#[derive(Debug)]
pub struct IterationState {
    pub k: usize,
    pub links: LinkSet,
    /// One per output node, empty until ensembles are trained.
    pub ensembles: Vec<EnsembleModel>,
    pub ensemble_reports: Vec<Option<TrainReport>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub iteration: usize,
    pub variant: EnsembleVariant,
    pub include_complex: bool,
    pub topology_hash: String,
    /// Candidate link refs per output node, in stack order.
    pub candidate_pools: Vec<Vec<String>>,
}

/// Teacher outputs for unlabeled timestamps: `labels[t][output]`.
#[derive(Debug, Clone)]
pub struct PseudolabelStore {
    pub provenance: Provenance,
    pub labels: BTreeMap<usize, Vec<LayerGrid>>,
}

/// What later iterations are compared against: the best iteration-1 edge
/// per task and its scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Baseline {
    pub edges: Vec<usize>,
    pub test_l2: Vec<BTreeMap<usize, f64>>,
    pub validation_l2: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationSummary {
    pub iteration: usize,
    pub variant: EnsembleVariant,
    pub include_complex: bool,
    pub tasks: Vec<String>,
    pub baseline_edges: Vec<String>,
    pub distilled_edges: Vec<String>,
    /// Distilled edge per task on the test set vs the baseline edge.
    pub distilled: Vec<TaskEvaluation>,
    pub distilled_arpi: f64,
    /// Ensemble teacher per task on the test set vs the baseline edge.
    pub teacher: Vec<TaskEvaluation>,
    pub teacher_arpi: f64,
    pub validation_l2: Vec<f64>,
    pub validation_arpi: f64,
    /// Temporal variance of the distilled edges over the test set.
    pub consistency: Vec<ConsistencyReport>,
    /// Mean over tasks of the distilled-edge L2 per post-training month
    /// with hidden truth.
    pub monthly_l2: Vec<(usize, f64)>,
    pub trend: Option<ErrorTrend>,
    pub link_samples: BTreeMap<String, usize>,
    pub ensemble_losses: Vec<f64>,
}

impl IterationSummary {
    pub fn baseline(&self, topology: &HypergraphTopology) -> Result<Baseline> {
        let edges = self
            .distilled_edges
            .iter()
            .map(|r| {
                topology
                    .hyperedge_by_ref(r)
                    .ok_or_else(|| Error::Config(format!("unknown edge {r} in summary")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Baseline {
            edges,
            test_l2: self
                .distilled
                .iter()
                .map(|e| e.scores.iter().map(|s| (s.timestamp, s.l2)).collect())
                .collect(),
            validation_l2: self.validation_l2.clone(),
        })
    }
}

/// Link and median outputs of one timestamp; `None` until computed.
#[derive(Debug, Clone)]
pub struct Products {
    pub inputs: Vec<LayerGrid>,
    pub links: Vec<Option<LayerGrid>>,
    pub medians: Vec<Option<LayerGrid>>,
}

impl Products {
    fn new(inputs: Vec<LayerGrid>, topology: &HypergraphTopology) -> Self {
        Self {
            inputs,
            links: vec![None; topology.hyperedges().len()],
            medians: vec![None; topology.output_nodes().len()],
        }
    }

    fn product(&self, p: Product) -> Result<&LayerGrid> {
        let missing = || Error::structural(format!("product {p:?} used before it was computed"));
        match p {
            Product::Input(i) => Ok(&self.inputs[i]),
            Product::LinkOutput(h) => self.links[h].as_ref().ok_or_else(missing),
            Product::Median(o) => self.medians[o].as_ref().ok_or_else(missing),
        }
    }

    fn volume(&self, topology: &HypergraphTopology, step: PlanStep) -> Result<Volume> {
        Volume::new(
            topology
                .step_inputs(step)
                .into_iter()
                .map(|p| self.product(p).cloned())
                .collect::<Result<_>>()?,
        )
    }
}

/// Runs every plan step up to `max_stage` whose product is missing and
/// whose link exists in `links`.
pub fn execute_plan(
    topology: &HypergraphTopology,
    links: &[Option<&dyn LinkModel>],
    products: &mut Products,
    max_stage: u8,
) -> Result<()> {
    for step in topology.inference_plan() {
        if step.stage() > max_stage {
            continue;
        }
        match step {
            PlanStep::Link { hyperedge, .. } => {
                if products.links[hyperedge].is_some() {
                    continue;
                }
                let Some(link) = links[hyperedge] else { continue };
                let vol = products.volume(topology, step)?;
                products.links[hyperedge] = Some(link.predict(&vol)?);
            }
            PlanStep::Median { output } => {
                if products.medians[output].is_some() {
                    continue;
                }
                let preds: Vec<&LayerGrid> = topology
                    .step_inputs(step)
                    .into_iter()
                    .map(|p| products.product(p))
                    .collect::<Result<_>>()?;
                products.medians[output] = Some(pixelwise_median(&preds)?);
            }
        }
    }
    Ok(())
}

/// Validation slice: the last fifth of the labeled set.
pub fn validation_slice(labeled: &[usize]) -> &[usize] {
    let n = ((labeled.len() as f64 * VALIDATION_FRACTION).ceil() as usize).clamp(1, labeled.len());
    &labeled[labeled.len() - n..]
}

pub struct Engine<'a> {
    pub dataset: &'a Dataset,
    pub topology: HypergraphTopology,
    pub config: EngineConfig,
}

impl<'a> Engine<'a> {
    pub fn new(dataset: &'a Dataset, config: EngineConfig) -> Result<Self> {
        config.validate()?;
        let topology = crate::hypergraph::build_topology(dataset.input_names(), dataset.output_names())?;
        if dataset.split().labeled.is_empty() {
            return Err(Error::Config("the labeled set is empty".into()));
        }
        Ok(Self {
            dataset,
            topology,
            config,
        })
    }

    fn n_outputs(&self) -> usize {
        self.topology.output_nodes().len()
    }

    fn n_inputs(&self) -> usize {
        self.topology.input_nodes().len()
    }

    fn seed(&self, label: &str) -> u64 {
        derive_seed(self.config.seed, label)
    }

    /// Input layers for each timestamp that has all of them.
    fn load_inputs(&self, ts: &[usize], purpose: Purpose) -> Result<BTreeMap<usize, Vec<LayerGrid>>> {
        let mut out = BTreeMap::new();
        for &t in ts {
            match self.dataset.inputs_at(t, purpose)? {
                Some(v) => {
                    out.insert(t, v);
                }
                None => warn!("timestamp {t}: an input layer is missing, skipped for {purpose}"),
            }
        }
        Ok(out)
    }

    /// Products of every timestamp, computed in parallel up to `max_stage`.
    pub fn products(
        &self,
        links: &LinkSet,
        ts: &[usize],
        purpose: Purpose,
        max_stage: u8,
    ) -> Result<BTreeMap<usize, Products>> {
        let inputs = self.load_inputs(ts, purpose)?;
        let refs: Vec<Option<&dyn LinkModel>> = links.models.iter().map(|m| Some(m.as_ref())).collect();
        let computed: Vec<(usize, Result<Products>)> = inputs
            .into_par_iter()
            .map(|(t, inp)| {
                let mut p = Products::new(inp, &self.topology);
                let r = execute_plan(&self.topology, &refs, &mut p, max_stage).map(|_| p);
                (t, r)
            })
            .collect();
        computed.into_iter().map(|(t, r)| r.map(|p| (t, p))).collect()
    }

    fn train_stage(
        &self,
        k: usize,
        stage: u8,
        products: &BTreeMap<usize, Products>,
        targets: &BTreeMap<usize, Vec<Option<LayerGrid>>>,
    ) -> Result<Vec<(usize, Box<dyn LinkModel>, TrainReport)>> {
        let hyperedges: Vec<usize> = self
            .topology
            .hyperedges()
            .iter()
            .enumerate()
            .filter(|(_, h)| h.stage == stage)
            .map(|(i, _)| i)
            .collect();
        let plan = self.topology.inference_plan();
        hyperedges
            .into_par_iter()
            .map(|h| {
                let spec = &self.topology.hyperedges()[h];
                let step = plan
                    .iter()
                    .copied()
                    .find(|s| matches!(s, PlanStep::Link { hyperedge, .. } if *hyperedge == h))
                    .expect("every hyperedge is in the plan");
                let mut samples = Vec::new();
                for (t, p) in products {
                    let Some(Some(target)) = targets.get(t).map(|v| v[spec.output].as_ref()) else {
                        continue;
                    };
                    samples.push(Sample::new(p.volume(&self.topology, step)?, target.clone()));
                }
                let seed = self.seed(&format!("iter{k}/link/{}", spec.link_ref));
                let mut link = self.config.link.build(spec.inputs.len(), seed);
                let report = link
                    .fit(&samples, &self.config.train.with_seed(seed))
                    .map_err(|e| Error::Training(format!("link {}: {e}", spec.link_ref)))?;
                Ok((h, link, report))
            })
            .collect()
    }

    /// Trains every link from fresh initialization on `targets` (ground
    /// truth for labeled timestamps, pseudolabels for unlabeled ones),
    /// honouring the two-stage plan.
    pub fn train_links(&self, k: usize, targets: &BTreeMap<usize, Vec<Option<LayerGrid>>>) -> Result<LinkSet> {
        let ts: Vec<usize> = targets.keys().copied().collect();
        let inputs = self.load_inputs(&ts, Purpose::LinkFit)?;
        let mut products: BTreeMap<usize, Products> =
            inputs.into_iter().map(|(t, i)| (t, Products::new(i, &self.topology))).collect();
        let n = self.topology.hyperedges().len();
        let mut models: Vec<Option<Box<dyn LinkModel>>> = (0..n).map(|_| None).collect();
        let mut reports: Vec<Option<TrainReport>> = vec![None; n];
        for stage in [1u8, 2] {
            for (h, link, report) in self.train_stage(k, stage, &products, targets)? {
                models[h] = Some(link);
                reports[h] = Some(report);
            }
            if stage == 1 {
                let refs: Vec<Option<&dyn LinkModel>> = models.iter().map(|m| m.as_deref()).collect();
                let updated: Vec<Result<()>> = products
                    .par_iter_mut()
                    .map(|(_, p)| execute_plan(&self.topology, &refs, p, 1))
                    .collect();
                updated.into_iter().collect::<Result<()>>()?;
            }
        }
        Ok(LinkSet {
            models: models.into_iter().map(|m| m.expect("all stages trained")).collect(),
            reports,
        })
    }

    /// Ground-truth targets of the labeled set.
    fn labeled_targets(&self, purpose: Purpose) -> Result<BTreeMap<usize, Vec<Option<LayerGrid>>>> {
        let mut out = BTreeMap::new();
        for &t in &self.dataset.split().labeled {
            let row = (0..self.n_outputs())
                .map(|i| self.dataset.target(t, i, purpose))
                .collect::<Result<Vec<_>>>()?;
            out.insert(t, row);
        }
        Ok(out)
    }

    /// Step 1: supervised training of every link on the labeled set.
    pub fn initialize_hypergraph(&self) -> Result<IterationState> {
        let targets = self.labeled_targets(Purpose::LinkFit)?;
        Ok(IterationState {
            k: 1,
            links: self.train_links(1, &targets)?,
            ensembles: Vec::new(),
            ensemble_reports: Vec::new(),
        })
    }

    pub fn candidate_names(&self, output: usize, include_complex: bool) -> Vec<String> {
        self.topology
            .pool_for(output, include_complex)
            .into_iter()
            .map(|h| self.topology.hyperedges()[h].link_ref.clone())
            .collect()
    }

    fn stack(&self, p: &Products, output: usize, include_complex: bool) -> Vec<LayerGrid> {
        self.topology
            .pool_for(output, include_complex)
            .into_iter()
            .map(|h| p.links[h].clone().expect("full products"))
            .collect()
    }

    /// Labeled candidate stacks and ground truth per output node.
    fn labeled_stacks(&self, links: &LinkSet, include_complex: bool) -> Result<Vec<(Vec<Vec<LayerGrid>>, Vec<LayerGrid>)>> {
        let products = self.products(links, &self.dataset.split().labeled, Purpose::EnsembleFit, 2)?;
        let mut out = vec![(Vec::new(), Vec::new()); self.n_outputs()];
        for (t, p) in &products {
            for (o, slot) in out.iter_mut().enumerate() {
                if let Some(gt) = self.dataset.target(*t, o, Purpose::EnsembleFit)? {
                    slot.0.push(self.stack(p, o, include_complex));
                    slot.1.push(gt);
                }
            }
        }
        Ok(out)
    }

    fn fit_all_ensembles(
        &self,
        k: usize,
        links: &LinkSet,
        variant: EnsembleVariant,
        include_complex: bool,
    ) -> Result<Vec<(EnsembleModel, TrainReport)>> {
        let data = self.labeled_stacks(links, include_complex)?;
        data.into_par_iter()
            .enumerate()
            .map(|(o, (stacks, targets))| {
                let name = &self.topology.output_nodes()[o].name;
                let seed = self.seed(&format!("iter{k}/ensemble/{name}/{variant}"));
                fit_ensemble(
                    variant,
                    self.candidate_names(o, include_complex),
                    &stacks,
                    &targets,
                    &self.config.train.with_seed(seed),
                )
                .map_err(|e| Error::Training(format!("ensemble for {name}: {e}")))
            })
            .collect()
    }

    /// Step 2: one ensemble per output node, fitted on labeled stacks only.
    pub fn train_ensembles(&self, mut state: IterationState) -> Result<IterationState> {
        let fitted = self.fit_all_ensembles(state.k, &state.links, self.config.variant, self.config.include_complex)?;
        let (models, reports): (Vec<_>, Vec<_>) = fitted.into_iter().map(|(m, r)| (m, Some(r))).unzip();
        state.ensembles = models;
        state.ensemble_reports = reports;
        Ok(state)
    }

    pub fn provenance(&self, k: usize) -> Provenance {
        Provenance {
            iteration: k,
            variant: self.config.variant,
            include_complex: self.config.include_complex,
            topology_hash: self.topology.hash(),
            candidate_pools: (0..self.n_outputs())
                .map(|o| self.candidate_names(o, self.config.include_complex))
                .collect(),
        }
    }

    /// Step 3: teacher outputs for every unlabeled timestamp with complete
    /// inputs. Pseudolabels are dense.
    pub fn generate_pseudolabels(&self, state: &IterationState) -> Result<PseudolabelStore> {
        if state.ensembles.len() != self.n_outputs() {
            return Err(Error::Config("ensembles must be trained before pseudolabeling".into()));
        }
        let products = self.products(&state.links, &self.dataset.split().unlabeled, Purpose::Pseudolabel, 2)?;
        let labels = products
            .par_iter()
            .map(|(&t, p)| {
                let row = state
                    .ensembles
                    .iter()
                    .enumerate()
                    .map(|(o, e)| {
                        let names = self.candidate_names(o, self.config.include_complex);
                        let out = e.forward_named(&names, &self.stack(p, o, self.config.include_complex))?;
                        Ok(out.densified(0.0))
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok((t, row))
            })
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .collect();
        Ok(PseudolabelStore {
            provenance: self.provenance(state.k),
            labels,
        })
    }

    /// Step 4: retrain every link from scratch on labeled ground truth plus
    /// the previous iteration's pseudolabels, then refit the ensembles.
    pub fn semi_supervised_iteration(&self, state: &IterationState, pseudolabels: &PseudolabelStore) -> Result<IterationState> {
        let next = self.retrain_links(state.k + 1, pseudolabels)?;
        self.train_ensembles(next)
    }

    /// Link half of [`Self::semi_supervised_iteration`].
    pub fn retrain_links(&self, k: usize, pseudolabels: &PseudolabelStore) -> Result<IterationState> {
        if pseudolabels.labels.is_empty() {
            return Err(Error::Config("the pseudolabel store is empty".into()));
        }
        let mut targets = self.labeled_targets(Purpose::LinkFit)?;
        for (&t, row) in &pseudolabels.labels {
            if self.dataset.split_of(t) != Some(crate::dataset::Split::Unlabeled) {
                return Err(Error::Config(format!("pseudolabel for non-unlabeled timestamp {t}")));
            }
            targets.insert(t, row.iter().cloned().map(Some).collect());
        }
        Ok(IterationState {
            k,
            links: self.train_links(k, &targets)?,
            ensembles: Vec::new(),
            ensemble_reports: Vec::new(),
        })
    }

    /// Per task, the E hyperedge with the lowest mean masked L2 on the
    /// validation slice, along with that L2.
    pub fn select_edges(&self, links: &LinkSet) -> Result<Vec<(usize, f64)>> {
        let val = validation_slice(&self.dataset.split().labeled);
        let products = self.products(links, val, Purpose::EnsembleFit, 1)?;
        (0..self.n_outputs())
            .map(|o| {
                let mut best: Option<(usize, f64)> = None;
                for i in 0..self.n_inputs() {
                    let h = self.topology.edge_index(i, o);
                    debug_assert_eq!(self.topology.hyperedges()[h].kind, HyperedgeKind::E);
                    let mut sum = 0.0;
                    let mut n = 0;
                    for (&t, p) in &products {
                        if let Some(gt) = self.dataset.target(t, o, Purpose::EnsembleFit)? {
                            if gt.valid_count() > 0 {
                                sum += masked_l2(p.links[h].as_ref().unwrap(), &gt)?;
                                n += 1;
                            }
                        }
                    }
                    if n == 0 {
                        return Err(Error::UndefinedMetric("no validation target".into()));
                    }
                    let l2 = sum / n as f64;
                    if best.is_none_or(|(_, b)| l2 < b) {
                        best = Some((h, l2));
                    }
                }
                Ok(best.unwrap())
            })
            .collect()
    }

    /// Best E edge for `task` and its test RPI against the baseline edge.
    pub fn distill_best_edge(&self, state: &IterationState, baseline: &Baseline, task: usize) -> Result<(usize, TaskEvaluation)> {
        let (h, _) = self.select_edges(&state.links)?[task];
        let test = self.dataset.split().test.clone();
        let products = self.products(&state.links, &test, Purpose::Evaluate, 1)?;
        let eval = self.score(task, &products, |p| p.links[h].clone().unwrap(), baseline)?;
        Ok((h, eval))
    }

    fn score(
        &self,
        task: usize,
        products: &BTreeMap<usize, Products>,
        pred: impl Fn(&Products) -> LayerGrid,
        baseline: &Baseline,
    ) -> Result<TaskEvaluation> {
        let mut scores = Vec::new();
        for (&t, p) in products {
            let Some(gt) = self.dataset.target(t, task, Purpose::Evaluate)? else { continue };
            if gt.valid_count() == 0 {
                continue;
            }
            let l2 = masked_l2(&pred(p), &gt)?;
            let baseline_l2 = baseline.test_l2[task].get(&t).copied().unwrap_or(l2);
            scores.push(TimestampScore { timestamp: t, l2, baseline_l2 });
        }
        TaskEvaluation::new(self.topology.output_nodes()[task].name.clone(), scores)
    }

    /// Baseline for iteration 1: the selected edges scored against
    /// themselves.
    pub fn baseline_from(&self, state: &IterationState) -> Result<Baseline> {
        let sel = self.select_edges(&state.links)?;
        let products = self.products(&state.links, &self.dataset.split().test, Purpose::Evaluate, 1)?;
        let mut test_l2 = Vec::new();
        for (o, &(h, _)) in sel.iter().enumerate() {
            let mut m = BTreeMap::new();
            for (&t, p) in &products {
                if let Some(gt) = self.dataset.target(t, o, Purpose::Evaluate)? {
                    if gt.valid_count() > 0 {
                        m.insert(t, masked_l2(p.links[h].as_ref().unwrap(), &gt)?);
                    }
                }
            }
            test_l2.push(m);
        }
        Ok(Baseline {
            edges: sel.iter().map(|s| s.0).collect(),
            test_l2,
            validation_l2: sel.iter().map(|s| s.1).collect(),
        })
    }

    /// Test-set evaluation of an iteration: distilled edges, teacher,
    /// consistency and, where hidden truth exists, the monthly error trend.
    pub fn evaluate(&self, state: &IterationState, baseline: &Baseline) -> Result<IterationSummary> {
        let sel = self.select_edges(&state.links)?;
        let test = self.dataset.split().test.clone();
        let products = self.products(&state.links, &test, Purpose::Evaluate, 2)?;
        let names = self.topology.output_names();
        let mut distilled = Vec::new();
        let mut teacher = Vec::new();
        let mut consistency = Vec::new();
        for (o, &(h, _)) in sel.iter().enumerate() {
            distilled.push(self.score(o, &products, |p| p.links[h].clone().unwrap(), baseline)?);
            if let Some(e) = state.ensembles.get(o) {
                let cands = |p: &Products| e.forward(&self.stack(p, o, self.config.include_complex)).unwrap();
                teacher.push(self.score(o, &products, cands, baseline)?);
            }
            let series: Vec<LayerGrid> = products.values().map(|p| p.links[h].clone().unwrap()).collect();
            if series.len() >= DEFAULT_CONSISTENCY_WINDOW {
                consistency.push(temporal_consistency(&names[o], &series, DEFAULT_CONSISTENCY_WINDOW)?);
            }
        }
        let validation_rpis = sel
            .iter()
            .zip(&baseline.validation_l2)
            .map(|(&(_, l2), &b)| crate::metrics::rpi(l2, b))
            .collect::<Result<Vec<_>>>()?;
        let monthly_l2 = self.monthly_analysis(state, &sel.iter().map(|s| s.0).collect::<Vec<_>>())?;
        let trend = (monthly_l2.len() >= MIN_TREND_POINTS)
            .then(|| {
                let (t, v): (Vec<f64>, Vec<f64>) = monthly_l2.iter().map(|&(t, v)| (t as f64, v)).unzip();
                error_trend(&t, &v)
            })
            .transpose()?;
        let link_samples = self
            .topology
            .hyperedges()
            .iter()
            .zip(&state.links.reports)
            .filter_map(|(h, r)| r.as_ref().map(|r| (h.link_ref.clone(), r.samples)))
            .collect();
        Ok(IterationSummary {
            iteration: state.k,
            variant: self.config.variant,
            include_complex: self.config.include_complex,
            tasks: names,
            baseline_edges: baseline.edges.iter().map(|&h| self.topology.hyperedges()[h].link_ref.clone()).collect(),
            distilled_edges: sel.iter().map(|&(h, _)| self.topology.hyperedges()[h].link_ref.clone()).collect(),
            distilled_arpi: arpi_of(&distilled)?,
            distilled,
            teacher_arpi: if teacher.is_empty() { f64::NAN } else { arpi_of(&teacher)? },
            teacher,
            validation_l2: sel.iter().map(|s| s.1).collect(),
            validation_arpi: arpi(&validation_rpis)?,
            consistency,
            monthly_l2,
            trend,
            link_samples,
            ensemble_losses: state.ensemble_reports.iter().flatten().map(|r| r.final_loss).collect(),
        })
    }

    /// Mean over tasks of each edge's masked L2 for every month after the
    /// labeled set where every task has truth (hidden or not).
    pub fn monthly_analysis(&self, state: &IterationState, edges: &[usize]) -> Result<Vec<(usize, f64)>> {
        let split = self.dataset.split();
        let mut ts: Vec<usize> = split.test.iter().chain(&split.unlabeled).copied().collect();
        ts.sort_unstable();
        let products = self.products(&state.links, &ts, Purpose::Analysis, 1)?;
        let mut out = Vec::new();
        'month: for (&t, p) in &products {
            let mut sum = 0.0;
            for (o, &h) in edges.iter().enumerate() {
                match self.dataset.target(t, o, Purpose::Analysis)? {
                    Some(gt) if gt.valid_count() > 0 => sum += masked_l2(p.links[h].as_ref().unwrap(), &gt)?,
                    _ => continue 'month,
                }
            }
            out.push((t, sum / edges.len() as f64));
        }
        Ok(out)
    }

    /// Fits every ensemble variant on the same labeled candidates and
    /// scores each teacher on the test set.
    pub fn compare_ensembles(
        &self,
        state: &IterationState,
        baseline: &Baseline,
        include_complex: bool,
    ) -> Result<Vec<(EnsembleVariant, Vec<TaskEvaluation>)>> {
        let test = self.dataset.split().test.clone();
        let products = self.products(&state.links, &test, Purpose::Evaluate, 2)?;
        EnsembleVariant::ALL
            .into_iter()
            .map(|v| {
                let models = self.fit_all_ensembles(state.k, &state.links, v, include_complex)?;
                let evals = models
                    .iter()
                    .enumerate()
                    .map(|(o, (m, _))| self.score(o, &products, |p| m.forward(&self.stack(p, o, include_complex)).unwrap(), baseline))
                    .collect::<Result<Vec<_>>>()?;
                Ok((v, evals))
            })
            .collect()
    }

    /// The monolithic all-inputs to all-outputs baseline trained on the
    /// labeled set and scored on the test set.
    pub fn evaluate_mte(&self, baseline: &Baseline, hidden: usize) -> Result<(MteBaseline, Vec<TaskEvaluation>)> {
        let labeled = self.dataset.split().labeled.clone();
        let inputs = self.load_inputs(&labeled, Purpose::LinkFit)?;
        let mut samples = Vec::new();
        for (t, inp) in inputs {
            let targets = (0..self.n_outputs())
                .map(|o| self.dataset.target(t, o, Purpose::LinkFit))
                .collect::<Result<Vec<_>>>()?;
            samples.push(MteSample {
                input: Volume::new(inp)?,
                targets,
            });
        }
        let seed = self.seed("mte");
        let mut mte = MteBaseline::new(self.n_inputs(), self.n_outputs(), hidden, seed);
        mte.fit(&samples, &self.config.train.with_seed(seed))?;
        let test = self.dataset.split().test.clone();
        let inputs = self.load_inputs(&test, Purpose::Evaluate)?;
        let preds: BTreeMap<usize, Vec<LayerGrid>> = inputs
            .into_iter()
            .map(|(t, inp)| Ok((t, mte.predict(&Volume::new(inp)?)?)))
            .collect::<Result<_>>()?;
        let mut evals = Vec::new();
        for o in 0..self.n_outputs() {
            let mut scores = Vec::new();
            for (&t, p) in &preds {
                let Some(gt) = self.dataset.target(t, o, Purpose::Evaluate)? else { continue };
                if gt.valid_count() == 0 {
                    continue;
                }
                let l2 = masked_l2(&p[o], &gt)?;
                let baseline_l2 = baseline.test_l2[o].get(&t).copied().unwrap_or(l2);
                scores.push(TimestampScore { timestamp: t, l2, baseline_l2 });
            }
            evals.push(TaskEvaluation::new(self.topology.output_nodes()[o].name.clone(), scores)?);
        }
        Ok((mte, evals))
    }
}
