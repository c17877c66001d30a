//! Task nodes, typed hyperedges, the two-stage inference plan and the
//! per-node candidate pools.

use std::collections::HashSet;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const TOPOLOGY_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeKind {
    Input,
    Output,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct NodeId {
    pub kind: NodeKind,
    pub index: usize,
    pub name: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum HyperedgeKind {
    E,
    EH,
    AH,
    CH,
}

impl HyperedgeKind {
    pub fn stage(self) -> u8 {
        match self {
            HyperedgeKind::E | HyperedgeKind::AH => 1,
            HyperedgeKind::EH | HyperedgeKind::CH => 2,
        }
    }

    pub fn is_complex(self) -> bool {
        matches!(self, HyperedgeKind::AH | HyperedgeKind::CH)
    }
}

impl fmt::Display for HyperedgeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            HyperedgeKind::E => "E",
            HyperedgeKind::EH => "EH",
            HyperedgeKind::AH => "AH",
            HyperedgeKind::CH => "CH",
        };
        f.write_str(s)
    }
}

/// What a hyperedge consumes: an input layer, the stage-1 median of the E
/// predictions into an output node, or the stage-1 AH prediction of an
/// output node. Indices are ordinals within the node kind.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Source {
    Input(usize),
    Median(usize),
    Aggregate(usize),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HyperedgeSpec {
    pub kind: HyperedgeKind,
    pub inputs: Vec<Source>,
    pub output: usize,
    pub stage: u8,
    pub link_ref: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HypergraphTopology {
    input_nodes: Vec<NodeId>,
    output_nodes: Vec<NodeId>,
    hyperedges: Vec<HyperedgeSpec>,
}

fn check_name(name: &str) -> Result<()> {
    if name.is_empty() || !name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
        return Err(Error::structural(format!(
            "node name {name:?} must be non-empty ASCII alphanumerics or '_'"
        )));
    }
    Ok(())
}

/// Builds the full four-type hypergraph over the given node names.
pub fn build_topology<S: AsRef<str>>(input_names: &[S], output_names: &[S]) -> Result<HypergraphTopology> {
    if input_names.is_empty() || output_names.is_empty() {
        return Err(Error::structural("topology needs at least one input and one output node"));
    }
    let mut seen = HashSet::new();
    for name in input_names.iter().chain(output_names).map(AsRef::as_ref) {
        check_name(name)?;
        if !seen.insert(name) {
            return Err(Error::structural(format!("duplicate node name {name:?}")));
        }
    }
    let node = |kind, (index, name): (usize, &S)| NodeId {
        kind,
        index,
        name: name.as_ref().to_string(),
    };
    let input_nodes: Vec<NodeId> = input_names.iter().enumerate().map(|p| node(NodeKind::Input, p)).collect();
    let output_nodes: Vec<NodeId> = output_names.iter().enumerate().map(|p| node(NodeKind::Output, p)).collect();
    let n_in = input_nodes.len();
    let n_out = output_nodes.len();
    let out_name = |o: usize| output_nodes[o].name.as_str();

    let mut hyperedges = Vec::with_capacity(n_in * n_out + n_out * (n_out - 1) + 2 * n_out);
    for o in 0..n_out {
        for i in 0..n_in {
            hyperedges.push(HyperedgeSpec {
                kind: HyperedgeKind::E,
                inputs: vec![Source::Input(i)],
                output: o,
                stage: 1,
                link_ref: format!("E-{}-{}", input_nodes[i].name, out_name(o)),
            });
        }
    }
    for o in 0..n_out {
        for src in (0..n_out).filter(|&s| s != o) {
            hyperedges.push(HyperedgeSpec {
                kind: HyperedgeKind::EH,
                inputs: vec![Source::Median(src)],
                output: o,
                stage: 2,
                link_ref: format!("EH-{}-{}", out_name(src), out_name(o)),
            });
        }
    }
    for o in 0..n_out {
        hyperedges.push(HyperedgeSpec {
            kind: HyperedgeKind::AH,
            inputs: (0..n_in).map(Source::Input).collect(),
            output: o,
            stage: 1,
            link_ref: format!("AH-{}", out_name(o)),
        });
    }
    for o in 0..n_out {
        let inputs = (0..n_in)
            .map(Source::Input)
            .chain((0..n_out).map(Source::Aggregate))
            .collect();
        hyperedges.push(HyperedgeSpec {
            kind: HyperedgeKind::CH,
            inputs,
            output: o,
            stage: 2,
            link_ref: format!("CH-{}", out_name(o)),
        });
    }
    Ok(HypergraphTopology {
        input_nodes,
        output_nodes,
        hyperedges,
    })
}

/// One step of the staged inference plan.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlanStep {
    /// Run the link owned by hyperedge `usize`.
    Link { hyperedge: usize, stage: u8 },
    /// Pixelwise median over the E predictions into output `usize`.
    Median { output: usize },
}

impl PlanStep {
    pub fn stage(&self) -> u8 {
        match self {
            PlanStep::Link { stage, .. } => *stage,
            PlanStep::Median { .. } => 1,
        }
    }
}

/// A product emitted or consumed by a plan step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Product {
    Input(usize),
    LinkOutput(usize),
    Median(usize),
}

impl HypergraphTopology {
    pub fn input_nodes(&self) -> &[NodeId] {
        &self.input_nodes
    }

    pub fn output_nodes(&self) -> &[NodeId] {
        &self.output_nodes
    }

    pub fn hyperedges(&self) -> &[HyperedgeSpec] {
        &self.hyperedges
    }

    pub fn input_names(&self) -> Vec<String> {
        self.input_nodes.iter().map(|n| n.name.clone()).collect()
    }

    pub fn output_names(&self) -> Vec<String> {
        self.output_nodes.iter().map(|n| n.name.clone()).collect()
    }

    pub fn count(&self, kind: HyperedgeKind) -> usize {
        self.hyperedges.iter().filter(|h| h.kind == kind).count()
    }

    pub fn hyperedge_by_ref(&self, link_ref: &str) -> Option<usize> {
        self.hyperedges.iter().position(|h| h.link_ref == link_ref)
    }

    /// Index of the E hyperedge from input `input` into output `output`.
    pub fn edge_index(&self, input: usize, output: usize) -> usize {
        output * self.input_nodes.len() + input
    }

    pub fn source_name(&self, src: Source) -> String {
        match src {
            Source::Input(i) => format!("input:{}", self.input_nodes[i].name),
            Source::Median(o) => format!("median:{}", self.output_nodes[o].name),
            Source::Aggregate(o) => format!("ah:{}", self.output_nodes[o].name),
        }
    }

    /// Stage-1 links (E then AH), then one median per output node, then the
    /// stage-2 links (EH then CH). Every link appears exactly once.
    pub fn inference_plan(&self) -> Vec<PlanStep> {
        let link = |kind: HyperedgeKind| {
            self.hyperedges
                .iter()
                .enumerate()
                .filter(move |(_, h)| h.kind == kind)
                .map(|(i, h)| PlanStep::Link {
                    hyperedge: i,
                    stage: h.stage,
                })
        };
        let mut plan: Vec<PlanStep> = link(HyperedgeKind::E).chain(link(HyperedgeKind::AH)).collect();
        plan.extend((0..self.output_nodes.len()).map(|output| PlanStep::Median { output }));
        plan.extend(link(HyperedgeKind::EH).chain(link(HyperedgeKind::CH)));
        plan
    }

    /// Products a step consumes.
    pub fn step_inputs(&self, step: PlanStep) -> Vec<Product> {
        match step {
            PlanStep::Link { hyperedge, .. } => self.hyperedges[hyperedge]
                .inputs
                .iter()
                .map(|&s| self.source_product(s))
                .collect(),
            PlanStep::Median { output } => (0..self.input_nodes.len())
                .map(|i| Product::LinkOutput(self.edge_index(i, output)))
                .collect(),
        }
    }

    pub fn step_output(&self, step: PlanStep) -> Product {
        match step {
            PlanStep::Link { hyperedge, .. } => Product::LinkOutput(hyperedge),
            PlanStep::Median { output } => Product::Median(output),
        }
    }

    pub fn source_product(&self, src: Source) -> Product {
        match src {
            Source::Input(i) => Product::Input(i),
            Source::Median(o) => Product::Median(o),
            Source::Aggregate(o) => Product::LinkOutput(self.aggregate_index(o)),
        }
    }

    fn first_of(&self, kind: HyperedgeKind) -> usize {
        self.hyperedges
            .iter()
            .position(|h| h.kind == kind)
            .expect("every topology has AH and CH hyperedges")
    }

    pub fn aggregate_index(&self, output: usize) -> usize {
        self.first_of(HyperedgeKind::AH) + output
    }

    pub fn cycle_index(&self, output: usize) -> usize {
        self.first_of(HyperedgeKind::CH) + output
    }

    /// Hyperedges whose predictions form the ensemble candidates for an
    /// output node: its E then EH hyperedges, plus AH and CH when complex
    /// hyperedges are included. The order is stable.
    pub fn candidate_pool(&self, node: &NodeId, include_complex: bool) -> Result<Vec<usize>> {
        if node.kind != NodeKind::Output {
            return Err(Error::Parameter(format!("{} is not an output node", node.name)));
        }
        match self.output_nodes.get(node.index) {
            Some(n) if n == node => {}
            _ => return Err(Error::Parameter(format!("unknown output node {}", node.name))),
        }
        Ok(self.pool_for(node.index, include_complex))
    }

    pub fn pool_for(&self, output: usize, include_complex: bool) -> Vec<usize> {
        self.hyperedges
            .iter()
            .enumerate()
            .filter(|(_, h)| h.output == output && (include_complex || !h.kind.is_complex()))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn to_manifest(&self) -> TopologyManifest {
        TopologyManifest {
            format_version: TOPOLOGY_FORMAT_VERSION,
            input_nodes: self.input_names(),
            output_nodes: self.output_names(),
            hyperedges: self
                .hyperedges
                .iter()
                .map(|h| HyperedgeRecord {
                    kind: h.kind,
                    inputs: h.inputs.iter().map(|&s| self.source_name(s)).collect(),
                    output: self.output_nodes[h.output].name.clone(),
                    stage: h.stage,
                    link_ref: h.link_ref.clone(),
                })
                .collect(),
        }
    }

    pub fn from_manifest(manifest: &TopologyManifest) -> Result<Self> {
        if manifest.format_version != TOPOLOGY_FORMAT_VERSION {
            return Err(Error::Config(format!(
                "unsupported topology format version {}",
                manifest.format_version
            )));
        }
        let topo = build_topology(&manifest.input_nodes, &manifest.output_nodes)?;
        if topo.to_manifest() != *manifest {
            return Err(Error::Config("topology manifest does not match its node lists".into()));
        }
        Ok(topo)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_manifest()).expect("manifest serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let manifest: TopologyManifest =
            serde_json::from_str(&text).map_err(|e| Error::Json {
                path: path.to_path_buf(),
                source: e,
            })?;
        Self::from_manifest(&manifest)
    }

    /// Hex SHA-256 of the serialized manifest.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_json().as_bytes()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TopologyManifest {
    pub format_version: u32,
    pub input_nodes: Vec<String>,
    pub output_nodes: Vec<String>,
    pub hyperedges: Vec<HyperedgeRecord>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HyperedgeRecord {
    pub kind: HyperedgeKind,
    pub inputs: Vec<String>,
    pub output: String,
    pub stage: u8,
    pub link_ref: String,
}
