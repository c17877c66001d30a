//! On-disk datasets: the JSON manifest, in-memory loading and the access
//! audit that records which timestamps each phase reads.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::grid::{LayerGrid, Volume};
use crate::hypergraph::NodeKind;
use crate::synth::SynthConfig;

pub const MANIFEST_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerInfo {
    pub name: String,
    pub kind: NodeKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerEntry {
    pub timestamp: usize,
    pub layer: String,
    /// Relative to the manifest directory.
    pub path: String,
    pub available: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub labeled: Vec<usize>,
    pub test: Vec<usize>,
    pub unlabeled: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub width: usize,
    pub height: usize,
    pub timestamps: usize,
    pub layers: Vec<LayerInfo>,
    pub entries: Vec<LayerEntry>,
    pub split: SplitSpec,
    /// Generator settings when the dataset is synthetic.
    #[serde(default)]
    pub synth: Option<SynthConfig>,
}

impl Manifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Json {
            path: path.into(),
            source: e,
        })?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn names(&self, kind: NodeKind) -> Vec<String> {
        self.layers.iter().filter(|l| l.kind == kind).map(|l| l.name.clone()).collect()
    }

    /// Structural checks that do not touch the grid files.
    pub fn validate(&self) -> Result<()> {
        if self.format_version != MANIFEST_FORMAT_VERSION {
            return Err(Error::Config(format!(
                "manifest format version {} is not supported",
                self.format_version
            )));
        }
        let s = &self.split;
        let mut seen = BTreeSet::new();
        for &t in s.labeled.iter().chain(&s.test).chain(&s.unlabeled) {
            if t >= self.timestamps {
                return Err(Error::Config(format!("split timestamp {t} out of range")));
            }
            if !seen.insert(t) {
                return Err(Error::Config(format!("timestamp {t} is in more than one split")));
            }
        }
        let mut index = BTreeSet::new();
        for e in &self.entries {
            if !self.layers.iter().any(|l| l.name == e.layer) {
                return Err(Error::Config(format!("entry for unknown layer {}", e.layer)));
            }
            if !index.insert((e.timestamp, e.layer.as_str())) {
                return Err(Error::Config(format!("duplicate entry {} at {}", e.layer, e.timestamp)));
            }
        }
        let outputs = self.names(NodeKind::Output);
        for &t in &s.labeled {
            for o in &outputs {
                let ok = self.entries.iter().any(|e| e.timestamp == t && &e.layer == o && e.available);
                if !ok {
                    return Err(Error::Config(format!("labeled timestamp {t} lacks output layer {o}")));
                }
            }
        }
        Ok(())
    }
}

/// Loads and validates a manifest; every referenced file must exist.
pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(path.into()),
        _ => Error::io(path, e),
    })?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Json {
        path: path.into(),
        source: e,
    })?;
    manifest.validate()?;
    let root = path.parent().unwrap_or(Path::new("."));
    for e in &manifest.entries {
        let p = root.join(&e.path);
        if !p.is_file() {
            return Err(Error::MissingFile(p));
        }
    }
    Ok(manifest)
}

pub fn load_grid(path: &Path) -> Result<LayerGrid> {
    LayerGrid::load_grd1(path)
}

/// Why a timestamp was read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Purpose {
    LinkFit,
    EnsembleFit,
    Pseudolabel,
    Evaluate,
    /// Post-hoc analysis against hidden truth (error trends).
    Analysis,
}

impl Purpose {
    pub fn is_fit(self) -> bool {
        matches!(self, Purpose::LinkFit | Purpose::EnsembleFit)
    }
}

impl fmt::Display for Purpose {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Split {
    Labeled,
    Test,
    Unlabeled,
}

/// Counts of reads per (purpose, split, timestamp).
#[derive(Debug, Default)]
pub struct AccessAudit {
    reads: Mutex<BTreeMap<(Purpose, usize), usize>>,
}

impl AccessAudit {
    fn record(&self, purpose: Purpose, t: usize) {
        *self.reads.lock().unwrap().entry((purpose, t)).or_default() += 1;
    }

    pub fn reads(&self) -> BTreeMap<(Purpose, usize), usize> {
        self.reads.lock().unwrap().clone()
    }

    pub fn timestamps_for(&self, purpose: Purpose) -> BTreeSet<usize> {
        self.reads.lock().unwrap().keys().filter(|(p, _)| *p == purpose).map(|&(_, t)| t).collect()
    }

    pub fn clear(&self) {
        self.reads.lock().unwrap().clear();
    }
}

/// A dataset fully loaded into memory. Every read goes through the audit;
/// fit-purpose reads of test timestamps and non-analysis reads of
/// unavailable layers are refused.
#[derive(Debug)]
pub struct Dataset {
    pub manifest: Manifest,
    root: PathBuf,
    inputs: Vec<String>,
    outputs: Vec<String>,
    /// `[t][j]`
    input_grids: Vec<Vec<Option<LayerGrid>>>,
    /// `[t][i]`, with availability
    output_grids: Vec<Vec<Option<(LayerGrid, bool)>>>,
    split_of: Vec<Option<Split>>,
    audit: AccessAudit,
}

impl Dataset {
    pub fn open(manifest_path: &Path) -> Result<Self> {
        let manifest = load_manifest(manifest_path)?;
        let root = manifest_path.parent().unwrap_or(Path::new(".")).to_path_buf();
        let inputs = manifest.names(NodeKind::Input);
        let outputs = manifest.names(NodeKind::Output);
        let n = manifest.timestamps;
        let mut input_grids = vec![vec![None; inputs.len()]; n];
        let mut output_grids = vec![vec![None; outputs.len()]; n];
        for e in &manifest.entries {
            let grid = load_grid(&root.join(&e.path))?;
            if grid.width() != manifest.width || grid.height() != manifest.height {
                return Err(Error::Config(format!("{} has dimensions {}x{}", e.path, grid.width(), grid.height())));
            }
            if e.timestamp >= n {
                return Err(Error::Config(format!("entry timestamp {} out of range", e.timestamp)));
            }
            if let Some(j) = inputs.iter().position(|x| x == &e.layer) {
                if e.available {
                    input_grids[e.timestamp][j] = Some(grid);
                }
            } else if let Some(i) = outputs.iter().position(|x| x == &e.layer) {
                output_grids[e.timestamp][i] = Some((grid, e.available));
            }
        }
        let mut split_of = vec![None; n];
        for &t in &manifest.split.labeled {
            split_of[t] = Some(Split::Labeled);
        }
        for &t in &manifest.split.test {
            split_of[t] = Some(Split::Test);
        }
        for &t in &manifest.split.unlabeled {
            split_of[t] = Some(Split::Unlabeled);
        }
        Ok(Self {
            manifest,
            root,
            inputs,
            outputs,
            input_grids,
            output_grids,
            split_of,
            audit: AccessAudit::default(),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn input_names(&self) -> &[String] {
        &self.inputs
    }

    pub fn output_names(&self) -> &[String] {
        &self.outputs
    }

    pub fn split(&self) -> &SplitSpec {
        &self.manifest.split
    }

    pub fn split_of(&self, t: usize) -> Option<Split> {
        self.split_of.get(t).copied().flatten()
    }

    pub fn audit(&self) -> &AccessAudit {
        &self.audit
    }

    fn check(&self, t: usize, purpose: Purpose) -> Result<()> {
        if t >= self.split_of.len() {
            return Err(Error::Parameter(format!("timestamp {t} out of range")));
        }
        self.audit.record(purpose, t);
        if purpose.is_fit() && self.split_of(t) == Some(Split::Test) {
            return Err(Error::Config(format!("test timestamp {t} requested for {purpose}")));
        }
        Ok(())
    }

    /// All input layers at `t`, or `None` when one is missing.
    pub fn inputs_at(&self, t: usize, purpose: Purpose) -> Result<Option<Vec<LayerGrid>>> {
        self.check(t, purpose)?;
        Ok(self.input_grids[t].iter().cloned().collect())
    }

    pub fn input_volume(&self, t: usize, purpose: Purpose) -> Result<Option<Volume>> {
        self.inputs_at(t, purpose)?.map(Volume::new).transpose()
    }

    /// Ground truth of output `i` at `t` when available; hidden truth is
    /// only served for [`Purpose::Analysis`].
    pub fn target(&self, t: usize, i: usize, purpose: Purpose) -> Result<Option<LayerGrid>> {
        self.check(t, purpose)?;
        Ok(match &self.output_grids[t][i] {
            Some((g, true)) => Some(g.clone()),
            Some((g, false)) if purpose == Purpose::Analysis => Some(g.clone()),
            _ => None,
        })
    }

    /// SHA-256 over the manifest and every grid, in entry order.
    pub fn content_hash(&self) -> Result<String> {
        dataset_hash(&self.root.join("manifest.json"))
    }
}

pub fn dataset_hash(manifest_path: &Path) -> Result<String> {
    let manifest = load_manifest(manifest_path)?;
    let root = manifest_path.parent().unwrap_or(Path::new("."));
    let mut h = Sha256::new();
    h.update(std::fs::read(manifest_path).map_err(|e| Error::io(manifest_path, e))?);
    for e in &manifest.entries {
        let p = root.join(&e.path);
        h.update(std::fs::read(&p).map_err(|err| Error::io(&p, err))?);
    }
    Ok(hex::encode(h.finalize()))
}
