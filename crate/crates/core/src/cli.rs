//! Command-line front end: `synth`, `run`, `report`, `eval-ensembles`.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::dataset::Dataset;
use crate::engine::{run_experiment, write_report, Engine, EngineConfig, RunConfig, MTE_HIDDEN};
use crate::ensembles::EnsembleVariant;
use crate::error::{Error, Result};
use crate::links::LinkSpec;
use crate::metrics::arpi_of;
use crate::optim::TrainConfig;
use crate::synth::{generate, SynthConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_TRAINING: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "mthg", version, about = "Multi-task hypergraph semi-supervised learning on raster layers")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset.
    Synth(SynthArgs),
    /// Run the multi-iteration semi-supervised experiment.
    Run(RunArgs),
    /// Summary tables of a completed run.
    Report(ReportArgs),
    /// Fit every ensemble variant on the same iteration-1 candidates.
    EvalEnsembles(EvalArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 64)]
    pub width: usize,
    #[arg(long, default_value_t = 32)]
    pub height: usize,
    #[arg(long, default_value_t = 106)]
    pub months: usize,
    #[arg(long, default_value_t = 4)]
    pub inputs: usize,
    #[arg(long, default_value_t = 3)]
    pub outputs: usize,
    #[arg(long, default_value_t = 12)]
    pub period: usize,
    /// Per-month drift of latent statistics.
    #[arg(long, default_value_t = 0.0)]
    pub drift: f64,
    #[arg(long, default_value_t = 0.02)]
    pub noise: f64,
    #[arg(long, default_value_t = 5)]
    pub latents: usize,
    /// Labeled months (with --test); default follows 119:30:62.
    #[arg(long, requires = "test")]
    pub labeled: Option<usize>,
    #[arg(long, requires = "labeled")]
    pub test: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

impl SynthArgs {
    pub fn config(&self) -> SynthConfig {
        SynthConfig {
            width: self.width,
            height: self.height,
            months: self.months,
            n_inputs: self.inputs,
            n_outputs: self.outputs,
            seasonal_period: self.period,
            drift_rate: self.drift,
            noise_sigma: self.noise,
            latents: self.latents,
            mask_styles: None,
            split: self.labeled.zip(self.test),
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum LinkKind {
    LinearPatch,
    TinyConv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum VariantArg {
    PlainMean,
    SMean,
    SLrFw,
    SNnDw,
    SNnDpw,
    SNnD,
}

impl From<VariantArg> for EnsembleVariant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::PlainMean => EnsembleVariant::PlainMean,
            VariantArg::SMean => EnsembleVariant::SMean,
            VariantArg::SLrFw => EnsembleVariant::SLrFw,
            VariantArg::SNnDw => EnsembleVariant::SNnDw,
            VariantArg::SNnDpw => EnsembleVariant::SNnDpw,
            VariantArg::SNnD => EnsembleVariant::SNnD,
        }
    }
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    /// Dataset manifest, or the directory holding manifest.json.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = false)]
    pub include_complex: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Concurrent fits (defaults to available cores).
    #[arg(long)]
    pub jobs: Option<usize>,
    #[arg(long, value_enum, default_value_t = LinkKind::LinearPatch)]
    pub link: LinkKind,
    /// Hidden maps of tiny-conv links.
    #[arg(long, default_value_t = 8)]
    pub hidden: usize,
    #[arg(long, default_value_t = 1)]
    pub patch_radius: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub ridge_lambda: f64,
    #[arg(long, default_value_t = 100)]
    pub max_epochs: usize,
    #[arg(long, default_value_t = 0.01)]
    pub lr: f64,
}

impl ModelArgs {
    fn link_spec(&self) -> LinkSpec {
        match self.link {
            LinkKind::LinearPatch => LinkSpec::LinearPatch {
                patch_radius: self.patch_radius,
                ridge_lambda: self.ridge_lambda,
            },
            LinkKind::TinyConv => LinkSpec::TinyConv { hidden: self.hidden },
        }
    }

    fn train(&self) -> TrainConfig {
        TrainConfig {
            max_epochs: self.max_epochs,
            initial_learning_rate: self.lr,
            ..TrainConfig::default()
        }
    }

    fn manifest_path(&self) -> PathBuf {
        manifest_path(&self.data)
    }

    fn jobs(&self) -> usize {
        self.jobs
            .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1))
    }
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub run_dir: PathBuf,
    #[arg(long, value_enum, default_value_t = VariantArg::SNnDw)]
    pub ensemble: VariantArg,
    #[arg(long, default_value_t = 3)]
    pub iterations: usize,
    /// Stop early when validation ARPI gains less than this.
    #[arg(long)]
    pub convergence_tol: Option<f64>,
    /// Recompute every phase even when its artifacts exist.
    #[arg(long, default_value_t = false)]
    pub force: bool,
}

impl RunArgs {
    pub fn run_config(&self) -> RunConfig {
        let engine = EngineConfig {
            link: self.model.link_spec(),
            train: self.model.train(),
            variant: self.ensemble.into(),
            include_complex: self.model.include_complex,
            iterations: self.iterations,
            seed: self.model.seed,
            convergence_tol: self.convergence_tol,
        };
        let data = self.model.manifest_path();
        let data = std::fs::canonicalize(&data).unwrap_or(data);
        RunConfig::new(data, engine, self.model.jobs())
    }
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(long)]
    pub run_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Directory for ensembles_rpi.csv.
    #[arg(long)]
    pub out: PathBuf,
    /// Also fit the monolithic multi-task baseline.
    #[arg(long, default_value_t = false)]
    pub with_mte: bool,
    /// Hidden maps of the multi-task baseline.
    #[arg(long, default_value_t = MTE_HIDDEN)]
    pub mte_hidden: usize,
}

fn manifest_path(data: &Path) -> PathBuf {
    if data.is_dir() {
        data.join("manifest.json")
    } else {
        data.to_path_buf()
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Parameter(_) | Error::Config(_) => EXIT_USAGE,
        Error::Training(_) | Error::UndefinedObjective(_) | Error::UndefinedMetric(_) => EXIT_TRAINING,
        Error::Structural(_)
        | Error::Format { .. }
        | Error::MissingFile(_)
        | Error::Io { .. }
        | Error::Json { .. } => EXIT_DATA,
    }
}

fn with_pool<T: Send>(jobs: usize, f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    pool.install(f)
}

pub fn cmd_synth(args: &SynthArgs, out: &mut String) -> Result<()> {
    let manifest = generate(&args.config(), &args.out)?;
    writeln!(
        out,
        "{} ({} months, {} layers)",
        args.out.join("manifest.json").display(),
        manifest.timestamps,
        manifest.layers.len()
    )
    .unwrap();
    Ok(())
}

pub fn cmd_run(args: &RunArgs, out: &mut String) -> Result<()> {
    let config = args.run_config();
    let outcome = with_pool(config.jobs, || run_experiment(&config, &args.run_dir, args.force))?;
    for it in &outcome.iterations {
        let s = &it.summary;
        writeln!(
            out,
            "iteration {}: distilled ARPI {:.4}  teacher ARPI {:.4}",
            s.iteration, s.distilled_arpi, s.teacher_arpi
        )
        .unwrap();
    }
    Ok(())
}

pub fn cmd_report(args: &ReportArgs, out: &mut String) -> Result<()> {
    for p in write_report(&args.run_dir)? {
        writeln!(out, "{}", p.display()).unwrap();
    }
    Ok(())
}

pub fn cmd_eval_ensembles(args: &EvalArgs, out: &mut String) -> Result<()> {
    let dataset = Dataset::open(&args.model.manifest_path())?;
    let engine_config = EngineConfig {
        link: args.model.link_spec(),
        train: args.model.train(),
        include_complex: args.model.include_complex,
        iterations: 1,
        seed: args.model.seed,
        ..EngineConfig::default()
    };
    let text = with_pool(args.model.jobs(), || {
        let engine = Engine::new(&dataset, engine_config)?;
        let state = engine.initialize_hypergraph()?;
        let baseline = engine.baseline_from(&state)?;
        let names = engine.topology.output_names();
        let mut csv = format!("model,{},ARPI\n", names.join(","));
        for (v, evals) in engine.compare_ensembles(&state, &baseline, args.model.include_complex)? {
            let cells: Vec<String> = evals.iter().map(|e| e.rpi.to_string()).collect();
            writeln!(csv, "{v},{},{}", cells.join(","), arpi_of(&evals)?).unwrap();
        }
        if args.with_mte {
            let (_, evals) = engine.evaluate_mte(&baseline, args.mte_hidden)?;
            let cells: Vec<String> = evals.iter().map(|e| e.rpi.to_string()).collect();
            writeln!(csv, "mte,{},{}", cells.join(","), arpi_of(&evals)?).unwrap();
        }
        Ok(csv)
    })?;
    std::fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    let path = args.out.join("ensembles_rpi.csv");
    std::fs::write(&path, &text).map_err(|e| Error::io(&path, e))?;
    out.push_str(&text);
    Ok(())
}

pub fn execute(cli: &Cli, out: &mut String) -> Result<()> {
    match &cli.command {
        Command::Synth(a) => cmd_synth(a, out),
        Command::Run(a) => cmd_run(a, out),
        Command::Report(a) => cmd_report(a, out),
        Command::EvalEnsembles(a) => cmd_eval_ensembles(a, out),
    }
}

/// Parses `args`, runs the command and returns `(exit code, stdout,
/// stderr)`. Errors are reported on a single line.
pub fn run_cli<I, T>(args: I) -> (i32, String, String)
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => {
                    (EXIT_OK, e.to_string(), String::new())
                }
                _ => (EXIT_USAGE, String::new(), one_line(&e.to_string())),
            }
        }
    };
    let mut out = String::new();
    match execute(&cli, &mut out) {
        Ok(()) => (EXIT_OK, out, String::new()),
        Err(e) => (exit_code(&e), out, one_line(&format!("error: {e}"))),
    }
}

fn one_line(s: &str) -> String {
    let joined: Vec<&str> = s.lines().map(str::trim).filter(|l| !l.is_empty()).collect();
    joined.join(" ") + "\n"
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synth_defaults() {
        let cli = Cli::try_parse_from(["mthg", "synth", "--out", "x"]).unwrap();
        let Command::Synth(a) = cli.command else { panic!() };
        let c = a.config();
        assert_eq!((c.n_inputs, c.n_outputs, c.months), (4, 3, 106));
        assert_eq!((c.width, c.height), (64, 32));
    }

    #[test]
    fn usage_errors_exit_one_on_a_single_line() {
        let (code, _, err) = run_cli(["mthg", "run", "--bogus"]);
        assert_eq!(code, EXIT_USAGE);
        assert_eq!(err.lines().count(), 1);
        let dir = tempfile::tempdir().unwrap();
        let (code, _, err) = run_cli(["mthg", "synth", "--out", dir.path().to_str().unwrap(), "--width", "4"]);
        assert_eq!(code, EXIT_USAGE);
        assert_eq!(err.lines().count(), 1);
        assert!(err.contains("8x8"), "{err}");
    }

    #[test]
    fn help_lists_defaults() {
        let (code, out, _) = run_cli(["mthg", "run", "--help"]);
        assert_eq!(code, EXIT_OK);
        for flag in ["--iterations", "--ensemble", "--include-complex", "--jobs", "--max-epochs", "--lr", "--force"] {
            assert!(out.contains(flag), "{flag}");
        }
        assert!(out.contains("[default: 3]"));
        assert!(out.contains("[default: s-nn-dw]"));
    }

    #[test]
    fn missing_run_is_a_data_error_naming_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let (code, _, err) = run_cli(["mthg", "report", "--run-dir", dir.path().to_str().unwrap()]);
        assert_eq!(code, EXIT_DATA);
        assert!(err.contains("run.json"), "{err}");
    }

    #[test]
    fn variant_names_agree() {
        for (arg, v) in [
            (VariantArg::PlainMean, EnsembleVariant::PlainMean),
            (VariantArg::SNnDpw, EnsembleVariant::SNnDpw),
        ] {
            let name = arg.to_possible_value().unwrap().get_name().to_string();
            assert_eq!(name, v.name());
            assert_eq!(EnsembleVariant::from(arg), v);
        }
    }
}
