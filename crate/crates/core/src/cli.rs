//! The `fqr` command-line front end.
//!
//! Every artifact carries a [`RunManifest`]: JSON outputs wrap their payload
//! as `{"manifest": ..., ...}` and CSV outputs start with a
//! `# fqr-manifest {...}` comment line, which the library's readers skip.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::basis::{compute_gram_set, GramSet, SplineBasis};
use crate::design::{assemble_design, fmt_f64, load_csv, DatasetManifest, DesignMatrices, FunctionalDataset};
use crate::error::{FqrError, Result};
use crate::inference::{
    alpha_intervals, build_pcb, build_scb, wild_bootstrap, write_alpha_intervals, write_replicates, BootstrapConfig,
};
use crate::simlab::{run_study, Method, Selection, SimScenario, StudyConfig};
use crate::solver::{fit_close, fit_sql, FitResult, FitResultJson, SolverConfig, ZeroThreshold};
use crate::tune::{default_grid, tune_fit, write_score_table, TuneGrid};

pub const EXIT_INPUT: i32 = 2;
pub const EXIT_CONVERGENCE: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "fqr", version, about = "Locally sparse functional quantile regression")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit one model.
    Fit(FitArgs),
    /// Select (λ, γ) by BIC over a grid and fit the winner.
    Tune(TuneArgs),
    /// Split wild bootstrap bands and α intervals.
    Bootstrap(BootstrapArgs),
    /// Run a simulation study.
    Simulate(SimulateArgs),
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct DataArgs {
    /// Wide CSV, one row per sample.
    #[arg(long)]
    #[serde(skip)]
    pub data: PathBuf,
    /// JSON sidecar describing the CSV columns.
    #[arg(long)]
    #[serde(skip)]
    pub manifest: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ModelArgs {
    #[arg(long)]
    pub tau: f64,
    /// Number of knot subintervals.
    #[arg(long = "K", default_value_t = 20)]
    pub k: usize,
    /// Spline degree.
    #[arg(long = "p", default_value_t = 3)]
    pub p: usize,
    /// Roughness derivative order.
    #[arg(long = "q", default_value_t = 2)]
    pub q: usize,
    #[arg(long, default_value_t = 0.01)]
    pub lambda: f64,
    #[arg(long, default_value_t = 1e-6)]
    pub gamma: f64,
    /// Smoothing bandwidth, 0 for ((K+p+d)/n)^{2/5}.
    #[arg(long, default_value_t = 0.0)]
    pub bandwidth: f64,
    /// Roughness penalty only, no sparsity.
    #[arg(long)]
    pub sql: bool,
    /// Null-region cutoff as a fraction of the largest subinterval RMS.
    #[arg(long, default_value_t = 1e-3)]
    pub zero_threshold: f64,
}

impl ModelArgs {
    fn basis(&self, data: &FunctionalDataset) -> Result<SplineBasis> {
        let g = &data.grid;
        SplineBasis::new(g[0], g[g.len() - 1], self.k, self.p)
    }

    fn solver(&self, m: usize) -> SolverConfig {
        let mut cfg = SolverConfig::new(self.tau, m)
            .with_gamma(self.gamma)
            .with_lambda(if self.sql { 0.0 } else { self.lambda })
            .with_bandwidth(self.bandwidth);
        cfg.q = self.q;
        cfg.zero_threshold = ZeroThreshold::Relative(self.zero_threshold);
        cfg
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct FitArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    /// Output directory.
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct TuneArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    /// Comma-separated λ values.
    #[arg(long, value_delimiter = ',')]
    pub lambda_grid: Vec<f64>,
    /// Comma-separated γ values.
    #[arg(long, value_delimiter = ',')]
    pub gamma_grid: Vec<f64>,
    /// Use the default 8×6 grid.
    #[arg(long, conflicts_with_all = ["lambda_grid", "gamma_grid"])]
    pub auto_grid: bool,
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct BootstrapArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    /// Bootstrap replicates per half.
    #[arg(long = "B", default_value_t = 200)]
    pub b: usize,
    /// Band level a, giving 100(1-a)% bands.
    #[arg(long, default_value_t = 0.05)]
    pub level: f64,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum MethodArg {
    Close,
    Sql,
    Both,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SimulateArgs {
    /// normal, cauchy or two-cov.
    #[arg(long)]
    pub scenario: String,
    #[arg(long, default_value_t = 500)]
    pub n: usize,
    #[arg(long, default_value_t = 0.5)]
    pub tau: f64,
    #[arg(long, default_value_t = 100)]
    pub replicates: usize,
    #[arg(long, value_enum, default_value_t = MethodArg::Both)]
    pub method: MethodArg,
    #[arg(long, default_value_t = 20240101)]
    pub seed: u64,
    #[arg(long = "K", default_value_t = 50)]
    pub k: usize,
    /// Fixed λ; without it (λ, γ) are chosen by BIC.
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long, default_value_t = 1e-8)]
    pub gamma: f64,
    /// Sample size that sets the default tuning grid (defaults to --n).
    #[arg(long)]
    pub grid_n: Option<usize>,
    #[arg(long, default_value_t = 1e-2)]
    pub zero_threshold: f64,
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
}

/// Provenance embedded in every artifact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    /// SHA-256 of each input file, keyed by role.
    pub input_hashes: BTreeMap<String, String>,
    pub tool_version: String,
}

impl RunManifest {
    fn new(command: &str, config: serde_json::Value, seed: Option<u64>, inputs: &[(&str, &Path)]) -> Result<Self> {
        let mut input_hashes = BTreeMap::new();
        for (role, path) in inputs {
            input_hashes.insert(role.to_string(), sha256_file(path)?);
        }
        Ok(Self {
            command: command.to_string(),
            config,
            seed,
            input_hashes,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
        })
    }

    fn comment_line(&self) -> Result<String> {
        Ok(format!("# fqr-manifest {}\n", serde_json::to_string(self)?))
    }

    /// Manifest from the first line of a CSV artifact.
    pub fn from_csv(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| FqrError::io(path, e))?;
        let first = text.lines().next().unwrap_or_default();
        let json = first
            .strip_prefix("# fqr-manifest ")
            .ok_or_else(|| FqrError::InvalidInput(format!("{} carries no manifest line", path.display())))?;
        Ok(serde_json::from_str(json)?)
    }
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| FqrError::io(path, e))?;
    Ok(format!("{:x}", Sha256::digest(bytes)))
}

fn to_value<T: Serialize>(v: &T) -> Result<serde_json::Value> {
    Ok(serde_json::to_value(v)?)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).map_err(|e| FqrError::io(path, e))?))
}

/// Write a CSV artifact: manifest line, then whatever `body` emits.
fn write_csv_artifact(
    path: &Path,
    manifest: &RunManifest,
    body: impl FnOnce(&mut BufWriter<File>) -> Result<()>,
) -> Result<()> {
    let mut f = create(path)?;
    f.write_all(manifest.comment_line()?.as_bytes()).map_err(|e| FqrError::io(path, e))?;
    body(&mut f)?;
    f.flush().map_err(|e| FqrError::io(path, e))
}

fn write_json_artifact(path: &Path, manifest: &RunManifest, key: &str, payload: serde_json::Value) -> Result<()> {
    let mut obj = serde_json::Map::new();
    obj.insert("manifest".into(), to_value(manifest)?);
    obj.insert(key.into(), payload);
    let s = serde_json::to_string_pretty(&serde_json::Value::Object(obj))?;
    std::fs::write(path, s + "\n").map_err(|e| FqrError::io(path, e))
}

/// Read back the fit stored by `fqr fit`, `tune` or `bootstrap`.
pub fn read_fit_artifact(path: &Path) -> Result<(RunManifest, FitResult)> {
    #[derive(Deserialize)]
    struct Wrapped {
        manifest: RunManifest,
        fit: FitResultJson,
    }
    let s = std::fs::read_to_string(path).map_err(|e| FqrError::io(path, e))?;
    let w: Wrapped = serde_json::from_str(&s)?;
    Ok((w.manifest, w.fit.into_fit()?))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| FqrError::io(dir, e))
}

fn file_stem(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

struct Loaded {
    data: FunctionalDataset,
    basis: SplineBasis,
    gram: GramSet,
    design: DesignMatrices,
}

fn load(data: &DataArgs, model: &ModelArgs) -> Result<Loaded> {
    let manifest = DatasetManifest::read(&data.manifest)?;
    let dataset = load_csv(&data.data, &manifest)?;
    let basis = model.basis(&dataset)?;
    let gram = compute_gram_set(&basis, model.q)?;
    let design = assemble_design(&dataset, &basis)?;
    Ok(Loaded {
        data: dataset,
        basis,
        gram,
        design,
    })
}

fn inputs(data: &DataArgs) -> [(&'static str, &Path); 2] {
    [("data", data.data.as_path()), ("manifest", data.manifest.as_path())]
}

/// `fit.json` and `beta_<name>.csv` with β̂ on the observation grid.
fn write_fit_outputs(out: &Path, manifest: &RunManifest, loaded: &Loaded, fit: &FitResult) -> Result<()> {
    write_json_artifact(&out.join("fit.json"), manifest, "fit", to_value(&FitResultJson::from(fit))?)?;
    for (l, name) in loaded.data.functional_names.iter().enumerate() {
        let path = out.join(format!("beta_{}.csv", file_stem(name)));
        write_csv_artifact(&path, manifest, |f| {
            let mut w = csv::Writer::from_writer(f);
            w.write_record(["t", "beta", "null_flag"])?;
            for &t in &loaded.data.grid {
                let flag = fit.in_null_region(l, t);
                w.write_record([fmt_f64(t), fmt_f64(fit.beta(l, t)?), u8::from(flag).to_string()])?;
            }
            w.flush().map_err(|e| FqrError::io(&path, e))?;
            Ok(())
        })?;
    }
    Ok(())
}

fn fit_model(loaded: &Loaded, cfg: &SolverConfig) -> Result<FitResult> {
    if cfg.is_sql() {
        fit_sql(&loaded.design, &loaded.basis, &loaded.gram, cfg)
    } else {
        fit_close(&loaded.design, &loaded.basis, &loaded.gram, cfg)
    }
}

pub fn cmd_fit(args: &FitArgs) -> Result<()> {
    let loaded = load(&args.data, &args.model)?;
    let cfg = args.model.solver(loaded.data.num_functional());
    let fit = fit_model(&loaded, &cfg)?;
    let config = serde_json::json!({ "args": args, "solver": cfg, "bandwidth": fit.bandwidth });
    let manifest = RunManifest::new("fit", config, None, &inputs(&args.data))?;
    ensure_dir(&args.out)?;
    write_fit_outputs(&args.out, &manifest, &loaded, &fit)
}

pub fn cmd_tune(args: &TuneArgs) -> Result<()> {
    let loaded = load(&args.data, &args.model)?;
    let n = loaded.data.len();
    let grid = if args.auto_grid {
        default_grid(n, args.model.k)
    } else {
        if args.lambda_grid.is_empty() || args.gamma_grid.is_empty() {
            return Err(FqrError::InvalidInput(
                "pass --auto-grid or both --lambda-grid and --gamma-grid".into(),
            ));
        }
        TuneGrid::new(args.lambda_grid.clone(), args.gamma_grid.clone())?
    };
    let cfg = args.model.solver(loaded.data.num_functional());
    let outcome = tune_fit(&loaded.design, &loaded.basis, &loaded.gram, &grid, &cfg)?;
    let config = serde_json::json!({ "args": args, "solver": cfg, "grid": grid });
    let manifest = RunManifest::new("tune", config, None, &inputs(&args.data))?;
    ensure_dir(&args.out)?;
    write_csv_artifact(&args.out.join("scores.csv"), &manifest, |f| write_score_table(f, &outcome.table))?;
    write_fit_outputs(&args.out, &manifest, &loaded, &outcome.fit)
}

pub fn cmd_bootstrap(args: &BootstrapArgs) -> Result<()> {
    let loaded = load(&args.data, &args.model)?;
    let cfg = args.model.solver(loaded.data.num_functional());
    let fit = fit_model(&loaded, &cfg)?;
    let boot = BootstrapConfig::new(args.b, args.seed);
    let summary = wild_bootstrap(&loaded.design, &loaded.basis, &loaded.gram, &cfg, &fit, &boot)?;
    let config = serde_json::json!({ "args": args, "solver": cfg, "bootstrap": boot });
    let manifest = RunManifest::new("bootstrap", config, Some(args.seed), &inputs(&args.data))?;
    let out = &args.out;
    ensure_dir(out)?;
    write_fit_outputs(out, &manifest, &loaded, &fit)?;
    write_json_artifact(&out.join("bootstrap.json"), &manifest, "summary", to_value(&summary)?)?;
    let names = &loaded.data.functional_names;
    for band in build_scb(&summary, args.level)?.into_iter().chain(build_pcb(&summary, args.level)?) {
        let path = out.join(format!("{}_{}.csv", band.kind.label(), file_stem(&names[band.covariate])));
        write_csv_artifact(&path, &manifest, |f| band.write_csv(f))?;
    }
    let cis = alpha_intervals(&summary, args.level)?;
    write_csv_artifact(&out.join("alpha_ci.csv"), &manifest, |f| {
        write_alpha_intervals(f, &loaded.data.scalar_names, &cis)
    })?;
    write_csv_artifact(&out.join("replicates.csv"), &manifest, |f| write_replicates(f, &summary))
}

pub fn cmd_simulate(args: &SimulateArgs) -> Result<()> {
    let scenario = SimScenario::by_name(&args.scenario, args.n, args.tau)?.with_seed(args.seed);
    let methods = match args.method {
        MethodArg::Close => vec![Method::Close],
        MethodArg::Sql => vec![Method::Sql],
        MethodArg::Both => vec![Method::Sql, Method::Close],
    };
    let selection = match args.lambda {
        Some(lambda) => Selection::Fixed {
            lambda,
            gamma: args.gamma,
        },
        None => Selection::Tuned {
            grid: default_grid(args.grid_n.unwrap_or(args.n), args.k),
        },
    };
    let m = scenario.betas.len();
    let mut study = StudyConfig::new(methods, args.replicates, args.k, selection, args.tau, m);
    study.solver.zero_threshold = ZeroThreshold::Relative(args.zero_threshold);
    let output = run_study(&scenario, &study)?;
    let config = serde_json::json!({ "args": args, "scenario": scenario, "study": study });
    let manifest = RunManifest::new("simulate", config, Some(args.seed), &[])?;
    ensure_dir(&args.out)?;
    write_csv_artifact(&args.out.join("report.csv"), &manifest, |f| output.write_csv(f))?;
    write_json_artifact(&args.out.join("manifest.json"), &manifest, "reports", to_value(&output.reports)?)?;
    let path = args.out.join("replicates.jsonl");
    let mut f = create(&path)?;
    output.write_jsonl(&mut f)?;
    f.flush().map_err(|e| FqrError::io(&path, e))
}

/// Size the global pool from `FQR_THREADS` when set.
pub fn init_threads() -> Result<()> {
    let Ok(v) = std::env::var("FQR_THREADS") else {
        return Ok(());
    };
    let threads: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|t| *t > 0)
        .ok_or_else(|| FqrError::InvalidInput(format!("FQR_THREADS must be a positive integer, got '{v}'")))?;
    // a pool may already exist when embedded; keep it
    let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
    Ok(())
}

pub fn run(cli: &Cli) -> Result<()> {
    init_threads()?;
    match &cli.command {
        Command::Fit(a) => cmd_fit(a),
        Command::Tune(a) => cmd_tune(a),
        Command::Bootstrap(a) => cmd_bootstrap(a),
        Command::Simulate(a) => cmd_simulate(a),
    }
}

pub fn exit_code(err: &FqrError) -> i32 {
    if err.is_input_error() {
        EXIT_INPUT
    } else {
        EXIT_CONVERGENCE
    }
}

/// Parse `args`, run, and map the outcome to a process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_INPUT } else { 0 };
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
