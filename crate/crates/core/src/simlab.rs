//! Simulation designs with Wiener-process covariates and the metrics used to
//! score locally sparse fits against a known truth.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Cauchy, Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal as NormalDist};

use crate::basis::{compute_gram_set, SplineBasis};
use crate::design::{assemble_design, fmt_f64, trapezoid_weights, FunctionalDataset};
use crate::error::{FqrError, Result};
use crate::solver::{fit_close, fit_sql, FitResult, SolverConfig};
use crate::tune::{tune_fit, TuneGrid};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "law", rename_all = "lowercase")]
pub enum ErrorLaw {
    Normal { sigma: f64 },
    Cauchy { scale: f64 },
}

impl ErrorLaw {
    /// `F^{-1}(τ)`.
    pub fn quantile(&self, tau: f64) -> f64 {
        match *self {
            ErrorLaw::Normal { sigma } => {
                sigma * NormalDist::new(0.0, 1.0).expect("unit normal").inverse_cdf(tau)
            }
            ErrorLaw::Cauchy { scale } => scale * (std::f64::consts::PI * (tau - 0.5)).tan(),
        }
    }

    pub fn density(&self, x: f64) -> f64 {
        match *self {
            ErrorLaw::Normal { sigma } => crate::loss::norm_pdf(x / sigma) / sigma,
            ErrorLaw::Cauchy { scale } => 1.0 / (std::f64::consts::PI * scale * (1.0 + (x / scale).powi(2))),
        }
    }

    /// Density of the shifted error `e - F^{-1}(τ)` at zero.
    pub fn density_at_quantile(&self, tau: f64) -> f64 {
        self.density(self.quantile(tau))
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            ErrorLaw::Normal { sigma } => Normal::new(0.0, sigma).expect("sigma > 0").sample(rng),
            ErrorLaw::Cauchy { scale } => Cauchy::new(0.0, scale).expect("scale > 0").sample(rng),
        }
    }
}

/// True coefficient functions used by the designs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BetaShape {
    /// `sin(2πt) 1{-0.5 <= t <= 0.5}`
    SineWindow,
    /// `sin(2πt) 1{t <= 0}`
    SineLeft,
    Zero,
}

impl BetaShape {
    pub fn eval(self, t: f64) -> f64 {
        let s = (2.0 * std::f64::consts::PI * t).sin();
        match self {
            BetaShape::SineWindow if (-0.5..=0.5).contains(&t) => s,
            BetaShape::SineLeft if t <= 0.0 => s,
            _ => 0.0,
        }
    }
}

/// One simulation design.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimScenario {
    pub name: String,
    pub n: usize,
    pub grid_len: usize,
    pub domain: (f64, f64),
    pub betas: Vec<BetaShape>,
    pub alpha: Vec<f64>,
    pub sigma_z: f64,
    pub error: ErrorLaw,
    pub tau: f64,
    pub seed: u64,
    /// Fine-grid refinement factor for the Wiener paths and `∫Xβ`.
    pub refine: usize,
}

impl SimScenario {
    fn base(name: &str, n: usize, tau: f64, error: ErrorLaw, betas: Vec<BetaShape>) -> Self {
        Self {
            name: name.to_string(),
            n,
            grid_len: 101,
            domain: (-1.0, 1.0),
            betas,
            alpha: vec![0.0, 1.0, 1.0],
            sigma_z: 0.1,
            error,
            tau,
            seed: 20240101,
            refine: 10,
        }
    }

    /// Scenario I: Normal(0, 0.02²) errors, one functional covariate.
    pub fn normal(n: usize, tau: f64) -> Self {
        Self::base("normal", n, tau, ErrorLaw::Normal { sigma: 0.02 }, vec![BetaShape::SineWindow])
    }

    /// Scenario II: Cauchy(0, 0.01) errors.
    pub fn cauchy(n: usize, tau: f64) -> Self {
        Self::base("cauchy", n, tau, ErrorLaw::Cauchy { scale: 0.01 }, vec![BetaShape::SineWindow])
    }

    /// Two functional covariates with Normal errors.
    pub fn two_covariates(n: usize, tau: f64) -> Self {
        Self::base(
            "two-cov",
            n,
            tau,
            ErrorLaw::Normal { sigma: 0.02 },
            vec![BetaShape::SineLeft, BetaShape::SineWindow],
        )
    }

    pub fn by_name(name: &str, n: usize, tau: f64) -> Result<Self> {
        match name {
            "normal" => Ok(Self::normal(n, tau)),
            "cauchy" => Ok(Self::cauchy(n, tau)),
            "two-cov" => Ok(Self::two_covariates(n, tau)),
            other => Err(FqrError::InvalidInput(format!(
                "unknown scenario '{other}' (expected normal, cauchy or two-cov)"
            ))),
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.grid_len < 2 || self.refine == 0 {
            return Err(FqrError::InvalidInput("scenario needs n >= 1, grid_len >= 2, refine >= 1".into()));
        }
        if !(self.domain.1 > self.domain.0) {
            return Err(FqrError::InvalidInput("scenario domain is empty".into()));
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(FqrError::InvalidInput(format!("tau = {} must lie in (0, 1)", self.tau)));
        }
        if self.alpha.is_empty() {
            return Err(FqrError::InvalidInput("alpha must include the intercept".into()));
        }
        Ok(())
    }

    /// Observation grid, `grid_len` equally spaced points.
    pub fn grid(&self) -> Vec<f64> {
        equispaced(self.domain, self.grid_len)
    }

    /// RNG for replicate `r`: the scenario seed with stream `r`.
    pub fn rng(&self, replicate: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(replicate);
        rng
    }

    /// Draw replicate `r`.
    pub fn generate(&self, replicate: u64) -> Result<FunctionalDataset> {
        self.validate()?;
        let mut rng = self.rng(replicate);
        let n = self.n;
        let d = self.alpha.len();
        let m = self.betas.len();
        let fine_len = (self.grid_len - 1) * self.refine + 1;
        let fine = equispaced(self.domain, fine_len);
        let fine_w = trapezoid_weights(&fine);
        let dt = (self.domain.1 - self.domain.0) / (fine_len - 1) as f64;
        let sd = dt.sqrt();
        let beta_fine: Vec<Vec<f64>> = self
            .betas
            .iter()
            .map(|b| fine.iter().map(|t| b.eval(*t)).collect())
            .collect();

        let mut z = DMatrix::zeros(n, d);
        let mut x: Vec<DMatrix<f64>> = (0..m).map(|_| DMatrix::zeros(n, self.grid_len)).collect();
        let mut y = DVector::zeros(n);
        let shift = self.error.quantile(self.tau);
        let mut path = vec![0.0; fine_len];
        for i in 0..n {
            z[(i, 0)] = 1.0;
            for j in 1..d {
                let e: f64 = rng.sample(StandardNormal);
                z[(i, j)] = self.sigma_z * e;
            }
            let mut yi: f64 = (0..d).map(|j| z[(i, j)] * self.alpha[j]).sum();
            for l in 0..m {
                path[0] = 0.0;
                for s in 1..fine_len {
                    let e: f64 = rng.sample(StandardNormal);
                    path[s] = path[s - 1] + sd * e;
                }
                for g in 0..self.grid_len {
                    x[l][(i, g)] = path[g * self.refine];
                }
                yi += path
                    .iter()
                    .zip(&beta_fine[l])
                    .zip(&fine_w)
                    .map(|((p, b), w)| p * b * w)
                    .sum::<f64>();
            }
            y[i] = yi + self.error.sample(&mut rng) - shift;
        }
        FunctionalDataset::new(y, z, x, self.grid())
    }
}

fn equispaced(domain: (f64, f64), count: usize) -> Vec<f64> {
    let (a, b) = domain;
    let span = b - a;
    let last = (count - 1) as f64;
    (0..count)
        .map(|i| if i + 1 == count { b } else { a + span * i as f64 / last })
        .collect()
}

/// True discovery rate on the null region and false discovery rate on the
/// non-null region; `None` when the corresponding region is empty.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiscoveryRates {
    pub tdr: Option<f64>,
    pub fdr: Option<f64>,
}

/// Treated as zero when scoring the truth.
pub const TRUE_ZERO_TOL: f64 = 1e-12;

/// Whether `t` lies in a closed flagged subinterval.
pub fn point_is_flagged(basis: &SplineBasis, flags: &[bool], t: f64) -> Result<bool> {
    let j = basis.locate(t)?;
    if flags[j] {
        return Ok(true);
    }
    let tol = 1e-9 * basis.subinterval_width();
    let k = basis.num_subintervals();
    Ok((j > 0 && (t - basis.breakpoint(j)).abs() <= tol && flags[j - 1])
        || (j + 1 < k && (basis.breakpoint(j + 1) - t).abs() <= tol && flags[j + 1]))
}

/// Grid-point counts of `|N̂ ∩ N| / |N|` and `|N̂ ∩ S| / |S|`.
pub fn tdr_fdr(basis: &SplineBasis, flags: &[bool], truth: impl Fn(f64) -> f64, grid: &[f64]) -> Result<DiscoveryRates> {
    if flags.len() != basis.num_subintervals() {
        return Err(FqrError::Dimension {
            context: "null flags",
            expected: basis.num_subintervals(),
            got: flags.len(),
        });
    }
    let (mut n_null, mut n_sig, mut hit_null, mut hit_sig) = (0usize, 0usize, 0usize, 0usize);
    for &t in grid {
        let flagged = point_is_flagged(basis, flags, t)?;
        if truth(t).abs() <= TRUE_ZERO_TOL {
            n_null += 1;
            hit_null += flagged as usize;
        } else {
            n_sig += 1;
            hit_sig += flagged as usize;
        }
    }
    let rate = |hit: usize, total: usize| (total > 0).then(|| hit as f64 / total as f64);
    Ok(DiscoveryRates {
        tdr: rate(hit_null, n_null),
        fdr: rate(hit_sig, n_sig),
    })
}

/// `∫ (β̂ - β)^2` by trapezoid on a fine grid.
pub fn integrated_squared_error(fit: &FitResult, l: usize, truth: impl Fn(f64) -> f64) -> Result<f64> {
    let basis = &fit.basis;
    let pts = equispaced((basis.domain_start(), basis.domain_end()), 2001);
    let w = trapezoid_weights(&pts);
    let mut acc = 0.0;
    for (t, wt) in pts.iter().zip(&w) {
        let e = fit.beta(l, *t)? - truth(*t);
        acc += wt * e * e;
    }
    Ok(acc)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Close,
    Sql,
}

impl Method {
    pub fn label(self) -> &'static str {
        match self {
            Method::Close => "close",
            Method::Sql => "sql",
        }
    }
}

/// Either a fixed `(λ, γ)` pair or BIC tuning over a grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Selection {
    Fixed { lambda: f64, gamma: f64 },
    Tuned { grid: TuneGrid },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyConfig {
    pub methods: Vec<Method>,
    pub replicates: usize,
    pub num_subintervals: usize,
    pub degree: usize,
    pub selection: Selection,
    pub solver: SolverConfig,
}

impl StudyConfig {
    pub fn new(methods: Vec<Method>, replicates: usize, num_subintervals: usize, selection: Selection, tau: f64, m: usize) -> Self {
        Self {
            methods,
            replicates,
            num_subintervals,
            degree: 3,
            selection,
            solver: SolverConfig::new(tau, m),
        }
    }
}

/// Scores of one method on one replicate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateRecord {
    pub replicate: usize,
    pub method: Method,
    pub lambda: Vec<f64>,
    pub gamma: Vec<f64>,
    pub converged: bool,
    pub alpha: Vec<f64>,
    /// Per covariate.
    pub tdr: Vec<Option<f64>>,
    pub fdr: Vec<Option<f64>>,
    pub l2: Vec<f64>,
    pub ise: Vec<f64>,
    pub null_flags: Vec<Vec<bool>>,
}

/// Aggregates over replicates for one method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub scenario: String,
    pub method: Method,
    pub n: usize,
    pub tau: f64,
    pub replicates: usize,
    /// Per covariate; `None` if undefined in every replicate.
    pub tdr: Vec<Option<f64>>,
    pub fdr: Vec<Option<f64>>,
    pub l2_error: Vec<f64>,
    pub imse: Vec<f64>,
    pub alpha_bias: Vec<f64>,
    pub alpha_se: Vec<f64>,
}

fn mean_defined(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let (s, c) = values.flatten().fold((0.0, 0usize), |(s, c), v| (s + v, c + 1));
    (c > 0).then(|| s / c as f64)
}

impl MetricReport {
    pub fn aggregate(scenario: &SimScenario, method: Method, records: &[&ReplicateRecord]) -> Self {
        let m = scenario.betas.len();
        let d = scenario.alpha.len();
        let r = records.len().max(1) as f64;
        let mean = |f: &dyn Fn(&ReplicateRecord) -> f64| records.iter().map(|x| f(x)).sum::<f64>() / r;
        let alpha_mean: Vec<f64> = (0..d).map(|j| mean(&|x| x.alpha[j])).collect();
        let alpha_se = (0..d)
            .map(|j| {
                if records.len() < 2 {
                    return 0.0;
                }
                let ss: f64 = records.iter().map(|x| (x.alpha[j] - alpha_mean[j]).powi(2)).sum();
                (ss / (records.len() - 1) as f64).sqrt()
            })
            .collect();
        Self {
            scenario: scenario.name.clone(),
            method,
            n: scenario.n,
            tau: scenario.tau,
            replicates: records.len(),
            tdr: (0..m).map(|l| mean_defined(records.iter().map(|x| x.tdr[l]))).collect(),
            fdr: (0..m).map(|l| mean_defined(records.iter().map(|x| x.fdr[l]))).collect(),
            l2_error: (0..m).map(|l| mean(&|x| x.l2[l])).collect(),
            imse: (0..m).map(|l| mean(&|x| x.ise[l])).collect(),
            alpha_bias: alpha_mean.iter().zip(&scenario.alpha).map(|(a, t)| a - t).collect(),
            alpha_se,
        }
    }

    pub fn csv_header(m: usize, d: usize) -> Vec<String> {
        let mut h: Vec<String> = ["scenario", "method", "n", "tau", "replicates"].iter().map(|s| s.to_string()).collect();
        for l in 1..=m {
            for k in ["tdr", "fdr", "l2", "imse"] {
                h.push(format!("{k}_{l}"));
            }
        }
        for j in 0..d {
            h.push(format!("alpha{j}_bias"));
            h.push(format!("alpha{j}_se"));
        }
        h
    }

    pub fn csv_row(&self) -> Vec<String> {
        let opt = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), fmt_f64);
        let mut row = vec![
            self.scenario.clone(),
            self.method.label().to_string(),
            self.n.to_string(),
            fmt_f64(self.tau),
            self.replicates.to_string(),
        ];
        for l in 0..self.l2_error.len() {
            row.push(opt(self.tdr[l]));
            row.push(opt(self.fdr[l]));
            row.push(fmt_f64(self.l2_error[l]));
            row.push(fmt_f64(self.imse[l]));
        }
        for j in 0..self.alpha_bias.len() {
            row.push(fmt_f64(self.alpha_bias[j]));
            row.push(fmt_f64(self.alpha_se[j]));
        }
        row
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyOutput {
    pub records: Vec<ReplicateRecord>,
    pub reports: Vec<MetricReport>,
}

impl StudyOutput {
    pub fn report(&self, method: Method) -> Option<&MetricReport> {
        self.reports.iter().find(|r| r.method == method)
    }

    pub fn records_for(&self, method: Method) -> Vec<&ReplicateRecord> {
        self.records.iter().filter(|r| r.method == method).collect()
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        if let Some(first) = self.reports.first() {
            w.write_record(MetricReport::csv_header(first.l2_error.len(), first.alpha_bias.len()))?;
        }
        for r in &self.reports {
            w.write_record(r.csv_row())?;
        }
        w.flush().map_err(|e| FqrError::io("<metric report>", e))?;
        Ok(())
    }

    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        for r in &self.records {
            serde_json::to_writer(&mut out, r)?;
            out.write_all(b"\n").map_err(|e| FqrError::io("<replicate dump>", e))?;
        }
        Ok(())
    }
}

/// Fit one replicate with `method`, returning the fit and the chosen pair.
pub fn fit_replicate(
    data: &FunctionalDataset,
    basis: &SplineBasis,
    config: &StudyConfig,
    method: Method,
) -> Result<(FitResult, Vec<f64>, Vec<f64>)> {
    let gram = compute_gram_set(basis, config.solver.q)?;
    let design = assemble_design(data, basis)?;
    let m = data.num_functional();
    match (&config.selection, method) {
        (Selection::Fixed { lambda, gamma }, _) => {
            let mut cfg = config.solver.clone();
            cfg.gamma = vec![*gamma; m];
            cfg.lambda = vec![if method == Method::Close { *lambda } else { 0.0 }; m];
            let fit = match method {
                Method::Close => fit_close(&design, basis, &gram, &cfg)?,
                Method::Sql => fit_sql(&design, basis, &gram, &cfg)?,
            };
            Ok((fit, cfg.lambda, cfg.gamma))
        }
        (Selection::Tuned { grid }, Method::Close) => {
            let out = tune_fit(&design, basis, &gram, grid, &config.solver)?;
            Ok((out.fit, out.lambda, out.gamma))
        }
        (Selection::Tuned { grid }, Method::Sql) => {
            let g = TuneGrid {
                lambda: vec![0.0],
                gamma: grid.gamma.clone(),
                shared_across_l: grid.shared_across_l,
            };
            let out = tune_fit(&design, basis, &gram, &g, &config.solver)?;
            Ok((out.fit, out.lambda, out.gamma))
        }
    }
}

fn score(scenario: &SimScenario, replicate: usize, method: Method, fit: FitResult, lambda: Vec<f64>, gamma: Vec<f64>) -> Result<ReplicateRecord> {
    let grid = scenario.grid();
    let m = scenario.betas.len();
    let mut tdr = Vec::with_capacity(m);
    let mut fdr = Vec::with_capacity(m);
    let mut l2 = Vec::with_capacity(m);
    let mut ise = Vec::with_capacity(m);
    for (l, shape) in scenario.betas.iter().enumerate() {
        let rates = tdr_fdr(&fit.basis, &fit.null_flags[l], |t| shape.eval(t), &grid)?;
        tdr.push(rates.tdr);
        fdr.push(rates.fdr);
        let e = integrated_squared_error(&fit, l, |t| shape.eval(t))?;
        ise.push(e);
        l2.push(e.sqrt());
    }
    Ok(ReplicateRecord {
        replicate,
        method,
        lambda,
        gamma,
        converged: fit.converged,
        alpha: fit.alpha.iter().copied().collect(),
        tdr,
        fdr,
        l2,
        ise,
        null_flags: fit.null_flags,
    })
}

/// Generate, fit and score `config.replicates` datasets. Results do not
/// depend on the number of worker threads.
pub fn run_study(scenario: &SimScenario, config: &StudyConfig) -> Result<StudyOutput> {
    scenario.validate()?;
    if config.replicates == 0 {
        return Err(FqrError::InvalidInput("replicates must be at least 1".into()));
    }
    if config.methods.is_empty() {
        return Err(FqrError::InvalidInput("no methods requested".into()));
    }
    let basis = SplineBasis::new(scenario.domain.0, scenario.domain.1, config.num_subintervals, config.degree)?;
    let per_rep: Vec<Result<Vec<ReplicateRecord>>> = (0..config.replicates)
        .into_par_iter()
        .map(|r| {
            let data = scenario.generate(r as u64)?;
            config
                .methods
                .iter()
                .map(|&method| {
                    let (fit, lambda, gamma) = fit_replicate(&data, &basis, config, method).map_err(|e| annotate(e, r))?;
                    score(scenario, r, method, fit, lambda, gamma)
                })
                .collect()
        })
        .collect();
    let mut records = Vec::with_capacity(config.replicates * config.methods.len());
    for rep in per_rep {
        records.extend(rep?);
    }
    let reports = config
        .methods
        .iter()
        .map(|&method| {
            let recs: Vec<&ReplicateRecord> = records.iter().filter(|x| x.method == method).collect();
            MetricReport::aggregate(scenario, method, &recs)
        })
        .collect();
    Ok(StudyOutput { records, reports })
}

fn annotate(e: FqrError, replicate: usize) -> FqrError {
    match e {
        FqrError::Convergence(msg) => FqrError::Convergence(format!("replicate {replicate}: {msg}")),
        FqrError::LineSearch { step, objective } => FqrError::Convergence(format!(
            "replicate {replicate}: line search stalled at step {step:e}, objective {objective}"
        )),
        other => other,
    }
}
