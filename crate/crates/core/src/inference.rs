//! Split wild bootstrap for the variance of β̂_l(t) and α̂, pointwise and
//! simultaneous confidence bands, and the sandwich variance under a known
//! error density.
//!
//! The bootstrap splits the sample into halves I and II. The sparsity pattern
//! comes from a CLoSE fit on I; half II gets a restricted roughness-only refit
//! on that pattern, and its residuals drive two-point wild weights. Each
//! bootstrap response is refit under the same restriction. The roles of the
//! halves are then swapped and the two variance estimates averaged.

use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::basis::{GramSet, SplineBasis};
use crate::design::{fmt_f64, DesignMatrices};
use crate::error::{FqrError, Result};
use crate::solver::{fit_close, fit_sql_restricted, support_mask, FitResult, SolverConfig};

/// Two-point law with `P(w = -2τ) = τ` and `P(w = 2(1-τ)) = 1-τ`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WildWeightDist {
    pub tau: f64,
}

impl WildWeightDist {
    pub fn new(tau: f64) -> Result<Self> {
        if !(tau > 0.0 && tau < 1.0) {
            return Err(FqrError::InvalidInput(format!("tau = {tau} must lie in (0, 1)")));
        }
        Ok(Self { tau })
    }

    pub fn neg_value(&self) -> f64 {
        -2.0 * self.tau
    }

    pub fn pos_value(&self) -> f64 {
        2.0 * (1.0 - self.tau)
    }

    pub fn neg_prob(&self) -> f64 {
        self.tau
    }

    /// `P(w <= x)`.
    pub fn cdf(&self, x: f64) -> f64 {
        if x < self.neg_value() {
            0.0
        } else if x < self.pos_value() {
            self.tau
        } else {
            1.0
        }
    }

    /// `(E[w⁻¹ 1{w>0}], E[w⁻¹ 1{w<0}])`.
    pub fn inverse_moments(&self) -> (f64, f64) {
        (
            (1.0 - self.tau) / self.pos_value(),
            self.tau / self.neg_value(),
        )
    }

    pub fn mean_abs(&self) -> f64 {
        self.tau * 2.0 * self.tau + (1.0 - self.tau) * self.pos_value()
    }

    /// The set of p-th quantiles `{q : P(w <= q) >= p, P(w >= q) >= 1 - p}`
    /// as a closed interval.
    pub fn quantile_set(&self, p: f64) -> (f64, f64) {
        let (lo, hi) = (self.neg_value(), self.pos_value());
        if p < self.tau {
            (lo, lo)
        } else if p > self.tau {
            (hi, hi)
        } else {
            (lo, hi)
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        if rng.gen::<f64>() < self.tau {
            self.neg_value()
        } else {
            self.pos_value()
        }
    }
}

pub fn draw_weights<R: Rng + ?Sized>(dist: &WildWeightDist, n: usize, rng: &mut R) -> DVector<f64> {
    DVector::from_iterator(n, (0..n).map(|_| dist.sample(rng)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapConfig {
    pub replicates: usize,
    pub seed: u64,
    /// Evaluation points per unflagged subinterval, placed at the centres of
    /// an equal split (1 gives the midpoints).
    pub points_per_subinterval: usize,
    /// Largest tolerated fraction of failed replicates per half.
    pub max_failure_fraction: f64,
}

impl BootstrapConfig {
    pub fn new(replicates: usize, seed: u64) -> Self {
        Self {
            replicates,
            seed,
            points_per_subinterval: 1,
            max_failure_fraction: 0.1,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.replicates < 2 {
            return Err(FqrError::InvalidInput("at least 2 bootstrap replicates are required".into()));
        }
        if self.points_per_subinterval == 0 {
            return Err(FqrError::InvalidInput("points_per_subinterval must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.max_failure_fraction) {
            return Err(FqrError::InvalidInput("max_failure_fraction must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Replicates from one assignment of the halves.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HalfBootstrap {
    /// Rows used for the sparsity pattern and for the refits.
    pub selection_rows: Vec<usize>,
    pub estimation_rows: Vec<usize>,
    pub null_flags: Vec<Vec<bool>>,
    /// Replicate index of each kept row of `alpha_reps` / `beta_reps`.
    pub kept: Vec<usize>,
    pub alpha_reps: Vec<Vec<f64>>,
    /// `beta_reps[r][l][g]` on the evaluation grid of covariate `l`.
    pub beta_reps: Vec<Vec<Vec<f64>>>,
    pub dropped: usize,
    pub sigma: Vec<Vec<f64>>,
    pub alpha_cov: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapSummary {
    pub replicates: usize,
    pub seed: u64,
    pub tau: f64,
    pub bandwidth: f64,
    pub alpha_hat: Vec<f64>,
    /// Per covariate: the evaluation grid on the estimated non-null region.
    pub eval_grid: Vec<Vec<f64>>,
    pub beta_hat: Vec<Vec<f64>>,
    /// Averaged pointwise variance `σ̂_l(t)` on `eval_grid`.
    pub sigma_hat: Vec<Vec<f64>>,
    pub alpha_cov: Vec<Vec<f64>>,
    pub halves: Vec<HalfBootstrap>,
}

impl BootstrapSummary {
    pub fn dropped(&self) -> usize {
        self.halves.iter().map(|h| h.dropped).sum()
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let s = serde_json::to_string_pretty(self)?;
        std::fs::write(path, s).map_err(|e| FqrError::io(path, e))
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| FqrError::io(path, e))?;
        Ok(serde_json::from_str(&s)?)
    }
}

/// Points in the unflagged subintervals of one covariate.
pub fn non_null_grid(basis: &SplineBasis, flags: &[bool], per_subinterval: usize) -> Vec<f64> {
    let w = basis.subinterval_width();
    let mut out = Vec::new();
    for (j, f) in flags.iter().enumerate() {
        if !f {
            let a = basis.breakpoint(j);
            for i in 0..per_subinterval {
                out.push(a + w * (i as f64 + 0.5) / per_subinterval as f64);
            }
        }
    }
    out
}

/// Seeded random split into halves of sizes `⌊n/2⌋` and `n - ⌊n/2⌋`.
pub fn split_halves(n: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::MAX);
    idx.shuffle(&mut rng);
    let second = idx.split_off(n / 2);
    (idx, second)
}

fn sample_cov(rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let r = rows.len();
    let d = rows.first().map_or(0, |x| x.len());
    let mean: Vec<f64> = (0..d).map(|j| rows.iter().map(|x| x[j]).sum::<f64>() / r as f64).collect();
    let mut cov = vec![vec![0.0; d]; d];
    for x in rows {
        for a in 0..d {
            for b in 0..d {
                cov[a][b] += (x[a] - mean[a]) * (x[b] - mean[b]);
            }
        }
    }
    let denom = (r.max(2) - 1) as f64;
    cov.iter_mut().flatten().for_each(|v| *v /= denom);
    cov
}

fn sample_var(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let (s, c) = values.clone().fold((0.0, 0usize), |(s, c), v| (s + v, c + 1));
    if c < 2 {
        return 0.0;
    }
    let mean = s / c as f64;
    values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / (c - 1) as f64
}

enum Outcome {
    Kept(Vec<f64>, Vec<Vec<f64>>),
    Dropped,
}

#[allow(clippy::too_many_arguments)]
fn run_half(
    design: &DesignMatrices,
    basis: &SplineBasis,
    gram: &GramSet,
    config: &SolverConfig,
    boot: &BootstrapConfig,
    eval_grid: &[Vec<f64>],
    selection: &[usize],
    estimation: &[usize],
) -> Result<HalfBootstrap> {
    let sel = design.subset(selection);
    let est = design.subset(estimation);
    let step1 = fit_close(&sel, basis, gram, config).map_err(|e| stage(e, "selection fit"))?;
    let flags = step1.null_flags.clone();
    let step2 = fit_sql_restricted(&est, basis, gram, config, Some(&flags), None).map_err(|e| stage(e, "refit"))?;
    let fitted = step2.fitted(&est);
    let abs_resid = (&est.y - &fitted).abs();
    let dist = WildWeightDist::new(config.tau)?;
    let d = design.num_scalar();
    let mut warm = DVector::zeros(design.num_params());
    warm.rows_mut(0, d).copy_from(&step2.alpha);
    warm.rows_mut(d, step2.theta.len()).copy_from(&step2.theta);
    // the stream depends on the estimation half itself, so relabelling the
    // halves reproduces the same replicates
    let stream_base = (*estimation.iter().min().unwrap_or(&0) as u64) << 32;

    let outcomes: Vec<Result<Outcome>> = (0..boot.replicates)
        .into_par_iter()
        .map(|b| {
            let mut rng = ChaCha8Rng::seed_from_u64(boot.seed);
            rng.set_stream(stream_base | b as u64);
            let w = draw_weights(&dist, est.len(), &mut rng);
            let y = &fitted + w.component_mul(&abs_resid);
            match fit_sql_restricted(&est.with_response(y), basis, gram, config, Some(&flags), Some(&warm)) {
                Ok(fit) if fit.converged => {
                    let beta = eval_grid
                        .iter()
                        .enumerate()
                        .map(|(l, g)| g.iter().map(|t| fit.beta(l, *t)).collect::<Result<Vec<_>>>())
                        .collect::<Result<Vec<_>>>()?;
                    Ok(Outcome::Kept(fit.alpha.iter().copied().collect(), beta))
                }
                Ok(_) => Ok(Outcome::Dropped),
                Err(e) if e.is_input_error() => Err(e),
                Err(_) => Ok(Outcome::Dropped),
            }
        })
        .collect();

    let mut kept = Vec::new();
    let mut alpha_reps = Vec::new();
    let mut beta_reps = Vec::new();
    let mut dropped = 0;
    for (b, o) in outcomes.into_iter().enumerate() {
        match o? {
            Outcome::Kept(a, be) => {
                kept.push(b);
                alpha_reps.push(a);
                beta_reps.push(be);
            }
            Outcome::Dropped => dropped += 1,
        }
    }
    if dropped as f64 > boot.max_failure_fraction * boot.replicates as f64 || kept.len() < 2 {
        return Err(FqrError::Bootstrap(format!(
            "{dropped} of {} replicates failed to converge",
            boot.replicates
        )));
    }
    let sigma = eval_grid
        .iter()
        .enumerate()
        .map(|(l, g)| (0..g.len()).map(|i| sample_var(beta_reps.iter().map(move |r: &Vec<Vec<f64>>| r[l][i]))).collect())
        .collect();
    let alpha_cov = sample_cov(&alpha_reps);
    Ok(HalfBootstrap {
        selection_rows: selection.to_vec(),
        estimation_rows: estimation.to_vec(),
        null_flags: flags,
        kept,
        alpha_reps,
        beta_reps,
        dropped,
        sigma,
        alpha_cov,
    })
}

fn stage(e: FqrError, what: &str) -> FqrError {
    match e {
        FqrError::Convergence(m) => FqrError::Bootstrap(format!("{what}: {m}")),
        other => other,
    }
}

/// Split wild bootstrap around the full-sample estimate `fit` (which fixes
/// the evaluation grid and the band centres). Every fit reuses
/// `fit.bandwidth`.
pub fn wild_bootstrap(
    design: &DesignMatrices,
    basis: &SplineBasis,
    gram: &GramSet,
    config: &SolverConfig,
    fit: &FitResult,
    boot: &BootstrapConfig,
) -> Result<BootstrapSummary> {
    let (a, b) = split_halves(design.len(), boot.seed);
    wild_bootstrap_with_split(design, basis, gram, config, fit, boot, (&a, &b))
}

/// [`wild_bootstrap`] with an explicit partition.
pub fn wild_bootstrap_with_split(
    design: &DesignMatrices,
    basis: &SplineBasis,
    gram: &GramSet,
    config: &SolverConfig,
    fit: &FitResult,
    boot: &BootstrapConfig,
    halves: (&[usize], &[usize]),
) -> Result<BootstrapSummary> {
    boot.validate()?;
    let m = design.num_functional();
    if fit.num_functional() != m || fit.alpha.len() != design.num_scalar() || fit.basis != *basis {
        return Err(FqrError::InvalidInput("fit does not match the design and basis".into()));
    }
    let need = 2 * (design.num_scalar() + m * basis.num_basis());
    let smallest = halves.0.len().min(halves.1.len());
    if smallest < need {
        return Err(FqrError::InvalidInput(format!(
            "half-sample size {smallest} is below the minimum {need} for this basis"
        )));
    }
    let mut cfg = config.clone();
    cfg.bandwidth = fit.bandwidth;
    cfg.validate(m)?;

    let eval_grid: Vec<Vec<f64>> = (0..m)
        .map(|l| non_null_grid(basis, &fit.null_flags[l], boot.points_per_subinterval))
        .collect();
    let beta_hat = eval_grid
        .iter()
        .enumerate()
        .map(|(l, g)| g.iter().map(|t| fit.beta(l, *t)).collect::<Result<Vec<_>>>())
        .collect::<Result<Vec<_>>>()?;

    let first = run_half(design, basis, gram, &cfg, boot, &eval_grid, halves.0, halves.1)?;
    let second = run_half(design, basis, gram, &cfg, boot, &eval_grid, halves.1, halves.0)?;
    let sigma_hat = first
        .sigma
        .iter()
        .zip(&second.sigma)
        .map(|(x, y)| x.iter().zip(y).map(|(a, b)| 0.5 * (a + b)).collect())
        .collect();
    let alpha_cov = first
        .alpha_cov
        .iter()
        .zip(&second.alpha_cov)
        .map(|(x, y)| x.iter().zip(y).map(|(a, b)| 0.5 * (a + b)).collect())
        .collect();
    Ok(BootstrapSummary {
        replicates: boot.replicates,
        seed: boot.seed,
        tau: cfg.tau,
        bandwidth: fit.bandwidth,
        alpha_hat: fit.alpha.iter().copied().collect(),
        eval_grid,
        beta_hat,
        sigma_hat,
        alpha_cov,
        halves: vec![first, second],
    })
}

/// Upper `a/2` standard normal quantile.
pub fn z_half(a: f64) -> Result<f64> {
    check_level(a)?;
    let n = Normal::new(0.0, 1.0).expect("standard normal");
    Ok(n.inverse_cdf(1.0 - 0.5 * a))
}

fn check_level(a: f64) -> Result<()> {
    if !(a > 0.0 && a < 1.0) {
        return Err(FqrError::InvalidInput(format!("level a = {a} must lie in (0, 1)")));
    }
    Ok(())
}

/// Extreme-value critical value `Q(a)` for a band over `num_points` points.
pub fn scb_quantile(num_points: usize, a: f64) -> Result<f64> {
    check_level(a)?;
    if num_points < 2 {
        return Err(FqrError::InvalidInput(format!(
            "a simultaneous band needs at least 2 evaluation points, got {num_points}"
        )));
    }
    let l = (num_points as f64).ln();
    let r = (2.0 * l).sqrt();
    Ok(r - ((-0.5 * (1.0 - a).ln()).ln() + 0.5 * (l.ln() + (4.0 * std::f64::consts::PI).ln())) / r)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BandKind {
    Pointwise,
    Simultaneous,
}

impl BandKind {
    pub fn label(self) -> &'static str {
        match self {
            BandKind::Pointwise => "pcb",
            BandKind::Simultaneous => "scb",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Band {
    pub covariate: usize,
    pub kind: BandKind,
    pub level: f64,
    pub critical_value: f64,
    pub t: Vec<f64>,
    pub estimate: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl Band {
    /// Whether `truth` lies inside the band at every evaluation point.
    pub fn covers(&self, truth: impl Fn(f64) -> f64) -> bool {
        self.t
            .iter()
            .zip(self.lower.iter().zip(&self.upper))
            .all(|(t, (lo, hi))| {
                let v = truth(*t);
                *lo <= v && v <= *hi
            })
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["t", "estimate", "lower", "upper"])?;
        for i in 0..self.t.len() {
            w.write_record([
                fmt_f64(self.t[i]),
                fmt_f64(self.estimate[i]),
                fmt_f64(self.lower[i]),
                fmt_f64(self.upper[i]),
            ])?;
        }
        w.flush().map_err(|e| FqrError::io("<band>", e))?;
        Ok(())
    }
}

/// `(t, estimate, lower, upper)` rows of a band CSV.
pub fn read_band_csv(path: &Path) -> Result<Vec<[f64; 4]>> {
    let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_path(path)?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let mut row = [0.0; 4];
        for (k, v) in row.iter_mut().enumerate() {
            *v = rec[k]
                .parse()
                .map_err(|e| FqrError::InvalidInput(format!("bad band value {:?}: {e}", &rec[k])))?;
        }
        out.push(row);
    }
    Ok(out)
}

fn make_band(summary: &BootstrapSummary, l: usize, kind: BandKind, level: f64, crit: f64) -> Band {
    let est = &summary.beta_hat[l];
    let half: Vec<f64> = summary.sigma_hat[l].iter().map(|s| s.max(0.0).sqrt() * crit).collect();
    Band {
        covariate: l,
        kind,
        level,
        critical_value: crit,
        t: summary.eval_grid[l].clone(),
        estimate: est.clone(),
        lower: est.iter().zip(&half).map(|(e, h)| e - h).collect(),
        upper: est.iter().zip(&half).map(|(e, h)| e + h).collect(),
    }
}

/// `β̂_l(t) ± σ̂_l(t)^{1/2} Q(a)` for each covariate with a non-null region.
/// Covariates whose estimated non-null region is empty get no band.
pub fn build_scb(summary: &BootstrapSummary, level: f64) -> Result<Vec<Band>> {
    let mut out = Vec::new();
    for (l, g) in summary.eval_grid.iter().enumerate() {
        if g.is_empty() {
            continue;
        }
        let q = scb_quantile(g.len(), level)?;
        out.push(make_band(summary, l, BandKind::Simultaneous, level, q));
    }
    Ok(out)
}

/// `β̂_l(t) ± σ̂_l(t)^{1/2} z_{a/2}`.
pub fn build_pcb(summary: &BootstrapSummary, level: f64) -> Result<Vec<Band>> {
    let z = z_half(level)?;
    Ok((0..summary.eval_grid.len())
        .filter(|l| !summary.eval_grid[*l].is_empty())
        .map(|l| make_band(summary, l, BandKind::Pointwise, level, z))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaInterval {
    pub index: usize,
    pub estimate: f64,
    pub se: f64,
    pub normal_lower: f64,
    pub normal_upper: f64,
    pub percentile_lower: f64,
    pub percentile_upper: f64,
}

fn empirical_quantile(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let (lo, hi) = (h.floor() as usize, h.ceil() as usize);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Normal-approximation and percentile intervals for each α component. The
/// percentile interval shifts `α̂` by quantiles of the replicates centred at
/// their own half-sample mean.
pub fn alpha_intervals(summary: &BootstrapSummary, level: f64) -> Result<Vec<AlphaInterval>> {
    let z = z_half(level)?;
    let d = summary.alpha_hat.len();
    let mut out = Vec::with_capacity(d);
    for j in 0..d {
        let mut centred = Vec::new();
        for h in &summary.halves {
            let r = h.alpha_reps.len() as f64;
            let mean = h.alpha_reps.iter().map(|x| x[j]).sum::<f64>() / r;
            centred.extend(h.alpha_reps.iter().map(|x| x[j] - mean));
        }
        centred.sort_by(|a, b| a.total_cmp(b));
        let est = summary.alpha_hat[j];
        let se = summary.alpha_cov[j][j].max(0.0).sqrt();
        out.push(AlphaInterval {
            index: j,
            estimate: est,
            se,
            normal_lower: est - z * se,
            normal_upper: est + z * se,
            percentile_lower: est + empirical_quantile(&centred, 0.5 * level),
            percentile_upper: est + empirical_quantile(&centred, 1.0 - 0.5 * level),
        });
    }
    Ok(out)
}

pub fn write_alpha_intervals<W: Write>(out: W, names: &[String], rows: &[AlphaInterval]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "name",
        "estimate",
        "se",
        "normal_lower",
        "normal_upper",
        "percentile_lower",
        "percentile_upper",
    ])?;
    for r in rows {
        let name = names.get(r.index).cloned().unwrap_or_else(|| format!("alpha{}", r.index));
        w.write_record([
            name,
            fmt_f64(r.estimate),
            fmt_f64(r.se),
            fmt_f64(r.normal_lower),
            fmt_f64(r.normal_upper),
            fmt_f64(r.percentile_lower),
            fmt_f64(r.percentile_upper),
        ])?;
    }
    w.flush().map_err(|e| FqrError::io("<alpha intervals>", e))?;
    Ok(())
}

/// One row per bootstrap replicate index with the α draws of both halves
/// (`NA` where a replicate was dropped).
pub fn write_replicates<W: Write>(out: W, summary: &BootstrapSummary) -> Result<()> {
    let d = summary.alpha_hat.len();
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["replicate".to_string()];
    for h in 1..=summary.halves.len() {
        for j in 0..d {
            header.push(format!("half{h}_alpha{j}"));
        }
    }
    w.write_record(&header)?;
    for b in 0..summary.replicates {
        let mut row = vec![b.to_string()];
        for h in &summary.halves {
            match h.kept.binary_search(&b) {
                Ok(i) => row.extend(h.alpha_reps[i].iter().map(|v| fmt_f64(*v))),
                Err(_) => row.extend(std::iter::repeat("NA".to_string()).take(d)),
            }
        }
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| FqrError::io("<replicates>", e))?;
    Ok(())
}

/// Sandwich variance with a known error density.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleVariance {
    /// `σ_l(t)` on the supplied evaluation grid.
    pub sigma: Vec<Vec<f64>>,
    pub alpha_cov: DMatrix<f64>,
    pub ridge_repaired: bool,
}

/// `τ(1-τ) Λ_l(t) Σ₂⁻¹ (Σ₁/n) Σ₂⁻¹ Λ_l(t)'` with `Σ₁ = Z*'Z*/n` and
/// `Σ₂ = Σ f_i Z*_i Z*_i' / n`, where `Z*` holds `Z` and the restricted `U`
/// columns of the coefficients surviving `null_flags`.
pub fn sandwich_variance_oracle(
    design: &DesignMatrices,
    basis: &SplineBasis,
    density_at_zero: &[f64],
    tau: f64,
    null_flags: &[Vec<bool>],
    eval_grid: &[Vec<f64>],
) -> Result<OracleVariance> {
    let n = design.len();
    if density_at_zero.len() != n {
        return Err(FqrError::Dimension {
            context: "density values",
            expected: n,
            got: density_at_zero.len(),
        });
    }
    if !(tau > 0.0 && tau < 1.0) {
        return Err(FqrError::InvalidInput(format!("tau = {tau} must lie in (0, 1)")));
    }
    let m = design.num_functional();
    if null_flags.len() != m || eval_grid.len() != m {
        return Err(FqrError::Dimension {
            context: "functional covariates",
            expected: m,
            got: null_flags.len(),
        });
    }
    let d = design.num_scalar();
    let nb = basis.num_basis();
    let active = support_mask(basis, null_flags);
    let cols: Vec<usize> = (0..d)
        .chain(active.iter().enumerate().filter(|(_, a)| **a).map(|(i, _)| d + i))
        .collect();
    let zs = design.restricted_full(null_flags).select_columns(&cols);
    let s1 = zs.tr_mul(&zs) / n as f64;
    let mut weighted = zs.clone();
    for (i, f) in density_at_zero.iter().enumerate() {
        weighted.row_mut(i).scale_mut(*f);
    }
    let s2 = zs.tr_mul(&weighted) / n as f64;
    let (s2_inv, ridge_repaired) = spd_inverse(&s2)?;
    let core = &s2_inv * s1 * &s2_inv * (tau * (1.0 - tau) / n as f64);

    let pos: Vec<Option<usize>> = {
        let mut p = vec![None; d + m * nb];
        for (a, &c) in cols.iter().enumerate() {
            p[c] = Some(a);
        }
        p
    };
    let mut sigma = Vec::with_capacity(m);
    for l in 0..m {
        let mut row = Vec::with_capacity(eval_grid[l].len());
        for &t in &eval_grid[l] {
            let locate = basis.locate(t)?;
            if null_flags[l][locate] {
                row.push(0.0);
                continue;
            }
            let b = basis.eval(t)?;
            let mut lam = DVector::zeros(cols.len());
            for k in 0..nb {
                if let Some(a) = pos[d + l * nb + k] {
                    lam[a] = b[k];
                }
            }
            row.push((lam.transpose() * &core * &lam)[(0, 0)].max(0.0));
        }
        sigma.push(row);
    }
    Ok(OracleVariance {
        sigma,
        alpha_cov: core.view((0, 0), (d, d)).into_owned(),
        ridge_repaired,
    })
}

fn spd_inverse(a: &DMatrix<f64>) -> Result<(DMatrix<f64>, bool)> {
    if let Some(ch) = a.clone().cholesky() {
        return Ok((ch.inverse(), false));
    }
    let dim = a.nrows().max(1) as f64;
    let mut ridge = 1e-8 * (a.trace().abs() / dim).max(f64::MIN_POSITIVE);
    for _ in 0..20 {
        let mut r = a.clone();
        for i in 0..r.nrows() {
            r[(i, i)] += ridge;
        }
        if let Some(ch) = r.cholesky() {
            return Ok((ch.inverse(), true));
        }
        ridge *= 10.0;
    }
    Err(FqrError::Convergence("sandwich matrix is singular beyond ridge repair".into()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weight_law_conditions() {
        for tau in [0.1, 0.25, 0.5, 0.9] {
            let w = WildWeightDist::new(tau).unwrap();
            let (pos, neg) = w.inverse_moments();
            assert!((pos - 0.5).abs() < 1e-15 && (neg + 0.5).abs() < 1e-15);
            assert!((w.cdf(0.0) - tau).abs() < 1e-15);
            let (lo, hi) = w.quantile_set(tau);
            assert!(lo <= 0.0 && 0.0 <= hi);
            assert!(w.mean_abs().is_finite());
        }
        let q = WildWeightDist::new(0.25).unwrap();
        assert_eq!((q.neg_value(), q.pos_value()), (-0.5, 1.5));
        let r = WildWeightDist::new(0.5).unwrap();
        assert_eq!((r.neg_value(), r.pos_value()), (-1.0, 1.0));
        assert!(WildWeightDist::new(1.0).is_err());
    }

    #[test]
    fn weights_take_two_values() {
        let w = WildWeightDist::new(0.3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let draws = draw_weights(&w, 20_000, &mut rng);
        assert!(draws.iter().all(|v| *v == -0.6 || *v == 1.4));
        let frac = draws.iter().filter(|v| **v < 0.0).count() as f64 / 20_000.0;
        assert!((frac - 0.3).abs() < 0.015);
    }

    #[test]
    fn scb_critical_value() {
        let q = scb_quantile(100, 0.05).unwrap();
        assert!((q - 3.573_344_859_592_653).abs() < 1e-12);
        assert!(scb_quantile(1, 0.05).is_err());
        assert!(scb_quantile(10, 0.0).is_err());
        let z = z_half(0.05).unwrap();
        for s in 2..200 {
            assert!(scb_quantile(s, 0.05).unwrap() > z);
            assert!(scb_quantile(s, 0.10).unwrap() < scb_quantile(s, 0.05).unwrap());
        }
    }

    #[test]
    fn split_sizes() {
        let (a, b) = split_halves(11, 3);
        assert_eq!((a.len(), b.len()), (5, 6));
        let mut all: Vec<usize> = a.iter().chain(&b).copied().collect();
        all.sort();
        assert_eq!(all, (0..11).collect::<Vec<_>>());
        assert_eq!(split_halves(11, 3), (a, b));
    }

    #[test]
    fn grid_skips_flagged() {
        let basis = SplineBasis::cubic(0.0, 1.0, 4).unwrap();
        let g = non_null_grid(&basis, &[true, false, false, true], 2);
        assert_eq!(g, vec![0.3125, 0.4375, 0.5625, 0.6875]);
    }

    #[test]
    fn zero_variance_collapses_band() {
        let summary = BootstrapSummary {
            replicates: 2,
            seed: 0,
            tau: 0.5,
            bandwidth: 0.1,
            alpha_hat: vec![1.0],
            eval_grid: vec![vec![0.1, 0.2, 0.3]],
            beta_hat: vec![vec![1.0, 2.0, 3.0]],
            sigma_hat: vec![vec![0.0; 3]],
            alpha_cov: vec![vec![0.0]],
            halves: vec![],
        };
        let b = &build_scb(&summary, 0.05).unwrap()[0];
        assert_eq!(b.lower, b.estimate);
        assert_eq!(b.upper, b.estimate);
    }
}
