//! Damped-Newton fitting of the smoothed quantile objective.
//!
//! `fit_sql` minimizes the smoothed check loss plus the roughness penalty.
//! `fit_close` adds the fSCAD penalty through an outer loop of modified LQA
//! reweighting; each outer step runs Newton on the quadratic surrogate,
//! warm-started from the previous outer iterate. After the outer loop
//! converges, subintervals whose RMS falls below the zero threshold are
//! flagged, coefficients supported only on flagged subintervals are zeroed,
//! and β̂_l is truncated to zero on the flagged set. The optional polish refit
//! uses the matching truncated design: the functional integral and the
//! roughness penalty run only over the unflagged subintervals.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::basis::{GramSet, SplineBasis};
use crate::design::DesignMatrices;
use crate::error::{FqrError, Result};
use crate::loss::{check_loss, default_bandwidth, Kernel, SmoothedLossSpec};
use crate::penalty::{fscad_value, lqa_weights, subinterval_rms, LqaWeights, ScadParams, DEFAULT_LQA_EPSILON, DEFAULT_SCAD_A};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LineSearch {
    /// Backtracking factor ρ in (0, 1).
    pub shrink: f64,
    /// Armijo sufficient-decrease constant.
    pub armijo_c1: f64,
    pub min_step: f64,
}

impl Default for LineSearch {
    fn default() -> Self {
        Self {
            shrink: 0.5,
            armijo_c1: 1e-4,
            min_step: 1e-10,
        }
    }
}

/// Cutoff on the subinterval RMS below which a subinterval is flagged null.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind", content = "value")]
pub enum ZeroThreshold {
    /// Fraction of the largest subinterval RMS over all covariates.
    Relative(f64),
    Absolute(f64),
}

impl Default for ZeroThreshold {
    fn default() -> Self {
        ZeroThreshold::Relative(1e-3)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub tau: f64,
    /// Smoothing bandwidth; `0` selects `((K+p+d)/n)^{2/5}`.
    pub bandwidth: f64,
    pub kernel: Kernel,
    /// Roughness weight per functional covariate.
    pub gamma: Vec<f64>,
    /// fSCAD weight per functional covariate; all zero means SQL.
    pub lambda: Vec<f64>,
    pub scad_a: f64,
    /// Roughness derivative order.
    pub q: usize,
    pub max_outer: usize,
    pub max_inner: usize,
    pub tol_inner: f64,
    pub tol_outer: f64,
    pub line_search: LineSearch,
    pub zero_threshold: ZeroThreshold,
    /// LQA denominator perturbation in units of `T/K`.
    pub lqa_epsilon: f64,
    /// Refit surviving coefficients without fSCAD after thresholding.
    pub polish: bool,
}

impl SolverConfig {
    pub fn new(tau: f64, num_functional: usize) -> Self {
        Self {
            tau,
            bandwidth: 0.0,
            kernel: Kernel::Gaussian,
            gamma: vec![1e-6; num_functional],
            lambda: vec![0.0; num_functional],
            scad_a: DEFAULT_SCAD_A,
            q: 2,
            max_outer: 100,
            max_inner: 100,
            tol_inner: 1e-6,
            tol_outer: 1e-5,
            line_search: LineSearch::default(),
            zero_threshold: ZeroThreshold::default(),
            lqa_epsilon: DEFAULT_LQA_EPSILON,
            polish: true,
        }
    }

    pub fn with_gamma(mut self, gamma: f64) -> Self {
        self.gamma.iter_mut().for_each(|g| *g = gamma);
        self
    }

    pub fn with_lambda(mut self, lambda: f64) -> Self {
        self.lambda.iter_mut().for_each(|l| *l = lambda);
        self
    }

    pub fn with_bandwidth(mut self, h: f64) -> Self {
        self.bandwidth = h;
        self
    }

    pub fn is_sql(&self) -> bool {
        self.lambda.iter().all(|l| *l == 0.0)
    }

    pub fn validate(&self, num_functional: usize) -> Result<()> {
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(FqrError::InvalidInput(format!("tau = {} must lie in (0, 1)", self.tau)));
        }
        if self.gamma.len() != num_functional || self.lambda.len() != num_functional {
            return Err(FqrError::Dimension {
                context: "per-covariate gamma/lambda",
                expected: num_functional,
                got: self.gamma.len().min(self.lambda.len()),
            });
        }
        if self.gamma.iter().chain(&self.lambda).any(|v| !(*v >= 0.0 && v.is_finite())) {
            return Err(FqrError::InvalidInput("gamma and lambda must be non-negative".into()));
        }
        if !(self.bandwidth >= 0.0 && self.bandwidth.is_finite()) {
            return Err(FqrError::InvalidInput("bandwidth must be >= 0".into()));
        }
        if !(self.tol_inner > 0.0 && self.tol_outer > 0.0) {
            return Err(FqrError::InvalidInput("tolerances must be positive".into()));
        }
        let ls = &self.line_search;
        if !(ls.shrink > 0.0 && ls.shrink < 1.0) || !(ls.armijo_c1 > 0.0 && ls.armijo_c1 < 1.0) || !(ls.min_step > 0.0) {
            return Err(FqrError::InvalidInput("invalid line-search parameters".into()));
        }
        if !(self.scad_a > 2.0) {
            return Err(FqrError::InvalidInput("SCAD a must exceed 2".into()));
        }
        if !(self.lqa_epsilon > 0.0) {
            return Err(FqrError::InvalidInput("LQA epsilon must be positive".into()));
        }
        match self.zero_threshold {
            ZeroThreshold::Relative(v) | ZeroThreshold::Absolute(v) if v >= 0.0 => Ok(()),
            _ => Err(FqrError::InvalidInput("zero threshold must be >= 0".into())),
        }
    }

    /// Bandwidth actually used for a design with `n` rows.
    pub fn resolve_bandwidth(&self, basis: &SplineBasis, d: usize, n: usize) -> Result<f64> {
        if self.bandwidth > 0.0 {
            Ok(self.bandwidth)
        } else {
            default_bandwidth(basis.num_subintervals(), basis.degree(), d, n)
        }
    }

    pub fn scad_params(&self) -> Result<Vec<ScadParams>> {
        self.lambda.iter().map(|l| ScadParams::new(*l, self.scad_a)).collect()
    }
}

/// Smoothed loss plus a quadratic penalty `β' P β + c` on the stacked
/// parameter `β = (α, θ)` restricted to a set of free coordinates.
#[derive(Debug, Clone)]
pub struct Objective {
    x: DMatrix<f64>,
    y: DVector<f64>,
    loss: SmoothedLossSpec,
    penalty: DMatrix<f64>,
    offset: f64,
    free: Vec<usize>,
    dim: usize,
}

impl Objective {
    /// `penalty_theta` acts on the θ block; α is never penalized.
    fn build(
        full: &DMatrix<f64>,
        y: &DVector<f64>,
        d: usize,
        loss: SmoothedLossSpec,
        penalty_theta: &DMatrix<f64>,
        offset: f64,
        active_theta: Option<&[bool]>,
    ) -> Self {
        let dim = full.ncols();
        let free: Vec<usize> = (0..dim)
            .filter(|&i| i < d || active_theta.map_or(true, |a| a[i - d]))
            .collect();
        let x = full.select_columns(&free);
        let mut penalty = DMatrix::zeros(free.len(), free.len());
        for (a, &i) in free.iter().enumerate() {
            if i < d {
                continue;
            }
            for (b, &j) in free.iter().enumerate() {
                if j < d {
                    continue;
                }
                penalty[(a, b)] = penalty_theta[(i - d, j - d)];
            }
        }
        Self {
            x,
            y: y.clone(),
            loss,
            penalty,
            offset,
            free,
            dim,
        }
    }

    /// Surrogate objective with LQA weights `lqa` (or plain SQL when `None`).
    pub fn surrogate(
        design: &DesignMatrices,
        gram: &GramSet,
        loss: SmoothedLossSpec,
        gamma: &[f64],
        lqa: Option<&LqaWeights>,
    ) -> Self {
        let mut pen = roughness_matrix(gram, gamma);
        if let Some(w) = lqa {
            pen += w.dense();
        }
        let offset = lqa.map_or(0.0, |w| w.offset);
        Self::build(&design.full(), &design.y, design.num_scalar(), loss, &pen, offset, None)
    }

    pub fn num_free(&self) -> usize {
        self.free.len()
    }

    pub fn free_indices(&self) -> &[usize] {
        &self.free
    }

    fn lift(&self, reduced: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.dim);
        for (a, &i) in self.free.iter().enumerate() {
            out[i] = reduced[a];
        }
        out
    }

    fn restrict(&self, full: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(self.free.len(), self.free.iter().map(|&i| full[i]))
    }

    fn linear_predictor(&self, b: &DVector<f64>) -> DVector<f64> {
        &self.x * b
    }

    /// Objective on the free coordinates.
    pub fn value(&self, b: &DVector<f64>) -> f64 {
        let fitted = self.linear_predictor(b);
        let n = self.y.len() as f64;
        let loss: f64 = fitted
            .iter()
            .zip(self.y.iter())
            .map(|(f, y)| self.loss.smoothed_check(y - f))
            .sum::<f64>()
            / n;
        loss + b.dot(&(&self.penalty * b)) + self.offset
    }

    /// `D_1`: gradient on the free coordinates.
    pub fn gradient(&self, b: &DVector<f64>) -> DVector<f64> {
        let fitted = self.linear_predictor(b);
        let n = self.y.len() as f64;
        let w = DVector::from_iterator(
            fitted.len(),
            fitted
                .iter()
                .zip(self.y.iter())
                .map(|(f, y)| self.loss.smoothed_grad_scalar(f - y) / n),
        );
        self.x.tr_mul(&w) + (&self.penalty * b) * 2.0
    }

    /// `D_2`: Hessian on the free coordinates.
    pub fn hessian(&self, b: &DVector<f64>) -> DMatrix<f64> {
        let fitted = self.linear_predictor(b);
        let n = self.y.len() as f64;
        let mut scaled = self.x.clone();
        for (i, (f, y)) in fitted.iter().zip(self.y.iter()).enumerate() {
            let k = (self.loss.smoothed_hess_scalar(f - y) / n).sqrt();
            scaled.row_mut(i).scale_mut(k);
        }
        scaled.tr_mul(&scaled) + &self.penalty * 2.0
    }
}

/// `Γ ⊗ V`.
pub fn roughness_matrix(gram: &GramSet, gamma: &[f64]) -> DMatrix<f64> {
    let nb = gram.num_basis();
    let mut out = DMatrix::zeros(nb * gamma.len(), nb * gamma.len());
    for (l, g) in gamma.iter().enumerate() {
        if *g != 0.0 {
            out.view_mut((l * nb, l * nb), (nb, nb)).copy_from(&(&gram.deriv_gram * *g));
        }
    }
    out
}

/// `Γ ⊗ V` with each `V` summed only over the subintervals not excluded for
/// that covariate.
pub fn restricted_roughness_matrix(gram: &GramSet, gamma: &[f64], excluded: &[Vec<bool>]) -> DMatrix<f64> {
    let nb = gram.num_basis();
    let mut out = DMatrix::zeros(nb * gamma.len(), nb * gamma.len());
    for (l, g) in gamma.iter().enumerate() {
        if *g != 0.0 {
            let v = gram.deriv_gram_excluding(&excluded[l]);
            out.view_mut((l * nb, l * nb), (nb, nb)).copy_from(&(v * *g));
        }
    }
    out
}

/// Coefficients whose support reaches at least one non-excluded subinterval.
pub fn support_mask(basis: &SplineBasis, excluded: &[Vec<bool>]) -> Vec<bool> {
    excluded
        .iter()
        .flat_map(|ex| {
            (0..basis.num_basis()).map(move |k| basis.support_subintervals(k).any(|j| !ex[j]))
        })
        .collect()
}

#[derive(Debug, Clone)]
struct NewtonOutcome {
    beta: DVector<f64>,
    iterations: usize,
    converged: bool,
    trace: Vec<f64>,
    ridge_repairs: usize,
}

fn newton_direction(h: &DMatrix<f64>, g: &DVector<f64>, repairs: &mut usize) -> Result<DVector<f64>> {
    if let Some(ch) = h.clone().cholesky() {
        return Ok(ch.solve(g));
    }
    let dim = h.nrows().max(1) as f64;
    let mut ridge = 1e-8 * (h.trace().abs() / dim).max(f64::MIN_POSITIVE);
    for _ in 0..20 {
        let mut hr = h.clone();
        for i in 0..hr.nrows() {
            hr[(i, i)] += ridge;
        }
        if let Some(ch) = hr.cholesky() {
            *repairs += 1;
            return Ok(ch.solve(g));
        }
        ridge *= 10.0;
    }
    Err(FqrError::Convergence(
        "Hessian is singular beyond ridge repair".into(),
    ))
}

fn newton(obj: &Objective, start: DVector<f64>, max_iter: usize, tol: f64, ls: &LineSearch) -> Result<NewtonOutcome> {
    let mut beta = start;
    let mut value = obj.value(&beta);
    let mut trace = vec![value];
    let mut repairs = 0;
    let mut small_step = false;
    let mut iterations = 0;
    let mut converged = false;
    while iterations < max_iter {
        let g = obj.gradient(&beta);
        let gnorm = g.norm();
        if small_step && gnorm < tol {
            converged = true;
            break;
        }
        let h = obj.hessian(&beta);
        let dir = newton_direction(&h, &g, &mut repairs)?;
        let slope = g.dot(&dir);
        // Newton decrement below round-off: nothing left to gain
        if slope <= 1e-15 * value.abs().max(f64::MIN_POSITIVE) || gnorm == 0.0 {
            converged = true;
            break;
        }
        iterations += 1;
        let mut eta = 1.0;
        let accepted = loop {
            let cand = &beta - &dir * eta;
            let v = obj.value(&cand);
            if v <= value - ls.armijo_c1 * eta * slope {
                break Some((cand, v));
            }
            eta *= ls.shrink;
            if eta < ls.min_step {
                break None;
            }
        };
        let Some((cand, v)) = accepted else {
            if slope <= 1e-10 * value.abs().max(1e-300) || gnorm < tol {
                converged = true;
                break;
            }
            return Err(FqrError::LineSearch {
                step: eta,
                objective: value,
            });
        };
        let rel_param = (&cand - &beta).norm() / beta.norm().max(1.0);
        let rel_obj = (value - v).abs() / value.abs().max(f64::MIN_POSITIVE);
        small_step = rel_param < tol && rel_obj < tol;
        beta = cand;
        value = v;
        trace.push(v);
    }
    Ok(NewtonOutcome {
        beta,
        iterations,
        converged,
        trace,
        ridge_repairs: repairs,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FitMode {
    Sql,
    Close,
}

/// Estimated coefficients and solver diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub alpha: DVector<f64>,
    /// Concatenated `θ_1, ..., θ_m`.
    pub theta: DVector<f64>,
    pub basis: SplineBasis,
    /// `null_flags[l][j]`: β̂_l is truncated to zero on subinterval `j`.
    pub null_flags: Vec<Vec<bool>>,
    /// Objective after each Newton step (SQL) or each outer iterate with the
    /// exact fSCAD penalty (CLoSE).
    pub objective_trace: Vec<f64>,
    /// Surrogate objective after every accepted Newton step, per outer iterate.
    pub surrogate_traces: Vec<Vec<f64>>,
    pub converged: bool,
    pub outer_iterations: usize,
    pub inner_iterations: usize,
    pub ridge_repairs: usize,
    /// Absolute RMS threshold used for null flagging (0 for SQL).
    pub threshold: f64,
    pub bandwidth: f64,
    pub tau: f64,
    pub mode: FitMode,
}

impl FitResult {
    pub fn num_functional(&self) -> usize {
        self.null_flags.len()
    }

    pub fn theta_block(&self, l: usize) -> &[f64] {
        let nb = self.basis.num_basis();
        &self.theta.as_slice()[l * nb..(l + 1) * nb]
    }

    /// `β̂_l(t) = B(t)' θ̂_l`, or exactly 0 when `t` lies in a flagged
    /// (closed) subinterval.
    pub fn beta(&self, l: usize, t: f64) -> Result<f64> {
        if l >= self.num_functional() {
            return Err(FqrError::Dimension {
                context: "functional covariate index",
                expected: self.num_functional(),
                got: l,
            });
        }
        if self.in_null_region(l, t) {
            return Ok(0.0);
        }
        self.basis.evaluate_combination(self.theta_block(l), t)
    }

    /// Whether `t` lies in a flagged subinterval of covariate `l`, endpoints
    /// included.
    pub fn in_null_region(&self, l: usize, t: f64) -> bool {
        let flags = &self.null_flags[l];
        let Ok(j) = self.basis.locate(t) else {
            return false;
        };
        if flags[j] {
            return true;
        }
        let tol = 1e-12 * self.basis.subinterval_width();
        (j > 0 && flags[j - 1] && (t - self.basis.breakpoint(j)).abs() <= tol)
            || (j + 1 < flags.len() && flags[j + 1] && (t - self.basis.breakpoint(j + 1)).abs() <= tol)
    }

    pub fn has_null_flags(&self) -> bool {
        self.null_flags.iter().flatten().any(|f| *f)
    }

    /// Flagged subintervals of covariate `l` merged into `[start, end]` runs.
    pub fn null_regions(&self, l: usize) -> Vec<(f64, f64)> {
        merge_flags(&self.basis, &self.null_flags[l])
    }

    /// Covariate `l` counts as excluded when every subinterval is null.
    pub fn is_excluded(&self, l: usize) -> bool {
        self.null_flags[l].iter().all(|f| *f)
    }

    /// Functional coefficients that survive the truncation.
    pub fn active_theta(&self) -> Vec<bool> {
        support_mask(&self.basis, &self.null_flags)
    }

    pub fn num_active(&self) -> usize {
        self.active_theta().iter().filter(|a| **a).count()
    }

    /// `U` integrated over the unflagged subintervals only.
    pub fn functional_design(&self, design: &DesignMatrices) -> DMatrix<f64> {
        if self.has_null_flags() {
            design.restricted_u(&self.null_flags)
        } else {
            design.u.clone()
        }
    }

    pub fn fitted(&self, design: &DesignMatrices) -> DVector<f64> {
        &design.z * &self.alpha + self.functional_design(design) * &self.theta
    }

    pub fn residuals(&self, design: &DesignMatrices) -> DVector<f64> {
        &design.y - self.fitted(design)
    }

    /// Mean check loss of the residuals.
    pub fn mean_check_loss(&self, design: &DesignMatrices) -> f64 {
        let r = self.residuals(design);
        r.iter().map(|u| check_loss(self.tau, *u)).sum::<f64>() / r.len() as f64
    }

    pub fn to_json(&self) -> FitResultJson {
        FitResultJson::from(self)
    }
}

/// Predicted τ-th conditional quantile `z'α̂ + u'θ̂` for one design row. The
/// functional row must come from [`FitResult::functional_design`] so that
/// flagged subintervals do not contribute.
pub fn predict_quantile(fit: &FitResult, z_row: &[f64], u_row: &[f64]) -> Result<f64> {
    if z_row.len() != fit.alpha.len() {
        return Err(FqrError::Dimension {
            context: "scalar covariate row",
            expected: fit.alpha.len(),
            got: z_row.len(),
        });
    }
    if u_row.len() != fit.theta.len() {
        return Err(FqrError::Dimension {
            context: "functional design row",
            expected: fit.theta.len(),
            got: u_row.len(),
        });
    }
    let a: f64 = z_row.iter().zip(fit.alpha.iter()).map(|(z, a)| z * a).sum();
    let b: f64 = u_row.iter().zip(fit.theta.iter()).map(|(u, t)| u * t).sum();
    Ok(a + b)
}

fn merge_flags(basis: &SplineBasis, flags: &[bool]) -> Vec<(f64, f64)> {
    let mut out: Vec<(f64, f64)> = Vec::new();
    let mut run: Option<usize> = None;
    for (j, f) in flags.iter().enumerate() {
        match (f, run) {
            (true, None) => run = Some(j),
            (false, Some(s)) => {
                out.push((basis.breakpoint(s), basis.breakpoint(j)));
                run = None;
            }
            _ => {}
        }
    }
    if let Some(s) = run {
        out.push((basis.breakpoint(s), basis.breakpoint(flags.len())));
    }
    out
}

/// Per-covariate subinterval flags and their merged intervals.
#[derive(Debug, Clone, PartialEq)]
pub struct NullRegions {
    pub flags: Vec<Vec<bool>>,
    pub intervals: Vec<Vec<(f64, f64)>>,
}

/// Flag subinterval `j` of covariate `l` when `sqrt((K/T) θ_l' W_j θ_l) < threshold`.
pub fn extract_null_regions(theta: &[f64], basis: &SplineBasis, gram: &GramSet, threshold: f64) -> Result<NullRegions> {
    let rms = subinterval_rms(gram, basis.domain_length(), theta)?;
    let flags: Vec<Vec<bool>> = rms
        .iter()
        .map(|row| row.iter().map(|s| *s < threshold).collect())
        .collect();
    let intervals = flags.iter().map(|f| merge_flags(basis, f)).collect();
    Ok(NullRegions { flags, intervals })
}

fn check_inputs(design: &DesignMatrices, basis: &SplineBasis, gram: &GramSet, config: &SolverConfig) -> Result<usize> {
    if design.num_basis != basis.num_basis() || gram.num_basis() != basis.num_basis() {
        return Err(FqrError::Dimension {
            context: "basis size in design/gram",
            expected: basis.num_basis(),
            got: design.num_basis,
        });
    }
    let m = design.num_functional();
    config.validate(m)?;
    if design.is_empty() {
        return Err(FqrError::InvalidInput("empty design".into()));
    }
    Ok(m)
}

fn split(beta: &DVector<f64>, d: usize) -> (DVector<f64>, DVector<f64>) {
    (beta.rows(0, d).into_owned(), beta.rows(d, beta.len() - d).into_owned())
}

/// Exact objective: smoothed loss, roughness, and approximate fSCAD.
pub fn close_objective(
    design: &DesignMatrices,
    basis: &SplineBasis,
    gram: &GramSet,
    config: &SolverConfig,
    loss: &SmoothedLossSpec,
    alpha: &DVector<f64>,
    theta: &DVector<f64>,
) -> Result<f64> {
    let r = &design.y - &design.z * alpha - &design.u * theta;
    let l0 = r.iter().map(|u| loss.smoothed_check(*u)).sum::<f64>() / r.len() as f64;
    let rough = theta.dot(&(roughness_matrix(gram, &config.gamma) * theta));
    let pen = if config.is_sql() {
        0.0
    } else {
        fscad_value(gram, basis.domain_length(), &config.scad_params()?, theta.as_slice())?
    };
    Ok(l0 + rough + pen)
}

/// SQL fit with each β_l restricted to the complement of `excluded[l]`: the
/// functional integral and the roughness penalty run over the remaining
/// subintervals only, and coefficients supported entirely inside the excluded
/// set are held at exactly zero. `None` is the unrestricted fit.
pub fn fit_sql_restricted(
    design: &DesignMatrices,
    basis: &SplineBasis,
    gram: &GramSet,
    config: &SolverConfig,
    excluded: Option<&[Vec<bool>]>,
    warm_start: Option<&DVector<f64>>,
) -> Result<FitResult> {
    let m = check_inputs(design, basis, gram, config)?;
    let k = basis.num_subintervals();
    if let Some(ex) = excluded {
        if ex.len() != m || ex.iter().any(|r| r.len() != k) {
            return Err(FqrError::Dimension {
                context: "excluded subinterval flags",
                expected: m * k,
                got: ex.iter().map(|r| r.len()).sum(),
            });
        }
    }
    let d = design.num_scalar();
    let h = config.resolve_bandwidth(basis, d, design.len())?;
    let loss = SmoothedLossSpec::new(config.tau, h, config.kernel)?;
    let null_flags = excluded.map_or_else(|| vec![vec![false; k]; m], |e| e.to_vec());
    let restricted = null_flags.iter().flatten().any(|f| *f);
    let (full, pen, active) = if restricted {
        (
            design.restricted_full(&null_flags),
            restricted_roughness_matrix(gram, &config.gamma, &null_flags),
            Some(support_mask(basis, &null_flags)),
        )
    } else {
        (design.full(), roughness_matrix(gram, &config.gamma), None)
    };
    let obj = Objective::build(&full, &design.y, d, loss, &pen, 0.0, active.as_deref());
    let start = warm_start.map_or_else(|| DVector::zeros(obj.num_free()), |w| obj.restrict(w));
    let out = newton(&obj, start, config.max_inner, config.tol_inner, &config.line_search)?;
    let beta = obj.lift(&out.beta);
    let (alpha, theta) = split(&beta, d);
    Ok(FitResult {
        alpha,
        theta,
        basis: basis.clone(),
        null_flags,
        objective_trace: out.trace.clone(),
        surrogate_traces: vec![out.trace],
        converged: out.converged,
        outer_iterations: 0,
        inner_iterations: out.iterations,
        ridge_repairs: out.ridge_repairs,
        threshold: 0.0,
        bandwidth: h,
        tau: config.tau,
        mode: FitMode::Sql,
    })
}

/// Smoothed quantile loss plus roughness penalty, no sparsity penalty.
pub fn fit_sql(design: &DesignMatrices, basis: &SplineBasis, gram: &GramSet, config: &SolverConfig) -> Result<FitResult> {
    fit_sql_restricted(design, basis, gram, config, None, None)
}

/// Locally sparse fit: SQL initialization, then LQA-reweighted Newton until
/// the outer iterates settle, then thresholding and optional polish.
pub fn fit_close(design: &DesignMatrices, basis: &SplineBasis, gram: &GramSet, config: &SolverConfig) -> Result<FitResult> {
    check_inputs(design, basis, gram, config)?;
    let init = fit_sql(design, basis, gram, config)?;
    if config.is_sql() {
        return Ok(init);
    }
    let d = design.num_scalar();
    let h = init.bandwidth;
    let loss = SmoothedLossSpec::new(config.tau, h, config.kernel)?;
    let params = config.scad_params()?;
    let rough = roughness_matrix(gram, &config.gamma);
    let t_len = basis.domain_length();
    let full = design.full();

    let mut alpha = init.alpha.clone();
    let mut theta = init.theta.clone();
    let mut value = close_objective(design, basis, gram, config, &loss, &alpha, &theta)?;
    let mut objective_trace = vec![value];
    let mut surrogate_traces = Vec::new();
    let mut inner_total = init.inner_iterations;
    let mut repairs = init.ridge_repairs;
    let mut converged = false;
    let mut outer = 0;
    while outer < config.max_outer {
        outer += 1;
        let w = lqa_weights(gram, t_len, &params, theta.as_slice(), config.lqa_epsilon)?;
        let pen = &rough + w.dense();
        let obj = Objective::build(&full, &design.y, d, loss, &pen, w.offset, None);
        let mut start = DVector::zeros(design.num_params());
        start.rows_mut(0, d).copy_from(&alpha);
        start.rows_mut(d, theta.len()).copy_from(&theta);
        let out = newton(&obj, start.clone(), config.max_inner, config.tol_inner, &config.line_search)?;
        inner_total += out.iterations;
        repairs += out.ridge_repairs;
        let inner_ok = out.converged;
        surrogate_traces.push(out.trace);
        let (a_new, t_new) = split(&out.beta, d);
        let new_value = close_objective(design, basis, gram, config, &loss, &a_new, &t_new)?;
        let rel_param = (&out.beta - &start).norm() / start.norm().max(1.0);
        let rel_obj = (value - new_value).abs() / value.abs().max(f64::MIN_POSITIVE);
        alpha = a_new;
        theta = t_new;
        value = new_value;
        objective_trace.push(value);
        if rel_param < config.tol_outer && rel_obj < config.tol_outer {
            converged = inner_ok;
            break;
        }
    }

    let rms = subinterval_rms(gram, t_len, theta.as_slice())?;
    let threshold = match config.zero_threshold {
        ZeroThreshold::Absolute(v) => v,
        ZeroThreshold::Relative(f) => f * rms.iter().flatten().fold(0.0_f64, |a, b| a.max(*b)),
    };
    let null_flags = extract_null_regions(theta.as_slice(), basis, gram, threshold)?.flags;
    let active = support_mask(basis, &null_flags);
    for (t, a) in theta.iter_mut().zip(&active) {
        if !a {
            *t = 0.0;
        }
    }
    if config.polish {
        let mut warm = DVector::zeros(design.num_params());
        warm.rows_mut(0, d).copy_from(&alpha);
        warm.rows_mut(d, theta.len()).copy_from(&theta);
        let refit = fit_sql_restricted(design, basis, gram, config, Some(&null_flags), Some(&warm))?;
        inner_total += refit.inner_iterations;
        repairs += refit.ridge_repairs;
        converged = converged && refit.converged;
        alpha = refit.alpha;
        theta = refit.theta;
    }
    Ok(FitResult {
        alpha,
        theta,
        basis: basis.clone(),
        null_flags,
        objective_trace,
        surrogate_traces,
        converged,
        outer_iterations: outer,
        inner_iterations: inner_total,
        ridge_repairs: repairs,
        threshold,
        bandwidth: h,
        tau: config.tau,
        mode: FitMode::Close,
    })
}

/// Serialized form of a [`FitResult`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResultJson {
    pub alpha: Vec<f64>,
    pub theta: Vec<Vec<f64>>,
    pub null_regions: Vec<Vec<[f64; 2]>>,
    pub basis: BasisJson,
    pub diagnostics: Diagnostics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasisJson {
    pub domain_start: f64,
    pub domain_end: f64,
    pub num_subintervals: usize,
    pub degree: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub mode: FitMode,
    pub tau: f64,
    pub bandwidth: f64,
    pub converged: bool,
    pub outer_iterations: usize,
    pub inner_iterations: usize,
    pub ridge_repairs: usize,
    pub threshold: f64,
    pub objective_trace: Vec<f64>,
    pub null_flags: Vec<Vec<bool>>,
}

impl From<&FitResult> for FitResultJson {
    fn from(f: &FitResult) -> Self {
        FitResultJson {
            alpha: f.alpha.iter().copied().collect(),
            theta: (0..f.num_functional()).map(|l| f.theta_block(l).to_vec()).collect(),
            null_regions: (0..f.num_functional())
                .map(|l| f.null_regions(l).into_iter().map(|(a, b)| [a, b]).collect())
                .collect(),
            basis: BasisJson {
                domain_start: f.basis.domain_start(),
                domain_end: f.basis.domain_end(),
                num_subintervals: f.basis.num_subintervals(),
                degree: f.basis.degree(),
            },
            diagnostics: Diagnostics {
                mode: f.mode,
                tau: f.tau,
                bandwidth: f.bandwidth,
                converged: f.converged,
                outer_iterations: f.outer_iterations,
                inner_iterations: f.inner_iterations,
                ridge_repairs: f.ridge_repairs,
                threshold: f.threshold,
                objective_trace: f.objective_trace.clone(),
                null_flags: f.null_flags.clone(),
            },
        }
    }
}

impl FitResultJson {
    pub fn into_fit(self) -> Result<FitResult> {
        let b = &self.basis;
        let basis = SplineBasis::new(b.domain_start, b.domain_end, b.num_subintervals, b.degree)?;
        let theta: Vec<f64> = self.theta.iter().flatten().copied().collect();
        if self.theta.iter().any(|t| t.len() != basis.num_basis()) {
            return Err(FqrError::InvalidInput("theta block size does not match basis".into()));
        }
        let d = self.diagnostics;
        Ok(FitResult {
            alpha: DVector::from_vec(self.alpha),
            theta: DVector::from_vec(theta),
            basis,
            null_flags: d.null_flags,
            objective_trace: d.objective_trace,
            surrogate_traces: Vec::new(),
            converged: d.converged,
            outer_iterations: d.outer_iterations,
            inner_iterations: d.inner_iterations,
            ridge_repairs: d.ridge_repairs,
            threshold: d.threshold,
            bandwidth: d.bandwidth,
            tau: d.tau,
            mode: d.mode,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::compute_gram_set;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn scalar_only(n: usize, seed: u64, noise: f64) -> (DesignMatrices, SplineBasis, GramSet) {
        let basis = SplineBasis::new(0.0, 1.0, 2, 1).unwrap();
        let gram = compute_gram_set(&basis, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = DMatrix::from_fn(n, 2, |_, j| if j == 0 { 1.0 } else { rng.gen_range(-1.0..1.0) });
        let y = DVector::from_fn(n, |i, _| 0.5 + 2.0 * z[(i, 1)] + noise * rng.sample::<f64, _>(StandardNormal));
        let design = DesignMatrices {
            z,
            u: DMatrix::zeros(n, 0),
            y,
            num_basis: basis.num_basis(),
            degree: basis.degree(),
            pieces: vec![],
            quadrature: "none".into(),
        };
        (design, basis, gram)
    }

    #[test]
    fn perfect_fit_is_recovered() {
        let (design, basis, gram) = scalar_only(60, 1, 0.0);
        let cfg = SolverConfig::new(0.5, 0).with_bandwidth(0.01);
        let fit = fit_sql(&design, &basis, &gram, &cfg).unwrap();
        assert!(fit.converged);
        assert!((fit.alpha[0] - 0.5).abs() < 1e-8);
        assert!((fit.alpha[1] - 2.0).abs() < 1e-8);
        assert!(fit.null_flags.is_empty());
        let row = [1.0, design.z[(3, 1)]];
        assert!((predict_quantile(&fit, &row, &[]).unwrap() - design.y[3]).abs() < 1e-7);
    }

    #[test]
    fn trace_is_monotone_and_gradient_small() {
        let (design, basis, gram) = scalar_only(200, 2, 0.3);
        let cfg = SolverConfig::new(0.3, 0);
        let fit = fit_sql(&design, &basis, &gram, &cfg).unwrap();
        assert!(fit.objective_trace.windows(2).all(|w| w[1] < w[0]));
        let loss = SmoothedLossSpec::gaussian(0.3, fit.bandwidth).unwrap();
        let obj = Objective::surrogate(&design, &gram, loss, &[], None);
        let b = DVector::from_iterator(2, fit.alpha.iter().copied());
        assert!(obj.gradient(&b).norm() < cfg.tol_inner);
    }

    #[test]
    fn dimension_errors() {
        let (design, basis, gram) = scalar_only(20, 3, 0.1);
        let fit = fit_sql(&design, &basis, &gram, &SolverConfig::new(0.5, 0)).unwrap();
        assert!(predict_quantile(&fit, &[1.0], &[]).is_err());
        assert!(fit_sql(&design, &basis, &gram, &SolverConfig::new(0.5, 1)).is_err());
        assert!(fit_sql(&design, &basis, &gram, &SolverConfig::new(1.5, 0)).is_err());
    }

    #[test]
    fn null_region_extraction() {
        let basis = SplineBasis::cubic(0.0, 1.0, 10).unwrap();
        let gram = compute_gram_set(&basis, 2).unwrap();
        let zero = vec![0.0; basis.num_basis()];
        let nr = extract_null_regions(&zero, &basis, &gram, 1e-6).unwrap();
        assert!(nr.flags[0].iter().all(|f| *f));
        assert_eq!(nr.intervals[0], vec![(0.0, 1.0)]);
        let mut one = zero.clone();
        one[6] = 3.0;
        let nr = extract_null_regions(&one, &basis, &gram, 1e-6).unwrap();
        for j in 0..10 {
            assert_eq!(nr.flags[0][j], !(3..=6).contains(&j));
        }
        assert_eq!(nr.intervals[0].len(), 2);
    }

    #[test]
    fn json_round_trip() {
        let (design, basis, gram) = scalar_only(30, 4, 0.1);
        let fit = fit_sql(&design, &basis, &gram, &SolverConfig::new(0.5, 0)).unwrap();
        let js = serde_json::to_string(&fit.to_json()).unwrap();
        let back: FitResultJson = serde_json::from_str(&js).unwrap();
        let again = back.into_fit().unwrap();
        assert_eq!(again.alpha, fit.alpha);
        assert_eq!(again.theta, fit.theta);
    }
}
