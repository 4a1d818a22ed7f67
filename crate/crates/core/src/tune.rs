//! BIC grid search over the sparsity and roughness parameters.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::{GramSet, SplineBasis};
use crate::design::{fmt_f64, DesignMatrices};
use crate::error::{FqrError, Result};
use crate::solver::{fit_close, FitResult, SolverConfig};

/// Candidate sets for λ and γ.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneGrid {
    pub lambda: Vec<f64>,
    pub gamma: Vec<f64>,
    /// One (λ, γ) for all covariates; otherwise the per-covariate product.
    pub shared_across_l: bool,
}

impl TuneGrid {
    pub fn new(mut lambda: Vec<f64>, mut gamma: Vec<f64>) -> Result<Self> {
        for (name, set) in [("lambda", &mut lambda), ("gamma", &mut gamma)] {
            if set.is_empty() {
                return Err(FqrError::InvalidInput(format!("{name} grid is empty")));
            }
            if let Some(v) = set.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
                return Err(FqrError::InvalidInput(format!(
                    "{name} candidate {v} must be finite and non-negative"
                )));
            }
            set.sort_by(|a, b| a.total_cmp(b));
            set.dedup();
        }
        Ok(Self {
            lambda,
            gamma,
            shared_across_l: true,
        })
    }

    pub fn per_covariate(mut self) -> Self {
        self.shared_across_l = false;
        self
    }

    /// Candidate `(λ_l, γ_l)` vectors for `m` covariates.
    pub fn candidates(&self, m: usize) -> Vec<(Vec<f64>, Vec<f64>)> {
        let pairs: Vec<(f64, f64)> = self
            .lambda
            .iter()
            .flat_map(|l| self.gamma.iter().map(move |g| (*l, *g)))
            .collect();
        if self.shared_across_l || m <= 1 {
            return pairs.iter().map(|(l, g)| (vec![*l; m], vec![*g; m])).collect();
        }
        let mut out: Vec<(Vec<f64>, Vec<f64>)> = vec![(Vec::new(), Vec::new())];
        for _ in 0..m {
            out = out
                .into_iter()
                .flat_map(|(ls, gs)| {
                    pairs.iter().map(move |(l, g)| {
                        let mut ls = ls.clone();
                        let mut gs = gs.clone();
                        ls.push(*l);
                        gs.push(*g);
                        (ls, gs)
                    })
                })
                .collect();
        }
        out
    }
}

fn log_spaced(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    let (a, b) = (lo.ln(), hi.ln());
    (0..count)
        .map(|i| (a + (b - a) * i as f64 / (count - 1) as f64).exp())
        .collect()
}

/// 8 λ values log-spaced over `[1e-3, 1]·sqrt(K/n)` and 6 γ values over
/// `[1e-8, 1e-2]`.
pub fn default_grid(n: usize, k: usize) -> TuneGrid {
    let scale = (k as f64 / n.max(1) as f64).sqrt();
    TuneGrid {
        lambda: log_spaced(1e-3 * scale, scale, 8),
        gamma: log_spaced(1e-8, 1e-2, 6),
        shared_across_l: true,
    }
}

/// `log(mean check loss) + df log(n) / (2n)`.
pub fn bic(mean_check_loss: f64, df: usize, n: usize) -> f64 {
    let n = n as f64;
    mean_check_loss.ln() + df as f64 * n.ln() / (2.0 * n)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneRow {
    pub lambda: Vec<f64>,
    pub gamma: Vec<f64>,
    /// NaN when the candidate fit failed.
    pub bic: f64,
    pub df: usize,
    pub converged: bool,
}

#[derive(Debug, Clone)]
pub struct TuneOutcome {
    pub lambda: Vec<f64>,
    pub gamma: Vec<f64>,
    pub fit: FitResult,
    pub table: Vec<TuneRow>,
}

impl TuneOutcome {
    pub fn best_row(&self) -> &TuneRow {
        self.table
            .iter()
            .find(|r| r.lambda == self.lambda && r.gamma == self.gamma)
            .expect("winner is in the table")
    }
}

/// Larger is preferred on ties: sparser, then smoother.
fn tie_key(row: &TuneRow) -> (Vec<f64>, Vec<f64>) {
    (row.lambda.clone(), row.gamma.clone())
}

fn lex_cmp(a: &[f64], b: &[f64]) -> std::cmp::Ordering {
    for (x, y) in a.iter().zip(b) {
        match x.total_cmp(y) {
            std::cmp::Ordering::Equal => continue,
            o => return o,
        }
    }
    a.len().cmp(&b.len())
}

/// Fit every candidate with CLoSE (including the refit on the surviving
/// coefficients), score by BIC and return the minimizer.
pub fn tune_fit(
    design: &DesignMatrices,
    basis: &SplineBasis,
    gram: &GramSet,
    grid: &TuneGrid,
    base: &SolverConfig,
) -> Result<TuneOutcome> {
    let m = design.num_functional();
    let n = design.len();
    let d = design.num_scalar();
    let cands = grid.candidates(m);
    if cands.is_empty() {
        return Err(FqrError::InvalidInput("tuning grid is empty".into()));
    }
    let fits: Vec<Result<FitResult>> = cands
        .par_iter()
        .map(|(l, g)| {
            let mut cfg = base.clone();
            cfg.lambda = l.clone();
            cfg.gamma = g.clone();
            cfg.polish = true;
            fit_close(design, basis, gram, &cfg)
        })
        .collect();

    let mut table = Vec::with_capacity(cands.len());
    let mut best: Option<(usize, FitResult)> = None;
    let mut failures = Vec::new();
    for (i, ((l, g), res)) in cands.into_iter().zip(fits).enumerate() {
        let row = match res {
            Err(e) if e.is_input_error() => return Err(e),
            Err(e) => {
                failures.push(format!("lambda={l:?} gamma={g:?}: {e}"));
                TuneRow {
                    lambda: l,
                    gamma: g,
                    bic: f64::NAN,
                    df: 0,
                    converged: false,
                }
            }
            Ok(fit) => {
                let df = fit.num_active() + d;
                let score = bic(fit.mean_check_loss(design), df, n);
                let row = TuneRow {
                    lambda: l,
                    gamma: g,
                    bic: score,
                    df,
                    converged: fit.converged,
                };
                if !fit.converged {
                    failures.push(format!("lambda={:?} gamma={:?}: not converged", row.lambda, row.gamma));
                } else if score.is_finite() {
                    let better = match &best {
                        None => true,
                        Some((j, _)) => {
                            let cur: &TuneRow = &table[*j];
                            score < cur.bic
                                || (score == cur.bic && {
                                    let (a, b) = (tie_key(&row), tie_key(cur));
                                    lex_cmp(&a.0, &b.0).then(lex_cmp(&a.1, &b.1)).is_gt()
                                })
                        }
                    };
                    if better {
                        best = Some((i, fit));
                    }
                }
                row
            }
        };
        table.push(row);
    }
    let Some((i, fit)) = best else {
        return Err(FqrError::Convergence(format!(
            "no tuning candidate converged: {}",
            failures.join("; ")
        )));
    };
    Ok(TuneOutcome {
        lambda: table[i].lambda.clone(),
        gamma: table[i].gamma.clone(),
        fit,
        table,
    })
}

fn join(values: &[f64]) -> String {
    if values.windows(2).all(|w| w[0] == w[1]) {
        return values.first().map_or_else(String::new, |v| fmt_f64(*v));
    }
    values.iter().map(|v| fmt_f64(*v)).collect::<Vec<_>>().join(";")
}

pub fn write_score_table<W: Write>(out: W, table: &[TuneRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["lambda", "gamma", "bic", "df", "converged"])?;
    for r in table {
        w.write_record([
            join(&r.lambda),
            join(&r.gamma),
            fmt_f64(r.bic),
            r.df.to_string(),
            r.converged.to_string(),
        ])?;
    }
    w.flush().map_err(|e| FqrError::io("<score table>", e))?;
    Ok(())
}

/// Read a score table written by [`write_score_table`].
pub fn read_score_table(path: &Path) -> Result<Vec<TuneRow>> {
    let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_path(path)?;
    let parse_list = |s: &str| -> Result<Vec<f64>> {
        s.split(';')
            .map(|v| {
                v.trim()
                    .parse::<f64>()
                    .map_err(|e| FqrError::InvalidInput(format!("bad number {v:?}: {e}")))
            })
            .collect()
    };
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let bic = rec[2]
            .parse::<f64>()
            .map_err(|e| FqrError::InvalidInput(format!("bad bic {:?}: {e}", &rec[2])))?;
        out.push(TuneRow {
            lambda: parse_list(&rec[0])?,
            gamma: parse_list(&rec[1])?,
            bic,
            df: rec[3]
                .parse()
                .map_err(|e| FqrError::InvalidInput(format!("bad df {:?}: {e}", &rec[3])))?,
            converged: rec[4] == *"true",
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_grid_shape() {
        let g = default_grid(500, 50);
        assert_eq!(g.lambda.len(), 8);
        assert_eq!(g.gamma.len(), 6);
        assert!(g.lambda.iter().chain(&g.gamma).all(|v| *v > 0.0));
        assert!(g.lambda.windows(2).all(|w| w[0] < w[1]));
        assert!(g.gamma.windows(2).all(|w| w[0] < w[1]));
        let top = (50.0_f64 / 500.0).sqrt();
        assert!((g.lambda[7] - top).abs() < 1e-12);
        assert!((g.lambda[0] - 1e-3 * top).abs() < 1e-15);
        assert!((g.gamma[0] - 1e-8).abs() < 1e-20 && (g.gamma[5] - 1e-2).abs() < 1e-14);
    }

    #[test]
    fn doubling_n_shrinks_lambda() {
        let a = default_grid(500, 50);
        let b = default_grid(1000, 50);
        for (x, y) in a.lambda.iter().zip(&b.lambda) {
            assert!((x / y - 2f64.sqrt()).abs() < 1e-12);
        }
    }

    #[test]
    fn grid_validation() {
        assert!(TuneGrid::new(vec![], vec![1.0]).is_err());
        assert!(TuneGrid::new(vec![-1.0], vec![1.0]).is_err());
        let g = TuneGrid::new(vec![0.3, 0.1, 0.3], vec![1e-4]).unwrap();
        assert_eq!(g.lambda, vec![0.1, 0.3]);
    }

    #[test]
    fn candidate_counts() {
        let g = TuneGrid::new(vec![0.1, 0.2], vec![1e-3, 1e-4, 1e-5]).unwrap();
        assert_eq!(g.candidates(2).len(), 6);
        assert_eq!(g.clone().per_covariate().candidates(2).len(), 36);
        assert_eq!(g.candidates(1)[0], (vec![0.1], vec![1e-5]));
    }

    #[test]
    fn bic_formula() {
        let v = bic(0.5, 10, 100);
        assert!((v - (0.5f64.ln() + 10.0 * 100f64.ln() / 200.0)).abs() < 1e-15);
    }
}
