//! Derivative-free reference minimizer for the roughness-penalized smoothed
//! objective, on small random instances.

use argmin::core::{CostFunction, Error, Executor, State};
use argmin::solver::neldermead::NelderMead;
use fqr_core::design::DesignMatrices;
use fqr_core::solver::roughness_matrix;
use fqr_core::{
    assemble_design, compute_gram_set, fit_sql, FunctionalDataset, SmoothedLossSpec, SolverConfig, SplineBasis,
};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct Problem {
    x: DMatrix<f64>,
    y: DVector<f64>,
    pen: DMatrix<f64>,
    d: usize,
    loss: SmoothedLossSpec,
}

impl Problem {
    pub fn value(&self, b: &[f64]) -> f64 {
        let b = DVector::from_column_slice(b);
        let f = &self.x * &b;
        let n = self.y.len() as f64;
        let loss: f64 = self.y.iter().zip(f.iter()).map(|(y, f)| self.loss.smoothed_check(y - f)).sum::<f64>() / n;
        let theta = b.rows(self.d, b.len() - self.d);
        loss + theta.dot(&(&self.pen * theta))
    }
}

impl CostFunction for Problem {
    type Param = Vec<f64>;
    type Output = f64;
    fn cost(&self, p: &Vec<f64>) -> Result<f64, Error> {
        Ok(self.value(p))
    }
}

pub fn instance(seed: u64) -> (DesignMatrices, SplineBasis, SolverConfig) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, g) = (50, 21);
    let grid: Vec<f64> = (0..g).map(|i| i as f64 / (g - 1) as f64).collect();
    let mut z = DMatrix::zeros(n, 2);
    let mut x = DMatrix::zeros(n, g);
    let mut y = DVector::zeros(n);
    for i in 0..n {
        z[(i, 0)] = 1.0;
        z[(i, 1)] = rng.gen_range(-1.0..1.0);
        let mut w = 0.0;
        for j in 1..g {
            w += rng.gen_range(-1.0..1.0) * 0.3;
            x[(i, j)] = w;
        }
        let signal: f64 = (0..g).map(|j| x[(i, j)] * (3.0 * grid[j]).sin()).sum::<f64>() / g as f64;
        y[i] = 0.5 + z[(i, 1)] + signal + 0.2 * rng.gen_range(-1.0..1.0);
    }
    let data = FunctionalDataset::new(y, z, vec![x], grid).unwrap();
    let basis = SplineBasis::new(0.0, 1.0, 6, 1).unwrap();
    let design = assemble_design(&data, &basis).unwrap();
    let tau = [0.3, 0.5, 0.7][seed as usize % 3];
    let mut cfg = SolverConfig::new(tau, 1).with_gamma(1e-3);
    cfg.q = 1;
    cfg.tol_inner = 1e-10;
    (design, basis, cfg)
}

pub fn nelder_mead(p: Problem, start: Vec<f64>, step: f64) -> (Vec<f64>, f64) {
    let mut simplex = vec![start.clone()];
    for i in 0..start.len() {
        let mut v = start.clone();
        v[i] += step;
        simplex.push(v);
    }
    let solver = NelderMead::new(simplex).with_sd_tolerance(1e-14).unwrap();
    let res = Executor::new(p, solver).configure(|s| s.max_iters(40_000)).run().unwrap();
    let s = res.state();
    (s.get_best_param().unwrap().clone(), s.get_best_cost())
}

/// `(newton value, best Nelder-Mead value)` for instance `seed`.
pub fn compare(seed: u64) -> (f64, f64) {
    let (design, basis, cfg) = instance(seed);
    let gram = compute_gram_set(&basis, cfg.q).unwrap();
    let fit = fit_sql(&design, &basis, &gram, &cfg).unwrap();
    assert!(fit.converged);
    let make = || Problem {
        x: design.full(),
        y: design.y.clone(),
        pen: roughness_matrix(&gram, &cfg.gamma),
        d: 2,
        loss: SmoothedLossSpec::gaussian(cfg.tau, fit.bandwidth).unwrap(),
    };
    let newton: Vec<f64> = fit.alpha.iter().chain(fit.theta.iter()).copied().collect();
    let newton_value = make().value(&newton);

    let mut best = (vec![0.0; newton.len()], f64::INFINITY);
    let mut step = 1.0;
    for _ in 0..8 {
        let start = if best.1.is_finite() { best.0.clone() } else { vec![0.0; newton.len()] };
        let cand = nelder_mead(make(), start, step);
        let improved = best.1 - cand.1;
        if cand.1 < best.1 {
            best = cand;
        }
        if improved.abs() < 1e-13 {
            break;
        }
        step *= 0.5;
    }
    (newton_value, best.1)
}
