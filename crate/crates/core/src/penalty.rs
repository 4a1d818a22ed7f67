//! SCAD, its functional (per-subinterval) version, and the modified local
//! quadratic approximation used to make it Newton-friendly.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::basis::GramSet;
use crate::error::{FqrError, Result};

/// Default SCAD concavity parameter.
pub const DEFAULT_SCAD_A: f64 = 3.7;

/// Default LQA perturbation, in units of the subinterval width `T/K`.
pub const DEFAULT_LQA_EPSILON: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScadParams {
    pub lambda: f64,
    pub a: f64,
}

impl ScadParams {
    pub fn new(lambda: f64, a: f64) -> Result<Self> {
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(FqrError::InvalidInput(format!("SCAD lambda = {lambda} must be >= 0")));
        }
        if !(a > 2.0) {
            return Err(FqrError::InvalidInput(format!("SCAD a = {a} must exceed 2")));
        }
        Ok(Self { lambda, a })
    }

    pub fn with_lambda(lambda: f64) -> Result<Self> {
        Self::new(lambda, DEFAULT_SCAD_A)
    }

    /// `p_λ(u)` for `u >= 0`.
    pub fn value(&self, u: f64) -> Result<f64> {
        check_nonneg(u)?;
        Ok(self.value_unchecked(u))
    }

    /// `p'_λ(u)` for `u >= 0`.
    pub fn deriv(&self, u: f64) -> Result<f64> {
        check_nonneg(u)?;
        Ok(self.deriv_unchecked(u))
    }

    pub(crate) fn value_unchecked(&self, u: f64) -> f64 {
        let (l, a) = (self.lambda, self.a);
        if u <= l {
            l * u
        } else if u < a * l {
            -(u * u - 2.0 * a * l * u + l * l) / (2.0 * (a - 1.0))
        } else {
            (a + 1.0) * l * l / 2.0
        }
    }

    pub(crate) fn deriv_unchecked(&self, u: f64) -> f64 {
        let (l, a) = (self.lambda, self.a);
        if u <= l {
            l
        } else if u < a * l {
            (a * l - u) / (a - 1.0)
        } else {
            0.0
        }
    }
}

fn check_nonneg(u: f64) -> Result<()> {
    if u >= 0.0 {
        Ok(())
    } else {
        Err(FqrError::InvalidInput(format!("SCAD argument {u} must be non-negative")))
    }
}

/// Free function form of [`ScadParams::value`].
pub fn scad(params: &ScadParams, u: f64) -> Result<f64> {
    params.value(u)
}

/// Free function form of [`ScadParams::deriv`].
pub fn scad_deriv(params: &ScadParams, u: f64) -> Result<f64> {
    params.deriv(u)
}

/// Subinterval root-mean-square `sqrt((K/T) θ_l' W_j θ_l)` for every
/// covariate `l` and subinterval `j`. `theta` holds the concatenated blocks.
pub fn subinterval_rms(gram: &GramSet, domain_length: f64, theta: &[f64]) -> Result<Vec<Vec<f64>>> {
    let nb = gram.num_basis();
    if nb == 0 || theta.len() % nb != 0 {
        return Err(FqrError::Dimension {
            context: "functional coefficient vector",
            expected: nb * (theta.len() / nb.max(1)).max(1),
            got: theta.len(),
        });
    }
    let k = gram.num_subintervals() as f64;
    Ok(theta
        .chunks(nb)
        .map(|block| {
            gram.sub_grams
                .iter()
                .map(|sg| (k / domain_length * sg.quad_form(block)).max(0.0).sqrt())
                .collect()
        })
        .collect())
}

/// Approximate fSCAD penalty `Σ_l Σ_j p_{λ_l}(sqrt((K/T) θ_l' W_j θ_l))`.
pub fn fscad_value(gram: &GramSet, domain_length: f64, params: &[ScadParams], theta: &[f64]) -> Result<f64> {
    let rms = subinterval_rms(gram, domain_length, theta)?;
    if rms.len() != params.len() {
        return Err(FqrError::Dimension {
            context: "SCAD parameters per functional covariate",
            expected: rms.len(),
            got: params.len(),
        });
    }
    Ok(rms
        .iter()
        .zip(params)
        .map(|(row, p)| row.iter().map(|s| p.value_unchecked(*s)).sum::<f64>())
        .sum())
}

/// Block-diagonal LQA weight matrix anchored at some `θ⁽⁰⁾`.
#[derive(Debug, Clone, PartialEq)]
pub struct LqaWeights {
    /// One `(K+p) x (K+p)` block per functional covariate.
    pub blocks: Vec<DMatrix<f64>>,
    /// Denominator perturbation actually used (absolute, same units as
    /// `sqrt((T/K) θ' W_j θ)`).
    pub epsilon: f64,
    /// `R_2(θ⁽⁰⁾)`: constant that makes the surrogate touch the penalty at
    /// the anchor. Never enters gradients.
    pub offset: f64,
}

impl LqaWeights {
    pub fn block_size(&self) -> usize {
        self.blocks.first().map_or(0, |b| b.nrows())
    }

    /// `θ' W_τ θ`.
    pub fn quad_form(&self, theta: &[f64]) -> f64 {
        let nb = self.block_size();
        self.blocks
            .iter()
            .enumerate()
            .map(|(l, b)| {
                let x = DVector::from_column_slice(&theta[l * nb..(l + 1) * nb]);
                x.dot(&(b * &x))
            })
            .sum()
    }

    /// Dense block-diagonal matrix.
    pub fn dense(&self) -> DMatrix<f64> {
        let nb = self.block_size();
        let n = nb * self.blocks.len();
        let mut out = DMatrix::zeros(n, n);
        for (l, b) in self.blocks.iter().enumerate() {
            out.view_mut((l * nb, l * nb), (nb, nb)).copy_from(b);
        }
        out
    }

    /// Surrogate penalty value `θ' W_τ θ + R_2`.
    pub fn surrogate(&self, theta: &[f64]) -> f64 {
        self.quad_form(theta) + self.offset
    }
}

/// Modified LQA weights: block `l` is
/// `½ Σ_j p'_{λ_l}(s_j) / (sqrt((T/K) θ' W_j θ) + ε) W_j` with `s_j` the
/// subinterval RMS at the anchor and `ε = epsilon_rel · T/K`.
pub fn lqa_weights(
    gram: &GramSet,
    domain_length: f64,
    params: &[ScadParams],
    anchor: &[f64],
    epsilon_rel: f64,
) -> Result<LqaWeights> {
    if anchor.iter().any(|v| !v.is_finite()) {
        return Err(FqrError::InvalidInput("LQA anchor contains non-finite values".into()));
    }
    let nb = gram.num_basis();
    let m = params.len();
    if anchor.len() != m * nb {
        return Err(FqrError::Dimension {
            context: "LQA anchor",
            expected: m * nb,
            got: anchor.len(),
        });
    }
    let k = gram.num_subintervals() as f64;
    let width = domain_length / k;
    let eps = epsilon_rel * width;
    let mut blocks = Vec::with_capacity(m);
    let mut offset = 0.0;
    for (l, p) in params.iter().enumerate() {
        let theta_l = &anchor[l * nb..(l + 1) * nb];
        let mut block = DMatrix::zeros(nb, nb);
        if p.lambda > 0.0 {
            for sg in &gram.sub_grams {
                let qf = sg.quad_form(theta_l).max(0.0);
                let s = (qf / width).sqrt();
                let dp = p.deriv_unchecked(s);
                let weight = 0.5 * dp / ((width * qf).sqrt() + eps);
                offset += p.value_unchecked(s) - weight * qf;
                if weight == 0.0 {
                    continue;
                }
                let sz = sg.block.nrows();
                let mut view = block.view_mut((sg.offset, sg.offset), (sz, sz));
                view += &sg.block * weight;
            }
        }
        blocks.push(block);
    }
    Ok(LqaWeights {
        blocks,
        epsilon: eps,
        offset,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::{compute_gram_set, SplineBasis};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit() -> ScadParams {
        ScadParams::with_lambda(1.0).unwrap()
    }

    #[test]
    fn scad_branches() {
        let p = unit();
        assert_eq!(p.value(0.0).unwrap(), 0.0);
        assert_eq!(p.value(0.5).unwrap(), 0.5);
        assert!((p.value(10.0).unwrap() - 2.35).abs() < 1e-15);
        assert_eq!(p.deriv(0.5).unwrap(), 1.0);
        assert_eq!(p.deriv(3.7).unwrap(), 0.0);
        assert_eq!(p.deriv(8.0).unwrap(), 0.0);
        assert!((p.deriv(2.0).unwrap() - 1.7 / 2.7).abs() < 1e-15);
        assert!(p.value(-0.1).is_err());
        assert!(scad_deriv(&p, -1.0).is_err());
    }

    #[test]
    fn scad_continuity_at_breakpoints() {
        for lambda in [0.01, 0.3, 1.0, 2.5] {
            let p = ScadParams::with_lambda(lambda).unwrap();
            let a = p.a;
            let lin = |u: f64| lambda * u;
            let quad = |u: f64| -(u * u - 2.0 * a * lambda * u + lambda * lambda) / (2.0 * (a - 1.0));
            let flat = (a + 1.0) * lambda * lambda / 2.0;
            assert!((lin(lambda) - quad(lambda)).abs() < 1e-12);
            assert!((quad(a * lambda) - flat).abs() < 1e-12);
            let dquad = |u: f64| (a * lambda - u) / (a - 1.0);
            assert!((dquad(lambda) - lambda).abs() < 1e-12);
            assert!(dquad(a * lambda).abs() < 1e-12);
        }
    }

    #[test]
    fn invalid_params() {
        assert!(ScadParams::new(-1.0, 3.7).is_err());
        assert!(ScadParams::new(1.0, 2.0).is_err());
    }

    fn setup() -> (SplineBasis, GramSet) {
        let b = SplineBasis::cubic(0.0, 2.0, 8).unwrap();
        let g = compute_gram_set(&b, 2).unwrap();
        (b, g)
    }

    #[test]
    fn constant_function_rms_and_penalty() {
        let (b, g) = setup();
        // partition of unity: all-c coefficients represent β ≡ c
        let c = -5.0;
        let theta = vec![c; b.num_basis()];
        let rms = subinterval_rms(&g, b.domain_length(), &theta).unwrap();
        for s in &rms[0] {
            assert!((s - c.abs()).abs() < 1e-10);
        }
        let p = ScadParams::with_lambda(1.0).unwrap();
        let theta2: Vec<f64> = theta.iter().chain(theta.iter()).copied().collect();
        let v = fscad_value(&g, b.domain_length(), &[p, p], &theta2).unwrap();
        assert!((v - 2.0 * 8.0 * 2.35).abs() < 1e-10);
        assert_eq!(fscad_value(&g, b.domain_length(), &[p], &vec![0.0; b.num_basis()]).unwrap(), 0.0);
        assert!(fscad_value(&g, b.domain_length(), &[p, p], &theta).is_err());
    }

    #[test]
    fn single_coefficient_touches_only_its_support() {
        let (b, g) = setup();
        let mut theta = vec![0.0; b.num_basis()];
        theta[5] = 1.0;
        let rms = subinterval_rms(&g, b.domain_length(), &theta).unwrap();
        for (j, s) in rms[0].iter().enumerate() {
            let covered = b.support_subintervals(5).contains(&j);
            assert_eq!(*s > 0.0, covered, "subinterval {j}");
        }
    }

    #[test]
    fn lqa_zero_lambda_and_flat_tail() {
        let (b, g) = setup();
        let theta = vec![10.0; b.num_basis()];
        let zero = ScadParams::with_lambda(0.0).unwrap();
        let w = lqa_weights(&g, b.domain_length(), &[zero], &theta, DEFAULT_LQA_EPSILON).unwrap();
        assert_eq!(w.blocks[0].amax(), 0.0);
        let p = ScadParams::with_lambda(1.0).unwrap();
        let w = lqa_weights(&g, b.domain_length(), &[p], &theta, DEFAULT_LQA_EPSILON).unwrap();
        assert_eq!(w.blocks[0].amax(), 0.0);
    }

    #[test]
    fn lqa_single_subinterval_weight() {
        let (b, g) = setup();
        // β supported on subinterval 0 only through coefficient 0
        let mut theta = vec![0.0; b.num_basis()];
        theta[0] = 0.05;
        let p = ScadParams::with_lambda(1.0).unwrap();
        let w = lqa_weights(&g, b.domain_length(), &[p], &theta, DEFAULT_LQA_EPSILON).unwrap();
        let width = b.domain_length() / 8.0;
        let qf = g.sub_grams[0].quad_form(&theta);
        let s = (qf / width).sqrt();
        assert!(s < 1.0, "anchor should sit on the linear branch");
        let eps = DEFAULT_LQA_EPSILON * width;
        let weight0 = 0.5 / ((width * qf).sqrt() + eps);
        // other subintervals have zero RMS and get weight ½λ/ε
        let weight_zero = 0.5 / eps;
        let mut expect = g.sub_gram_dense(0) * weight0;
        for j in 1..8 {
            expect += g.sub_gram_dense(j) * weight_zero;
        }
        let rel = (&w.blocks[0] - &expect).amax() / expect.amax();
        assert!(rel < 1e-12);
    }

    #[test]
    fn lqa_is_psd_and_touches_penalty() {
        let (b, g) = setup();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let p = ScadParams::with_lambda(0.4).unwrap();
        let theta: Vec<f64> = (0..b.num_basis()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let w = lqa_weights(&g, b.domain_length(), &[p], &theta, DEFAULT_LQA_EPSILON).unwrap();
        for _ in 0..100 {
            let x: Vec<f64> = (0..b.num_basis()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            assert!(w.quad_form(&x) >= -1e-12);
        }
        let exact = fscad_value(&g, b.domain_length(), &[p], &theta).unwrap();
        let approx = w.surrogate(&theta);
        // discrepancy is driven by ε only
        assert!((exact - approx).abs() < 1e-5 * exact.max(1.0));
    }
}
