//! Clamped B-spline bases on an equally spaced knot grid and the Gram
//! matrices the estimator needs from them.
//!
//! A basis of degree `p` on `K` subintervals has `K + p` functions. Basis
//! function `k` (0-based) is nonzero only on subintervals `k - p ..= k`,
//! which is the band structure every per-subinterval matrix relies on.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{FqrError, Result};

/// B-spline system of order `degree + 1` on `[domain_start, domain_end]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplineBasis {
    domain_start: f64,
    domain_end: f64,
    num_subintervals: usize,
    degree: usize,
    /// Clamped knot vector: `degree + 1` copies of each boundary knot plus
    /// the `K - 1` interior knots.
    knots: Vec<f64>,
}

impl SplineBasis {
    pub fn new(domain_start: f64, domain_end: f64, num_subintervals: usize, degree: usize) -> Result<Self> {
        if !domain_start.is_finite() || !domain_end.is_finite() || domain_end <= domain_start {
            return Err(FqrError::InvalidInput(format!(
                "basis domain [{domain_start}, {domain_end}] must be finite and non-degenerate"
            )));
        }
        if num_subintervals < 1 {
            return Err(FqrError::InvalidInput(
                "number of subintervals K must be at least 1".into(),
            ));
        }
        let k = num_subintervals;
        let width = domain_end - domain_start;
        let mut knots = Vec::with_capacity(k + 1 + 2 * degree);
        knots.extend(std::iter::repeat(domain_start).take(degree));
        for j in 0..=k {
            let t = if j == k {
                domain_end
            } else {
                domain_start + width * (j as f64) / (k as f64)
            };
            knots.push(t);
        }
        knots.extend(std::iter::repeat(domain_end).take(degree));
        Ok(Self {
            domain_start,
            domain_end,
            num_subintervals,
            degree,
            knots,
        })
    }

    /// Cubic basis (`p = 3`), the configuration used throughout the simulations.
    pub fn cubic(domain_start: f64, domain_end: f64, num_subintervals: usize) -> Result<Self> {
        Self::new(domain_start, domain_end, num_subintervals, 3)
    }

    pub fn domain_start(&self) -> f64 {
        self.domain_start
    }

    pub fn domain_end(&self) -> f64 {
        self.domain_end
    }

    pub fn domain_length(&self) -> f64 {
        self.domain_end - self.domain_start
    }

    pub fn num_subintervals(&self) -> usize {
        self.num_subintervals
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    /// `K + p`.
    pub fn num_basis(&self) -> usize {
        self.num_subintervals + self.degree
    }

    pub fn subinterval_width(&self) -> f64 {
        self.domain_length() / self.num_subintervals as f64
    }

    /// Breakpoint `t_j`, `j = 0..=K`.
    pub fn breakpoint(&self, j: usize) -> f64 {
        self.knots[self.degree + j]
    }

    /// `[t_j, t_{j+1}]` for 0-based subinterval `j`.
    pub fn subinterval(&self, j: usize) -> (f64, f64) {
        (self.breakpoint(j), self.breakpoint(j + 1))
    }

    /// Range of basis indices that are nonzero on subinterval `j`.
    pub fn active_on_subinterval(&self, j: usize) -> std::ops::RangeInclusive<usize> {
        j..=j + self.degree
    }

    /// Subintervals on which basis function `k` can be nonzero.
    pub fn support_subintervals(&self, k: usize) -> std::ops::RangeInclusive<usize> {
        let lo = k.saturating_sub(self.degree);
        let hi = k.min(self.num_subintervals - 1);
        lo..=hi
    }

    pub fn contains(&self, t: f64) -> bool {
        t >= self.domain_start && t <= self.domain_end
    }

    /// 0-based subinterval containing `t`; subintervals are left-closed and
    /// the last one is closed on both sides.
    pub fn locate(&self, t: f64) -> Result<usize> {
        if !self.contains(t) {
            return Err(FqrError::OutOfDomain {
                t,
                start: self.domain_start,
                end: self.domain_end,
            });
        }
        let k = self.num_subintervals;
        let x = (t - self.domain_start) / self.subinterval_width();
        let mut j = (x.floor().max(0.0) as usize).min(k - 1);
        // floor() can land one cell off next to a knot
        while j + 1 < k && t >= self.breakpoint(j + 1) {
            j += 1;
        }
        while j > 0 && t < self.breakpoint(j) {
            j -= 1;
        }
        Ok(j)
    }

    /// Values and derivatives of the `p + 1` basis functions that are active
    /// at `t`. Returns the first active index and `ders[r][i]`, the `r`-th
    /// derivative of basis function `first + i`.
    pub fn eval_local(&self, t: f64, n_ders: usize) -> Result<(usize, Vec<Vec<f64>>)> {
        let j = self.locate(t)?;
        let span = j + self.degree;
        Ok((j, ders_basis_funs(&self.knots, span, t, self.degree, n_ders)))
    }

    /// Full vector `(B_1(t), ..., B_{K+p}(t))`.
    pub fn eval(&self, t: f64) -> Result<DVector<f64>> {
        self.eval_deriv(t, 0)
    }

    /// `q`-th derivative of every basis function at `t`.
    pub fn eval_deriv(&self, t: f64, q: usize) -> Result<DVector<f64>> {
        let (first, ders) = self.eval_local(t, q)?;
        let mut out = DVector::zeros(self.num_basis());
        if q <= self.degree {
            for (i, v) in ders[q].iter().enumerate() {
                out[first + i] = *v;
            }
        }
        Ok(out)
    }

    /// Rows are evaluation points, columns basis functions.
    pub fn design_matrix(&self, points: &[f64]) -> Result<DMatrix<f64>> {
        let mut out = DMatrix::zeros(points.len(), self.num_basis());
        for (r, &t) in points.iter().enumerate() {
            let (first, ders) = self.eval_local(t, 0)?;
            for (i, v) in ders[0].iter().enumerate() {
                out[(r, first + i)] = *v;
            }
        }
        Ok(out)
    }

    /// `B(t)' coef`.
    pub fn evaluate_combination(&self, coef: &[f64], t: f64) -> Result<f64> {
        if coef.len() != self.num_basis() {
            return Err(FqrError::Dimension {
                context: "spline coefficients",
                expected: self.num_basis(),
                got: coef.len(),
            });
        }
        let (first, ders) = self.eval_local(t, 0)?;
        Ok(ders[0]
            .iter()
            .enumerate()
            .map(|(i, v)| v * coef[first + i])
            .sum())
    }

    /// Subinterval midpoints.
    pub fn midpoints(&self) -> Vec<f64> {
        (0..self.num_subintervals)
            .map(|j| {
                let (a, b) = self.subinterval(j);
                0.5 * (a + b)
            })
            .collect()
    }
}

/// Cox–de Boor recursion with derivatives for the nonzero functions on
/// `[knots[span], knots[span + 1])`.
fn ders_basis_funs(knots: &[f64], span: usize, t: f64, p: usize, n_ders: usize) -> Vec<Vec<f64>> {
    let mut ndu = vec![vec![0.0; p + 1]; p + 1];
    let mut left = vec![0.0; p + 1];
    let mut right = vec![0.0; p + 1];
    ndu[0][0] = 1.0;
    for j in 1..=p {
        left[j] = t - knots[span + 1 - j];
        right[j] = knots[span + j] - t;
        let mut saved = 0.0;
        for r in 0..j {
            // lower triangle holds knot differences
            ndu[j][r] = right[r + 1] + left[j - r];
            let temp = ndu[r][j - 1] / ndu[j][r];
            ndu[r][j] = saved + right[r + 1] * temp;
            saved = left[j - r] * temp;
        }
        ndu[j][j] = saved;
    }

    let mut ders = vec![vec![0.0; p + 1]; n_ders + 1];
    for j in 0..=p {
        ders[0][j] = ndu[j][p];
    }
    let top = n_ders.min(p);
    let mut a = vec![vec![0.0; p + 1]; 2];
    for r in 0..=p {
        let (mut s1, mut s2) = (0usize, 1usize);
        a[0][0] = 1.0;
        for k in 1..=top {
            let mut d = 0.0;
            let rk = r as isize - k as isize;
            let pk = p - k;
            if r >= k {
                a[s2][0] = a[s1][0] / ndu[pk + 1][rk as usize];
                d = a[s2][0] * ndu[rk as usize][pk];
            }
            let j1 = if rk >= -1 { 1 } else { (-rk) as usize };
            let j2 = if (r as isize - 1) <= pk as isize { k - 1 } else { p - r };
            for j in j1..=j2 {
                let idx = (rk + j as isize) as usize;
                a[s2][j] = (a[s1][j] - a[s1][j - 1]) / ndu[pk + 1][idx];
                d += a[s2][j] * ndu[idx][pk];
            }
            if r <= pk {
                a[s2][k] = -a[s1][k - 1] / ndu[pk + 1][r];
                d += a[s2][k] * ndu[r][pk];
            }
            ders[k][r] = d;
            std::mem::swap(&mut s1, &mut s2);
        }
    }
    let mut factor = p as f64;
    for k in 1..=top {
        for v in ders[k].iter_mut() {
            *v *= factor;
        }
        factor *= (p - k) as f64;
    }
    ders
}

/// Gauss–Legendre nodes and weights on `[-1, 1]`.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..(n + 1) / 2 {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut pnm1, mut pn) = (1.0, x);
            for k in 2..=n {
                let pk = ((2 * k - 1) as f64 * x * pn - (k - 1) as f64 * pnm1) / k as f64;
                pnm1 = pn;
                pn = pk;
            }
            dp = n as f64 * (x * pn - pnm1) / (x * x - 1.0);
            let dx = pn / dp;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    (nodes, weights)
}

/// Local `(p+1) x (p+1)` block of a per-subinterval Gram matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubGram {
    /// Index of the first basis function the block touches.
    pub offset: usize,
    pub block: DMatrix<f64>,
}

impl SubGram {
    /// `coef' W_j coef` using only the nonzero block.
    pub fn quad_form(&self, coef: &[f64]) -> f64 {
        let m = self.block.nrows();
        let mut acc = 0.0;
        for u in 0..m {
            let cu = coef[self.offset + u];
            if cu == 0.0 {
                continue;
            }
            for v in 0..m {
                acc += cu * self.block[(u, v)] * coef[self.offset + v];
            }
        }
        acc
    }
}

/// Gram matrices of a basis: `full_gram = ∫ B B'`, `deriv_gram = ∫ B^(q) B^(q)'`
/// and the per-subinterval pieces of both.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GramSet {
    pub full_gram: DMatrix<f64>,
    pub deriv_gram: DMatrix<f64>,
    /// `W_j`.
    pub sub_grams: Vec<SubGram>,
    /// Pieces of `deriv_gram`, one per subinterval.
    pub deriv_sub_grams: Vec<SubGram>,
    pub q: usize,
}

impl GramSet {
    pub fn num_subintervals(&self) -> usize {
        self.sub_grams.len()
    }

    pub fn num_basis(&self) -> usize {
        self.full_gram.nrows()
    }

    /// Dense `(K+p) x (K+p)` form of `W_j`.
    pub fn sub_gram_dense(&self, j: usize) -> DMatrix<f64> {
        let n = self.num_basis();
        let sg = &self.sub_grams[j];
        let mut out = DMatrix::zeros(n, n);
        let m = sg.block.nrows();
        out.view_mut((sg.offset, sg.offset), (m, m)).copy_from(&sg.block);
        out
    }

    /// `∫ B^(q) B^(q)'` over the subintervals with `excluded[j] == false`.
    pub fn deriv_gram_excluding(&self, excluded: &[bool]) -> DMatrix<f64> {
        if !excluded.iter().any(|e| *e) {
            return self.deriv_gram.clone();
        }
        let n = self.num_basis();
        let mut out = DMatrix::zeros(n, n);
        for (sg, ex) in self.deriv_sub_grams.iter().zip(excluded) {
            if !ex {
                let m = sg.block.nrows();
                let mut v = out.view_mut((sg.offset, sg.offset), (m, m));
                v += &sg.block;
            }
        }
        out
    }
}

/// Build all Gram matrices for `basis` with roughness derivative order `q`.
pub fn compute_gram_set(basis: &SplineBasis, q: usize) -> Result<GramSet> {
    let p = basis.degree();
    if q > p {
        return Err(FqrError::InvalidInput(format!(
            "roughness derivative order q = {q} exceeds spline degree p = {p}"
        )));
    }
    let nb = basis.num_basis();
    let n_nodes = (2 * p + 1).div_ceil(2) + 1;
    let (nodes, weights) = gauss_legendre(n_nodes);
    let mut full = DMatrix::zeros(nb, nb);
    let mut deriv = DMatrix::zeros(nb, nb);
    let mut subs = Vec::with_capacity(basis.num_subintervals());
    let mut dsubs = Vec::with_capacity(basis.num_subintervals());
    for j in 0..basis.num_subintervals() {
        let (a, b) = basis.subinterval(j);
        let half = 0.5 * (b - a);
        let mid = 0.5 * (a + b);
        let mut block = DMatrix::zeros(p + 1, p + 1);
        let mut dblock = DMatrix::<f64>::zeros(p + 1, p + 1);
        for (x, w) in nodes.iter().zip(&weights) {
            let t = mid + half * x;
            let span = j + p;
            let ders = ders_basis_funs(basis.knots(), span, t, p, q);
            let wt = w * half;
            for u in 0..=p {
                for v in u..=p {
                    block[(u, v)] += wt * ders[0][u] * ders[0][v];
                    dblock[(u, v)] += wt * ders[q][u] * ders[q][v];
                }
            }
        }
        block.fill_lower_triangle_with_upper_triangle();
        dblock.fill_lower_triangle_with_upper_triangle();
        for u in 0..=p {
            for v in 0..=p {
                full[(j + u, j + v)] += block[(u, v)];
                deriv[(j + u, j + v)] += dblock[(u, v)];
            }
        }
        subs.push(SubGram { offset: j, block });
        dsubs.push(SubGram {
            offset: j,
            block: dblock,
        });
    }
    Ok(GramSet {
        full_gram: full,
        deriv_gram: deriv,
        sub_grams: subs,
        deriv_sub_grams: dsubs,
        q,
    })
}
