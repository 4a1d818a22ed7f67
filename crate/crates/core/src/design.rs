//! Functional datasets, their CSV/JSON representation, and assembly of the
//! `Z` / `U` design blocks.

use std::fs::File;
use std::io::{BufReader, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::SplineBasis;
use crate::error::{FqrError, Result};

/// `n` samples of a scalar response, `d` scalar covariates (column 0 is the
/// intercept) and `m` functional covariates observed on a shared grid.
#[derive(Debug, Clone, PartialEq)]
pub struct FunctionalDataset {
    pub y: DVector<f64>,
    pub z: DMatrix<f64>,
    /// One `n x G` matrix per functional covariate.
    pub x: Vec<DMatrix<f64>>,
    pub grid: Vec<f64>,
    pub scalar_names: Vec<String>,
    pub functional_names: Vec<String>,
}

impl FunctionalDataset {
    pub fn new(
        y: DVector<f64>,
        z: DMatrix<f64>,
        x: Vec<DMatrix<f64>>,
        grid: Vec<f64>,
    ) -> Result<Self> {
        let d = z.ncols();
        let m = x.len();
        let scalar_names = (0..d)
            .map(|j| if j == 0 { "intercept".to_string() } else { format!("Z{j}") })
            .collect();
        let functional_names = (1..=m).map(|l| format!("X{l}")).collect();
        let ds = Self {
            y,
            z,
            x,
            grid,
            scalar_names,
            functional_names,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn with_names(mut self, scalar_names: Vec<String>, functional_names: Vec<String>) -> Result<Self> {
        if scalar_names.len() != self.num_scalar() || functional_names.len() != self.num_functional() {
            return Err(FqrError::InvalidInput("covariate name count mismatch".into()));
        }
        self.scalar_names = scalar_names;
        self.functional_names = functional_names;
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn num_scalar(&self) -> usize {
        self.z.ncols()
    }

    pub fn num_functional(&self) -> usize {
        self.x.len()
    }

    pub fn grid_len(&self) -> usize {
        self.grid.len()
    }

    fn validate(&self) -> Result<()> {
        let n = self.y.len();
        if n == 0 {
            return Err(FqrError::InvalidInput("dataset has no samples".into()));
        }
        if self.z.nrows() != n {
            return Err(FqrError::Dimension {
                context: "scalar covariate rows",
                expected: n,
                got: self.z.nrows(),
            });
        }
        if self.z.ncols() == 0 || self.z.column(0).iter().any(|v| *v != 1.0) {
            return Err(FqrError::InvalidInput(
                "first scalar covariate column must be the all-ones intercept".into(),
            ));
        }
        if self.grid.len() < 2 || self.grid.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(FqrError::InvalidInput("grid must be strictly increasing with at least 2 points".into()));
        }
        for (l, xl) in self.x.iter().enumerate() {
            if xl.nrows() != n || xl.ncols() != self.grid.len() {
                return Err(FqrError::InvalidInput(format!(
                    "functional covariate {l} is {}x{}, expected {n}x{}",
                    xl.nrows(),
                    xl.ncols(),
                    self.grid.len()
                )));
            }
            if let Some(pos) = xl.iter().position(|v| !v.is_finite()) {
                let (r, c) = (pos % n, pos / n);
                return Err(FqrError::InvalidInput(format!(
                    "functional covariate {l} has a non-finite value at sample {r}, grid index {c}"
                )));
            }
        }
        if self.y.iter().chain(self.z.iter()).chain(self.grid.iter()).any(|v| !v.is_finite()) {
            return Err(FqrError::InvalidInput("dataset contains non-finite values".into()));
        }
        Ok(())
    }

    /// Rows `idx` of the dataset, in that order.
    pub fn subset(&self, idx: &[usize]) -> FunctionalDataset {
        FunctionalDataset {
            y: DVector::from_iterator(idx.len(), idx.iter().map(|&i| self.y[i])),
            z: self.z.select_rows(idx),
            x: self.x.iter().map(|xl| xl.select_rows(idx)).collect(),
            grid: self.grid.clone(),
            scalar_names: self.scalar_names.clone(),
            functional_names: self.functional_names.clone(),
        }
    }

    /// Same covariates, different response.
    pub fn with_response(&self, y: DVector<f64>) -> Result<FunctionalDataset> {
        if y.len() != self.len() {
            return Err(FqrError::Dimension {
                context: "response",
                expected: self.len(),
                got: y.len(),
            });
        }
        let mut out = self.clone();
        out.y = y;
        Ok(out)
    }
}

/// Composite trapezoid weights on an increasing grid.
pub fn trapezoid_weights(grid: &[f64]) -> Vec<f64> {
    let g = grid.len();
    let mut w = vec![0.0; g];
    for i in 0..g.saturating_sub(1) {
        let h = grid[i + 1] - grid[i];
        w[i] += 0.5 * h;
        w[i + 1] += 0.5 * h;
    }
    w
}

/// Design blocks consumed by the solver.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrices {
    /// `n x d`.
    pub z: DMatrix<f64>,
    /// `n x m(K+p)`, grouped by functional covariate.
    pub u: DMatrix<f64>,
    pub y: DVector<f64>,
    pub num_basis: usize,
    pub degree: usize,
    /// `pieces[l K + j]`: the `n x (p+1)` contribution of subinterval `j` to
    /// columns `l(K+p) + j ..= l(K+p) + j + p` of `U`.
    pub pieces: Vec<DMatrix<f64>>,
    pub quadrature: String,
}

impl DesignMatrices {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn num_scalar(&self) -> usize {
        self.z.ncols()
    }

    pub fn num_functional(&self) -> usize {
        if self.num_basis == 0 {
            0
        } else {
            self.u.ncols() / self.num_basis
        }
    }

    pub fn num_params(&self) -> usize {
        self.z.ncols() + self.u.ncols()
    }

    /// `[Z | U]`.
    pub fn full(&self) -> DMatrix<f64> {
        let n = self.len();
        let d = self.z.ncols();
        let mut out = DMatrix::zeros(n, self.num_params());
        out.view_mut((0, 0), (n, d)).copy_from(&self.z);
        out.view_mut((0, d), (n, self.u.ncols())).copy_from(&self.u);
        out
    }

    pub fn num_subintervals(&self) -> usize {
        self.num_basis - self.degree
    }

    /// `U` with the contributions of the excluded subintervals removed:
    /// column `k` of covariate `l` becomes `∫_Ŝ X_l B_k` where `Ŝ` is the
    /// complement of `excluded[l]`.
    pub fn restricted_u(&self, excluded: &[Vec<bool>]) -> DMatrix<f64> {
        let mut u = self.u.clone();
        let k = self.num_subintervals();
        let n = self.len();
        for (l, ex) in excluded.iter().enumerate() {
            for (j, e) in ex.iter().enumerate() {
                if *e {
                    let mut v = u.view_mut((0, l * self.num_basis + j), (n, self.degree + 1));
                    v -= &self.pieces[l * k + j];
                }
            }
        }
        u
    }

    /// `[Z | restricted U]`.
    pub fn restricted_full(&self, excluded: &[Vec<bool>]) -> DMatrix<f64> {
        let n = self.len();
        let d = self.z.ncols();
        let u = self.restricted_u(excluded);
        let mut out = DMatrix::zeros(n, self.num_params());
        out.view_mut((0, 0), (n, d)).copy_from(&self.z);
        out.view_mut((0, d), (n, u.ncols())).copy_from(&u);
        out
    }

    pub fn subset(&self, idx: &[usize]) -> DesignMatrices {
        DesignMatrices {
            z: self.z.select_rows(idx),
            u: self.u.select_rows(idx),
            y: DVector::from_iterator(idx.len(), idx.iter().map(|&i| self.y[i])),
            num_basis: self.num_basis,
            degree: self.degree,
            pieces: self.pieces.iter().map(|p| p.select_rows(idx)).collect(),
            quadrature: self.quadrature.clone(),
        }
    }

    pub fn with_response(&self, y: DVector<f64>) -> DesignMatrices {
        DesignMatrices {
            y,
            ..self.clone()
        }
    }
}

/// `U[i, l(K+p) + k] ≈ ∫ X_il(t) B_k(t) dt` by composite trapezoid on the
/// observation grid.
pub fn assemble_design(data: &FunctionalDataset, basis: &SplineBasis) -> Result<DesignMatrices> {
    let grid = &data.grid;
    let tol = 1e-9 * basis.domain_length();
    let (g0, g1) = (grid[0], grid[grid.len() - 1]);
    if (g0 - basis.domain_start()).abs() > tol || (g1 - basis.domain_end()).abs() > tol {
        return Err(FqrError::InvalidInput(format!(
            "observation grid [{g0}, {g1}] does not span the basis domain [{}, {}]",
            basis.domain_start(),
            basis.domain_end()
        )));
    }
    let nb = basis.num_basis();
    let p = basis.degree();
    let k = basis.num_subintervals();
    let w = trapezoid_weights(grid);
    // each grid point feeds the subinterval that contains it
    let mut owned: Vec<Vec<usize>> = vec![Vec::new(); k];
    let mut local: Vec<Vec<f64>> = Vec::with_capacity(grid.len());
    for (g, t) in grid.iter().enumerate() {
        let t = t.clamp(basis.domain_start(), basis.domain_end());
        let (j, ders) = basis.eval_local(t, 0)?;
        owned[j].push(g);
        local.push(ders[0].iter().map(|b| b * w[g]).collect());
    }
    let n = data.len();
    let m = data.num_functional();
    let pieces: Vec<DMatrix<f64>> = (0..m * k)
        .into_par_iter()
        .map(|idx| {
            let (l, j) = (idx / k, idx % k);
            let xl = &data.x[l];
            let mut out = DMatrix::zeros(n, p + 1);
            for &g in &owned[j] {
                for r in 0..=p {
                    let wb = local[g][r];
                    if wb != 0.0 {
                        let mut col = out.column_mut(r);
                        col.axpy(wb, &xl.column(g), 1.0);
                    }
                }
            }
            out
        })
        .collect();
    let mut u = DMatrix::zeros(n, m * nb);
    for l in 0..m {
        for j in 0..k {
            let mut v = u.view_mut((0, l * nb + j), (n, p + 1));
            v += &pieces[l * k + j];
        }
    }
    Ok(DesignMatrices {
        z: data.z.clone(),
        u,
        y: data.y.clone(),
        num_basis: nb,
        degree: p,
        pieces,
        quadrature: "composite-trapezoid".into(),
    })
}

/// Functional covariate column group in a wide CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FunctionalColumns {
    pub name: String,
    pub prefix: String,
}

/// JSON sidecar describing a wide CSV dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub response: String,
    #[serde(default)]
    pub scalars: Vec<String>,
    pub functional: Vec<FunctionalColumns>,
    /// Observation times. When empty, times are parsed from the numeric
    /// suffix of each functional column name.
    #[serde(default)]
    pub grid: Vec<f64>,
}

impl DatasetManifest {
    pub fn read(path: &Path) -> Result<Self> {
        let f = File::open(path).map_err(|e| FqrError::io(path, e))?;
        Ok(serde_json::from_reader(BufReader::new(f))?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let s = serde_json::to_string_pretty(self)?;
        std::fs::write(path, s).map_err(|e| FqrError::io(path, e))
    }
}

/// Floats in emitted CSVs carry 17 significant digits.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn parse_cell(path: &Path, row: usize, column: &str, raw: &str) -> Result<f64> {
    let v: f64 = raw.trim().parse().map_err(|_| FqrError::Csv {
        path: path.display().to_string(),
        row,
        column: column.to_string(),
        message: format!("non-numeric value '{raw}'"),
    })?;
    if !v.is_finite() {
        return Err(FqrError::Csv {
            path: path.display().to_string(),
            row,
            column: column.to_string(),
            message: format!("non-finite value '{raw}'"),
        });
    }
    Ok(v)
}

fn suffix_time(prefix: &str, name: &str) -> Option<f64> {
    let rest = name.strip_prefix(prefix)?;
    let numeric = rest.trim_start_matches(|c: char| !(c.is_ascii_digit() || c == '-' || c == '.'));
    numeric.parse().ok()
}

/// Read a wide-format CSV (one row per sample) described by `manifest`.
/// The intercept column is prepended automatically. Rows are numbered from
/// 1 for the first data row in error messages.
pub fn load_csv(path: &Path, manifest: &DatasetManifest) -> Result<FunctionalDataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .flexible(true)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => FqrError::io(path, io),
            other => FqrError::InvalidInput(format!("{}: {other:?}", path.display())),
        })?;
    let headers = rdr.headers()?.clone();
    let col = |name: &str| -> Result<usize> {
        headers.iter().position(|h| h == name).ok_or_else(|| FqrError::Csv {
            path: path.display().to_string(),
            row: 0,
            column: name.to_string(),
            message: "missing column".into(),
        })
    };
    let y_col = col(&manifest.response)?;
    let z_cols = manifest.scalars.iter().map(|s| col(s)).collect::<Result<Vec<_>>>()?;
    let mut f_cols: Vec<Vec<usize>> = Vec::new();
    let mut grid: Option<Vec<f64>> = if manifest.grid.is_empty() {
        None
    } else {
        Some(manifest.grid.clone())
    };
    for fc in &manifest.functional {
        let cols: Vec<usize> = headers
            .iter()
            .enumerate()
            .filter(|(_, h)| h.starts_with(&fc.prefix))
            .map(|(i, _)| i)
            .collect();
        if cols.is_empty() {
            return Err(FqrError::Csv {
                path: path.display().to_string(),
                row: 0,
                column: format!("{}*", fc.prefix),
                message: format!("no columns for functional covariate '{}'", fc.name),
            });
        }
        let times = match &grid {
            Some(g) => g.clone(),
            None => cols
                .iter()
                .map(|&c| {
                    suffix_time(&fc.prefix, &headers[c]).ok_or_else(|| FqrError::Csv {
                        path: path.display().to_string(),
                        row: 0,
                        column: headers[c].to_string(),
                        message: "cannot parse a grid time from the column suffix".into(),
                    })
                })
                .collect::<Result<Vec<_>>>()?,
        };
        if times.len() != cols.len() {
            return Err(FqrError::InvalidInput(format!(
                "functional covariate '{}' has {} columns but the grid has {} points",
                fc.name,
                cols.len(),
                times.len()
            )));
        }
        match &grid {
            Some(g) if *g != times => {
                return Err(FqrError::InvalidInput(
                    "all functional covariates must share one grid".into(),
                ))
            }
            None => grid = Some(times),
            _ => {}
        }
        f_cols.push(cols);
    }
    let grid = grid.ok_or_else(|| FqrError::InvalidInput("manifest lists no functional covariates".into()))?;

    let mut y = Vec::new();
    let mut z = Vec::new();
    let mut x: Vec<Vec<f64>> = vec![Vec::new(); f_cols.len()];
    for (r, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = r + 1;
        if rec.len() != headers.len() {
            return Err(FqrError::Csv {
                path: path.display().to_string(),
                row,
                column: String::new(),
                message: format!("ragged row: {} fields, header has {}", rec.len(), headers.len()),
            });
        }
        y.push(parse_cell(path, row, &headers[y_col], &rec[y_col])?);
        z.push(1.0);
        for &c in &z_cols {
            z.push(parse_cell(path, row, &headers[c], &rec[c])?);
        }
        for (l, cols) in f_cols.iter().enumerate() {
            for &c in cols {
                x[l].push(parse_cell(path, row, &headers[c], &rec[c])?);
            }
        }
    }
    let n = y.len();
    let d = z_cols.len() + 1;
    let g = grid.len();
    let ds = FunctionalDataset::new(
        DVector::from_vec(y),
        DMatrix::from_row_slice(n, d, &z),
        x.into_iter().map(|v| DMatrix::from_row_slice(n, g, &v)).collect(),
        grid,
    )?;
    let scalar_names = std::iter::once("intercept".to_string())
        .chain(manifest.scalars.iter().cloned())
        .collect();
    let functional_names = manifest.functional.iter().map(|f| f.name.clone()).collect();
    ds.with_names(scalar_names, functional_names)
}

/// Write `data` as a wide CSV plus its manifest. The intercept column is
/// not written; `load_csv` restores it.
pub fn save_csv(data: &FunctionalDataset, csv_path: &Path, manifest_path: &Path) -> Result<DatasetManifest> {
    let scalars: Vec<String> = data.scalar_names.iter().skip(1).cloned().collect();
    let functional: Vec<FunctionalColumns> = data
        .functional_names
        .iter()
        .map(|name| FunctionalColumns {
            name: name.clone(),
            prefix: format!("{name}_t"),
        })
        .collect();
    let mut out = File::create(csv_path).map_err(|e| FqrError::io(csv_path, e))?;
    let mut header = vec!["y".to_string()];
    header.extend(scalars.iter().cloned());
    for fc in &functional {
        for g in 0..data.grid_len() {
            header.push(format!("{}{:04}", fc.prefix, g));
        }
    }
    let mut text = header.join(",");
    text.push('\n');
    for i in 0..data.len() {
        let mut row = vec![fmt_f64(data.y[i])];
        for j in 1..data.num_scalar() {
            row.push(fmt_f64(data.z[(i, j)]));
        }
        for xl in &data.x {
            for g in 0..data.grid_len() {
                row.push(fmt_f64(xl[(i, g)]));
            }
        }
        text.push_str(&row.join(","));
        text.push('\n');
    }
    out.write_all(text.as_bytes()).map_err(|e| FqrError::io(csv_path, e))?;
    let manifest = DatasetManifest {
        response: "y".into(),
        scalars,
        functional,
        grid: data.grid.clone(),
    };
    manifest.write(manifest_path)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(n: usize, g: usize, f: impl Fn(usize, f64) -> f64) -> FunctionalDataset {
        let grid: Vec<f64> = (0..g).map(|i| i as f64 / (g - 1) as f64).collect();
        let x = DMatrix::from_fn(n, g, |i, j| f(i, grid[j]));
        let z = DMatrix::from_fn(n, 2, |i, j| if j == 0 { 1.0 } else { i as f64 });
        FunctionalDataset::new(DVector::from_element(n, 0.5), z, vec![x], grid).unwrap()
    }

    #[test]
    fn constant_curve_integrates_basis() {
        let b = SplineBasis::cubic(0.0, 1.0, 4).unwrap();
        let ds = toy(3, 2001, |_, _| 1.0);
        let d = assemble_design(&ds, &b).unwrap();
        let row_sum: f64 = d.u.row(0).iter().sum();
        assert!((row_sum - 1.0).abs() < 1e-12);
        // ∫ B_0 = h/(p+1) for a clamped end function with h = 1/4
        assert!((d.u[(0, 0)] - 0.25 / 4.0).abs() < 1e-6);
    }

    #[test]
    fn zero_curve_gives_zero_block() {
        let b = SplineBasis::cubic(0.0, 1.0, 4).unwrap();
        let ds = toy(2, 50, |_, _| 0.0);
        let d = assemble_design(&ds, &b).unwrap();
        assert_eq!(d.u.amax(), 0.0);
    }

    #[test]
    fn grid_must_span_domain() {
        let b = SplineBasis::cubic(0.0, 2.0, 4).unwrap();
        let ds = toy(2, 20, |_, t| t);
        assert!(assemble_design(&ds, &b).is_err());
    }

    #[test]
    fn nan_rejected() {
        let grid = vec![0.0, 0.5, 1.0];
        let mut x = DMatrix::zeros(2, 3);
        x[(1, 2)] = f64::NAN;
        let z = DMatrix::from_element(2, 1, 1.0);
        let err = FunctionalDataset::new(DVector::zeros(2), z, vec![x], grid).unwrap_err();
        assert!(err.to_string().contains("sample 1"));
    }

    #[test]
    fn linear_in_curves() {
        let b = SplineBasis::cubic(0.0, 1.0, 5).unwrap();
        let d1 = assemble_design(&toy(4, 101, |i, t| (t * 3.0 + i as f64).sin()), &b).unwrap();
        let d2 = assemble_design(&toy(4, 101, |i, t| t * t - i as f64), &b).unwrap();
        let mix = assemble_design(
            &toy(4, 101, |i, t| 2.0 * (t * 3.0 + i as f64).sin() - 0.5 * (t * t - i as f64)),
            &b,
        )
        .unwrap();
        let lin = &d1.u * 2.0 - &d2.u * 0.5;
        assert!((mix.u - lin).amax() < 1e-12);
    }

    #[test]
    fn intercept_required() {
        let z = DMatrix::from_element(2, 1, 2.0);
        let r = FunctionalDataset::new(DVector::zeros(2), z, vec![DMatrix::zeros(2, 3)], vec![0.0, 0.5, 1.0]);
        assert!(r.is_err());
    }
}
