//! Least-squares route to the same estimates: individual-level regression
//! with cluster-robust HC2 variances, household-aggregate regression with
//! HC2 variances, and its transformed-outcome version for arbitrary
//! estimand weights.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::model::{
    Cell, EffectEstimate, EffectKind, EstimatorFamily, ExperimentDesign, ObservedData,
    WeightScheme,
};

/// Relative pivot size below which a design column counts as collinear.
const RANK_TOLERANCE: f64 = 1e-10;

/// Smallest eigenvalue accepted when inverting `(I - P_ss)^{1/2}`.
pub const EIGENVALUE_FLOOR: f64 = 1e-12;

/// Regressors with per-row cluster labels.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrix {
    x: DMatrix<f64>,
    clusters: Vec<usize>,
    column_names: Vec<String>,
}

impl DesignMatrix {
    pub fn new(x: DMatrix<f64>, clusters: Vec<usize>, column_names: Vec<String>) -> Result<Self> {
        if clusters.len() != x.nrows() || column_names.len() != x.ncols() {
            return Err(Error::Structure(format!(
                "design matrix is {}x{} but has {} cluster labels and {} column names",
                x.nrows(),
                x.ncols(),
                clusters.len(),
                column_names.len()
            )));
        }
        Ok(Self {
            x,
            clusters,
            column_names,
        })
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn clusters(&self) -> &[usize] {
        &self.clusters
    }

    pub fn column_names(&self) -> &[String] {
        &self.column_names
    }

    pub fn nrows(&self) -> usize {
        self.x.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.x.ncols()
    }

    /// Row indices grouped by cluster label, clusters in ascending label order.
    pub fn cluster_rows(&self) -> Vec<(usize, Vec<usize>)> {
        let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (row, &c) in self.clusters.iter().enumerate() {
            groups.entry(c).or_default().push(row);
        }
        groups.into_iter().collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OlsFit {
    pub coefficients: DVector<f64>,
    pub residuals: DVector<f64>,
    /// `(X'X)^{-1}`, formed from the triangular factor for sandwich assembly.
    pub xtx_inv: DMatrix<f64>,
}

/// Least squares through a Householder QR factorization.
pub fn ols_fit(design: &DesignMatrix, y: &DVector<f64>) -> Result<OlsFit> {
    let x = design.x();
    let (m, p) = x.shape();
    if y.len() != m {
        return Err(Error::Structure(format!(
            "outcome has {} entries, design has {m} rows",
            y.len()
        )));
    }
    if m < p {
        return Err(Error::LinearAlgebra(format!(
            "{m} observations cannot identify {p} coefficients"
        )));
    }
    let qr = x.clone().qr();
    let r = qr.r();
    let scale = (0..p).map(|k| x.column(k).norm()).fold(0.0, f64::max);
    let collinear: Vec<&str> = (0..p)
        .filter(|&k| r[(k, k)].abs() <= RANK_TOLERANCE * scale)
        .map(|k| design.column_names[k].as_str())
        .collect();
    if !collinear.is_empty() || scale == 0.0 {
        return Err(Error::LinearAlgebra(format!(
            "design matrix is rank deficient; collinear columns: {}",
            collinear.join(", ")
        )));
    }
    let qty = qr.q().tr_mul(y);
    let coefficients = r
        .solve_upper_triangular(&qty)
        .ok_or_else(|| Error::LinearAlgebra("triangular solve failed".into()))?;
    let r_inv = r
        .solve_upper_triangular(&DMatrix::identity(p, p))
        .ok_or_else(|| Error::LinearAlgebra("triangular inverse failed".into()))?;
    let xtx_inv = &r_inv * r_inv.transpose();
    let residuals = y - x * &coefficients;
    Ok(OlsFit {
        coefficients,
        residuals,
        xtx_inv,
    })
}

/// Symmetric inverse square root by eigendecomposition. Eigenvalues at or
/// below [`EIGENVALUE_FLOOR`] are an error rather than being clamped.
pub fn inverse_sqrt_spd(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let eig = SymmetricEigen::new(a.clone());
    if let Some(&min) = eig.eigenvalues.iter().min_by(|a, b| a.total_cmp(b)) {
        if min <= EIGENVALUE_FLOOR {
            return Err(Error::LinearAlgebra(format!(
                "matrix is not positive definite (smallest eigenvalue {min:e})"
            )));
        }
    }
    let d = eig.eigenvalues.map(|l| 1.0 / l.sqrt());
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&d) * eig.eigenvectors.transpose())
}

/// Hat-matrix block `P_ss = X_s (X'X)^{-1} X_s'` for the given rows.
pub fn hat_block(fit: &OlsFit, design: &DesignMatrix, rows: &[usize]) -> DMatrix<f64> {
    let xs = design.x().select_rows(rows);
    &xs * &fit.xtx_inv * xs.transpose()
}

/// Cluster-robust HC2 covariance
/// `(X'X)^{-1} Σ_s X_s' A_s e_s e_s' A_s X_s (X'X)^{-1}` with
/// `A_s = (I - P_ss)^{-1/2}`.
pub fn hc2_cluster_robust(fit: &OlsFit, design: &DesignMatrix) -> Result<DMatrix<f64>> {
    let p = design.ncols();
    let mut meat = DMatrix::zeros(p, p);
    for (cluster, rows) in design.cluster_rows() {
        let xs = design.x().select_rows(&rows);
        let es = fit.residuals.select_rows(&rows);
        let mut block = -(&xs * &fit.xtx_inv * xs.transpose());
        for d in 0..rows.len() {
            block[(d, d)] += 1.0;
        }
        let adjust = inverse_sqrt_spd(&block).map_err(|_| {
            Error::LinearAlgebra(format!(
                "I - P_ss is singular for cluster {cluster}; the cluster saturates the model"
            ))
        })?;
        let u = xs.tr_mul(&(adjust * es));
        meat.ger(1.0, &u, &u, 1.0);
    }
    Ok(&fit.xtx_inv * meat * &fit.xtx_inv)
}

/// Leverages `h_kk`.
pub fn leverages(fit: &OlsFit, design: &DesignMatrix) -> DVector<f64> {
    let xm = design.x() * &fit.xtx_inv;
    DVector::from_iterator(
        design.nrows(),
        xm.row_iter()
            .zip(design.x().row_iter())
            .map(|(a, b)| a.dot(&b)),
    )
}

/// Heteroskedasticity-robust HC2 covariance with row weights
/// `e_k^2 / (1 - h_kk)`.
pub fn hc2_robust(fit: &OlsFit, design: &DesignMatrix) -> Result<DMatrix<f64>> {
    let h = leverages(fit, design);
    let p = design.ncols();
    let mut meat = DMatrix::zeros(p, p);
    for (k, row) in design.x().row_iter().enumerate() {
        let room = 1.0 - h[k];
        if room <= EIGENVALUE_FLOOR {
            return Err(Error::LinearAlgebra(format!(
                "row {k} has leverage 1; HC2 is undefined"
            )));
        }
        let w = fit.residuals[k].powi(2) / room;
        let r = row.transpose();
        meat.ger(w, &r, &r, 1.0);
    }
    Ok(&fit.xtx_inv * meat * &fit.xtx_inv)
}

/// Homoskedastic covariance `σ̂² (X'X)^{-1}` with `σ̂² = RSS / (m - p)`.
pub fn classical_covariance(fit: &OlsFit, design: &DesignMatrix) -> Result<DMatrix<f64>> {
    let dof = design.nrows() as f64 - design.ncols() as f64;
    if dof <= 0.0 {
        return Err(Error::LinearAlgebra(
            "no residual degrees of freedom for the classical variance".into(),
        ));
    }
    Ok(&fit.xtx_inv * (fit.residuals.norm_squared() / dof))
}

fn names(cols: &[&str]) -> Vec<String> {
    cols.iter().map(|s| s.to_string()).collect()
}

/// Individual-level design: intercept, `H Z`, `H (1 - Z)`, clustered by
/// household.
pub fn individual_design(data: &ObservedData) -> Result<(DVector<f64>, DesignMatrix)> {
    let m = data.total_individuals();
    let mut x = DMatrix::zeros(m, 3);
    let mut y = DVector::zeros(m);
    let mut clusters = Vec::with_capacity(m);
    let mut row = 0;
    for (i, hh) in data.households().iter().enumerate() {
        for (j, &v) in hh.outcomes().iter().enumerate() {
            x[(row, 0)] = 1.0;
            match hh.cell(j) {
                Cell::T11 => x[(row, 1)] = 1.0,
                Cell::T10 => x[(row, 2)] = 1.0,
                Cell::T00 => {}
            }
            y[row] = v;
            clusters.push(i);
            row += 1;
        }
    }
    Ok((y, DesignMatrix::new(x, clusters, names(&["intercept", "HZ", "H(1-Z)"]))?))
}

/// Household-aggregate outcomes and design. Each treated household
/// contributes its `T11` mean and its `T10` mean, each control household its
/// `T00` mean, giving `2 N1 + N0` rows with indicators `H^(11)` and `H^(10)`.
pub fn household_aggregate(data: &ObservedData) -> Result<(DVector<f64>, DesignMatrix)> {
    let mut rows: Vec<(f64, Cell, usize)> = Vec::new();
    for (i, hh) in data.households().iter().enumerate() {
        let cells: &[Cell] = if hh.is_treated() {
            &[Cell::T11, Cell::T10]
        } else {
            &[Cell::T00]
        };
        for &cell in cells {
            let (sum, count) = hh
                .members_in(cell)
                .fold((0.0, 0usize), |(s, k), (_, y)| (s + y, k + 1));
            if count == 0 {
                return Err(Error::Estimation(format!(
                    "household {} has no members in cell {cell}",
                    hh.id()
                )));
            }
            rows.push((sum / count as f64, cell, i));
        }
    }
    let m = rows.len();
    let mut x = DMatrix::zeros(m, 3);
    let mut y = DVector::zeros(m);
    let mut clusters = Vec::with_capacity(m);
    for (k, &(v, cell, i)) in rows.iter().enumerate() {
        x[(k, 0)] = 1.0;
        match cell {
            Cell::T11 => x[(k, 1)] = 1.0,
            Cell::T10 => x[(k, 2)] = 1.0,
            Cell::T00 => {}
        }
        y[k] = v;
        clusters.push(i);
    }
    Ok((y, DesignMatrix::new(x, clusters, names(&["intercept", "H11", "H10"]))?))
}

/// Primary and spillover estimates from one fitted model.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimatePair {
    pub primary: EffectEstimate,
    pub spillover: EffectEstimate,
}

impl EstimatePair {
    pub fn get(&self, effect: EffectKind) -> Option<&EffectEstimate> {
        match effect {
            EffectKind::Primary => Some(&self.primary),
            EffectKind::Spillover => Some(&self.spillover),
            EffectKind::Overall => None,
        }
    }

    fn from_fit(fit: &OlsFit, cov: &DMatrix<f64>, scheme: WeightScheme, level: f64) -> Result<Self> {
        let make = |effect, k: usize| {
            EffectEstimate::new(
                effect,
                scheme.clone(),
                EstimatorFamily::Regression,
                fit.coefficients[k],
                cov[(k, k)].max(0.0),
                level,
            )
        };
        Ok(Self {
            primary: make(EffectKind::Primary, 1)?,
            spillover: make(EffectKind::Spillover, 2)?,
        })
    }
}

/// Household-aggregate regression of transformed outcomes `N n_i w_i* Y`
/// on the unweighted design, with HC2 variances.
pub fn weighted_regression_path(
    data: &ObservedData,
    design: &ExperimentDesign,
    scheme: &WeightScheme,
    level: f64,
) -> Result<EstimatePair> {
    data.check_design(design)?;
    let factors = scheme.transform_factors(design.household_sizes())?;
    let transformed = data.map_outcomes(|i, _, y| factors[i] * y);
    let (y, x) = household_aggregate(&transformed)?;
    let fit = ols_fit(&x, &y)?;
    let cov = hc2_robust(&fit, &x)?;
    EstimatePair::from_fit(&fit, &cov, scheme.clone(), level)
}

/// Individual-level regression with cluster-robust HC2 variances.
///
/// With equal household sizes this reproduces the household-weighted
/// estimates and their conservative variances.
pub fn cluster_individual_path(data: &ObservedData, level: f64) -> Result<EstimatePair> {
    let (y, x) = individual_design(data)?;
    let fit = ols_fit(&x, &y)?;
    let cov = hc2_cluster_robust(&fit, &x)?;
    EstimatePair::from_fit(&fit, &cov, WeightScheme::HouseholdWeighted, level)
}

/// The analysis that ignores households: individual-level regression with
/// non-clustered HC2 and with classical ("nominal") variances.
#[derive(Debug, Clone, PartialEq)]
pub struct NaivePath {
    pub robust: EstimatePair,
    pub nominal: EstimatePair,
}

pub fn naive_individual_path(data: &ObservedData, level: f64) -> Result<NaivePath> {
    let (y, x) = individual_design(data)?;
    let fit = ols_fit(&x, &y)?;
    let robust = hc2_robust(&fit, &x)?;
    let nominal = classical_covariance(&fit, &x)?;
    Ok(NaivePath {
        robust: EstimatePair::from_fit(&fit, &robust, WeightScheme::IndividualWeighted, level)?,
        nominal: EstimatePair::from_fit(&fit, &nominal, WeightScheme::IndividualWeighted, level)?,
    })
}
