//! DCI disentanglement and completeness from an L1-logistic importance matrix.

use super::linear::{to_array, FitOptions, SoftmaxRegression};
use super::CodeTable;
use crate::{Error, Result};

pub const DCI_L1: f64 = 0.01;

#[derive(Debug, Clone, PartialEq)]
pub struct DciScore {
    pub disentanglement: f64,
    pub completeness: f64,
    /// (m, n): `importance[d][k]` for code dim d and factor k.
    pub importance: Vec<Vec<f64>>,
}

/// Entropy of `p / Σp` in base `base`; 0 for an all-zero vector.
fn normalized_entropy(p: &[f64], base: usize) -> f64 {
    let total: f64 = p.iter().sum();
    if total <= 0.0 || base < 2 {
        return 0.0;
    }
    let h: f64 = p
        .iter()
        .filter(|&&v| v > 0.0)
        .map(|&v| {
            let q = v / total;
            -q * q.ln()
        })
        .sum();
    h / (base as f64).ln()
}

/// `(disentanglement, completeness)` of an importance matrix `r` (m rows of n).
pub fn dci_from_importance(r: &[Vec<f64>]) -> Result<(f64, f64)> {
    let m = r.len();
    let n = r.first().map_or(0, |row| row.len());
    if n < 2 {
        return Err(Error::invalid("dci needs at least two factors"));
    }
    if r.iter().flatten().any(|v| *v < 0.0 || !v.is_finite()) {
        return Err(Error::invalid("importance entries must be finite and non-negative"));
    }
    let total: f64 = r.iter().flatten().sum();
    if total <= 0.0 {
        return Ok((0.0, 0.0));
    }
    let disentanglement = r
        .iter()
        .map(|row| {
            let rho = row.iter().sum::<f64>() / total;
            rho * (1.0 - normalized_entropy(row, n))
        })
        .sum();
    let completeness = (0..n)
        .map(|k| {
            let col: Vec<f64> = r.iter().map(|row| row[k]).collect();
            1.0 - normalized_entropy(&col, m)
        })
        .sum::<f64>()
        / n as f64;
    Ok((disentanglement, completeness))
}

/// Importance of code dim d for factor k: Σ over classes of |W[d, class]| of
/// an L1 multinomial probe on standardized codes.
pub fn importance_matrix(table: &CodeTable, l1: f64) -> Result<Vec<Vec<f64>>> {
    let x = to_array(&table.codes);
    let m = table.latent_dims();
    let mut r = vec![vec![0.0; table.num_factors()]; m];
    for k in 0..table.num_factors() {
        let labels = table.factor_column(k);
        let opts = FitOptions { l1, l2: 0.0, iters: 500, standardize: true };
        let model = SoftmaxRegression::fit(x.view(), &labels, table.cardinalities[k], opts)?;
        for d in 0..m {
            r[d][k] = model.weights.row(d).iter().map(|v| v.abs()).sum();
        }
    }
    Ok(r)
}

pub fn dci(table: &CodeTable) -> Result<DciScore> {
    if table.num_factors() < 2 {
        return Err(Error::invalid("dci needs at least two factors"));
    }
    let importance = importance_matrix(table, DCI_L1)?;
    let (disentanglement, completeness) = dci_from_importance(&importance)?;
    Ok(DciScore { disentanglement, completeness, importance })
}
