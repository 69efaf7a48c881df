//! Mutual information gap: the top-2 original form, and the block-constrained
//! form that compares a factor's own block against everything outside it.

use super::info::{entropy, mi_matrix};
use super::CodeTable;
use crate::{Error, Result};

pub const DEFAULT_BINS: usize = 20;

/// Averaged gap, clipped to [0, 1], with the unclipped mean and per-factor terms.
#[derive(Debug, Clone, PartialEq)]
pub struct GapScore {
    pub value: f64,
    pub raw: f64,
    pub per_factor: Vec<(String, f64)>,
}

fn target_columns(table: &CodeTable) -> Result<Vec<(usize, String, Vec<usize>, f64)>> {
    let mut out = Vec::new();
    for (k, name) in table.factor_names.iter().enumerate() {
        if table.partition.block(name).is_err() {
            continue;
        }
        let col = table.factor_column(k);
        let h = entropy(&col);
        if h <= 0.0 {
            return Err(Error::Degenerate(format!("factor `{name}` is constant in the code table")));
        }
        out.push((k, name.clone(), col, h));
    }
    if out.is_empty() {
        return Err(Error::Degenerate("no target factor has a latent block".into()));
    }
    Ok(out)
}

fn summarize(per_factor: Vec<(String, f64)>) -> GapScore {
    let raw = per_factor.iter().map(|(_, v)| v).sum::<f64>() / per_factor.len() as f64;
    GapScore { value: raw.clamp(0.0, 1.0), raw, per_factor }
}

/// (1/n) Σᵢ (maxₐ∈block(i) I(zₐ; Sᵢ) − maxₐ∉block(i) I(zₐ; Sᵢ)) / H(Sᵢ) over target factors.
pub fn adapted_mig(table: &CodeTable, bins: usize) -> Result<GapScore> {
    let targets = target_columns(table)?;
    let mi = mi_matrix(&table.codes, &table.factors, bins);
    let m = table.latent_dims();
    let per_factor = targets
        .into_iter()
        .map(|(k, name, _, h)| {
            let block = table.partition.block(&name).expect("target has a block").range();
            let inside = block.clone().map(|d| mi[d][k]).fold(0.0, f64::max);
            let outside = (0..m).filter(|d| !block.contains(d)).map(|d| mi[d][k]).fold(0.0, f64::max);
            (name, (inside - outside) / h)
        })
        .collect();
    Ok(summarize(per_factor))
}

/// (1/n) Σᵢ (top1ₐ I(zₐ; Sᵢ) − top2ₐ I(zₐ; Sᵢ)) / H(Sᵢ), ignoring the partition.
pub fn mig_original(table: &CodeTable, bins: usize) -> Result<GapScore> {
    let targets = target_columns(table)?;
    let mi = mi_matrix(&table.codes, &table.factors, bins);
    let per_factor = targets
        .into_iter()
        .map(|(k, name, _, h)| {
            let mut col: Vec<f64> = mi.iter().map(|row| row[k]).collect();
            col.sort_by(|a, b| b.total_cmp(a));
            let gap = col[0] - col.get(1).copied().unwrap_or(0.0);
            (name, gap / h)
        })
        .collect();
    Ok(summarize(per_factor))
}

/// maxₐ∈block(i) I(zₐ; Sᵢ) / H(Sᵢ), in [0, 1].
pub fn nontriviality(table: &CodeTable, factor: &str, bins: usize) -> Result<f64> {
    let k = table
        .factor_names
        .iter()
        .position(|n| n == factor)
        .ok_or_else(|| Error::invalid(format!("unknown factor `{factor}`")))?;
    let block = table.partition.block(factor)?.range();
    let col = table.factor_column(k);
    let h = entropy(&col);
    if h <= 0.0 {
        return Err(Error::Degenerate(format!("factor `{factor}` is constant in the code table")));
    }
    let mut best: f64 = 0.0;
    for d in block {
        let vals: Vec<f64> = table.codes.iter().map(|r| r[d]).collect();
        let binned = super::info::discretize(&vals, bins);
        best = best.max(super::info::mutual_info(&binned, &col));
    }
    Ok((best / h).clamp(0.0, 1.0))
}
