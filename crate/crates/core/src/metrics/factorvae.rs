//! Majority-vote FactorVAE score.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::CodeTable;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FactorVaeOptions {
    pub train_votes: usize,
    pub test_votes: usize,
    pub samples_per_vote: usize,
    /// Dims with std below `prune · mean std` are ignored.
    pub prune_permille: u32,
}

impl Default for FactorVaeOptions {
    fn default() -> Self {
        FactorVaeOptions { train_votes: 800, test_votes: 200, samples_per_vote: 64, prune_permille: 50 }
    }
}

fn column_std(codes: &[Vec<f64>], d: usize) -> f64 {
    let n = codes.len() as f64;
    let mean = codes.iter().map(|r| r[d]).sum::<f64>() / n;
    (codes.iter().map(|r| (r[d] - mean).powi(2)).sum::<f64>() / n).sqrt()
}

/// One vote: (factor held fixed, dim of least normalized variance).
fn vote(
    table: &CodeTable,
    rows_by_value: &[Vec<Vec<usize>>],
    scale: &[f64],
    active: &[usize],
    samples: usize,
    rng: &mut ChaCha8Rng,
) -> (usize, usize) {
    let nf = rows_by_value.len();
    let (factor, rows) = loop {
        let k = rng.random_range(0..nf);
        let v = rng.random_range(0..rows_by_value[k].len());
        if !rows_by_value[k][v].is_empty() {
            break (k, &rows_by_value[k][v]);
        }
    };
    let picked: Vec<usize> = (0..samples).map(|_| rows[rng.random_range(0..rows.len())]).collect();
    let mut best = (usize::MAX, f64::INFINITY);
    for &d in active {
        let vals: Vec<f64> = picked.iter().map(|&r| table.codes[r][d] / scale[d]).collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        // unbiased variance as in the reference procedure
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (vals.len() as f64 - 1.0).max(1.0);
        if var < best.1 {
            best = (d, var);
        }
    }
    (factor, best.0)
}

/// Accuracy in [0, 1] of the dim → factor majority classifier on held-out votes.
pub fn factorvae_score(table: &CodeTable, opts: FactorVaeOptions, rng: &mut ChaCha8Rng) -> Result<f64> {
    if table.is_empty() {
        return Err(Error::Degenerate("factorvae score on an empty code table".into()));
    }
    let m = table.latent_dims();
    let nf = table.num_factors();
    let scale: Vec<f64> = (0..m).map(|d| column_std(&table.codes, d)).collect();
    let mean_std = scale.iter().sum::<f64>() / m as f64;
    let threshold = mean_std * opts.prune_permille as f64 / 1000.0;
    let active: Vec<usize> = (0..m).filter(|&d| scale[d] > 0.0 && scale[d] >= threshold).collect();
    if active.len() < 2 {
        return Err(Error::Degenerate(format!("factorvae score needs >= 2 active dims, found {}", active.len())));
    }
    let rows_by_value: Vec<Vec<Vec<usize>>> = (0..nf)
        .map(|k| {
            let mut by = vec![Vec::new(); table.cardinalities[k]];
            for (r, f) in table.factors.iter().enumerate() {
                by[f[k]].push(r);
            }
            by
        })
        .collect();
    let mut counts = vec![vec![0usize; nf]; m];
    for _ in 0..opts.train_votes {
        let (k, d) = vote(table, &rows_by_value, &scale, &active, opts.samples_per_vote, rng);
        counts[d][k] += 1;
    }
    // ties resolve to the lowest factor index
    let majority: Vec<usize> = counts
        .iter()
        .map(|c| c.iter().enumerate().fold((0, 0), |b, (k, &n)| if n > b.1 { (k, n) } else { b }).0)
        .collect();
    let mut correct = 0;
    for _ in 0..opts.test_votes {
        let (k, d) = vote(table, &rows_by_value, &scale, &active, opts.samples_per_vote, rng);
        if majority[d] == k {
            correct += 1;
        }
    }
    Ok(correct as f64 / opts.test_votes.max(1) as f64)
}
