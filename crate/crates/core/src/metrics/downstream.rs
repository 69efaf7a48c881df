//! Post-hoc linear classifiers on each factor's block, trained on one split
//! and scored on a shifted one.

use super::linear::{to_array, FitOptions, SoftmaxRegression};
use super::CodeTable;
use crate::{Error, Result};

/// Accuracy per target factor (ordered as in the partition).
pub fn downstream_accuracy(train: &CodeTable, test: &CodeTable) -> Result<Vec<(String, f64)>> {
    if train.factor_names != test.factor_names || train.latent_dims() != test.latent_dims() {
        return Err(Error::invalid("train and test code tables describe different factors or latents"));
    }
    let mut out = Vec::new();
    for block in &train.partition.blocks {
        let k = train
            .factor_names
            .iter()
            .position(|n| *n == block.factor)
            .ok_or_else(|| Error::invalid(format!("block `{}` names no factor", block.factor)))?;
        let labels = train.factor_column(k);
        if labels.iter().all(|&l| l == labels[0]) {
            return Err(Error::Degenerate(format!("train labels of `{}` have a single class", block.factor)));
        }
        let slice = |t: &CodeTable| to_array(&t.codes.iter().map(|r| r[block.range()].to_vec()).collect::<Vec<_>>());
        let model = SoftmaxRegression::fit(slice(train).view(), &labels, train.cardinalities[k], FitOptions::default())?;
        let acc = model.accuracy(slice(test).view(), &test.factor_column(k));
        out.push((block.factor.clone(), acc));
    }
    Ok(out)
}
