//! Quantitative evaluation of a trained encoder.

pub mod dci;
pub mod downstream;
pub mod factorvae;
pub mod info;
pub mod linear;
pub mod mig;
pub mod theory;

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datasets::{Dataset, FactorSpec, SplitTag};
use crate::model::{LatentPartition, VaeModel};
use crate::{Error, Result};

pub use dci::{dci, dci_from_importance, DciScore};
pub use downstream::downstream_accuracy;
pub use factorvae::{factorvae_score, FactorVaeOptions};
pub use mig::{adapted_mig, mig_original, nontriviality, GapScore, DEFAULT_BINS};
pub use theory::{consistency, counterexample_suite, restrictiveness, Estimate, FactorEncoder, RenderedEncoder};

/// Posterior-mean codes paired with ground-truth factor values.
#[derive(Debug, Clone, PartialEq)]
pub struct CodeTable {
    pub codes: Vec<Vec<f64>>,
    pub factors: Vec<Vec<usize>>,
    pub factor_names: Vec<String>,
    pub cardinalities: Vec<usize>,
    pub partition: LatentPartition,
    pub split_tag: SplitTag,
}

impl CodeTable {
    pub fn new(
        codes: Vec<Vec<f64>>,
        factors: Vec<Vec<usize>>,
        factor_names: Vec<String>,
        cardinalities: Vec<usize>,
        partition: LatentPartition,
        split_tag: SplitTag,
    ) -> Result<Self> {
        if codes.len() != factors.len() {
            return Err(Error::invalid(format!("{} code rows but {} factor rows", codes.len(), factors.len())));
        }
        if factor_names.len() != cardinalities.len() {
            return Err(Error::invalid("factor names and cardinalities differ in length"));
        }
        for row in &codes {
            if row.len() != partition.total_dims {
                return Err(Error::invalid("code row width differs from the partition"));
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid("codes must be finite"));
            }
        }
        for row in &factors {
            if row.len() != cardinalities.len() || row.iter().zip(&cardinalities).any(|(v, k)| v >= k) {
                return Err(Error::invalid("factor row out of range"));
            }
        }
        Ok(CodeTable { codes, factors, factor_names, cardinalities, partition, split_tag })
    }

    /// Encodes every image of `data` to its posterior mean.
    pub fn from_model(model: &VaeModel, data: &Dataset) -> Result<Self> {
        let codes = model.posterior_means(&data.images, data.len())?;
        let nf = data.spec.num_factors();
        let factors = (0..data.len()).map(|n| (0..nf).map(|k| data.factor_value(n, k)).collect()).collect();
        Self::new(
            codes,
            factors,
            data.spec.factors.iter().map(|f| f.name.clone()).collect(),
            data.spec.factors.iter().map(|f| f.cardinality).collect(),
            model.partition.clone(),
            data.split_tag,
        )
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    pub fn latent_dims(&self) -> usize {
        self.partition.total_dims
    }

    pub fn num_factors(&self) -> usize {
        self.factor_names.len()
    }

    pub fn factor_column(&self, k: usize) -> Vec<usize> {
        self.factors.iter().map(|r| r[k]).collect()
    }
}

/// Every metric of one trained model. Per-factor maps are keyed by factor name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub factorvae_score: f64,
    pub adapted_mig: f64,
    /// Before clipping to [0, 1].
    pub adapted_mig_raw: f64,
    pub mig_original: f64,
    pub dci_disentanglement: f64,
    pub dci_completeness: f64,
    pub downstream_accuracy: BTreeMap<String, f64>,
    pub consistency: BTreeMap<String, f64>,
    pub restrictiveness: BTreeMap<String, f64>,
    pub nontriviality: BTreeMap<String, f64>,
    /// Factors whose estimator normalizer had zero variance.
    pub degenerate_estimators: Vec<String>,
}

impl MetricsReport {
    /// Checks finiteness and the [0, 1] range of bounded fields.
    pub fn validate(&self) -> Result<()> {
        let unit = [
            ("factorvae_score", self.factorvae_score),
            ("adapted_mig", self.adapted_mig),
            ("mig_original", self.mig_original),
            ("dci_disentanglement", self.dci_disentanglement),
            ("dci_completeness", self.dci_completeness),
        ];
        for (name, v) in unit {
            if !v.is_finite() || !(0.0..=1.0 + 1e-12).contains(&v) {
                return Err(Error::invalid(format!("{name} = {v} is outside [0, 1]")));
            }
        }
        for (name, map, bounded) in [
            ("downstream_accuracy", &self.downstream_accuracy, true),
            ("nontriviality", &self.nontriviality, true),
            ("consistency", &self.consistency, false),
            ("restrictiveness", &self.restrictiveness, false),
        ] {
            for (f, &v) in map {
                if !v.is_finite() || v < 0.0 || (bounded && v > 1.0 + 1e-12) {
                    return Err(Error::invalid(format!("{name}[{f}] = {v} is out of range")));
                }
            }
        }
        Ok(())
    }

    /// Flat `(column, value)` view: scalars, then per-factor entries as
    /// `<field>.<factor>`.
    pub fn flatten(&self) -> Vec<(String, f64)> {
        let mut out = vec![
            ("factorvae_score".to_string(), self.factorvae_score),
            ("adapted_mig".into(), self.adapted_mig),
            ("adapted_mig_raw".into(), self.adapted_mig_raw),
            ("mig_original".into(), self.mig_original),
            ("dci_disentanglement".into(), self.dci_disentanglement),
            ("dci_completeness".into(), self.dci_completeness),
        ];
        for (name, map) in [
            ("downstream_accuracy", &self.downstream_accuracy),
            ("consistency", &self.consistency),
            ("restrictiveness", &self.restrictiveness),
            ("nontriviality", &self.nontriviality),
        ] {
            out.extend(map.iter().map(|(f, v)| (format!("{name}.{f}"), *v)));
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalOptions {
    pub bins: usize,
    pub factorvae: FactorVaeOptions,
    /// Monte-Carlo trials per consistency / restrictiveness estimate; 0 skips them.
    pub estimator_trials: usize,
    pub seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions { bins: DEFAULT_BINS, factorvae: FactorVaeOptions::default(), estimator_trials: 2000, seed: 0 }
    }
}

/// Splits a model is scored on.
pub struct EvalData<'a> {
    /// Unbiased full-spectrum data: FactorVAE, MIG, DCI, non-triviality.
    pub eval: &'a Dataset,
    /// Biased train split without feedback samples: fits the downstream probes.
    pub train: &'a Dataset,
    /// Shifted split: scores the downstream probes.
    pub test: &'a Dataset,
}

pub fn evaluate(model: &VaeModel, spec: &FactorSpec, data: &EvalData, opts: &EvalOptions) -> Result<MetricsReport> {
    let eval = CodeTable::from_model(model, data.eval)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let factorvae_score = factorvae_score(&eval, opts.factorvae, &mut rng)?;
    let amig = adapted_mig(&eval, opts.bins)?;
    let omig = mig_original(&eval, opts.bins)?;
    let d = dci(&eval)?;
    let train = CodeTable::from_model(model, data.train)?;
    let test = CodeTable::from_model(model, data.test)?;
    let downstream_accuracy = downstream_accuracy(&train, &test)?.into_iter().collect();

    let mut nontriv = BTreeMap::new();
    let mut cons = BTreeMap::new();
    let mut restr = BTreeMap::new();
    let mut degenerate = Vec::new();
    let encoder = RenderedEncoder { model, spec };
    for block in &model.partition.blocks {
        nontriv.insert(block.factor.clone(), nontriviality(&eval, &block.factor, opts.bins)?);
        if opts.estimator_trials > 0 && spec.family.has_renderer() {
            let c = consistency(&encoder, &block.factor, opts.estimator_trials, &mut rng)?;
            let r = restrictiveness(&encoder, &block.factor, opts.estimator_trials, &mut rng)?;
            if c.degenerate || r.degenerate {
                degenerate.push(block.factor.clone());
            }
            cons.insert(block.factor.clone(), c.value);
            restr.insert(block.factor.clone(), r.value);
        }
    }
    let report = MetricsReport {
        factorvae_score,
        adapted_mig: amig.value,
        adapted_mig_raw: amig.raw,
        mig_original: omig.value,
        dci_disentanglement: d.disentanglement,
        dci_completeness: d.completeness,
        downstream_accuracy,
        consistency: cons,
        restrictiveness: restr,
        nontriviality: nontriv,
        degenerate_estimators: degenerate,
    };
    report.validate()?;
    Ok(report)
}
