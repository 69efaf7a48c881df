//! Training objective: negative ELBO, match-pairing loss, and the positive /
//! negative probe classification losses.
//!
//! Functions come in two layers. The code-level ones take latent tensors
//! directly and are what the trainer and the counterexample suite use; the
//! model-level ones encode images first.

use std::fmt::Write as _;

use candle_core::{DType, Device, Tensor};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::model::{reparameterize, standard_normal, LatentPartition, ProbeBank, ProbePair, VaeModel};
use crate::{Error, Result};

/// Weights of the objective. `beta` scales the KL term.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub beta: f64,
}

impl LossWeights {
    /// λ1 = λ2 = `lambda`, λ3 = `lambda3`, β = 1.
    pub fn proposed(lambda: f64, lambda3: f64) -> Self {
        LossWeights { lambda1: lambda, lambda2: lambda, lambda3, beta: 1.0 }
    }

    pub fn baseline(beta: f64) -> Self {
        LossWeights { lambda1: 0.0, lambda2: 0.0, lambda3: 0.0, beta }
    }

    pub fn zero() -> Self {
        LossWeights { lambda1: 0.0, lambda2: 0.0, lambda3: 0.0, beta: 0.0 }
    }

    /// Errors on negative or non-finite weights; returns advisory warnings
    /// for settings outside the recommended proposed-model region.
    pub fn validate(&self) -> Result<Vec<String>> {
        for (name, v) in [("lambda1", self.lambda1), ("lambda2", self.lambda2), ("lambda3", self.lambda3), ("beta", self.beta)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        let mut warnings = Vec::new();
        if self.lambda1 != self.lambda2 {
            warnings.push(format!(
                "lambda1 ({}) differs from lambda2 ({}); the recommended setting ties them",
                self.lambda1, self.lambda2
            ));
        }
        if self.lambda3 != 1.0 && self.lambda3 != 10.0 {
            warnings.push(format!("lambda3 = {} is outside the recommended set {{1, 10}}", self.lambda3));
        }
        Ok(warnings)
    }
}

/// Per-batch scalar values of every objective term.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub neg_elbo: f64,
    pub reconstruction: f64,
    pub kl: f64,
    pub mp: Vec<(String, f64)>,
    pub cl_pos: Vec<(String, f64)>,
    /// Capped at ln K per sample, i.e. the value that enters `total`.
    pub cl_neg: Vec<(String, f64)>,
    pub total: f64,
}

impl LossBreakdown {
    pub fn recompute_total(&self, w: &LossWeights) -> f64 {
        let mp: f64 = self.mp.iter().map(|(_, v)| w.lambda1 * v).sum();
        let pos: f64 = self.cl_pos.iter().map(|(_, v)| w.lambda2 * v).sum();
        let neg: f64 = self.cl_neg.iter().map(|(_, v)| w.lambda3 * v).sum();
        self.neg_elbo + mp + pos - neg
    }

    pub fn is_finite(&self) -> bool {
        [self.neg_elbo, self.reconstruction, self.kl, self.total].iter().all(|v| v.is_finite())
            && self.mp.iter().chain(&self.cl_pos).chain(&self.cl_neg).all(|(_, v)| v.is_finite())
    }

    /// CSV column names for a fixed list of target factors.
    pub fn csv_columns(factors: &[String]) -> Vec<String> {
        let mut cols = vec!["neg_elbo".to_string(), "reconstruction".into(), "kl".into()];
        for prefix in ["mp", "cl_pos", "cl_neg"] {
            cols.extend(factors.iter().map(|f| format!("{prefix}_{f}")));
        }
        cols.push("total".into());
        cols
    }

    /// Values in [`csv_columns`](Self::csv_columns) order; absent terms are empty.
    pub fn csv_values(&self, factors: &[String]) -> Vec<String> {
        let fmt = |v: f64| {
            let mut s = String::new();
            write!(s, "{v}").unwrap();
            s
        };
        let mut out = vec![fmt(self.neg_elbo), fmt(self.reconstruction), fmt(self.kl)];
        for list in [&self.mp, &self.cl_pos, &self.cl_neg] {
            for f in factors {
                out.push(list.iter().find(|(n, _)| n == f).map(|(_, v)| fmt(*v)).unwrap_or_default());
            }
        }
        out.push(fmt(self.total));
        out
    }
}

pub(crate) fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Bernoulli cross-entropy of `logits` against targets in [0, 1], summed over
/// pixels and averaged over rows. Uses `relu(l) + log1p(exp(-|l|)) - t·l`.
pub fn reconstruction_ce(logits: &Tensor, targets: &Tensor) -> Result<Tensor> {
    if logits.dims() != targets.dims() {
        return Err(Error::invalid("logits and targets differ in shape"));
    }
    let rows = logits.dim(0)? as f64;
    let targets = targets.to_dtype(logits.dtype())?;
    let softplus = (logits.relu()? + (logits.abs()?.neg()?.exp()? + 1.0)?.log()?)?;
    let ce = (softplus - (logits * &targets)?)?;
    Ok((ce.sum_all()? / rows)?)
}

/// KL(N(μ, diag e^lv) ‖ N(0, I)) per row, shape `(B,)`.
pub fn kl_per_sample(means: &Tensor, logvars: &Tensor) -> Result<Tensor> {
    let terms = ((means.sqr()? + logvars.exp()?)? - logvars)?;
    Ok(((terms - 1.0)?.sum(1)? * 0.5)?)
}

/// Mean over rows of the closed-form KL to the standard normal prior.
pub fn kl_divergence(means: &Tensor, logvars: &Tensor) -> Result<Tensor> {
    Ok(kl_per_sample(means, logvars)?.mean_all()?)
}

/// Encoder outputs, one latent sample and the ELBO terms for one image batch.
pub struct ElboTerms {
    pub means: Tensor,
    pub logvars: Tensor,
    pub z: Tensor,
    pub reconstruction: Tensor,
    pub kl: Tensor,
    /// reconstruction + β·kl
    pub neg_elbo: Tensor,
}

/// One-sample estimate of −ELBO = reconstruction CE + β·KL, per sample.
pub fn neg_elbo(model: &VaeModel, images: &Tensor, beta: f64, rng: &mut ChaCha8Rng) -> Result<ElboTerms> {
    let (means, logvars) = model.encode(images)?;
    let z = reparameterize(&means, &logvars, rng)?;
    let logits = model.decode_logits(&z)?;
    let reconstruction = reconstruction_ce(&logits, images)?;
    let kl = kl_divergence(&means, &logvars)?;
    let neg_elbo = (&reconstruction + (&kl * beta)?)?;
    let v = scalar(&neg_elbo)?;
    if !v.is_finite() {
        return Err(Error::Divergence { step: 0, detail: format!("neg_elbo = {v}") });
    }
    Ok(ElboTerms { means, logvars, z, reconstruction, kl, neg_elbo })
}

/// Mean over pairs of ‖z_a[block] − z_b[block]‖².
pub fn match_pairing_from_codes(za: &Tensor, zb: &Tensor, block: std::ops::Range<usize>) -> Result<Tensor> {
    if za.dims() != zb.dims() {
        return Err(Error::invalid("paired codes differ in shape"));
    }
    if za.dim(0)? == 0 {
        return Err(Error::invalid("match pairing needs at least one pair"));
    }
    let a = za.narrow(1, block.start, block.len())?;
    let b = zb.narrow(1, block.start, block.len())?;
    Ok((a - b)?.sqr()?.sum(1)?.mean_all()?)
}

/// How latents are drawn for the two sides of a pair batch.
pub enum PairSampling<'a> {
    /// Posterior means, no noise.
    Means,
    /// Independent noise for each side.
    Independent(&'a mut ChaCha8Rng),
    /// One noise draw reused by both sides.
    Shared(&'a mut ChaCha8Rng),
}

pub fn match_pairing_loss(
    model: &VaeModel,
    xa: &Tensor,
    xb: &Tensor,
    factor: &str,
    sampling: PairSampling,
) -> Result<Tensor> {
    let block = model.partition.block(factor)?.range();
    let (ma, la) = model.encode(xa)?;
    let (mb, lb) = model.encode(xb)?;
    let (za, zb) = match sampling {
        PairSampling::Means => (ma, mb),
        PairSampling::Independent(rng) => (reparameterize(&ma, &la, rng)?, reparameterize(&mb, &lb, rng)?),
        PairSampling::Shared(rng) => {
            let eps = standard_normal(ma.dims(), ma.dtype(), rng)?;
            let za = (&ma + (&la * 0.5)?.exp()?.mul(&eps)?)?;
            let zb = (&mb + (&lb * 0.5)?.exp()?.mul(&eps)?)?;
            (za, zb)
        }
    };
    match_pairing_from_codes(&za, &zb, block)
}

fn one_hot(labels: &[usize], k: usize, dtype: DType) -> Result<Tensor> {
    let mut data = vec![0f64; labels.len() * k];
    for (r, &l) in labels.iter().enumerate() {
        if l >= k {
            return Err(Error::invalid(format!("label {l} out of range for {k} classes")));
        }
        data[r * k + l] = 1.0;
    }
    Ok(Tensor::from_vec(data, (labels.len(), k), &Device::Cpu)?.to_dtype(dtype)?)
}

/// Softmax cross-entropy per row, shape `(B,)`.
pub fn cross_entropy_per_sample(logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let (b, k) = logits.dims2()?;
    if b != labels.len() {
        return Err(Error::invalid("logits rows and label count differ"));
    }
    if b == 0 {
        return Err(Error::invalid("cross-entropy of an empty batch"));
    }
    let max = logits.max_keepdim(1)?.detach();
    let shifted = logits.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(1)?.log()?;
    let log_probs = shifted.broadcast_sub(&lse)?;
    let picked = (log_probs * one_hot(labels, k, logits.dtype())?)?.sum(1)?;
    Ok(picked.neg()?)
}

pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    Ok(cross_entropy_per_sample(logits, labels)?.mean_all()?)
}

/// `(cl_pos, cl_neg)` for one factor on codes `z` with probe parameters held
/// constant. `cl_neg` is capped at ln K per sample.
pub fn classification_from_codes(probe: &ProbePair, z: &Tensor, labels: &[usize]) -> Result<(Tensor, Tensor)> {
    if let Some(&bad) = labels.iter().find(|&&l| l >= probe.cardinality) {
        return Err(Error::invalid(format!("label {bad} out of range for factor `{}`", probe.factor)));
    }
    let pos = cross_entropy(&probe.positive_logits(z, true)?, labels)?;
    let cap = (probe.cardinality as f64).ln();
    let neg = cross_entropy_per_sample(&probe.negative_logits(z, true)?, labels)?
        .clamp(f64::NEG_INFINITY, cap)?
        .mean_all()?;
    Ok((pos, neg))
}

pub fn classification_loss(
    model: &VaeModel,
    probes: &ProbeBank,
    images: &Tensor,
    factor: &str,
    labels: &[usize],
    rng: &mut ChaCha8Rng,
) -> Result<(Tensor, Tensor)> {
    let probe = probes.probe(factor)?;
    let (m, lv) = model.encode(images)?;
    let z = reparameterize(&m, &lv, rng)?;
    classification_from_codes(probe, &z, labels)
}

/// Labeled rows of a detached code matrix for one factor.
pub struct ProbeTargets<'a> {
    pub factor: &'a str,
    pub rows: &'a [usize],
    pub labels: &'a [usize],
}

/// Σ over factors of positive-probe CE + negative-probe CE (uncapped). The
/// codes are detached so only probe parameters receive gradient.
pub fn probe_update_loss(probes: &ProbeBank, z: &Tensor, targets: &[ProbeTargets]) -> Result<Tensor> {
    let z = z.detach();
    let mut total: Option<Tensor> = None;
    for t in targets {
        if t.rows.is_empty() || t.rows.len() != t.labels.len() {
            return Err(Error::invalid(format!("probe batch for `{}` is empty or misaligned", t.factor)));
        }
        let probe = probes.probe(t.factor)?;
        let zs = select_rows(&z, t.rows)?;
        let pos = cross_entropy(&probe.positive_logits(&zs, false)?, t.labels)?;
        let neg = cross_entropy(&probe.negative_logits(&zs, false)?, t.labels)?;
        let term = (pos + neg)?;
        total = Some(match total {
            Some(acc) => (acc + term)?,
            None => term,
        });
    }
    total.ok_or_else(|| Error::invalid("probe update needs at least one labeled batch"))
}

pub fn select_rows(z: &Tensor, rows: &[usize]) -> Result<Tensor> {
    let idx: Vec<u32> = rows.iter().map(|&r| r as u32).collect();
    let idx = Tensor::from_vec(idx, rows.len(), &Device::Cpu)?;
    Ok(z.index_select(&idx, 0)?)
}

/// Feedback available for one target factor, as row indices into the batch
/// the codes were computed on.
#[derive(Debug, Clone, Default)]
pub struct FactorFeedback {
    pub factor: String,
    pub pairs: Vec<(usize, usize)>,
    /// `(row, value)` pairs.
    pub labels: Vec<(usize, usize)>,
}

/// Which augmented terms are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TermSwitches {
    pub match_pairing: bool,
    pub classification: bool,
}

/// The full objective over a batch whose rows include the feedback images.
/// Returns the differentiable total and its breakdown. Terms are only added
/// for factors whose feedback is present.
pub fn total_loss(
    elbo: &ElboTerms,
    partition: &LatentPartition,
    probes: &ProbeBank,
    feedback: &[FactorFeedback],
    weights: &LossWeights,
    switches: TermSwitches,
) -> Result<(Tensor, LossBreakdown)> {
    let mut total = elbo.neg_elbo.clone();
    let mut bd = LossBreakdown {
        neg_elbo: scalar(&elbo.neg_elbo)?,
        reconstruction: scalar(&elbo.reconstruction)?,
        kl: scalar(&elbo.kl)?,
        mp: Vec::new(),
        cl_pos: Vec::new(),
        cl_neg: Vec::new(),
        total: 0.0,
    };
    for fb in feedback {
        if switches.match_pairing && !fb.pairs.is_empty() {
            let a: Vec<usize> = fb.pairs.iter().map(|p| p.0).collect();
            let b: Vec<usize> = fb.pairs.iter().map(|p| p.1).collect();
            let block = partition.block(&fb.factor)?.range();
            let mp = match_pairing_from_codes(&select_rows(&elbo.z, &a)?, &select_rows(&elbo.z, &b)?, block)?;
            bd.mp.push((fb.factor.clone(), scalar(&mp)?));
            if weights.lambda1 != 0.0 {
                total = (total + (mp * weights.lambda1)?)?;
            }
        }
        if switches.classification && !fb.labels.is_empty() {
            let rows: Vec<usize> = fb.labels.iter().map(|l| l.0).collect();
            let values: Vec<usize> = fb.labels.iter().map(|l| l.1).collect();
            let probe = probes.probe(&fb.factor)?;
            let (pos, neg) = classification_from_codes(probe, &select_rows(&elbo.z, &rows)?, &values)?;
            bd.cl_pos.push((fb.factor.clone(), scalar(&pos)?));
            bd.cl_neg.push((fb.factor.clone(), scalar(&neg)?));
            if weights.lambda2 != 0.0 {
                total = (total + (pos * weights.lambda2)?)?;
            }
            if weights.lambda3 != 0.0 {
                total = (total - (neg * weights.lambda3)?)?;
            }
        }
    }
    bd.total = scalar(&total)?;
    Ok((total, bd))
}
