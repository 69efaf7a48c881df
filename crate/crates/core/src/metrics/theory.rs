//! Monte-Carlo consistency / restrictiveness estimators, and the
//! product-generator counterexample where match pairing alone admits a trivial
//! block.

use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::mig::{nontriviality, DEFAULT_BINS};
use super::CodeTable;
use crate::datasets::render::render_sample;
use crate::datasets::{FactorSpec, SplitTag};
use crate::losses::{classification_from_codes, match_pairing_from_codes, probe_update_loss, scalar, ProbeTargets};
use crate::model::{LatentBlock, LatentPartition, ProbeBank, VaeModel};
use crate::optim::{Adam, AdamConfig};
use crate::{Error, Result};

/// Maps ground-truth factor values (plus a per-sample nuisance seed) to codes.
pub trait FactorEncoder {
    fn partition(&self) -> &LatentPartition;
    fn factor_names(&self) -> Vec<String>;
    fn cardinalities(&self) -> Vec<usize>;
    fn encode(&self, factors: &[Vec<usize>], seeds: &[u64]) -> Result<Vec<Vec<f64>>>;
}

/// Renders with the procedural generator, then takes posterior means.
pub struct RenderedEncoder<'a> {
    pub model: &'a VaeModel,
    pub spec: &'a FactorSpec,
}

impl FactorEncoder for RenderedEncoder<'_> {
    fn partition(&self) -> &LatentPartition {
        &self.model.partition
    }

    fn factor_names(&self) -> Vec<String> {
        self.spec.factors.iter().map(|f| f.name.clone()).collect()
    }

    fn cardinalities(&self) -> Vec<usize> {
        self.spec.factors.iter().map(|f| f.cardinality).collect()
    }

    fn encode(&self, factors: &[Vec<usize>], seeds: &[u64]) -> Result<Vec<Vec<f64>>> {
        let mut images = Vec::with_capacity(factors.len() * self.spec.pixels_per_image());
        for (values, &seed) in factors.iter().zip(seeds) {
            images.extend(render_sample(self.spec, values, seed)?);
        }
        self.model.posterior_means(&images, factors.len())
    }
}

/// A normalized estimator value. `raw` is the unnormalized expectation;
/// `degenerate` marks a zero-variance normalizer (then `value` is 0).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub raw: f64,
    pub degenerate: bool,
}

fn squared_gap_estimate(a: &[Vec<f64>], b: &[Vec<f64>], dims: &[usize]) -> Estimate {
    let n = a.len() as f64;
    let raw = a
        .iter()
        .zip(b)
        .map(|(x, y)| dims.iter().map(|&d| (x[d] - y[d]).powi(2)).sum::<f64>())
        .sum::<f64>()
        / n;
    let pooled = 2.0 * n;
    let variance: f64 = dims
        .iter()
        .map(|&d| {
            let mean = a.iter().chain(b).map(|r| r[d]).sum::<f64>() / pooled;
            a.iter().chain(b).map(|r| (r[d] - mean).powi(2)).sum::<f64>() / pooled
        })
        .sum();
    if variance <= 1e-24 {
        Estimate { value: 0.0, raw, degenerate: true }
    } else {
        Estimate { value: raw / variance, raw, degenerate: false }
    }
}

fn factor_index(enc: &dyn FactorEncoder, factor: &str) -> Result<usize> {
    enc.factor_names()
        .iter()
        .position(|n| n == factor)
        .ok_or_else(|| Error::invalid(format!("unknown factor `{factor}`")))
}

fn draw(cards: &[usize], rng: &mut ChaCha8Rng) -> Vec<usize> {
    cards.iter().map(|&k| rng.random_range(0..k)).collect()
}

/// E‖ê_i(g(Sᵢ, S₋ᵢ)) − ê_i(g(Sᵢ, S₋ᵢ′))‖² over the block of `factor`, divided
/// by the summed variance of the pooled block codes. Every other factor and the
/// render seed are redrawn.
pub fn consistency(enc: &dyn FactorEncoder, factor: &str, trials: usize, rng: &mut ChaCha8Rng) -> Result<Estimate> {
    let k = factor_index(enc, factor)?;
    let dims: Vec<usize> = enc.partition().block(factor)?.range().collect();
    let cards = enc.cardinalities();
    let (mut fa, mut fb, mut sa, mut sb) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for _ in 0..trials {
        let a = draw(&cards, rng);
        let mut b = draw(&cards, rng);
        b[k] = a[k];
        fa.push(a);
        fb.push(b);
        sa.push(rng.random::<u64>());
        sb.push(rng.random::<u64>());
    }
    if trials == 0 {
        return Err(Error::invalid("estimator needs at least one trial"));
    }
    Ok(squared_gap_estimate(&enc.encode(&fa, &sa)?, &enc.encode(&fb, &sb)?, &dims))
}

/// E‖ê₋ᵢ(g(Sᵢ, S₋ᵢ)) − ê₋ᵢ(g(Sᵢ′, S₋ᵢ))‖² over every dim outside the block of
/// `factor`, normalized like [`consistency`]. Only Sᵢ is redrawn; the render
/// seed is shared.
pub fn restrictiveness(enc: &dyn FactorEncoder, factor: &str, trials: usize, rng: &mut ChaCha8Rng) -> Result<Estimate> {
    let k = factor_index(enc, factor)?;
    let dims = enc.partition().complement(factor)?;
    let cards = enc.cardinalities();
    if trials == 0 {
        return Err(Error::invalid("estimator needs at least one trial"));
    }
    let (mut fa, mut fb, mut seeds) = (Vec::new(), Vec::new(), Vec::new());
    for _ in 0..trials {
        let a = draw(&cards, rng);
        let mut b = a.clone();
        b[k] = rng.random_range(0..cards[k]);
        fa.push(a);
        fb.push(b);
        seeds.push(rng.random::<u64>());
    }
    Ok(squared_gap_estimate(&enc.encode(&fa, &seeds)?, &enc.encode(&fb, &seeds)?, &dims))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub expected: String,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CounterexampleReport {
    pub checks: Vec<Check>,
}

impl CounterexampleReport {
    pub fn all_pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }
}

/// Class index of every value after splitting at empirical quantiles into
/// `card` equally sized bins.
pub fn quantile_classes(values: &[f64], card: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut out = vec![0; values.len()];
    for (rank, &i) in order.iter().enumerate() {
        out[i] = rank * card / values.len();
    }
    out
}

fn tensor(rows: &[[f64; 2]]) -> Result<Tensor> {
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    Ok(Tensor::from_vec(flat, (rows.len(), 2), &Device::Cpu)?)
}

/// Positive-probe CE after fitting both probes on `z` for `steps` Adam steps.
fn trained_positive_ce(partition: &LatentPartition, card: usize, z: &Tensor, labels: &[usize], steps: usize) -> Result<f64> {
    let bank = ProbeBank::new(partition, &[("s1".into(), card)], 11, DType::F64)?;
    let mut opt = Adam::new(&bank.params, AdamConfig::with_lr(0.05))?;
    let rows: Vec<usize> = (0..labels.len()).collect();
    for _ in 0..steps {
        let loss = probe_update_loss(&bank, z, &[ProbeTargets { factor: "s1", rows: &rows, labels }])?;
        opt.step(&loss.backward()?)?;
    }
    scalar(&classification_from_codes(bank.probe("s1")?, z, labels)?.0)
}

/// Factors S₁, S₂ ~ N(0, 1) and generator x = S₁·S₂. The encoder ẑ₁ = 0,
/// ẑ₂ = x with decoder x̂ = ẑ₂ reconstructs perfectly and has zero
/// match-pairing loss on S₁, yet ẑ₁ carries nothing about S₁; the positive
/// probe loss stays at ln K and so exposes it. An informative encoder ẑ₁ = S₁
/// is the contrast case.
pub fn counterexample_suite(n: usize, card: usize, seed: u64) -> Result<CounterexampleReport> {
    if n < 2 * card || card < 2 {
        return Err(Error::invalid("counterexample suite needs card >= 2 and n >= 2·card"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s1: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    let s2: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    let s2_alt: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    let x: Vec<f64> = s1.iter().zip(&s2).map(|(a, b)| a * b).collect();
    let x_alt: Vec<f64> = s1.iter().zip(&s2_alt).map(|(a, b)| a * b).collect();
    let c1 = quantile_classes(&s1, card);
    let c2 = quantile_classes(&s2, card);
    let ln_card = (card as f64).ln();

    let partition = LatentPartition::new(
        2,
        vec![
            LatentBlock { factor: "s1".into(), start: 0, len: 1 },
            LatentBlock { factor: "s2".into(), start: 1, len: 1 },
        ],
    )?;
    let trivial: Vec<[f64; 2]> = x.iter().map(|&v| [0.0, v]).collect();
    let trivial_alt: Vec<[f64; 2]> = x_alt.iter().map(|&v| [0.0, v]).collect();
    let z = tensor(&trivial)?;
    let mut checks = Vec::new();

    let recon = trivial.iter().zip(&x).map(|(z, x)| (z[1] - x).abs()).fold(0.0, f64::max);
    checks.push(Check { name: "trivial decoder reconstruction error".into(), value: recon, expected: "0".into(), pass: recon == 0.0 });

    // pairs share S₁ and differ in S₂
    let mp = scalar(&match_pairing_from_codes(&z, &tensor(&trivial_alt)?, 0..1)?)?;
    checks.push(Check { name: "match-pairing loss on S1 (trivial)".into(), value: mp, expected: "0".into(), pass: mp == 0.0 });

    let table = CodeTable::new(
        trivial.iter().map(|r| r.to_vec()).collect(),
        c1.iter().zip(&c2).map(|(&a, &b)| vec![a, b]).collect(),
        vec!["s1".into(), "s2".into()],
        vec![card, card],
        partition.clone(),
        SplitTag::Eval,
    )?;
    let nt = nontriviality(&table, "s1", DEFAULT_BINS)?;
    checks.push(Check { name: "non-triviality of Z1 (trivial)".into(), value: nt, expected: "~0 (<= 0.01)".into(), pass: nt <= 0.01 });

    let zero_bank = ProbeBank::new(&partition, &[("s1".into(), card)], 0, DType::F64)?;
    zero_bank.zero_init()?;
    let ce0 = scalar(&classification_from_codes(zero_bank.probe("s1")?, &z, &c1)?.0)?;
    checks.push(Check {
        name: "positive-probe CE at Z1 = 0, zero-init probe".into(),
        value: ce0,
        expected: format!("ln {card} = {ln_card:.6}"),
        pass: (ce0 - ln_card).abs() < 1e-12,
    });

    let ce_trained = trained_positive_ce(&partition, card, &z, &c1, 200)?;
    checks.push(Check {
        name: "positive-probe CE at Z1 = 0, trained probe".into(),
        value: ce_trained,
        expected: format!(">= ln {card} - 1e-6"),
        pass: ce_trained >= ln_card - 1e-6,
    });

    let informative: Vec<[f64; 2]> = s1.iter().zip(&x).map(|(&a, &b)| [a, b]).collect();
    let zi = tensor(&informative)?;
    let ce_inf = trained_positive_ce(&partition, card, &zi, &c1, 200)?;
    checks.push(Check {
        name: "positive-probe CE at Z1 = S1, trained probe".into(),
        value: ce_inf,
        expected: format!("< ln {card} - 0.5"),
        pass: ce_inf < ln_card - 0.5,
    });
    let table_inf = CodeTable::new(
        informative.iter().map(|r| r.to_vec()).collect(),
        table.factors.clone(),
        table.factor_names.clone(),
        table.cardinalities.clone(),
        partition,
        SplitTag::Eval,
    )?;
    let nt_inf = nontriviality(&table_inf, "s1", DEFAULT_BINS)?;
    checks.push(Check { name: "non-triviality of Z1 = S1".into(), value: nt_inf, expected: "> 0.5".into(), pass: nt_inf > 0.5 });

    Ok(CounterexampleReport { checks })
}
