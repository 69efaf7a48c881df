//! Loss identities checked against closed forms and direct arithmetic.

use candle_core::{DType, Device, Tensor};
use dbvae::datasets::{generate_split, FactorSpec, SplitTag};
use dbvae::losses::{
    classification_from_codes, cross_entropy, kl_divergence, kl_per_sample, match_pairing_from_codes, neg_elbo,
    probe_update_loss, reconstruction_ce, total_loss, FactorFeedback, LossWeights, ProbeTargets, TermSwitches,
};
use dbvae::model::{images_to_tensor, LatentBlock, LatentPartition, ProbeBank, VaeModel};
use dbvae::optim::{Adam, AdamConfig};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn t2(rows: &[Vec<f64>]) -> Tensor {
    let c = rows[0].len();
    Tensor::from_vec(rows.concat(), (rows.len(), c), &Device::Cpu).unwrap()
}

fn s(t: &Tensor) -> f64 {
    t.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
}

fn kl_oracle(mu: &[f64], lv: &[f64]) -> f64 {
    mu.iter().zip(lv).map(|(m, l)| 0.5 * (m * m + l.exp() - l - 1.0)).sum()
}

#[test]
fn kl_is_zero_at_the_prior() {
    let z = Tensor::zeros((3, 5), DType::F64, &Device::Cpu).unwrap();
    assert_eq!(s(&kl_divergence(&z, &z).unwrap()), 0.0);
}

#[test]
fn kl_unit_mean_is_half_per_dimension() {
    let mu = Tensor::ones((1, 4), DType::F64, &Device::Cpu).unwrap();
    let lv = Tensor::zeros((1, 4), DType::F64, &Device::Cpu).unwrap();
    assert!((s(&kl_divergence(&mu, &lv).unwrap()) - 2.0).abs() < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn kl_matches_closed_form_and_is_nonnegative(
        mu in proptest::collection::vec(-3.0f64..3.0, 6),
        lv in proptest::collection::vec(-4.0f64..4.0, 6),
    ) {
        let got = kl_per_sample(&t2(&[mu.clone()]), &t2(&[lv.clone()])).unwrap().to_vec1::<f64>().unwrap()[0];
        prop_assert!(got >= -1e-12);
        prop_assert!((got - kl_oracle(&mu, &lv)).abs() < 1e-9);
    }

    #[test]
    fn reconstruction_ce_matches_direct_formula(
        logits in proptest::collection::vec(-30.0f64..30.0, 8),
        targets in proptest::collection::vec(0.0f64..=1.0, 8),
    ) {
        let got = s(&reconstruction_ce(&t2(&[logits.clone()]), &t2(&[targets.clone()])).unwrap());
        let oracle: f64 = logits.iter().zip(&targets).map(|(l, t)| {
            let lp = if *l > 0.0 { -(1.0 + (-l).exp()).ln() } else { l - (1.0 + l.exp()).ln() };
            let lq = lp - l;
            -(t * lp + (1.0 - t) * lq)
        }).sum();
        prop_assert!((got - oracle).abs() < 1e-9 * oracle.abs().max(1.0));
    }

    #[test]
    fn match_pairing_is_nonnegative_and_zero_on_identical_blocks(
        a in proptest::collection::vec(-2.0f64..2.0, 8),
        b in proptest::collection::vec(-2.0f64..2.0, 8),
        start in 0usize..6,
    ) {
        let block = start..start + 2;
        let mp = s(&match_pairing_from_codes(&t2(&[a.clone()]), &t2(&[b.clone()]), block.clone()).unwrap());
        prop_assert!(mp >= 0.0);
        let mut b2 = b.clone();
        b2[block.clone()].copy_from_slice(&a[block.clone()]);
        prop_assert_eq!(s(&match_pairing_from_codes(&t2(&[a.clone()]), &t2(&[b2]), block).unwrap()), 0.0);
    }
}

#[test]
fn neg_elbo_is_at_least_reconstruction_and_equals_the_sum() {
    let spec = FactorSpec::glyphs10(0);
    let model = VaeModel::for_spec(&spec, 1, DType::F32).unwrap();
    let ds = generate_split(&spec, None, 8, 3, SplitTag::Eval).unwrap();
    let x = images_to_tensor(&ds.images, 8, spec.pixels_per_image(), DType::F32).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let e = neg_elbo(&model, &x, 1.0, &mut rng).unwrap();
    let (n, r, k) = (s(&e.neg_elbo), s(&e.reconstruction), s(&e.kl));
    assert!(n >= r);
    assert!((n - r - k).abs() <= 1e-4 * n.abs());
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let e4 = neg_elbo(&model, &x, 4.0, &mut rng).unwrap();
    assert!((s(&e4.neg_elbo) - r - 4.0 * k).abs() <= 1e-4 * n.abs());
}

#[test]
fn match_pairing_worked_examples() {
    let za = t2(&[vec![1.0, 2.0, 5.0], vec![0.0, 0.0, 0.0]]);
    let zb = t2(&[vec![1.0, 0.0, -5.0], vec![3.0, 4.0, 1.0]]);
    // pair 0: (2-0)^2 = 4; pair 1: (0-4)^2 = 16; mean 10.
    assert_eq!(s(&match_pairing_from_codes(&za, &zb, 1..2).unwrap()), 10.0);
    // pair 0: 0 + 4 = 4; pair 1: 9 + 16 = 25; mean 14.5.
    assert_eq!(s(&match_pairing_from_codes(&za, &zb, 0..2).unwrap()), 14.5);
}

/// Codes placed on a line: the block gap grows with the square of the
/// distance along it.
#[test]
fn match_pairing_scales_quadratically_along_a_line() {
    let base = vec![0.3, -0.2, 0.5, 0.1];
    let dir = vec![1.0, 2.0, -1.0, 0.5];
    let at = |t: f64| base.iter().zip(&dir).map(|(b, d)| b + t * d).collect::<Vec<f64>>();
    let norm2: f64 = dir[1..3].iter().map(|d| d * d).sum();
    for t in [0.0, 0.5, 1.0, 3.0] {
        let mp = s(&match_pairing_from_codes(&t2(&[at(0.0)]), &t2(&[at(t)]), 1..3).unwrap());
        assert!((mp - t * t * norm2).abs() < 1e-12);
    }
}

#[test]
fn uniform_logits_give_log_cardinality() {
    for k in [2usize, 3, 10] {
        let logits = Tensor::zeros((5, k), DType::F64, &Device::Cpu).unwrap();
        let ce = s(&cross_entropy(&logits, &[0, 1, 1, 0, 1]).unwrap());
        assert!((ce - (k as f64).ln()).abs() < 1e-12);
    }
}

fn toy_partition() -> LatentPartition {
    LatentPartition::new(
        6,
        vec![
            LatentBlock { factor: "a".into(), start: 0, len: 2 },
            LatentBlock { factor: "b".into(), start: 2, len: 2 },
        ],
    )
    .unwrap()
}

#[test]
fn fresh_probe_cross_entropy_is_near_log_ten() {
    let spec = FactorSpec::glyphs10(0);
    let p = LatentPartition::uniform(&spec.target_names(), 4, 16).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let z: Vec<f64> = (0..64 * 16).map(|_| rng.sample(rand_distr::StandardNormal)).collect();
    let z = Tensor::from_vec(z, (64, 16), &Device::Cpu).unwrap();
    let labels: Vec<usize> = (0..64).map(|i| i % 10).collect();
    for seed in 0..100 {
        let bank = ProbeBank::for_spec(&spec, &p, seed, DType::F64).unwrap();
        let (pos, neg) = classification_from_codes(bank.probe("shape").unwrap(), &z, &labels).unwrap();
        for v in [s(&pos), s(&neg)] {
            assert!((v - 10f64.ln()).abs() <= 0.5, "seed {seed}: {v}");
        }
    }
}

fn train_probe(z: &Tensor, labels: &[usize], steps: usize) -> ProbeBank {
    let bank = ProbeBank::new(&toy_partition(), &[("a".into(), 3)], 0, DType::F64).unwrap();
    let mut opt = Adam::new(&bank.params, AdamConfig::with_lr(0.05)).unwrap();
    let rows: Vec<usize> = (0..labels.len()).collect();
    for _ in 0..steps {
        let t = [ProbeTargets { factor: "a", rows: &rows, labels }];
        let loss = probe_update_loss(&bank, z, &t).unwrap();
        opt.step(&loss.backward().unwrap()).unwrap();
    }
    bank
}

#[test]
fn positive_probe_learns_a_separable_block() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let n = 300;
    let labels: Vec<usize> = (0..n).map(|i| i % 3).collect();
    let rows: Vec<Vec<f64>> = labels
        .iter()
        .map(|&l| {
            let mut r: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
            r[0] = 4.0 * l as f64 + rng.random_range(-0.5..0.5);
            r[1] = rng.random_range(-0.5..0.5);
            r
        })
        .collect();
    let z = t2(&rows);
    let bank = train_probe(&z, &labels, 600);
    let logits = bank.probe("a").unwrap().positive_logits(&z, true).unwrap().to_vec2::<f64>().unwrap();
    let correct = logits
        .iter()
        .zip(&labels)
        .filter(|(row, &l)| row.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0 == l)
        .count();
    assert!(correct as f64 / n as f64 >= 0.99);
}

#[test]
fn negative_probe_stays_near_chance_on_independent_codes() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n = 3000;
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..3)).collect();
    let rows: Vec<Vec<f64>> = (0..n).map(|_| (0..6).map(|_| rng.sample(rand_distr::StandardNormal)).collect()).collect();
    let z = t2(&rows);
    let bank = train_probe(&z, &labels, 300);
    let ce = s(&cross_entropy(&bank.probe("a").unwrap().negative_logits(&z, true).unwrap(), &labels).unwrap());
    assert!((ce - 3f64.ln()).abs() <= 0.1, "{ce}");
}

#[test]
fn total_is_the_weighted_sum_of_its_terms() {
    let spec = FactorSpec::glyphs10(0);
    let model = VaeModel::for_spec(&spec, 2, DType::F64).unwrap();
    let probes = ProbeBank::for_spec(&spec, &model.partition, 3, DType::F64).unwrap();
    let ds = generate_split(&spec, None, 8, 5, SplitTag::Eval).unwrap();
    let x = images_to_tensor(&ds.images, 8, spec.pixels_per_image(), DType::F64).unwrap();
    let elbo = neg_elbo(&model, &x, 1.0, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let fb: Vec<FactorFeedback> = ["shape", "color"]
        .iter()
        .map(|f| FactorFeedback {
            factor: f.to_string(),
            pairs: vec![(0, 1), (2, 3)],
            labels: (4..8).map(|r| (r, ds.factor_value(r, spec.require_index(f).unwrap()))).collect(),
        })
        .collect();
    let on = TermSwitches { match_pairing: true, classification: true };
    for w in [LossWeights::proposed(10.0, 1.0), LossWeights::proposed(3.0, 10.0), LossWeights::zero()] {
        let (t, bd) = total_loss(&elbo, &model.partition, &probes, &fb, &w, on).unwrap();
        let direct = bd.neg_elbo
            + bd.mp.iter().map(|m| w.lambda1 * m.1).sum::<f64>()
            + bd.cl_pos.iter().map(|m| w.lambda2 * m.1).sum::<f64>()
            - bd.cl_neg.iter().map(|m| w.lambda3 * m.1).sum::<f64>();
        assert!((s(&t) - direct).abs() < 1e-9 * direct.abs());
        assert!((bd.recompute_total(&w) - direct).abs() < 1e-9 * direct.abs());
    }
    let (t, _) = total_loss(&elbo, &model.partition, &probes, &fb, &LossWeights::zero(), on).unwrap();
    assert_eq!(s(&t), s(&elbo.neg_elbo));
}

/// The match-pairing gradient on a code is 2(z_a − z_b)/P in-block and zero
/// outside; a finite step along −grad lowers the loss.
#[test]
fn match_pairing_gradient_points_downhill() {
    let a = candle_core::Var::from_tensor(&t2(&[vec![1.0, 2.0, 3.0, 4.0]])).unwrap();
    let b = t2(&[vec![0.0, 0.0, 0.0, 0.0]]);
    let loss = match_pairing_from_codes(a.as_tensor(), &b, 1..3).unwrap();
    let g = loss.backward().unwrap().get(a.as_tensor()).unwrap().to_vec2::<f64>().unwrap();
    assert_eq!(g[0], vec![0.0, 4.0, 6.0, 0.0]);
    let stepped: Vec<f64> = [1.0, 2.0, 3.0, 4.0].iter().zip(&g[0]).map(|(v, d)| v - 0.1 * d).collect();
    assert!(s(&match_pairing_from_codes(&t2(&[stepped]), &b, 1..3).unwrap()) < s(&loss));
}
