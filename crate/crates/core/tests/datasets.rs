//! Split generation, feedback construction, rendering purity and the on-disk
//! format.

use std::collections::BTreeSet;
use std::fs;

use dbvae::datasets::render::{palette, render_with_mask};
use dbvae::datasets::{
    build_feedback, generate_split, nearest_palette, palette_oracle, read_dataset, read_feedback, render_sample,
    write_dataset, write_feedback, BiasRule, FactorSpec, FeedbackGeometry, SplitTag,
};
use dbvae::Error;
use proptest::prelude::*;
use statrs::distribution::{ChiSquared, ContinuousCDF};

fn combos(ds: &dbvae::datasets::Dataset, a: usize, b: usize) -> BTreeSet<(usize, usize)> {
    (0..ds.len()).map(|n| (ds.factor_value(n, a), ds.factor_value(n, b))).collect()
}

#[test]
fn glyph_foreground_carries_exact_palette_color() {
    let spec = FactorSpec::glyphs10(0);
    let pal = palette(&spec);
    for shape in 0..10 {
        let img = render_sample(&spec, &[shape, 3], 9).unwrap();
        let fg: Vec<&[u8]> = img.chunks_exact(3).filter(|p| p.iter().any(|&v| v > 0)).collect();
        assert!(!fg.is_empty());
        assert!(fg.iter().all(|p| *p == pal[3]), "shape {shape}");
    }
}

#[test]
fn rendering_is_deterministic() {
    for spec in [FactorSpec::glyphs10(1), FactorSpec::sprites(1), FactorSpec::scene()] {
        let values: Vec<usize> = spec.factors.iter().map(|f| f.cardinality - 1).collect();
        assert_eq!(render_sample(&spec, &values, 5).unwrap(), render_sample(&spec, &values, 5).unwrap());
    }
}

#[test]
fn sprite_palette_oracle_recovers_all_nine_combinations() {
    let spec = FactorSpec::sprites(3);
    for shape in 0..3 {
        for color in 0..3 {
            let img = render_sample(&spec, &[shape, color, 4, 4, 2], 0).unwrap();
            assert_eq!(palette_oracle(&spec, &img), Some(color), "shape {shape} color {color}");
        }
    }
}

#[test]
fn scene_object_pixels_carry_object_color() {
    let spec = FactorSpec::scene();
    let pal = palette(&spec);
    for color in 0..4 {
        let r = render_with_mask(&spec, &[1, color, 2, 3, 3], 0).unwrap();
        let obj: Vec<[f64; 3]> = r
            .pixels
            .chunks_exact(3)
            .zip(&r.mask)
            .filter(|(_, m)| **m)
            .map(|(p, _)| [p[0] as f64, p[1] as f64, p[2] as f64])
            .collect();
        assert!(!obj.is_empty());
        assert!(obj.iter().all(|p| nearest_palette(&pal, *p) == color));
    }
}

#[test]
fn diagonal_train_and_reversed_test_share_no_combination() {
    let spec = FactorSpec::glyphs10(0);
    let rule = BiasRule::diagonal(&spec, "shape", "color").unwrap();
    let train = generate_split(&spec, Some(&rule), 3000, 1, SplitTag::Train).unwrap();
    let test = generate_split(&spec, Some(&rule.reversed()), 3000, 2, SplitTag::Test).unwrap();
    let a = combos(&train, 0, 1);
    let b = combos(&test, 0, 1);
    assert_eq!(a.len(), 10);
    assert_eq!(b.len(), 10);
    assert!(a.is_disjoint(&b));
    for k in 1..10 {
        let shifted = generate_split(&spec, Some(&rule.shifted(k)), 500, 3, SplitTag::Test).unwrap();
        assert!(combos(&shifted, 0, 1).is_disjoint(&a), "offset {k}");
    }
}

#[test]
fn glyph_train_split_shape() {
    let spec = FactorSpec::glyphs10(0);
    let rule = BiasRule::diagonal(&spec, "shape", "color").unwrap();
    let ds = generate_split(&spec, Some(&rule), 2000, 7, SplitTag::Train).unwrap();
    assert_eq!(ds.images.len(), 2000 * 28 * 28 * 3);
    assert_eq!(ds.spec.factors.iter().map(|f| f.cardinality).collect::<Vec<_>>(), vec![10, 10]);
    ds.check_invariants().unwrap();
}

#[test]
fn target_marginals_pass_chi_square_at_ten_thousand() {
    let spec = FactorSpec::sprites(0);
    let rule = BiasRule::diagonal(&spec, "shape", "color").unwrap();
    let ds = generate_split(&spec, Some(&rule), 10_000, 11, SplitTag::Train).unwrap();
    for (k, f) in spec.factors.iter().enumerate() {
        let mut counts = vec![0f64; f.cardinality];
        for n in 0..ds.len() {
            counts[ds.factor_value(n, k)] += 1.0;
        }
        let expected = ds.len() as f64 / f.cardinality as f64;
        let chi2: f64 = counts.iter().map(|c| (c - expected).powi(2) / expected).sum();
        let p = 1.0 - ChiSquared::new((f.cardinality - 1) as f64).unwrap().cdf(chi2);
        assert!(p > 0.001, "factor {} chi2 {chi2} p {p}", f.name);
        let dev = counts.iter().map(|c| (c / ds.len() as f64 - 1.0 / f.cardinality as f64).abs()).fold(0.0, f64::max);
        assert!(dev <= 2.0 / (ds.len() as f64).sqrt(), "factor {} deviation {dev}", f.name);
    }
}

#[test]
fn feedback_budgets_are_exact() {
    let g = FactorSpec::glyphs10(0);
    let fb = build_feedback(&g, 600, &g.target_names(), 1, FeedbackGeometry::Anchor).unwrap();
    assert_eq!(fb.set.referenced_samples(), 600);
    let s = FactorSpec::sprites(0);
    let fb = build_feedback(&s, 1000, &s.target_names(), 1, FeedbackGeometry::Anchor).unwrap();
    assert_eq!(fb.set.referenced_samples(), 1000);
}

#[test]
fn feedback_pairs_differ_off_the_shared_factor_at_the_expected_rate() {
    // glyphs: the only non-shared factor has 10 values, so members coincide with probability 1/10
    let spec = FactorSpec::glyphs10(0);
    let fb = build_feedback(&spec, 4000, &spec.target_names(), 5, FeedbackGeometry::Random).unwrap();
    let pool = &fb.pool;
    let mut differ = 0;
    for p in &fb.set.pairs {
        let other = if p.shared_factor == "shape" { 1 } else { 0 };
        if pool.factor_value(p.idx_a, other) != pool.factor_value(p.idx_b, other) {
            differ += 1;
        }
    }
    let n = fb.set.pairs.len() as f64;
    let rate = differ as f64 / n;
    let sd = (0.9 * 0.1 / n).sqrt();
    assert!((rate - 0.9).abs() < 4.0 * sd, "rate {rate}");
}

#[test]
fn dataset_round_trip_is_lossless() {
    let dir = tempfile::tempdir().unwrap();
    let spec = FactorSpec::sprites(2);
    let ds = generate_split(&spec, None, 50, 3, SplitTag::Eval).unwrap();
    write_dataset(&ds, dir.path()).unwrap();
    let back = read_dataset(dir.path()).unwrap();
    assert_eq!(back, ds);
    let raw = fs::read(dir.path().join("images.bin")).unwrap();
    assert_eq!(&raw[..8], b"DBVAE001");
    assert_eq!(u32::from_le_bytes(raw[8..12].try_into().unwrap()), 50);
    assert_eq!(&raw[24..], ds.images.as_slice());
}

#[test]
fn corrupt_files_give_distinct_errors() {
    let dir = tempfile::tempdir().unwrap();
    let spec = FactorSpec::glyphs10(0);
    let ds = generate_split(&spec, None, 20, 3, SplitTag::Eval).unwrap();
    write_dataset(&ds, dir.path()).unwrap();
    let img = dir.path().join("images.bin");
    let good = fs::read(&img).unwrap();

    let mut bad = good.clone();
    bad[0] = b'X';
    fs::write(&img, &bad).unwrap();
    assert!(matches!(read_dataset(dir.path()), Err(Error::Format { .. })));

    fs::write(&img, &good[..good.len() - 5]).unwrap();
    assert!(matches!(read_dataset(dir.path()), Err(Error::Format { .. })));

    fs::write(&img, &good).unwrap();
    let csv = dir.path().join("factors.csv");
    let text = fs::read_to_string(&csv).unwrap();
    let fewer: Vec<&str> = text.lines().take(text.lines().count() - 1).collect();
    fs::write(&csv, fewer.join("\n") + "\n").unwrap();
    assert!(matches!(read_dataset(dir.path()), Err(Error::Consistency { .. })));
}

#[test]
fn feedback_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let spec = FactorSpec::glyphs10(0);
    let fb = build_feedback(&spec, 40, &spec.target_names(), 3, FeedbackGeometry::Anchor).unwrap();
    write_feedback(&fb, dir.path()).unwrap();
    assert_eq!(read_feedback(dir.path()).unwrap(), fb);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn biased_splits_obey_their_rule(seed in 0u64..1000, offset in -12i64..12, n in 1usize..200) {
        let spec = FactorSpec::glyphs10(seed % 3);
        let rule = BiasRule::diagonal(&spec, "shape", "color").unwrap().shifted(offset);
        let ds = generate_split(&spec, Some(&rule), n, seed, SplitTag::Train).unwrap();
        ds.check_invariants().unwrap();
        for row in 0..n {
            prop_assert_eq!(ds.factor_value(row, 1), rule.value_for(ds.factor_value(row, 0)));
        }
    }

    #[test]
    fn offset_then_inverse_offset_is_identity(k in -50i64..50) {
        let spec = FactorSpec::glyphs10(0);
        let rule = BiasRule::diagonal(&spec, "shape", "color").unwrap();
        let back = rule.shifted(k).shifted(-k);
        for a in 0..10 {
            prop_assert_eq!(back.value_for(a), rule.value_for(a));
        }
    }

    #[test]
    fn feedback_pairs_and_labels_match_ground_truth(seed in 0u64..500, budget in 4usize..120, random in any::<bool>()) {
        let spec = FactorSpec::sprites(seed);
        let geometry = if random { FeedbackGeometry::Random } else { FeedbackGeometry::Anchor };
        let fb = build_feedback(&spec, budget, &spec.target_names(), seed, geometry).unwrap();
        fb.check_invariants().unwrap();
        prop_assert!(fb.set.referenced_samples() <= budget);
    }

    #[test]
    fn every_foreground_pixel_maps_to_the_color_value(shape in 0usize..10, color in 0usize..10, seed in 0u64..100) {
        let spec = FactorSpec::glyphs10(seed);
        let pal = palette(&spec);
        let img = render_sample(&spec, &[shape, color], seed).unwrap();
        for p in img.chunks_exact(3).filter(|p| p.iter().any(|&v| v > 0)) {
            prop_assert_eq!(nearest_palette(&pal, [p[0] as f64, p[1] as f64, p[2] as f64]), color);
        }
    }
}
