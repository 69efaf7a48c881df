//! Grid emission, latent assembly identities and traversal behaviour.

use candle_core::DType;
use dbvae::datasets::render::{palette_oracle, scene_background_mask};
use dbvae::datasets::{build_feedback, generate_split, BiasRule, FactorSpec, FeedbackGeometry, SplitTag};
use dbvae::evalgen::{
    cross_product_grid, first_of_each_value, hybrid_code, hybridize, reconstruct, reconstruction_grid, traversal_grid,
    traverse, write_grid, TRAVERSAL_VALUES,
};
use dbvae::model::VaeModel;
use dbvae::trainer::{train, TrainOptions, TrainingConfig};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn glyph_model() -> (FactorSpec, VaeModel) {
    let spec = FactorSpec::glyphs10(0);
    let model = VaeModel::for_spec(&spec, 5, DType::F32).unwrap();
    (spec, model)
}

#[test]
fn reconstruction_grid_has_two_rows_and_reemits_identically() {
    let (spec, model) = glyph_model();
    let ds = generate_split(&spec, None, 6, 1, SplitTag::Eval).unwrap();
    let (grid, side) = reconstruction_grid(&model, &ds, &[0, 2, 4, 5]).unwrap();
    assert_eq!((grid.rows, grid.cols, side.rows, side.cols), (2, 4, 2, 4));
    assert_eq!(side.cells.len(), 8);
    let dir = tempfile::tempdir().unwrap();
    write_grid(dir.path(), "a", &grid, &side).unwrap();
    let (grid2, side2) = reconstruction_grid(&model, &ds, &[0, 2, 4, 5]).unwrap();
    write_grid(dir.path(), "b", &grid2, &side2).unwrap();
    for ext in ["png", "json"] {
        let a = std::fs::read(dir.path().join(format!("a.{ext}"))).unwrap();
        let b = std::fs::read(dir.path().join(format!("b.{ext}"))).unwrap();
        assert_eq!(a, b, "{ext}");
    }
    let png = image::open(dir.path().join("a.png")).unwrap();
    let (h, w, _) = spec.image_dims;
    assert_eq!((png.width() as usize, png.height() as usize), (4 * (w + 1) + 1, 2 * (h + 1) + 1));
}

#[test]
fn hybrid_of_an_image_with_itself_is_its_reconstruction() {
    let (spec, model) = glyph_model();
    let ds = generate_split(&spec, None, 3, 2, SplitTag::Eval).unwrap();
    for i in 0..3 {
        let h = hybridize(&model, ds.image(i), ds.image(i), "shape", "color").unwrap();
        let r = reconstruct(&model, ds.image(i), 1).unwrap().remove(0);
        let worst = h.iter().zip(&r).map(|(a, b)| (*a as i32 - *b as i32).abs()).max().unwrap();
        assert!(worst <= 1, "max byte gap {worst}");
    }
}

#[test]
fn cross_product_grid_covers_every_combination() {
    let (spec, model) = glyph_model();
    let ds = generate_split(&spec, None, 600, 3, SplitTag::Eval).unwrap();
    let shapes = first_of_each_value(&ds, "shape").unwrap();
    let colors = first_of_each_value(&ds, "color").unwrap();
    let (grid, side) = cross_product_grid(&model, &ds, &shapes, &colors, "shape", "color").unwrap();
    assert_eq!((grid.rows, grid.cols), (11, 11));
    assert!(grid.get(0, 0).is_none());
    assert_eq!(side.cells.len(), 10 + 10 + 100);
    for r in 0..11 {
        for c in 0..11 {
            assert_eq!(grid.get(r, c).is_some(), r + c > 0);
        }
    }
}

#[test]
fn traversal_at_the_posterior_mean_reproduces_reconstruction() {
    let (spec, model) = glyph_model();
    let ds = generate_split(&spec, None, 2, 4, SplitTag::Eval).unwrap();
    let mu = model.posterior_means(ds.image(0), 1).unwrap().remove(0);
    let recon = reconstruct(&model, ds.image(0), 1).unwrap().remove(0);
    for d in [0, 7, 15] {
        assert_eq!(traverse(&model, ds.image(0), d, &[mu[d]]).unwrap().remove(0), recon);
    }
    let dims: Vec<usize> = (0..8).collect();
    let (grid, side) = traversal_grid(&model, &ds, 0, &dims, &TRAVERSAL_VALUES).unwrap();
    assert_eq!((grid.rows, grid.cols), (8, 7));
    assert_eq!(side.cells.len(), 56);
    assert!(traverse(&model, ds.image(0), 16, &[0.0]).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn hybrid_code_takes_each_block_from_its_source(seed in any::<u64>()) {
        let (_, model) = glyph_model();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let za: Vec<f64> = (0..16).map(|_| rng.random_range(-2.0..2.0)).collect();
        let zb: Vec<f64> = (0..16).map(|_| rng.random_range(-2.0..2.0)).collect();
        let h = hybrid_code(&model, &za, &zb, "shape", "color").unwrap();
        let p = &model.partition;
        let parts = p.split(&h);
        let (pa, pb) = (p.split(&za), p.split(&zb));
        let shape = p.blocks.iter().position(|b| b.factor == "shape").unwrap();
        let color = p.blocks.iter().position(|b| b.factor == "color").unwrap();
        prop_assert_eq!(&parts[shape], &pa[shape]);
        prop_assert_eq!(&parts[color], &pb[color]);
        for d in p.nuisance() {
            prop_assert!((h[d] - 0.5 * (za[d] + zb[d])).abs() < 1e-15);
        }
        prop_assert_eq!(p.join(&parts), h);
    }
}

/// A briefly trained scene model: moving a shape-block dim over the whole
/// traversal range leaves pixels no object can reach nearly unchanged.
#[test]
fn scene_shape_traversal_keeps_background_bands() {
    let spec = FactorSpec::scene();
    let train_ds = generate_split(&spec, None, 2000, 11, SplitTag::Train).unwrap();
    let fb = build_feedback(&spec, 600, &spec.target_names(), 12, FeedbackGeometry::Random).unwrap();
    let mut config = TrainingConfig::proposed(0);
    config.model = spec.family;
    config.epochs = 8;
    config.batch_size = 64;
    config.feedback_batch_size = 8;
    let out = train(&config, &train_ds, Some(&fb), &TrainOptions::default()).unwrap();
    let model = out.model;

    let mask = scene_background_mask(&spec);
    let probe = generate_split(&spec, None, 8, 13, SplitTag::Eval).unwrap();
    let block = model.partition.block("shape").unwrap().range();
    let mut worst: f64 = 0.0;
    for i in 0..probe.len() {
        let recon = reconstruct(&model, probe.image(i), 1).unwrap().remove(0);
        for d in block.clone() {
            for img in traverse(&model, probe.image(i), d, &TRAVERSAL_VALUES).unwrap() {
                let mut total = 0.0;
                let mut count = 0.0;
                for (p, &bg) in mask.iter().enumerate() {
                    if bg {
                        for c in 0..3 {
                            total += (img[p * 3 + c] as f64 - recon[p * 3 + c] as f64).abs() / 255.0;
                            count += 1.0;
                        }
                    }
                }
                worst = worst.max(total / count);
            }
        }
    }
    assert!(worst <= 0.05, "background mean abs change {worst}");
}

#[test]
fn reconstructions_of_a_trained_glyph_model_keep_their_color() {
    let spec = FactorSpec::glyphs10(0);
    let rule = BiasRule::diagonal(&spec, "shape", "color").unwrap();
    let train_ds = generate_split(&spec, Some(&rule), 2000, 21, SplitTag::Train).unwrap();
    let mut config = TrainingConfig::baseline(0, 1.0);
    config.epochs = 25;
    config.batch_size = 64;
    let model = train(&config, &train_ds, None, &TrainOptions::default()).unwrap().model;
    let probe = generate_split(&spec, Some(&rule), 100, 22, SplitTag::Train).unwrap();
    let color = spec.require_index("color").unwrap();
    let recon = reconstruct(&model, &probe.images, 100).unwrap();
    let hits = recon
        .iter()
        .enumerate()
        .filter(|(i, r)| palette_oracle(&spec, r) == Some(probe.factor_value(*i, color)))
        .count();
    assert!(hits >= 90, "{hits}/100");
}
