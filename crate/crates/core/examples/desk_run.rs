//! Desk-scale glyph run: renders the biased splits, trains one model and
//! prints its metrics.
//!
//! `cargo run --example desk_run -- <variant> <seed> [epochs] [lambda]`
//! where variant is proposed, no_labels or baseline. Optional overrides come
//! from the environment: LAMBDA3, PROBE_LR, FBS, GEOMETRY, BETA, LR.

use std::time::Instant;

use dbvae::datasets::{build_feedback, generate_split, BiasRule, FactorSpec, FeedbackGeometry, SplitTag};
use dbvae::datasets::palette_oracle;
use dbvae::evalgen::hybrid_code;
use dbvae::metrics::{evaluate, EvalData, EvalOptions};
use dbvae::losses::LossWeights;
use dbvae::trainer::{train, TrainOptions, TrainingConfig};

fn main() -> dbvae::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let variant = args.first().map(String::as_str).unwrap_or("proposed");
    let seed: u64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let epochs: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(20);
    let lambda: f64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(10.0);

    let spec = FactorSpec::glyphs10(0);
    let rule = BiasRule::diagonal(&spec, "shape", "color")?;
    let train_set = generate_split(&spec, Some(&rule), 10_000, 1, SplitTag::Train)?;
    let test_set = generate_split(&spec, Some(&rule.reversed()), 2_000, 3, SplitTag::Test)?;
    let eval_set = generate_split(&spec, None, 5_000, 4, SplitTag::Eval)?;
    let targets = spec.target_names();
    let geometry = match std::env::var("GEOMETRY").as_deref() {
        Ok("random") => FeedbackGeometry::Random,
        _ => FeedbackGeometry::Anchor,
    };
    let feedback = build_feedback(&spec, 600, &targets, 2, geometry)?;

    let mut config = match variant {
        "baseline" => TrainingConfig::baseline(seed, 4.0),
        "no_labels" => TrainingConfig::no_labels(seed),
        _ => TrainingConfig::proposed(seed),
    };
    config.epochs = epochs;
    let env = |k: &str| std::env::var(k).ok().and_then(|v| v.parse::<f64>().ok());
    if variant != "baseline" {
        config.weights = LossWeights::proposed(lambda, env("LAMBDA3").unwrap_or(1.0));
    }
    if let Some(b) = env("BETA") {
        config.weights.beta = b;
    }
    if let Some(v) = env("PROBE_LR") {
        config.probe_learning_rate = v;
    }
    if let Some(v) = env("LR") {
        config.learning_rate = v;
    }
    if let Some(v) = env("FBS") {
        config.feedback_batch_size = v as usize;
    }
    eprintln!("{config:?}");
    let t = Instant::now();
    let out = train(&config, &train_set, Some(&feedback), &TrainOptions::default())?;
    let secs = t.elapsed().as_secs_f64();
    let last = out.log.last().unwrap();
    println!("trained {} steps in {secs:.1}s; last breakdown {:?}", out.log.len(), last.breakdown);
    let report = evaluate(
        &out.model,
        &spec,
        &EvalData { eval: &eval_set, train: &train_set, test: &test_set },
        &EvalOptions { estimator_trials: 1000, ..EvalOptions::default() },
    )?;
    println!("{}", serde_json::to_string_pretty(&report).unwrap());

    // hybrid oracle over the 10 × 10 grid of diagonal sources
    let sources: Vec<usize> = (0..10)
        .map(|d| (0..train_set.len()).find(|&n| train_set.factor_value(n, 0) == d).unwrap())
        .collect();
    let mut images = Vec::new();
    for &s in &sources {
        images.extend_from_slice(train_set.image(s));
    }
    let z = out.model.posterior_means(&images, 10)?;
    let (mut ok, mut ok_off) = (0, 0);
    for i in 0..10 {
        for j in 0..10 {
            let code = hybrid_code(&out.model, &z[j], &z[i], "shape", "color")?;
            let img = out.model.decode_to_bytes(&[code])?;
            if palette_oracle(&spec, &img) == Some(i) {
                ok += 1;
                if i != j {
                    ok_off += 1;
                }
            }
        }
    }
    println!("hybrid color oracle: {ok}/100, off-diagonal {ok_off}/90");
    Ok(())
}
