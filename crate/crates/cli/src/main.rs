//! `dbvae`: data generation, feedback construction, training, evaluation and
//! reporting for partitioned-latent VAEs.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};

use dbvae::datasets::{
    build_feedback, generate_split, read_dataset, read_feedback, write_dataset, write_feedback, BiasRule, Family,
    FactorSpec, FeedbackGeometry, SplitTag,
};
use dbvae::evalgen::{cross_product_grid, first_of_each_value, reconstruction_grid, traversal_grid, write_grid, TRAVERSAL_VALUES};
use dbvae::metrics::{evaluate, EvalData, EvalOptions, MetricsReport};
use dbvae::model::load_checkpoint;
use dbvae::report::build_report;
use dbvae::trainer::{train, TrainOptions, TrainingConfig, CHECKPOINT_FILE};

/// Environment variable naming the directory relative output paths resolve against.
const OUT_ROOT_ENV: &str = "DBVAE_OUT_ROOT";

#[derive(Parser)]
#[command(name = "dbvae", version, about = "Partitioned-latent VAEs trained with match pairs and adversarial probes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a dataset split to a directory.
    GenData(GenData),
    /// Build a feedback set (match pairs and labels) over a fresh image pool.
    MakeFeedback(MakeFeedback),
    /// Train a model from a TOML config.
    Train(Train),
    /// Score a checkpoint and append a row to the aggregate CSV.
    Metrics(Metrics),
    /// Emit reconstruction, cross-product and traversal grids.
    EvalGrids(EvalGrids),
    /// Aggregate a results directory and draw distribution plots.
    Report(Report),
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
    Eval,
}

#[derive(Args)]
struct GenData {
    /// glyphs10, sprites or scene.
    #[arg(long)]
    family: String,
    /// diag, reverse, shift:<k>, or none (unbiased full spectrum).
    #[arg(long, default_value = "diag")]
    rule: String,
    /// Number of samples.
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Seed of the color palette permutation; must match across splits.
    #[arg(long, default_value_t = 0)]
    palette_seed: u64,
    /// The two coupled factors; defaults to the first two targets.
    #[arg(long, value_delimiter = ',')]
    factors: Vec<String>,
    /// Split tag; defaults to train for diag, test for shifted rules, eval for none.
    #[arg(long, value_enum)]
    split: Option<SplitArg>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct MakeFeedback {
    #[arg(long)]
    family: String,
    /// Number of annotated images.
    #[arg(long, default_value_t = 600)]
    budget: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0)]
    palette_seed: u64,
    /// Factors to pair on; defaults to every target factor.
    #[arg(long, value_delimiter = ',')]
    targets: Vec<String>,
    /// anchor (fixed shared value per factor) or random.
    #[arg(long, default_value = "anchor")]
    geometry: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Train {
    #[arg(long)]
    config: PathBuf,
    /// Training split directory.
    #[arg(long)]
    data: PathBuf,
    /// Feedback directory; ignored by the baseline variant.
    #[arg(long)]
    feedback: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Continue from the checkpoint in --out.
    #[arg(long)]
    resume: bool,
    /// Stop after this many optimizer steps in total.
    #[arg(long)]
    max_steps: Option<u64>,
}

#[derive(Args)]
struct Metrics {
    /// Run directory holding checkpoint.bin, or the checkpoint file itself.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Directory with train/ and test/ splits and optionally eval/.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Histogram bins per code dim for the MI estimates.
    #[arg(long, default_value_t = 20)]
    bins: usize,
    /// Monte-Carlo trials per consistency / restrictiveness estimate.
    #[arg(long, default_value_t = 2000)]
    trials: usize,
    /// Size of the unbiased split rendered when data has no eval/.
    #[arg(long, default_value_t = 10000)]
    eval_n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// CSV to append a row to; defaults to aggregate.csv next to --out.
    #[arg(long)]
    aggregate: Option<PathBuf>,
}

#[derive(Args)]
struct EvalGrids {
    #[arg(long)]
    checkpoint: PathBuf,
    /// A dataset split directory supplying source images.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Images in the reconstruction grid.
    #[arg(long, default_value_t = 8)]
    n: usize,
    /// Index of the traversal seed image.
    #[arg(long, default_value_t = 0)]
    seed: usize,
}

#[derive(Args)]
struct Report {
    #[arg(long = "in")]
    input: PathBuf,
}

fn out_path(p: &Path) -> PathBuf {
    match std::env::var_os(OUT_ROOT_ENV) {
        Some(root) if p.is_relative() => PathBuf::from(root).join(p),
        _ => p.to_path_buf(),
    }
}

fn spec_for(family: &str, palette_seed: u64) -> anyhow::Result<FactorSpec> {
    let family: Family = family.parse()?;
    Ok(FactorSpec::for_family(family, palette_seed)?)
}

fn checkpoint_file(p: &Path) -> PathBuf {
    if p.is_dir() { p.join(CHECKPOINT_FILE) } else { p.to_path_buf() }
}

fn gen_data(a: GenData) -> anyhow::Result<()> {
    let spec = spec_for(&a.family, a.palette_seed)?;
    let targets = spec.target_names();
    let pair = if a.factors.is_empty() { targets.iter().take(2).cloned().collect() } else { a.factors.clone() };
    let rule = if a.rule == "none" {
        None
    } else {
        if pair.len() != 2 {
            bail!("a bias rule needs exactly two factors, got {}", pair.len());
        }
        let diag = BiasRule::diagonal(&spec, &pair[0], &pair[1])?;
        Some(match a.rule.as_str() {
            "diag" => diag,
            "reverse" => diag.reversed(),
            other => match other.strip_prefix("shift:").map(str::parse::<i64>) {
                Some(Ok(k)) => diag.shifted(k),
                _ => bail!("unknown rule `{other}` (expected diag, reverse, shift:<k> or none)"),
            },
        })
    };
    let tag = match (a.split, &rule) {
        (Some(SplitArg::Train), _) => SplitTag::Train,
        (Some(SplitArg::Test), _) => SplitTag::Test,
        (Some(SplitArg::Eval), _) => SplitTag::Eval,
        (None, None) => SplitTag::Eval,
        (None, Some(_)) if a.rule == "diag" => SplitTag::Train,
        (None, Some(_)) => SplitTag::Test,
    };
    let ds = generate_split(&spec, rule.as_ref(), a.n, a.seed, tag)?;
    write_dataset(&ds, &out_path(&a.out))?;
    Ok(())
}

fn make_feedback(a: MakeFeedback) -> anyhow::Result<()> {
    let spec = spec_for(&a.family, a.palette_seed)?;
    let targets = if a.targets.is_empty() { spec.target_names() } else { a.targets.clone() };
    let geometry = match a.geometry.as_str() {
        "anchor" => FeedbackGeometry::Anchor,
        "random" => FeedbackGeometry::Random,
        other => bail!("unknown geometry `{other}` (expected anchor or random)"),
    };
    let fb = build_feedback(&spec, a.budget, &targets, a.seed, geometry)?;
    write_feedback(&fb, &out_path(&a.out))?;
    Ok(())
}

fn run_train(a: Train) -> anyhow::Result<()> {
    let config = TrainingConfig::load(&a.config)?;
    for w in config.validate()? {
        eprintln!("warning: {w}");
    }
    let data = read_dataset(&a.data)?;
    let feedback = if config.variant.uses_feedback() {
        let dir = a.feedback.as_ref().ok_or_else(|| anyhow!("--feedback is required for this variant"))?;
        Some(read_feedback(dir)?)
    } else {
        None
    };
    let out = out_path(&a.out);
    fs::create_dir_all(&out)?;
    fs::write(out.join("config.toml"), config.to_toml())?;
    let opts = TrainOptions { out_dir: Some(out), resume: a.resume, max_steps: a.max_steps };
    train(&config, &data, feedback.as_ref(), &opts)?;
    Ok(())
}

fn append_row(path: &Path, label: &str, report: &MetricsReport) -> anyhow::Result<()> {
    let flat = report.flatten();
    let header: Vec<String> = std::iter::once("run".to_string()).chain(flat.iter().map(|(c, _)| c.clone())).collect();
    let exists = path.exists();
    if exists {
        let mut r = csv::Reader::from_path(path)?;
        let existing: Vec<String> = r.headers()?.iter().map(String::from).collect();
        if existing != header {
            bail!("{} has different columns than this report", path.display());
        }
    }
    let file = fs::OpenOptions::new().create(true).append(true).open(path)?;
    let mut w = csv::Writer::from_writer(file);
    if !exists {
        w.write_record(&header)?;
    }
    let mut rec = vec![label.to_string()];
    rec.extend(flat.iter().map(|(_, v)| v.to_string()));
    w.write_record(&rec)?;
    w.flush()?;
    Ok(())
}

fn run_metrics(a: Metrics) -> anyhow::Result<()> {
    let ckpt_path = checkpoint_file(&a.checkpoint);
    let ckpt = load_checkpoint(&ckpt_path)?;
    let model = ckpt.model()?;
    let spec = ckpt.header.spec.clone();
    let train = read_dataset(&a.data.join("train"))?;
    let test = read_dataset(&a.data.join("test"))?;
    let eval_dir = a.data.join("eval");
    let eval = if eval_dir.exists() {
        read_dataset(&eval_dir)?
    } else if spec.family.has_renderer() {
        generate_split(&spec, None, a.eval_n, a.seed, SplitTag::Eval)?
    } else {
        bail!("{} has no eval/ split and the family has no renderer", a.data.display());
    };
    for ds in [&train, &test, &eval] {
        if ds.spec != spec {
            bail!("dataset factor spec differs from the checkpoint's");
        }
    }
    let opts = EvalOptions { bins: a.bins, estimator_trials: a.trials, seed: a.seed, ..EvalOptions::default() };
    let report = evaluate(&model, &spec, &EvalData { eval: &eval, train: &train, test: &test }, &opts)?;
    let out = out_path(&a.out);
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(&out, serde_json::to_vec_pretty(&report)?)?;
    let aggregate = a.aggregate.map(|p| out_path(&p)).unwrap_or_else(|| out.with_file_name("aggregate.csv"));
    append_row(&aggregate, &ckpt_path.display().to_string(), &report)?;
    Ok(())
}

fn run_eval_grids(a: EvalGrids) -> anyhow::Result<()> {
    let ckpt = load_checkpoint(&checkpoint_file(&a.checkpoint))?;
    let model = ckpt.model()?;
    let data = read_dataset(&a.data)?;
    if data.spec.image_dims != model.arch.image_dims {
        bail!("data images are {:?}, the model expects {:?}", data.spec.image_dims, model.arch.image_dims);
    }
    let out = out_path(&a.out);
    let n = a.n.min(data.len());
    let idx: Vec<usize> = (0..n).collect();
    let (g, s) = reconstruction_grid(&model, &data, &idx)?;
    write_grid(&out, "reconstruction", &g, &s)?;

    let targets = data.spec.target_names();
    if targets.len() >= 2 {
        let (fa, fb) = (&targets[0], &targets[1]);
        let a_src = first_of_each_value(&data, fa).context("cross-product sources")?;
        let b_src = first_of_each_value(&data, fb).context("cross-product sources")?;
        let (g, s) = cross_product_grid(&model, &data, &a_src, &b_src, fa, fb)?;
        write_grid(&out, "cross_product", &g, &s)?;
    }
    if a.seed >= data.len() {
        bail!("traversal seed index {} out of range", a.seed);
    }
    for block in &model.partition.blocks {
        let dims: Vec<usize> = block.range().collect();
        let (g, s) = traversal_grid(&model, &data, a.seed, &dims, &TRAVERSAL_VALUES)?;
        write_grid(&out, &format!("traversal_{}", block.factor), &g, &s)?;
    }
    let nuisance = model.partition.nuisance();
    if !nuisance.is_empty() {
        let (g, s) = traversal_grid(&model, &data, a.seed, &nuisance, &TRAVERSAL_VALUES)?;
        write_grid(&out, "traversal_nuisance", &g, &s)?;
    }
    Ok(())
}

fn run_report(a: Report) -> anyhow::Result<()> {
    let dir = out_path(&a.input);
    let written = build_report(&dir)?;
    for p in written {
        println!("{}", p.display());
    }
    Ok(())
}

fn error_kind(e: &anyhow::Error) -> &'static str {
    e.chain()
        .find_map(|c| c.downcast_ref::<dbvae::Error>().map(|e| e.kind()))
        .unwrap_or("error")
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            let first = e.to_string().lines().next().unwrap_or("bad arguments").trim_start_matches("error: ").to_string();
            eprintln!("error: usage: {first}");
            return ExitCode::from(2);
        }
    };
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::MakeFeedback(a) => make_feedback(a),
        Command::Train(a) => run_train(a),
        Command::Metrics(a) => run_metrics(a),
        Command::EvalGrids(a) => run_eval_grids(a),
        Command::Report(a) => run_report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error: {}: {msg}", error_kind(&e));
            ExitCode::FAILURE
        }
    }
}
