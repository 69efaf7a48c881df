//! Seeded training loop: alternating VAE and probe updates over the biased
//! train split interleaved with cycled feedback batches.

pub mod matrix;

pub use matrix::{run_matrix, CellOutcome, CellStatus, MatrixCell, MatrixData};

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use candle_core::DType;
use log::{info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datasets::{shuffled_indices, Dataset, Family, Feedback, FactorSpec};
use crate::losses::{neg_elbo, probe_update_loss, total_loss, FactorFeedback, LossBreakdown, LossWeights, ProbeTargets, TermSwitches};
use crate::model::checkpoint::{encode_checkpoint, CheckpointContent, OptimizerKind, RngState, TrainState};
use crate::model::{images_to_tensor, load_checkpoint, save_checkpoint, Architecture, LatentPartition, ProbeBank, VaeModel, DEFAULT_BLOCK_DIMS};
use crate::optim::{Adam, AdamConfig};
use crate::{Error, Result};

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const LOG_FILE: &str = "training_log.csv";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Full objective: ELBO + match pairing + adversarial probes.
    Proposed,
    /// ELBO + match pairing; probes are never evaluated.
    NoLabels,
    /// ELBO with weight β on the KL term; feedback is never read.
    BaselineBetaVae,
}

impl Variant {
    pub fn switches(self) -> TermSwitches {
        match self {
            Variant::Proposed => TermSwitches { match_pairing: true, classification: true },
            Variant::NoLabels => TermSwitches { match_pairing: true, classification: false },
            Variant::BaselineBetaVae => TermSwitches { match_pairing: false, classification: false },
        }
    }

    pub fn uses_feedback(self) -> bool {
        self != Variant::BaselineBetaVae
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    pub variant: Variant,
    /// Architecture preset: a family name.
    pub model: Family,
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Pairs per target factor per step.
    pub feedback_batch_size: usize,
    pub learning_rate: f64,
    pub probe_learning_rate: f64,
    pub weights: LossWeights,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            variant: Variant::Proposed,
            model: Family::Glyphs10,
            seed: 0,
            epochs: 20,
            batch_size: 128,
            feedback_batch_size: 16,
            learning_rate: 1e-3,
            probe_learning_rate: 1e-3,
            weights: LossWeights::proposed(10.0, 1.0),
        }
    }
}

impl TrainingConfig {
    pub fn proposed(seed: u64) -> Self {
        TrainingConfig { seed, ..Self::default() }
    }

    pub fn no_labels(seed: u64) -> Self {
        let mut c = Self::proposed(seed);
        c.variant = Variant::NoLabels;
        c
    }

    pub fn baseline(seed: u64, beta: f64) -> Self {
        TrainingConfig { seed, variant: Variant::BaselineBetaVae, weights: LossWeights::baseline(beta), ..Self::default() }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string().trim().replace('\n', " ")))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path)?)
    }

    /// Hard errors for unusable values; advisory warnings otherwise.
    pub fn validate(&self) -> Result<Vec<String>> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if self.variant.uses_feedback() && self.feedback_batch_size == 0 {
            return Err(Error::Config("feedback_batch_size must be positive".into()));
        }
        for (name, v) in [("learning_rate", self.learning_rate), ("probe_learning_rate", self.probe_learning_rate)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        let warnings = self.weights.validate()?;
        Ok(match self.variant {
            Variant::Proposed => warnings,
            Variant::NoLabels => warnings.into_iter().filter(|w| !w.contains("lambda3")).collect(),
            Variant::BaselineBetaVae => Vec::new(),
        })
    }
}

/// One optimizer step in the log.
#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub step: u64,
    pub epoch: usize,
    pub breakdown: LossBreakdown,
    /// Probe objective of the subsequent probe step, when one ran.
    pub probe_loss: Option<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Where checkpoints and the log go; `None` keeps everything in memory.
    pub out_dir: Option<PathBuf>,
    /// Continue from the checkpoint in `out_dir` if it has one.
    pub resume: bool,
    /// Stop (with a checkpoint) once this many steps have run in total.
    pub max_steps: Option<u64>,
}

pub struct TrainOutcome {
    pub model: VaeModel,
    pub probes: ProbeBank,
    pub log: Vec<LogRow>,
    pub spec: FactorSpec,
    /// False when stopped by `max_steps`.
    pub completed: bool,
}

fn probe_seed(seed: u64) -> u64 {
    seed ^ 0x5eed_0f_9b0b_e5
}

fn data_seed(seed: u64) -> u64 {
    seed.wrapping_add(0x9e37_79b9_7f4a_7c15)
}

/// Feedback rows appended after the train rows, and the per-factor row indices.
struct FeedbackLayout {
    targets: Vec<String>,
    pairs: HashMap<String, Vec<(usize, usize)>>,
    labels: HashMap<(usize, String), usize>,
}

impl FeedbackLayout {
    fn new(fb: &Feedback, targets: &[String]) -> Result<Self> {
        let mut pairs = HashMap::new();
        for t in targets {
            let list: Vec<(usize, usize)> = fb.set.pairs_for(t).map(|p| (p.idx_a, p.idx_b)).collect();
            if list.is_empty() {
                warn!("feedback has no pairs for target `{t}`");
            }
            pairs.insert(t.clone(), list);
        }
        let labels = fb.set.labels.iter().map(|l| ((l.idx, l.factor.clone()), l.value)).collect();
        Ok(FeedbackLayout { targets: targets.to_vec(), pairs, labels })
    }

    /// Pool indices of this step's feedback images, and the factor terms in
    /// batch-row coordinates (rows offset by `base`).
    fn step_batch(&self, step: u64, per_factor: usize, base: usize) -> (Vec<usize>, Vec<FactorFeedback>) {
        let mut pool_rows = Vec::new();
        let mut terms: Vec<FactorFeedback> =
            self.targets.iter().map(|t| FactorFeedback { factor: t.clone(), ..Default::default() }).collect();
        for (ti, t) in self.targets.iter().enumerate() {
            let list = &self.pairs[t];
            if list.is_empty() {
                continue;
            }
            for j in 0..per_factor {
                let (a, b) = list[((step as usize) * per_factor + j) % list.len()];
                let ra = base + pool_rows.len();
                pool_rows.push(a);
                pool_rows.push(b);
                terms[ti].pairs.push((ra, ra + 1));
            }
        }
        for (k, &idx) in pool_rows.iter().enumerate() {
            for term in terms.iter_mut() {
                if let Some(&v) = self.labels.get(&(idx, term.factor.clone())) {
                    term.labels.push((base + k, v));
                }
            }
        }
        (pool_rows, terms)
    }
}

fn log_header(targets: &[String]) -> Vec<String> {
    let mut cols = vec!["step".to_string(), "epoch".into()];
    cols.extend(LossBreakdown::csv_columns(targets));
    cols.push("probe_loss".into());
    cols
}

pub fn write_log(path: &Path, targets: &[String], log: &[LogRow]) -> Result<()> {
    let tmp = path.with_extension("csv.tmp");
    {
        let mut w = csv::Writer::from_path(&tmp)?;
        w.write_record(log_header(targets))?;
        for row in log {
            let mut rec = vec![row.step.to_string(), row.epoch.to_string()];
            rec.extend(row.breakdown.csv_values(targets));
            rec.push(row.probe_loss.map(|v| v.to_string()).unwrap_or_default());
            w.write_record(rec)?;
        }
        w.flush()?;
    }
    fs::rename(tmp, path)?;
    Ok(())
}

fn parse_opt(s: &str) -> Result<Option<f64>> {
    if s.is_empty() {
        return Ok(None);
    }
    s.parse().map(Some).map_err(|_| Error::invalid(format!("bad number `{s}` in training log")))
}

pub fn read_log(path: &Path, targets: &[String]) -> Result<Vec<LogRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().map(String::from).collect();
    if header != log_header(targets) {
        return Err(Error::consistency(path, "training log columns do not match the targets"));
    }
    let nt = targets.len();
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let f = |i: usize| parse_opt(&rec[i]);
        let step = rec[0].parse().map_err(|_| Error::format(path, "bad step"))?;
        let epoch = rec[1].parse().map_err(|_| Error::format(path, "bad epoch"))?;
        let collect = |start: usize| -> Result<Vec<(String, f64)>> {
            let mut out = Vec::new();
            for (j, t) in targets.iter().enumerate() {
                if let Some(v) = f(start + j)? {
                    out.push((t.clone(), v));
                }
            }
            Ok(out)
        };
        let breakdown = LossBreakdown {
            neg_elbo: f(2)?.unwrap_or(f64::NAN),
            reconstruction: f(3)?.unwrap_or(f64::NAN),
            kl: f(4)?.unwrap_or(f64::NAN),
            mp: collect(5)?,
            cl_pos: collect(5 + nt)?,
            cl_neg: collect(5 + 2 * nt)?,
            total: f(5 + 3 * nt)?.unwrap_or(f64::NAN),
        };
        rows.push(LogRow { step, epoch, breakdown, probe_loss: f(6 + 3 * nt)? });
    }
    Ok(rows)
}

struct Run<'a> {
    config: &'a TrainingConfig,
    spec: FactorSpec,
    targets: Vec<String>,
    model: VaeModel,
    probes: ProbeBank,
    vae_opt: Adam,
    probe_opt: Adam,
    state: TrainState,
    rng: ChaCha8Rng,
    log: Vec<LogRow>,
}

impl Run<'_> {
    fn content(&self) -> CheckpointContent<'_> {
        let mut state = self.state.clone();
        state.rng = RngState::capture(&self.rng);
        CheckpointContent {
            config: serde_json::to_value(self.config).expect("config serializes"),
            spec: &self.spec,
            model: &self.model,
            probes: &self.probes,
            vae_opt: Some(&self.vae_opt),
            probe_opt: Some(&self.probe_opt),
            train_state: Some(state),
        }
    }

    fn persist(&self, dir: Option<&Path>) -> Result<()> {
        if let Some(dir) = dir {
            save_checkpoint(&dir.join(CHECKPOINT_FILE), &self.content())?;
            write_log(&dir.join(LOG_FILE), &self.targets, &self.log)?;
        }
        Ok(())
    }
}

/// Trains one model. With an output directory, a checkpoint and the log are
/// written after every epoch; a non-finite loss aborts and leaves the last
/// epoch's checkpoint in place.
pub fn train(
    config: &TrainingConfig,
    dataset: &Dataset,
    feedback: Option<&Feedback>,
    opts: &TrainOptions,
) -> Result<TrainOutcome> {
    for w in config.validate()? {
        warn!("{w}");
    }
    if dataset.is_empty() {
        return Err(Error::invalid("training split is empty"));
    }
    dataset.check_invariants()?;
    let spec = dataset.spec.clone();
    if config.model != spec.family && spec.family != Family::External {
        return Err(Error::Config(format!(
            "model preset `{}` does not match the data family `{}`",
            config.model, spec.family
        )));
    }
    let feedback = if config.variant.uses_feedback() {
        let fb = feedback.ok_or_else(|| Error::invalid("this variant needs a feedback set"))?;
        if fb.pool.spec != spec {
            return Err(Error::invalid("feedback pool and train split have different factor specs"));
        }
        fb.check_invariants()?;
        Some(fb)
    } else {
        None
    };
    let targets = spec.target_names();
    let switches = config.variant.switches();
    let layout = feedback.map(|fb| FeedbackLayout::new(fb, &targets)).transpose()?;
    let out_dir = opts.out_dir.as_deref();
    if let Some(d) = out_dir {
        fs::create_dir_all(d)?;
    }

    let ckpt_path = out_dir.map(|d| d.join(CHECKPOINT_FILE));
    let resumable = opts.resume && ckpt_path.as_ref().is_some_and(|p| p.exists());
    let mut run = if resumable {
        let path = ckpt_path.as_ref().unwrap();
        let ckpt = load_checkpoint(path)?;
        let stored: TrainingConfig = serde_json::from_value(ckpt.header.config.clone())?;
        if stored != *config {
            return Err(Error::consistency(path, "checkpoint was written with a different config"));
        }
        let state = ckpt
            .header
            .train_state
            .clone()
            .ok_or_else(|| Error::consistency(path, "checkpoint has no training state"))?;
        let model = ckpt.model()?;
        let probes = ckpt.probes()?;
        let vae_opt = ckpt.optimizer(OptimizerKind::Vae, &model.params)?.ok_or_else(|| Error::consistency(path, "no optimizer state"))?;
        let probe_opt = ckpt.optimizer(OptimizerKind::Probe, &probes.params)?.ok_or_else(|| Error::consistency(path, "no optimizer state"))?;
        let log_path = out_dir.unwrap().join(LOG_FILE);
        let mut log = if log_path.exists() { read_log(&log_path, &targets)? } else { Vec::new() };
        log.retain(|r| r.step < state.step);
        let rng = state.rng.restore()?;
        info!("resuming at epoch {} step {}", state.epoch, state.step);
        Run { config, spec: spec.clone(), targets: targets.clone(), model, probes, vae_opt, probe_opt, state, rng, log }
    } else {
        let arch = Architecture::for_family(config.model, spec.image_dims)?;
        let partition = LatentPartition::uniform(&targets, DEFAULT_BLOCK_DIMS, arch.latent_dims)?;
        let model = VaeModel::new(arch, partition, config.seed, DType::F32)?;
        let probes = ProbeBank::for_spec(&spec, &model.partition, probe_seed(config.seed), DType::F32)?;
        let vae_opt = Adam::new(&model.params, AdamConfig::with_lr(config.learning_rate))?;
        let probe_opt = Adam::new(&probes.params, AdamConfig::with_lr(config.probe_learning_rate))?;
        let rng = ChaCha8Rng::seed_from_u64(data_seed(config.seed));
        let state = TrainState { epoch: 0, step: 0, pos: 0, order: Vec::new(), rng: RngState::capture(&rng) };
        Run { config, spec: spec.clone(), targets: targets.clone(), model, probes, vae_opt, probe_opt, state, rng, log: Vec::new() }
    };

    let pixels = spec.pixels_per_image();
    let n = dataset.len();
    while run.state.epoch < config.epochs {
        if run.state.order.is_empty() {
            run.state.order = shuffled_indices(n, &mut run.rng).into_iter().map(|i| i as u32).collect();
            run.state.pos = 0;
        }
        while run.state.pos < n {
            if opts.max_steps.is_some_and(|m| run.state.step >= m) {
                run.persist(out_dir)?;
                return Ok(finish(run, false));
            }
            let end = (run.state.pos + config.batch_size).min(n);
            let rows: Vec<usize> = run.state.order[run.state.pos..end].iter().map(|&i| i as usize).collect();
            let mut bytes = Vec::with_capacity((rows.len() + 64) * pixels);
            for &r in &rows {
                bytes.extend_from_slice(dataset.image(r));
            }
            let mut terms = Vec::new();
            if let (Some(layout), Some(fb)) = (&layout, feedback) {
                let (pool_rows, t) = layout.step_batch(run.state.step, config.feedback_batch_size, rows.len());
                for &p in &pool_rows {
                    bytes.extend_from_slice(fb.pool.image(p));
                }
                terms = t;
            }
            let total_rows = bytes.len() / pixels;
            let x = images_to_tensor(&bytes, total_rows, pixels, DType::F32)?;
            let step = run.state.step;
            let diverged = |detail: String| Error::Divergence { step: step as usize, detail };

            // step B: VAE update with probes frozen
            let elbo = neg_elbo(&run.model, &x, config.weights.beta, &mut run.rng).map_err(|e| match e {
                Error::Divergence { detail, .. } => diverged(detail),
                other => other,
            })?;
            let (total, breakdown) = total_loss(&elbo, &run.model.partition, &run.probes, &terms, &config.weights, switches)?;
            if !breakdown.is_finite() {
                return Err(diverged(format!("loss breakdown {breakdown:?}")));
            }
            let grads = total.backward()?;
            run.vae_opt.step(&grads)?;

            // step A: probe update on the codes of this forward pass
            let mut probe_loss = None;
            if switches.classification {
                let owned: Vec<(Vec<usize>, Vec<usize>)> =
                    terms.iter().map(|t| t.labels.iter().map(|&(r, v)| (r, v)).unzip()).collect();
                let targets_ref: Vec<ProbeTargets> = terms
                    .iter()
                    .zip(&owned)
                    .filter(|(_, (r, _))| !r.is_empty())
                    .map(|(t, (r, v))| ProbeTargets { factor: &t.factor, rows: r, labels: v })
                    .collect();
                if !targets_ref.is_empty() {
                    let pl = probe_update_loss(&run.probes, &elbo.z, &targets_ref)?;
                    let v = crate::losses::scalar(&pl)?;
                    if !v.is_finite() {
                        return Err(diverged(format!("probe loss = {v}")));
                    }
                    run.probe_opt.step(&pl.backward()?)?;
                    probe_loss = Some(v);
                }
            }
            run.log.push(LogRow { step, epoch: run.state.epoch, breakdown, probe_loss });
            run.state.step += 1;
            run.state.pos = end;
        }
        run.state.epoch += 1;
        run.state.order.clear();
        run.state.pos = 0;
        let last = run.log.last().map(|r| r.breakdown.total).unwrap_or(f64::NAN);
        info!("epoch {}/{} done, step {}, last total {last:.3}", run.state.epoch, config.epochs, run.state.step);
        run.persist(out_dir)?;
    }
    Ok(finish(run, true))
}

fn finish(run: Run, completed: bool) -> TrainOutcome {
    TrainOutcome { model: run.model, probes: run.probes, log: run.log, spec: run.spec, completed }
}

/// Bytes of the final checkpoint a run would write; used to compare runs.
pub fn checkpoint_bytes(config: &TrainingConfig, outcome: &TrainOutcome) -> Result<Vec<u8>> {
    encode_checkpoint(&CheckpointContent {
        config: serde_json::to_value(config)?,
        spec: &outcome.spec,
        model: &outcome.model,
        probes: &outcome.probes,
        vae_opt: None,
        probe_opt: None,
        train_state: None,
    })
}
