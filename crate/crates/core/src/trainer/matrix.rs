//! Config × seed experiment matrix with per-cell result directories.

use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use serde::{Deserialize, Serialize};

use super::{train, TrainOptions, TrainingConfig};
use crate::datasets::{Dataset, Feedback};
use crate::metrics::{evaluate, EvalData, EvalOptions, MetricsReport};
use crate::report::{write_aggregate, METRICS_FILE};
use crate::Result;

#[derive(Debug, Clone, PartialEq)]
pub struct MatrixCell {
    /// Directory-safe label of the configuration.
    pub name: String,
    /// Seed is overridden per cell.
    pub config: TrainingConfig,
}

pub struct MatrixData<'a> {
    pub train: &'a Dataset,
    pub feedback: Option<&'a Feedback>,
    pub eval: EvalData<'a>,
    pub eval_options: EvalOptions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellStatus {
    Completed,
    /// Results already existed; nothing was rerun.
    Skipped,
    Failed(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellOutcome {
    pub config: String,
    pub seed: u64,
    pub dir: PathBuf,
    pub status: CellStatus,
    pub report: Option<MetricsReport>,
}

pub fn cell_dir(root: &Path, config: &str, seed: u64) -> PathBuf {
    root.join(config).join(format!("seed-{seed}"))
}

fn run_cell(cell: &MatrixCell, seed: u64, data: &MatrixData, dir: &Path) -> Result<MetricsReport> {
    let mut config = cell.config.clone();
    config.seed = seed;
    fs::create_dir_all(dir)?;
    fs::write(dir.join("config.toml"), config.to_toml())?;
    let feedback = if config.variant.uses_feedback() { data.feedback } else { None };
    let opts = TrainOptions { out_dir: Some(dir.to_path_buf()), resume: true, max_steps: None };
    let outcome = train(&config, data.train, feedback, &opts)?;
    let mut eval_options = data.eval_options;
    eval_options.seed = seed;
    let report = evaluate(&outcome.model, &outcome.spec, &data.eval, &eval_options)?;
    let tmp = dir.join("metrics.json.tmp");
    fs::write(&tmp, serde_json::to_vec_pretty(&report)?)?;
    fs::rename(tmp, dir.join(METRICS_FILE))?;
    Ok(report)
}

/// Trains and scores every (config, seed) cell under `root/<config>/seed-<seed>/`.
/// Cells with an existing metrics file are skipped; failures are written to
/// `error.txt` in the cell and do not stop the matrix. Finishes by rewriting
/// the aggregate CSV.
pub fn run_matrix(cells: &[MatrixCell], seeds: &[u64], data: &MatrixData, root: &Path) -> Result<Vec<CellOutcome>> {
    fs::create_dir_all(root)?;
    let mut out = Vec::new();
    for cell in cells {
        for &seed in seeds {
            let dir = cell_dir(root, &cell.name, seed);
            let metrics_path = dir.join(METRICS_FILE);
            let (status, report) = if metrics_path.exists() {
                let report: MetricsReport = serde_json::from_slice(&fs::read(&metrics_path)?)?;
                (CellStatus::Skipped, Some(report))
            } else {
                info!("matrix cell {} seed {seed}", cell.name);
                match run_cell(cell, seed, data, &dir) {
                    Ok(r) => {
                        let _ = fs::remove_file(dir.join("error.txt"));
                        (CellStatus::Completed, Some(r))
                    }
                    Err(e) => {
                        warn!("cell {} seed {seed} failed: {e}", cell.name);
                        fs::create_dir_all(&dir)?;
                        fs::write(dir.join("error.txt"), format!("{}: {e}\n", e.kind()))?;
                        (CellStatus::Failed(e.to_string()), None)
                    }
                }
            };
            out.push(CellOutcome { config: cell.name.clone(), seed, dir, status, report });
        }
    }
    write_aggregate(root)?;
    Ok(out)
}
