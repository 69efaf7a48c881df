//! Aggregation of per-cell metrics and static SVG distribution plots.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::metrics::MetricsReport;
use crate::{Error, Result};

pub const METRICS_FILE: &str = "metrics.json";
pub const AGGREGATE_FILE: &str = "aggregate.csv";
pub const SUMMARY_FILE: &str = "summary.csv";

/// One (config, seed) cell found on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub config: String,
    pub seed: String,
    /// `None` for a failed cell.
    pub report: Option<MetricsReport>,
    pub error: Option<String>,
}

fn sorted_subdirs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    out.sort();
    Ok(out)
}

/// Scans `root/<config>/seed-<s>/` for metrics or error files.
pub fn collect_results(root: &Path) -> Result<Vec<ResultRow>> {
    if !root.is_dir() {
        return Err(Error::invalid(format!("results directory {} does not exist", root.display())));
    }
    let mut rows = Vec::new();
    for config_dir in sorted_subdirs(root)? {
        let config = config_dir.file_name().unwrap().to_string_lossy().into_owned();
        for cell in sorted_subdirs(&config_dir)? {
            let name = cell.file_name().unwrap().to_string_lossy().into_owned();
            let Some(seed) = name.strip_prefix("seed-") else { continue };
            let metrics = cell.join(METRICS_FILE);
            let error = cell.join("error.txt");
            if metrics.exists() {
                let report: MetricsReport = serde_json::from_slice(&fs::read(&metrics)?)
                    .map_err(|e| Error::format(&metrics, e.to_string()))?;
                rows.push(ResultRow { config: config.clone(), seed: seed.into(), report: Some(report), error: None });
            } else if error.exists() {
                let msg = fs::read_to_string(&error)?.trim().to_string();
                rows.push(ResultRow { config: config.clone(), seed: seed.into(), report: None, error: Some(msg) });
            }
        }
    }
    // numeric seed order within a config
    rows.sort_by(|a, b| {
        a.config.cmp(&b.config).then_with(|| match (a.seed.parse::<u64>(), b.seed.parse::<u64>()) {
            (Ok(x), Ok(y)) => x.cmp(&y),
            _ => a.seed.cmp(&b.seed),
        })
    });
    Ok(rows)
}

fn metric_columns(rows: &[ResultRow]) -> Vec<String> {
    let mut cols: Vec<String> = Vec::new();
    for r in rows.iter().filter_map(|r| r.report.as_ref()) {
        for (c, _) in r.flatten() {
            if !cols.contains(&c) {
                cols.push(c);
            }
        }
    }
    cols
}

/// Writes `aggregate.csv` (one row per cell) and `summary.csv` (mean and
/// population std per config and metric) into `root`. Returns the rows.
pub fn write_aggregate(root: &Path) -> Result<Vec<ResultRow>> {
    let rows = collect_results(root)?;
    let cols = metric_columns(&rows);
    let mut w = csv::Writer::from_path(root.join(AGGREGATE_FILE))?;
    let mut header = vec!["config".to_string(), "seed".into(), "status".into()];
    header.extend(cols.iter().cloned());
    w.write_record(&header)?;
    for r in &rows {
        let mut rec = vec![r.config.clone(), r.seed.clone()];
        match &r.report {
            Some(rep) => {
                rec.push("ok".into());
                let flat: BTreeMap<String, f64> = rep.flatten().into_iter().collect();
                rec.extend(cols.iter().map(|c| flat.get(c).map(|v| v.to_string()).unwrap_or_default()));
            }
            None => {
                rec.push(format!("failed: {}", r.error.clone().unwrap_or_default()));
                rec.extend(cols.iter().map(|_| String::new()));
            }
        }
        w.write_record(&rec)?;
    }
    w.flush()?;

    let mut s = csv::Writer::from_path(root.join(SUMMARY_FILE))?;
    s.write_record(["config", "metric", "n", "mean", "std"])?;
    for (config, values) in grouped(&rows) {
        for c in &cols {
            let v: Vec<f64> = values.iter().filter_map(|m| m.get(c).copied()).collect();
            if v.is_empty() {
                continue;
            }
            let (mean, std) = mean_std(&v);
            s.write_record([config.clone(), c.clone(), v.len().to_string(), mean.to_string(), std.to_string()])?;
        }
    }
    s.flush()?;
    Ok(rows)
}

fn grouped(rows: &[ResultRow]) -> Vec<(String, Vec<BTreeMap<String, f64>>)> {
    let mut out: Vec<(String, Vec<BTreeMap<String, f64>>)> = Vec::new();
    for r in rows {
        let Some(rep) = &r.report else { continue };
        let flat = rep.flatten().into_iter().collect();
        match out.iter_mut().find(|(c, _)| *c == r.config) {
            Some((_, v)) => v.push(flat),
            None => out.push((r.config.clone(), vec![flat])),
        }
    }
    out
}

pub fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Gaussian KDE on `grid`, Silverman bandwidth with a floor.
fn kde(values: &[f64], grid: &[f64], floor: f64) -> Vec<f64> {
    let (_, std) = mean_std(values);
    let h = (1.06 * std * (values.len() as f64).powf(-0.2)).max(floor);
    grid.iter()
        .map(|&g| values.iter().map(|&v| (-0.5 * ((g - v) / h).powi(2)).exp()).sum::<f64>() / (values.len() as f64 * h))
        .collect()
}

/// Violin plot: one violin per group, with the individual points overlaid.
pub fn violin_svg(title: &str, groups: &[(String, Vec<f64>)]) -> String {
    let (width, height) = (120.0 + 140.0 * groups.len() as f64, 360.0);
    let (left, top, bottom) = (70.0, 40.0, 60.0);
    let all: Vec<f64> = groups.iter().flat_map(|(_, v)| v.iter().copied()).collect();
    let (mut lo, mut hi) = all.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        (lo, hi) = (0.0, 1.0);
    }
    let pad = ((hi - lo) * 0.1).max(0.01);
    let (lo, hi) = (lo - pad, hi + pad);
    let plot_h = height - top - bottom;
    let y = |v: f64| top + plot_h * (1.0 - (v - lo) / (hi - lo));
    let mut s = String::new();
    writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{height:.0}" font-family="sans-serif" font-size="12">"#).unwrap();
    writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#).unwrap();
    writeln!(s, r#"<text x="{:.1}" y="22" text-anchor="middle" font-size="15">{}</text>"#, width / 2.0, escape(title)).unwrap();
    writeln!(s, r#"<line x1="{left}" y1="{top}" x2="{left}" y2="{:.1}" stroke="black"/>"#, height - bottom).unwrap();
    for i in 0..=4 {
        let v = lo + (hi - lo) * i as f64 / 4.0;
        writeln!(s, r##"<line x1="{:.1}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="#ddd"/>"##, left, y(v), width - 20.0, y(v)).unwrap();
        writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{v:.3}</text>"#, left - 6.0, y(v) + 4.0).unwrap();
    }
    let grid: Vec<f64> = (0..=60).map(|i| lo + (hi - lo) * i as f64 / 60.0).collect();
    for (gi, (name, values)) in groups.iter().enumerate() {
        let cx = left + 70.0 + 140.0 * gi as f64;
        if !values.is_empty() {
            let dens = kde(values, &grid, (hi - lo) * 0.03);
            let peak = dens.iter().cloned().fold(0.0, f64::max).max(1e-12);
            let mut pts = Vec::new();
            for (g, d) in grid.iter().zip(&dens) {
                pts.push(format!("{:.2},{:.2}", cx + 50.0 * d / peak, y(*g)));
            }
            for (g, d) in grid.iter().zip(&dens).rev() {
                pts.push(format!("{:.2},{:.2}", cx - 50.0 * d / peak, y(*g)));
            }
            writeln!(s, r##"<polygon points="{}" fill="#8fb3d9" fill-opacity="0.6" stroke="#2b5d8c"/>"##, pts.join(" ")).unwrap();
            for v in values {
                writeln!(s, r#"<circle cx="{cx:.2}" cy="{:.2}" r="3" fill="black"/>"#, y(*v)).unwrap();
            }
            let (mean, _) = mean_std(values);
            writeln!(s, r##"<line x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="#c0392b" stroke-width="2"/>"##, cx - 25.0, y(mean), cx + 25.0, y(mean)).unwrap();
        }
        writeln!(s, r#"<text x="{cx:.1}" y="{:.1}" text-anchor="middle">{}</text>"#, height - bottom + 20.0, escape(name)).unwrap();
    }
    s.push_str("</svg>\n");
    s
}

fn escape(t: &str) -> String {
    t.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn file_stem(metric: &str) -> String {
    metric.chars().map(|c| if c.is_ascii_alphanumeric() || c == '_' { c } else { '-' }).collect()
}

/// Aggregates `root` and writes one violin plot per metric into `root/plots/`,
/// plus a per-factor downstream accuracy panel. Errors on an empty directory.
pub fn build_report(root: &Path) -> Result<Vec<PathBuf>> {
    let rows = write_aggregate(root)?;
    if rows.iter().all(|r| r.report.is_none()) {
        return Err(Error::invalid(format!("no metrics found under {}", root.display())));
    }
    let groups = grouped(&rows);
    let cols = metric_columns(&rows);
    let plots = root.join("plots");
    fs::create_dir_all(&plots)?;
    let mut written = Vec::new();
    for c in cols.iter().filter(|c| !c.starts_with("downstream_accuracy.")) {
        let data: Vec<(String, Vec<f64>)> =
            groups.iter().map(|(g, v)| (g.clone(), v.iter().filter_map(|m| m.get(c).copied()).collect())).collect();
        let path = plots.join(format!("{}.svg", file_stem(c)));
        fs::write(&path, violin_svg(c, &data))?;
        written.push(path);
    }
    // downstream: one violin per (config, factor)
    let mut data = Vec::new();
    for c in cols.iter().filter(|c| c.starts_with("downstream_accuracy.")) {
        let factor = c.trim_start_matches("downstream_accuracy.");
        for (g, v) in &groups {
            data.push((format!("{g} / {factor}"), v.iter().filter_map(|m| m.get(c).copied()).collect()));
        }
    }
    if !data.is_empty() {
        let path = plots.join("downstream_accuracy.svg");
        fs::write(&path, violin_svg("downstream accuracy per factor", &data))?;
        written.push(path);
    }
    Ok(written)
}
