//! On-disk layout of datasets and feedback sets.
//!
//! A dataset directory holds `meta.json`, `images.bin` and `factors.csv`.
//! `images.bin` is the 8-byte magic `DBVAE001`, then N, H, W, C as
//! little-endian u32, then N·H·W·C bytes in row-major order. A feedback
//! directory is a dataset directory (the image pool) plus `pairs.csv`,
//! `labels.csv` and `feedback.json`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{BiasRule, Dataset, FactorLabel, FactorSpec, Feedback, FeedbackSet, MatchPair, SplitTag};
use crate::{Error, Result};

pub const IMAGES_MAGIC: &[u8; 8] = b"DBVAE001";
const HEADER_LEN: usize = 8 + 4 * 4;

#[derive(Debug, Serialize, Deserialize)]
struct Meta {
    spec: FactorSpec,
    rule: Option<BiasRule>,
    seed: u64,
    split_tag: SplitTag,
    n: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct FeedbackMeta {
    source_dataset_id: String,
    pairs: usize,
    labels: usize,
}

pub fn write_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let n = ds.len();
    let meta = Meta {
        spec: ds.spec.clone(),
        rule: ds.rule.clone(),
        seed: ds.seed,
        split_tag: ds.split_tag,
        n,
    };
    fs::write(dir.join("meta.json"), serde_json::to_string_pretty(&meta)?)?;

    let (h, w, c) = ds.spec.image_dims;
    let mut bytes = Vec::with_capacity(HEADER_LEN + ds.images.len());
    bytes.extend_from_slice(IMAGES_MAGIC);
    for v in [n, h, w, c] {
        let v = u32::try_from(v).map_err(|_| Error::invalid("dimension exceeds u32"))?;
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    bytes.extend_from_slice(&ds.images);
    fs::write(dir.join("images.bin"), bytes)?;

    let mut wtr = csv::Writer::from_path(dir.join("factors.csv"))?;
    wtr.write_record(ds.spec.factors.iter().map(|f| f.name.as_str()))?;
    for row in 0..n {
        wtr.write_record(ds.factor_row(row).iter().map(|v| v.to_string()))?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let meta_path = dir.join("meta.json");
    let meta: Meta = serde_json::from_slice(&fs::read(&meta_path)?)
        .map_err(|e| Error::format(&meta_path, e.to_string()))?;
    meta.spec.validate()?;

    let img_path = dir.join("images.bin");
    let bytes = fs::read(&img_path)?;
    if bytes.len() < 8 || &bytes[..8] != IMAGES_MAGIC {
        return Err(Error::format(&img_path, "bad magic (expected DBVAE001)"));
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::format(&img_path, "truncated header"));
    }
    let word = |i: usize| {
        let o = 8 + 4 * i;
        u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4-byte slice")) as usize
    };
    let (n, h, w, c) = (word(0), word(1), word(2), word(3));
    let payload = bytes.len() - HEADER_LEN;
    let expected = n
        .checked_mul(h * w * c)
        .ok_or_else(|| Error::format(&img_path, "header dimensions overflow"))?;
    if payload < expected {
        return Err(Error::format(
            &img_path,
            format!("truncated payload: header promises {expected} bytes, found {payload}"),
        ));
    }
    if payload > expected {
        return Err(Error::format(
            &img_path,
            format!("payload size mismatch: header promises {expected} bytes, found {payload}"),
        ));
    }
    if (h, w, c) != meta.spec.image_dims {
        return Err(Error::consistency(
            &img_path,
            format!("image dims {:?} disagree with meta.json {:?}", (h, w, c), meta.spec.image_dims),
        ));
    }
    if n != meta.n {
        return Err(Error::consistency(
            &img_path,
            format!("header N = {n} but meta.json says {}", meta.n),
        ));
    }

    let fac_path = dir.join("factors.csv");
    let mut rdr = csv::Reader::from_path(&fac_path)?;
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    let names: Vec<&str> = meta.spec.factors.iter().map(|f| f.name.as_str()).collect();
    if header != names {
        return Err(Error::consistency(
            &fac_path,
            format!("header {header:?} does not match factor names {names:?}"),
        ));
    }
    let mut factors = Vec::with_capacity(n * names.len());
    let mut rows = 0usize;
    for record in rdr.records() {
        let record = record?;
        for (i, field) in record.iter().enumerate() {
            let v: u32 = field
                .trim()
                .parse()
                .map_err(|_| Error::format(&fac_path, format!("row {rows}: `{field}` is not an integer")))?;
            if v as usize >= meta.spec.factors[i].cardinality {
                return Err(Error::consistency(
                    &fac_path,
                    format!("row {rows}: value {v} out of range for `{}`", names[i]),
                ));
            }
            factors.push(v);
        }
        rows += 1;
    }
    if rows != n {
        return Err(Error::consistency(
            &fac_path,
            format!("{rows} factor rows but images.bin header says N = {n}"),
        ));
    }

    Ok(Dataset {
        spec: meta.spec,
        images: bytes[HEADER_LEN..].to_vec(),
        factors,
        split_tag: meta.split_tag,
        rule: meta.rule,
        seed: meta.seed,
    })
}

pub fn write_feedback(fb: &Feedback, dir: &Path) -> Result<()> {
    write_dataset(&fb.pool, dir)?;
    let mut wtr = csv::Writer::from_path(dir.join("pairs.csv"))?;
    wtr.write_record(["idx_a", "idx_b", "shared_factor"])?;
    for p in &fb.set.pairs {
        wtr.write_record([p.idx_a.to_string(), p.idx_b.to_string(), p.shared_factor.clone()])?;
    }
    wtr.flush()?;
    let mut wtr = csv::Writer::from_path(dir.join("labels.csv"))?;
    wtr.write_record(["idx", "factor", "value"])?;
    for l in &fb.set.labels {
        wtr.write_record([l.idx.to_string(), l.factor.clone(), l.value.to_string()])?;
    }
    wtr.flush()?;
    let meta = FeedbackMeta {
        source_dataset_id: fb.set.source_dataset_id.clone(),
        pairs: fb.set.pairs.len(),
        labels: fb.set.labels.len(),
    };
    fs::write(dir.join("feedback.json"), serde_json::to_string_pretty(&meta)?)?;
    Ok(())
}

pub fn read_feedback(dir: &Path) -> Result<Feedback> {
    let pool = read_dataset(dir)?;
    let meta_path = dir.join("feedback.json");
    let meta: FeedbackMeta = serde_json::from_slice(&fs::read(&meta_path)?)
        .map_err(|e| Error::format(&meta_path, e.to_string()))?;

    let mut pairs = Vec::new();
    let pairs_path = dir.join("pairs.csv");
    for record in csv::Reader::from_path(&pairs_path)?.deserialize() {
        let p: MatchPair = record?;
        pairs.push(p);
    }
    let mut labels = Vec::new();
    for record in csv::Reader::from_path(dir.join("labels.csv"))?.deserialize() {
        let l: FactorLabel = record?;
        labels.push(l);
    }
    if pairs.len() != meta.pairs || labels.len() != meta.labels {
        return Err(Error::consistency(
            &meta_path,
            "pair/label counts disagree with feedback.json",
        ));
    }
    let fb = Feedback {
        set: FeedbackSet { pairs, labels, source_dataset_id: meta.source_dataset_id },
        pool,
    };
    fb.check_invariants()
        .map_err(|e| Error::consistency(&pairs_path, e.to_string()))?;
    Ok(fb)
}
