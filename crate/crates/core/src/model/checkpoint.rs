//! Versioned checkpoint container.
//!
//! Layout: 8-byte magic, u32 version, u64 header length, JSON header, then the
//! raw little-endian arrays in header order.

use std::fs;
use std::io::Write;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use super::{Architecture, LatentPartition, ParamSet, ProbeBank, VaeModel};
use crate::datasets::FactorSpec;
use crate::optim::{Adam, AdamConfig};
use crate::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"DBVAECKP";
const PREAMBLE: usize = 8 + 4 + 8;

/// Exact position of a ChaCha8 stream.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    /// u128 word position, decimal.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState { seed: rng.get_seed(), stream: rng.get_stream(), word_pos: rng.get_word_pos().to_string() }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let pos: u128 = self
            .word_pos
            .parse()
            .map_err(|_| Error::invalid(format!("bad rng word position `{}`", self.word_pos)))?;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

/// Where a training run stands; enough to continue it bit-identically.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainState {
    /// Epochs fully completed.
    pub epoch: usize,
    pub step: u64,
    /// Next batch start inside the current epoch order.
    pub pos: usize,
    pub order: Vec<u32>,
    pub rng: RngState,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub version: u32,
    pub config: serde_json::Value,
    pub spec: FactorSpec,
    pub arch: Architecture,
    pub partition: LatentPartition,
    pub probe_cardinalities: Vec<(String, usize)>,
    pub vae_adam: Option<(AdamConfig, u64)>,
    pub probe_adam: Option<(AdamConfig, u64)>,
    pub train_state: Option<TrainState>,
    arrays: Vec<ArrayEntry>,
}

/// What goes into a checkpoint.
pub struct CheckpointContent<'a> {
    pub config: serde_json::Value,
    pub spec: &'a FactorSpec,
    pub model: &'a VaeModel,
    pub probes: &'a ProbeBank,
    pub vae_opt: Option<&'a Adam>,
    pub probe_opt: Option<&'a Adam>,
    pub train_state: Option<TrainState>,
}

/// A loaded checkpoint: header plus every named array.
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub arrays: Vec<(String, Tensor)>,
}

fn tensor_bytes(t: &Tensor) -> Result<(String, Vec<u8>)> {
    let flat = t.flatten_all()?;
    Ok(match t.dtype() {
        DType::F32 => ("f32".into(), flat.to_vec1::<f32>()?.iter().flat_map(|v| v.to_le_bytes()).collect()),
        DType::F64 => ("f64".into(), flat.to_vec1::<f64>()?.iter().flat_map(|v| v.to_le_bytes()).collect()),
        other => return Err(Error::invalid(format!("checkpoint: unsupported dtype {other:?}"))),
    })
}

fn collect_arrays(c: &CheckpointContent) -> Vec<(String, Tensor)> {
    let mut out = Vec::new();
    let mut add_set = |prefix: &str, set: &ParamSet| {
        for (n, v) in &set.entries {
            out.push((format!("{prefix}.{n}"), v.as_tensor().clone()));
        }
    };
    add_set("model", &c.model.params);
    add_set("probes", &c.probes.params);
    for (prefix, opt) in [("adam_vae", c.vae_opt), ("adam_probe", c.probe_opt)] {
        if let Some(opt) = opt {
            for (n, m, v) in opt.moments() {
                out.push((format!("{prefix}.m.{n}"), m.clone()));
                out.push((format!("{prefix}.v.{n}"), v.clone()));
            }
        }
    }
    out
}

/// Serializes to bytes; deterministic given the content.
pub fn encode_checkpoint(c: &CheckpointContent) -> Result<Vec<u8>> {
    let arrays = collect_arrays(c);
    let mut entries = Vec::with_capacity(arrays.len());
    let mut payload = Vec::new();
    for (name, t) in &arrays {
        let (dtype, bytes) = tensor_bytes(t)?;
        entries.push(ArrayEntry { name: name.clone(), dtype, shape: t.dims().to_vec(), offset: payload.len() as u64 });
        payload.extend_from_slice(&bytes);
    }
    let header = CheckpointHeader {
        version: CHECKPOINT_VERSION,
        config: c.config.clone(),
        spec: c.spec.clone(),
        arch: c.model.arch.clone(),
        partition: c.model.partition.clone(),
        probe_cardinalities: c.probes.probes.iter().map(|p| (p.factor.clone(), p.cardinality)).collect(),
        vae_adam: c.vae_opt.map(|o| (o.config, o.t)),
        probe_adam: c.probe_opt.map(|o| (o.config, o.t)),
        train_state: c.train_state.clone(),
        arrays: entries,
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(PREAMBLE + json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    Ok(out)
}

/// Writes atomically: a crash leaves either the old file or the new one.
pub fn save_checkpoint(path: &Path, c: &CheckpointContent) -> Result<()> {
    let bytes = encode_checkpoint(c)?;
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path)?;
    decode_checkpoint(&bytes).map_err(|e| match e {
        Error::Format { detail, .. } => Error::format(path, detail),
        other => other,
    })
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let bad = |d: &str| Error::format(Path::new("<checkpoint>"), d);
    if bytes.len() < PREAMBLE || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint (bad magic)"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version { found: version, expected: CHECKPOINT_VERSION });
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    if bytes.len() - PREAMBLE < hlen {
        return Err(bad("truncated header"));
    }
    let header: CheckpointHeader = serde_json::from_slice(&bytes[PREAMBLE..PREAMBLE + hlen])?;
    if header.version != CHECKPOINT_VERSION {
        return Err(Error::Version { found: header.version, expected: CHECKPOINT_VERSION });
    }
    let payload = &bytes[PREAMBLE + hlen..];
    let mut arrays = Vec::with_capacity(header.arrays.len());
    for e in &header.arrays {
        let n: usize = e.shape.iter().product();
        let width = match e.dtype.as_str() {
            "f32" => 4,
            "f64" => 8,
            _ => return Err(bad(&format!("array `{}` has unknown dtype `{}`", e.name, e.dtype))),
        };
        let start = e.offset as usize;
        let end = start.checked_add(n * width).filter(|&end| end <= payload.len());
        let Some(end) = end else {
            return Err(bad(&format!("array `{}` runs past the end of the file", e.name)));
        };
        let raw = &payload[start..end];
        let t = if width == 4 {
            let v: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            Tensor::from_vec(v, e.shape.as_slice(), &Device::Cpu)?
        } else {
            let v: Vec<f64> = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            Tensor::from_vec(v, e.shape.as_slice(), &Device::Cpu)?
        };
        arrays.push((e.name.clone(), t));
    }
    Ok(Checkpoint { header, arrays })
}

fn assign(set: &ParamSet, prefix: &str, arrays: &[(String, Tensor)]) -> Result<()> {
    for (n, var) in &set.entries {
        let key = format!("{prefix}.{n}");
        let t = arrays
            .iter()
            .find(|(k, _)| *k == key)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::invalid(format!("checkpoint lacks `{key}`")))?;
        if t.dims() != var.dims() {
            return Err(Error::invalid(format!("checkpoint `{key}` has shape {:?}, expected {:?}", t.dims(), var.dims())));
        }
        var.set(&t.to_dtype(var.dtype())?)?;
    }
    Ok(())
}

impl Checkpoint {
    fn param_dtype(&self) -> DType {
        self.arrays
            .iter()
            .find(|(n, _)| n.starts_with("model."))
            .map(|(_, t)| t.dtype())
            .unwrap_or(DType::F32)
    }

    pub fn array(&self, name: &str) -> Option<&Tensor> {
        self.arrays.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn model(&self) -> Result<VaeModel> {
        let h = &self.header;
        let model = VaeModel::new(h.arch.clone(), h.partition.clone(), 0, self.param_dtype())?;
        assign(&model.params, "model", &self.arrays)?;
        Ok(model)
    }

    pub fn probes(&self) -> Result<ProbeBank> {
        let h = &self.header;
        let bank = ProbeBank::new(&h.partition, &h.probe_cardinalities, 0, self.param_dtype())?;
        assign(&bank.params, "probes", &self.arrays)?;
        Ok(bank)
    }

    /// Rebuilds an optimizer over `params` with the stored moments and step count.
    pub fn optimizer(&self, which: OptimizerKind, params: &ParamSet) -> Result<Option<Adam>> {
        let (stored, prefix) = match which {
            OptimizerKind::Vae => (self.header.vae_adam, "adam_vae"),
            OptimizerKind::Probe => (self.header.probe_adam, "adam_probe"),
        };
        let Some((config, t)) = stored else { return Ok(None) };
        let mut opt = Adam::new(params, config)?;
        opt.t = t;
        for (n, _) in &params.entries {
            let m = self.array(&format!("{prefix}.m.{n}"));
            let v = self.array(&format!("{prefix}.v.{n}"));
            match (m, v) {
                (Some(m), Some(v)) => opt.set_moments(n, m.clone(), v.clone())?,
                _ => return Err(Error::invalid(format!("checkpoint lacks optimizer moments for `{n}`"))),
            }
        }
        Ok(Some(opt))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Vae,
    Probe,
}
