//! Convolutional VAE with a partitioned latent code, and the linear probe bank.

pub mod checkpoint;
mod patch;

use std::ops::Range;

use candle_core::{DType, Device, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::datasets::{Family, FactorSpec};
use crate::{Error, Result};

pub use checkpoint::{
    load_checkpoint, save_checkpoint, Checkpoint, CheckpointContent, OptimizerKind, RngState, TrainState,
    CHECKPOINT_VERSION,
};
pub use patch::PatchTable;

pub const LOGVAR_MIN: f64 = -8.0;
pub const LOGVAR_MAX: f64 = 8.0;

/// Dims per target factor block.
pub const DEFAULT_BLOCK_DIMS: usize = 4;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatentBlock {
    pub factor: String,
    pub start: usize,
    pub len: usize,
}

impl LatentBlock {
    pub fn range(&self) -> Range<usize> {
        self.start..self.start + self.len
    }
}

/// One contiguous block of latent dims per target factor, followed by the
/// nuisance block.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatentPartition {
    pub total_dims: usize,
    pub blocks: Vec<LatentBlock>,
}

impl LatentPartition {
    pub fn new(total_dims: usize, blocks: Vec<LatentBlock>) -> Result<Self> {
        let p = LatentPartition { total_dims, blocks };
        p.validate()?;
        Ok(p)
    }

    /// Blocks of `block_dims` for each target in order, the rest nuisance.
    pub fn uniform(targets: &[String], block_dims: usize, total_dims: usize) -> Result<Self> {
        let blocks = targets
            .iter()
            .enumerate()
            .map(|(i, t)| LatentBlock { factor: t.clone(), start: i * block_dims, len: block_dims })
            .collect();
        Self::new(total_dims, blocks)
    }

    pub fn validate(&self) -> Result<()> {
        if self.total_dims < self.blocks.len() {
            return Err(Error::invalid("latent dims must be at least the number of target factors"));
        }
        let mut used = vec![false; self.total_dims];
        for b in &self.blocks {
            if b.len == 0 || b.start + b.len > self.total_dims {
                return Err(Error::invalid(format!("block `{}` out of range", b.factor)));
            }
            for d in b.range() {
                if used[d] {
                    return Err(Error::invalid(format!("block `{}` overlaps another block", b.factor)));
                }
                used[d] = true;
            }
        }
        for (i, b) in self.blocks.iter().enumerate() {
            if self.blocks[..i].iter().any(|o| o.factor == b.factor) {
                return Err(Error::invalid(format!("duplicate block for `{}`", b.factor)));
            }
        }
        Ok(())
    }

    pub fn block(&self, factor: &str) -> Result<&LatentBlock> {
        self.blocks
            .iter()
            .find(|b| b.factor == factor)
            .ok_or_else(|| Error::invalid(format!("factor `{factor}` has no latent block")))
    }

    /// Dims not assigned to any target block.
    pub fn nuisance(&self) -> Vec<usize> {
        (0..self.total_dims).filter(|d| !self.blocks.iter().any(|b| b.range().contains(d))).collect()
    }

    /// Every dim outside the block of `factor`, ascending.
    pub fn complement(&self, factor: &str) -> Result<Vec<usize>> {
        let r = self.block(factor)?.range();
        Ok((0..self.total_dims).filter(|d| !r.contains(d)).collect())
    }

    /// Splits a code into (block-major) pieces: each target block in order, then
    /// the nuisance dims.
    pub fn split(&self, z: &[f64]) -> Vec<Vec<f64>> {
        let mut parts: Vec<Vec<f64>> = self.blocks.iter().map(|b| z[b.range()].to_vec()).collect();
        parts.push(self.nuisance().into_iter().map(|d| z[d]).collect());
        parts
    }

    /// Inverse of [`split`](Self::split).
    pub fn join(&self, parts: &[Vec<f64>]) -> Vec<f64> {
        let mut z = vec![0.0; self.total_dims];
        for (b, part) in self.blocks.iter().zip(parts) {
            z[b.range()].copy_from_slice(part);
        }
        if let Some(nuisance) = parts.get(self.blocks.len()) {
            for (d, v) in self.nuisance().into_iter().zip(nuisance) {
                z[d] = *v;
            }
        }
        z
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

const fn conv(out_channels: usize, kernel: usize, stride: usize, padding: usize) -> ConvSpec {
    ConvSpec { out_channels, kernel, stride, padding }
}

/// Encoder conv stack (mirrored by the decoder) plus latent size.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub image_dims: (usize, usize, usize),
    pub conv: Vec<ConvSpec>,
    pub latent_dims: usize,
}

impl Architecture {
    pub fn for_family(family: Family, image_dims: (usize, usize, usize)) -> Result<Self> {
        let (conv, latent_dims) = match family {
            Family::Glyphs10 => (
                vec![conv(16, 4, 2, 1), conv(32, 4, 2, 1), conv(32, 3, 2, 1), conv(64, 4, 1, 0)],
                16,
            ),
            Family::Sprites => (
                vec![conv(16, 4, 2, 1), conv(32, 4, 2, 1), conv(32, 4, 2, 1), conv(64, 4, 2, 1)],
                20,
            ),
            Family::Scene => (
                vec![conv(16, 4, 2, 1), conv(32, 4, 2, 1), conv(32, 4, 2, 1), conv(64, 4, 2, 1)],
                50,
            ),
            Family::External => {
                return Err(Error::invalid("no architecture preset for external data; supply one"))
            }
        };
        let arch = Architecture { image_dims, conv, latent_dims };
        arch.layer_tables()?;
        Ok(arch)
    }

    pub fn for_spec(spec: &FactorSpec) -> Result<Self> {
        Self::for_family(spec.family, spec.image_dims)
    }

    fn layer_tables(&self) -> Result<Vec<PatchTable>> {
        let (mut h, mut w, mut c) = self.image_dims;
        let mut out = Vec::new();
        for l in &self.conv {
            if h + 2 * l.padding < l.kernel || w + 2 * l.padding < l.kernel || l.stride == 0 {
                return Err(Error::invalid("conv stack does not fit the image size"));
            }
            let t = PatchTable::conv(h, w, c, l.kernel, l.stride, l.padding);
            // transposed conv must reproduce the input size exactly
            if (t.out_h - 1) * l.stride + l.kernel != h + 2 * l.padding
                || (t.out_w - 1) * l.stride + l.kernel != w + 2 * l.padding
            {
                return Err(Error::invalid(format!(
                    "conv layer {l:?} on {h}x{w} is not exactly invertible by its transpose"
                )));
            }
            h = t.out_h;
            w = t.out_w;
            c = l.out_channels;
            out.push(t);
        }
        Ok(out)
    }

    pub fn feature_len(&self) -> usize {
        let tables = self.layer_tables().expect("validated architecture");
        let last = tables.last().expect("at least one conv layer");
        last.out_positions() * self.conv.last().map(|l| l.out_channels).unwrap_or(0)
    }

    pub fn pixels(&self) -> usize {
        let (h, w, c) = self.image_dims;
        h * w * c
    }
}

/// Ordered named parameters.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    pub entries: Vec<(String, Var)>,
}

impl ParamSet {
    pub fn get(&self, name: &str) -> Option<&Var> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, v)| v)
    }

    pub fn vars(&self) -> impl Iterator<Item = &Var> {
        self.entries.iter().map(|(_, v)| v)
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|(_, v)| v.elem_count()).sum()
    }

    fn push_uniform(
        &mut self,
        name: String,
        shape: &[usize],
        bound: f64,
        rng: &mut ChaCha8Rng,
        dtype: DType,
    ) -> Result<Var> {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
        let t = Tensor::from_vec(data, shape, &Device::Cpu)?.to_dtype(dtype)?;
        let v = Var::from_tensor(&t)?;
        self.entries.push((name, v.clone()));
        Ok(v)
    }
}

struct Dense {
    w: Var,
    b: Var,
}

impl Dense {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        x.matmul(self.w.as_tensor())?.broadcast_add(self.b.as_tensor())
    }
}

struct ConvLayer {
    table: PatchTable,
    /// (taps·c_in, c_out)
    w: Var,
    /// c_out
    b: Var,
    out_channels: usize,
}

struct DeconvLayer {
    table: PatchTable,
    /// (c_in, taps·c_out) where c_out = table.channels
    w: Var,
    b: Var,
}

/// Gaussian encoder q(Z|X) and Bernoulli decoder over a partitioned latent.
pub struct VaeModel {
    pub arch: Architecture,
    pub partition: LatentPartition,
    pub params: ParamSet,
    dtype: DType,
    enc: Vec<ConvLayer>,
    enc_head: Dense,
    dec_fc: Dense,
    dec: Vec<DeconvLayer>,
}

fn fan_in_bound(fan_in: usize) -> f64 {
    1.0 / (fan_in as f64).sqrt()
}

impl VaeModel {
    pub fn new(arch: Architecture, partition: LatentPartition, seed: u64, dtype: DType) -> Result<Self> {
        partition.validate()?;
        if partition.total_dims != arch.latent_dims {
            return Err(Error::invalid(format!(
                "partition covers {} dims but architecture has {}",
                partition.total_dims, arch.latent_dims
            )));
        }
        let tables = arch.layer_tables()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::default();
        let m = arch.latent_dims;

        let mut enc = Vec::new();
        for (i, (t, l)) in tables.iter().zip(&arch.conv).enumerate() {
            let fan_in = t.patch_len();
            let bound = fan_in_bound(fan_in);
            let w = params.push_uniform(format!("enc.conv{i}.w"), &[fan_in, l.out_channels], bound, &mut rng, dtype)?;
            let b = params.push_uniform(format!("enc.conv{i}.b"), &[l.out_channels], bound, &mut rng, dtype)?;
            enc.push(ConvLayer { table: t.clone(), w, b, out_channels: l.out_channels });
        }
        let feat = arch.feature_len();
        let bound = fan_in_bound(feat);
        let enc_head = Dense {
            w: params.push_uniform("enc.head.w".into(), &[feat, 2 * m], bound, &mut rng, dtype)?,
            b: params.push_uniform("enc.head.b".into(), &[2 * m], bound, &mut rng, dtype)?,
        };
        let bound = fan_in_bound(m);
        let dec_fc = Dense {
            w: params.push_uniform("dec.fc.w".into(), &[m, feat], bound, &mut rng, dtype)?,
            b: params.push_uniform("dec.fc.b".into(), &[feat], bound, &mut rng, dtype)?,
        };
        let mut dec = Vec::new();
        for (i, (t, l)) in tables.iter().zip(&arch.conv).enumerate().rev() {
            let fan_in = l.out_channels * t.taps / (l.stride * l.stride).max(1);
            let bound = fan_in_bound(fan_in.max(1));
            let w = params.push_uniform(format!("dec.deconv{i}.w"), &[l.out_channels, t.patch_len()], bound, &mut rng, dtype)?;
            let b = params.push_uniform(format!("dec.deconv{i}.b"), &[t.channels], bound, &mut rng, dtype)?;
            dec.push(DeconvLayer { table: t.clone(), w, b });
        }
        Ok(VaeModel { arch, partition, params, dtype, enc, enc_head, dec_fc, dec })
    }

    /// Default model for a dataset family: 4-dim blocks per target, the rest nuisance.
    pub fn for_spec(spec: &FactorSpec, seed: u64, dtype: DType) -> Result<Self> {
        let arch = Architecture::for_spec(spec)?;
        let partition = LatentPartition::uniform(&spec.target_names(), DEFAULT_BLOCK_DIMS, arch.latent_dims)?;
        Self::new(arch, partition, seed, dtype)
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn latent_dims(&self) -> usize {
        self.arch.latent_dims
    }

    /// Images `(B, H·W·C)` in [0, 1] → (means, logvars), each `(B, m)`.
    /// Logvars are clamped to [`LOGVAR_MIN`], [`LOGVAR_MAX`].
    pub fn encode(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let (batch, p) = x.dims2().map_err(|_| Error::invalid("encoder input must be (B, pixels)"))?;
        if p != self.arch.pixels() {
            return Err(Error::invalid(format!(
                "encoder expects {} values per image, got {p}",
                self.arch.pixels()
            )));
        }
        let mut h = x.to_dtype(self.dtype)?;
        for layer in &self.enc {
            let cols = layer.table.gather(&h)?;
            let y = cols.matmul(layer.w.as_tensor())?.broadcast_add(layer.b.as_tensor())?.relu()?;
            h = y.reshape((batch, layer.table.out_positions() * layer.out_channels))?;
        }
        let out = self.enc_head.forward(&h)?;
        let m = self.latent_dims();
        let means = out.narrow(1, 0, m)?;
        let logvars = out.narrow(1, m, m)?.clamp(LOGVAR_MIN, LOGVAR_MAX)?;
        Ok((means, logvars))
    }

    /// Latents `(B, m)` → per-pixel Bernoulli logits `(B, H·W·C)`.
    pub fn decode_logits(&self, z: &Tensor) -> Result<Tensor> {
        let (batch, m) = z.dims2().map_err(|_| Error::invalid("decoder input must be (B, m)"))?;
        if m != self.latent_dims() {
            return Err(Error::invalid(format!("decoder expects {} latent dims, got {m}", self.latent_dims())));
        }
        let mut h = self.dec_fc.forward(&z.to_dtype(self.dtype)?)?.relu()?;
        let last = self.dec.len() - 1;
        for (i, layer) in self.dec.iter().enumerate() {
            let t = &layer.table;
            let c_in = layer.w.dim(0)?;
            let rows = h.reshape((batch * t.out_positions(), c_in))?;
            let cols = rows.matmul(layer.w.as_tensor())?.reshape((batch, ()))?;
            let y = t
                .scatter(&cols)?
                .reshape((batch, t.in_h * t.in_w, t.channels))?
                .broadcast_add(layer.b.as_tensor())?
                .reshape((batch, t.in_len()))?;
            h = if i == last { y } else { y.relu()? };
        }
        Ok(h)
    }

    /// Per-pixel success probabilities in (0, 1).
    pub fn decode(&self, z: &Tensor) -> Result<Tensor> {
        Ok(candle_core::Tensor::exp(&self.decode_logits(z)?.neg()?)?
            .affine(1.0, 1.0)?
            .recip()?)
    }

    pub fn encode_bytes(&self, images: &[u8], n: usize) -> Result<(Tensor, Tensor)> {
        self.encode(&images_to_tensor(images, n, self.arch.pixels(), self.dtype)?)
    }

    /// Posterior means of a byte image batch, as rows of f64, in chunks.
    pub fn posterior_means(&self, images: &[u8], n: usize) -> Result<Vec<Vec<f64>>> {
        let p = self.arch.pixels();
        let mut out = Vec::with_capacity(n);
        for start in (0..n).step_by(256) {
            let len = 256.min(n - start);
            let (mu, _) = self.encode_bytes(&images[start * p..(start + len) * p], len)?;
            out.extend(mu.to_dtype(DType::F64)?.to_vec2::<f64>()?);
        }
        Ok(out)
    }

    /// Decodes f64 latent rows into byte images.
    pub fn decode_to_bytes(&self, z: &[Vec<f64>]) -> Result<Vec<u8>> {
        let m = self.latent_dims();
        let flat: Vec<f64> = z.iter().flatten().copied().collect();
        let zt = Tensor::from_vec(flat, (z.len(), m), &Device::Cpu)?;
        let probs = self.decode(&zt)?.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
        Ok(probs.into_iter().map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8).collect())
    }
}

/// `z = mean + exp(logvar / 2) · ε`, ε ~ N(0, I) drawn from `rng`.
pub fn reparameterize(means: &Tensor, logvars: &Tensor, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    if means.dims() != logvars.dims() {
        return Err(Error::invalid("means and logvars differ in shape"));
    }
    let eps = standard_normal(means.dims(), means.dtype(), rng)?;
    Ok((means + (logvars * 0.5)?.exp()?.mul(&eps)?)?)
}

pub fn standard_normal(shape: &[usize], dtype: DType, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    Ok(Tensor::from_vec(data, shape, &Device::Cpu)?.to_dtype(dtype)?)
}

pub fn images_to_tensor(bytes: &[u8], n: usize, pixels: usize, dtype: DType) -> Result<Tensor> {
    if bytes.len() != n * pixels {
        return Err(Error::invalid(format!("expected {} bytes for {n} images, got {}", n * pixels, bytes.len())));
    }
    let data: Vec<f32> = bytes.iter().map(|&b| b as f32 / 255.0).collect();
    Ok(Tensor::from_vec(data, (n, pixels), &Device::Cpu)?.to_dtype(dtype)?)
}

/// Positive probe `Z_i → S_i` and negative probe `Z_{\i} → S_i` for one factor.
pub struct ProbePair {
    pub factor: String,
    pub cardinality: usize,
    pub block: Range<usize>,
    pub pos_w: Var,
    pub pos_b: Var,
    pub neg_w: Var,
    pub neg_b: Var,
}

impl ProbePair {
    fn complement(&self, z: &Tensor) -> candle_core::Result<Tensor> {
        let m = z.dim(1)?;
        let mut parts = Vec::new();
        if self.block.start > 0 {
            parts.push(z.narrow(1, 0, self.block.start)?);
        }
        if self.block.end < m {
            parts.push(z.narrow(1, self.block.end, m - self.block.end)?);
        }
        Tensor::cat(&parts, 1)
    }

    /// Logits of the positive probe; probe weights detached when `frozen`.
    pub fn positive_logits(&self, z: &Tensor, frozen: bool) -> Result<Tensor> {
        let x = z.narrow(1, self.block.start, self.block.len())?;
        Ok(linear(&x, &self.pos_w, &self.pos_b, frozen)?)
    }

    pub fn negative_logits(&self, z: &Tensor, frozen: bool) -> Result<Tensor> {
        let x = self.complement(z)?;
        Ok(linear(&x, &self.neg_w, &self.neg_b, frozen)?)
    }
}

fn linear(x: &Tensor, w: &Var, b: &Var, frozen: bool) -> candle_core::Result<Tensor> {
    let (w, b) = if frozen {
        (w.as_tensor().detach(), b.as_tensor().detach())
    } else {
        (w.as_tensor().clone(), b.as_tensor().clone())
    };
    x.matmul(&w)?.broadcast_add(&b)
}

/// One probe pair per target factor.
pub struct ProbeBank {
    pub probes: Vec<ProbePair>,
    pub params: ParamSet,
}

impl ProbeBank {
    pub fn new(partition: &LatentPartition, cardinalities: &[(String, usize)], seed: u64, dtype: DType) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::default();
        let m = partition.total_dims;
        let mut probes = Vec::new();
        for (factor, card) in cardinalities {
            let block = partition.block(factor)?.range();
            let k = block.len();
            let pb = fan_in_bound(k);
            let nb = fan_in_bound(m - k);
            let pos_w = params.push_uniform(format!("probe.{factor}.pos.w"), &[k, *card], pb, &mut rng, dtype)?;
            let pos_b = params.push_uniform(format!("probe.{factor}.pos.b"), &[*card], pb, &mut rng, dtype)?;
            let neg_w = params.push_uniform(format!("probe.{factor}.neg.w"), &[m - k, *card], nb, &mut rng, dtype)?;
            let neg_b = params.push_uniform(format!("probe.{factor}.neg.b"), &[*card], nb, &mut rng, dtype)?;
            probes.push(ProbePair { factor: factor.clone(), cardinality: *card, block, pos_w, pos_b, neg_w, neg_b });
        }
        Ok(ProbeBank { probes, params })
    }

    pub fn for_spec(spec: &FactorSpec, partition: &LatentPartition, seed: u64, dtype: DType) -> Result<Self> {
        let cards: Vec<(String, usize)> = spec
            .factors
            .iter()
            .filter(|f| f.is_target)
            .map(|f| (f.name.clone(), f.cardinality))
            .collect();
        Self::new(partition, &cards, seed, dtype)
    }

    /// Sets every probe weight and bias to 0, giving uniform predictions.
    pub fn zero_init(&self) -> Result<()> {
        for v in self.params.vars() {
            v.set(&v.zeros_like()?)?;
        }
        Ok(())
    }

    pub fn probe(&self, factor: &str) -> Result<&ProbePair> {
        self.probes
            .iter()
            .find(|p| p.factor == factor)
            .ok_or_else(|| Error::invalid(format!("no probe for factor `{factor}`")))
    }
}
