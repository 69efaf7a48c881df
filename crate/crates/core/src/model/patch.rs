//! Patch gather (im2col) and scatter-add (col2im) over NHWC activations.
//!
//! Convolutions are a gather followed by a matmul; transposed convolutions a
//! matmul followed by a scatter-add over the same table. Both directions are
//! each other's adjoint, which gives the backward passes.

use std::sync::Arc;

use candle_core::{CpuStorage, CustomOp1, Layout, Result, Shape, Tensor, WithDType};

/// For every output position and kernel tap, the input pixel it reads
/// (`u32::MAX` for zero padding).
#[derive(Debug, Clone)]
pub struct PatchTable {
    src: Arc<Vec<u32>>,
    pub in_h: usize,
    pub in_w: usize,
    pub channels: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub taps: usize,
}

const PAD: u32 = u32::MAX;

impl PatchTable {
    /// Table of a `kernel`×`kernel` convolution with the given stride and
    /// zero padding over an `in_h`×`in_w`×`channels` input.
    pub fn conv(
        in_h: usize,
        in_w: usize,
        channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Self {
        assert!(in_h + 2 * padding >= kernel && in_w + 2 * padding >= kernel && stride > 0);
        let out_h = (in_h + 2 * padding - kernel) / stride + 1;
        let out_w = (in_w + 2 * padding - kernel) / stride + 1;
        let mut src = Vec::with_capacity(out_h * out_w * kernel * kernel);
        for oy in 0..out_h {
            for ox in 0..out_w {
                for ky in 0..kernel {
                    for kx in 0..kernel {
                        let iy = (oy * stride + ky) as isize - padding as isize;
                        let ix = (ox * stride + kx) as isize - padding as isize;
                        if iy < 0 || ix < 0 || iy >= in_h as isize || ix >= in_w as isize {
                            src.push(PAD);
                        } else {
                            src.push((iy as usize * in_w + ix as usize) as u32);
                        }
                    }
                }
            }
        }
        PatchTable {
            src: Arc::new(src),
            in_h,
            in_w,
            channels,
            out_h,
            out_w,
            taps: kernel * kernel,
        }
    }

    pub fn in_len(&self) -> usize {
        self.in_h * self.in_w * self.channels
    }

    pub fn patch_len(&self) -> usize {
        self.taps * self.channels
    }

    pub fn out_positions(&self) -> usize {
        self.out_h * self.out_w
    }

    /// `(B, in_len)` → `(B·out_positions, patch_len)`.
    pub fn gather(&self, x: &Tensor) -> Result<Tensor> {
        x.contiguous()?.apply_op1(Im2Col(self.clone()))
    }

    /// `(B, out_positions·patch_len)` → `(B, in_len)`, summing overlapping taps.
    pub fn scatter(&self, cols: &Tensor) -> Result<Tensor> {
        cols.contiguous()?.apply_op1(Col2Im(self.clone()))
    }

    fn gather_slice<T: WithDType>(&self, x: &[T], batch: usize) -> Vec<T> {
        let c = self.channels;
        let in_len = self.in_len();
        let row = self.src.len() * c;
        let mut out = vec![T::zero(); batch * row];
        for b in 0..batch {
            let xb = &x[b * in_len..(b + 1) * in_len];
            let ob = &mut out[b * row..(b + 1) * row];
            for (j, &s) in self.src.iter().enumerate() {
                if s != PAD {
                    let s = s as usize * c;
                    ob[j * c..(j + 1) * c].copy_from_slice(&xb[s..s + c]);
                }
            }
        }
        out
    }

    fn scatter_slice<T: WithDType>(&self, g: &[T], batch: usize) -> Vec<T> {
        let c = self.channels;
        let in_len = self.in_len();
        let row = self.src.len() * c;
        let mut out = vec![T::zero(); batch * in_len];
        for b in 0..batch {
            let gb = &g[b * row..(b + 1) * row];
            let ob = &mut out[b * in_len..(b + 1) * in_len];
            for (j, &s) in self.src.iter().enumerate() {
                if s != PAD {
                    let s = s as usize * c;
                    for (o, v) in ob[s..s + c].iter_mut().zip(&gb[j * c..(j + 1) * c]) {
                        *o += *v;
                    }
                }
            }
        }
        out
    }
}

fn contiguous<'a, T>(data: &'a [T], layout: &Layout, op: &'static str) -> Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((a, b)) => Ok(&data[a..b]),
        None => Err(candle_core::Error::RequiresContiguous { op }.bt()),
    }
}

struct Im2Col(PatchTable);
struct Col2Im(PatchTable);

impl CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> Result<(CpuStorage, Shape)> {
        let t = &self.0;
        let batch = layout.dims()[0];
        if layout.shape().elem_count() != batch * t.in_len() {
            candle_core::bail!("im2col: expected {} values per row", t.in_len());
        }
        let shape = Shape::from((batch * t.out_positions(), t.patch_len()));
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(t.gather_slice(contiguous(v, layout, "im2col")?, batch)),
            CpuStorage::F64(v) => CpuStorage::F64(t.gather_slice(contiguous(v, layout, "im2col")?, batch)),
            _ => candle_core::bail!("im2col: only f32 and f64 are supported"),
        };
        Ok((out, shape))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad: &Tensor) -> Result<Option<Tensor>> {
        let batch = arg.dim(0)?;
        let g = grad.reshape((batch, ()))?;
        Ok(Some(self.0.scatter(&g)?.reshape(arg.shape())?))
    }
}

impl CustomOp1 for Col2Im {
    fn name(&self) -> &'static str {
        "col2im"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> Result<(CpuStorage, Shape)> {
        let t = &self.0;
        let batch = layout.dims()[0];
        if layout.shape().elem_count() != batch * t.out_positions() * t.patch_len() {
            candle_core::bail!("col2im: unexpected input size");
        }
        let shape = Shape::from((batch, t.in_len()));
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(t.scatter_slice(contiguous(v, layout, "col2im")?, batch)),
            CpuStorage::F64(v) => CpuStorage::F64(t.scatter_slice(contiguous(v, layout, "col2im")?, batch)),
            _ => candle_core::bail!("col2im: only f32 and f64 are supported"),
        };
        Ok((out, shape))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad: &Tensor) -> Result<Option<Tensor>> {
        let batch = arg.dim(0)?;
        let g = self.0.gather(grad)?;
        Ok(Some(g.reshape((batch, ()))?.reshape(arg.shape())?))
    }
}
