//! Dense 4-axis arrays and the numeric kernels the layers are built from.
//!
//! Layout is always `(batch, channels, rows, cols)` in row-major order with
//! the batch axis outermost. Convolutions are cross-correlations with zero
//! "same" padding (`k / 2` on each side) and odd kernel sides only;
//! [`conv2d_transpose`] is the exact adjoint of [`conv2d`] with respect to
//! its input, so it doubles as the decoder and as the input gradient.

use std::fmt;

use crate::error::{Error, Result};

/// Extent of each axis of a [`Tensor4`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Dims4 {
    pub batch: usize,
    pub channels: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Dims4 {
    pub const fn new(batch: usize, channels: usize, rows: usize, cols: usize) -> Self {
        Dims4 {
            batch,
            channels,
            rows,
            cols,
        }
    }

    pub fn len(&self) -> usize {
        self.batch * self.channels * self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Elements per batch sample.
    pub fn sample_len(&self) -> usize {
        self.channels * self.rows * self.cols
    }

    pub fn plane(&self) -> usize {
        self.rows * self.cols
    }

    fn validate(&self) -> Result<()> {
        if self.batch == 0 || self.channels == 0 || self.rows == 0 || self.cols == 0 {
            return Err(Error::config(format!("tensor dims must all be >= 1, got {self}")));
        }
        Ok(())
    }
}

impl fmt::Display for Dims4 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}x{}", self.batch, self.channels, self.rows, self.cols)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor4 {
    dims: Dims4,
    data: Vec<f64>,
}

impl Tensor4 {
    pub fn zeros(dims: Dims4) -> Result<Self> {
        dims.validate()?;
        Ok(Tensor4 {
            dims,
            data: vec![0.0; dims.len()],
        })
    }

    pub fn filled(dims: Dims4, value: f64) -> Result<Self> {
        dims.validate()?;
        Ok(Tensor4 {
            dims,
            data: vec![value; dims.len()],
        })
    }

    pub fn from_vec(dims: Dims4, data: Vec<f64>) -> Result<Self> {
        dims.validate()?;
        if data.len() != dims.len() {
            return Err(Error::config(format!(
                "tensor data length {} does not match dims {dims}",
                data.len()
            )));
        }
        Ok(Tensor4 { dims, data })
    }

    /// Zero tensor with the same dims as `self`.
    pub fn zeros_like(&self) -> Self {
        Tensor4 {
            dims: self.dims,
            data: vec![0.0; self.data.len()],
        }
    }

    pub fn dims(&self) -> Dims4 {
        self.dims
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, b: usize, c: usize, r: usize, col: usize) -> usize {
        let d = &self.dims;
        ((b * d.channels + c) * d.rows + r) * d.cols + col
    }

    #[inline]
    pub fn get(&self, b: usize, c: usize, r: usize, col: usize) -> f64 {
        self.data[self.index(b, c, r, col)]
    }

    #[inline]
    pub fn set(&mut self, b: usize, c: usize, r: usize, col: usize, v: f64) {
        let i = self.index(b, c, r, col);
        self.data[i] = v;
    }

    /// Same data viewed under new dims with an equal element count.
    pub fn reshape(self, dims: Dims4) -> Result<Self> {
        Tensor4::from_vec(dims, self.data)
    }

    /// One batch sample as its own `1 x C x H x W` tensor.
    pub fn sample(&self, b: usize) -> Tensor4 {
        let n = self.dims.sample_len();
        Tensor4 {
            dims: Dims4 {
                batch: 1,
                ..self.dims
            },
            data: self.data[b * n..(b + 1) * n].to_vec(),
        }
    }

    pub fn sample_slice(&self, b: usize) -> &[f64] {
        let n = self.dims.sample_len();
        &self.data[b * n..(b + 1) * n]
    }

    /// Concatenate tensors along the batch axis. All parts must agree on
    /// channels and spatial extent.
    pub fn stack<'a, I>(parts: I) -> Result<Tensor4>
    where
        I: IntoIterator<Item = &'a Tensor4>,
    {
        let mut iter = parts.into_iter();
        let first = iter
            .next()
            .ok_or_else(|| Error::usage("cannot stack an empty tensor list"))?;
        let mut dims = first.dims;
        let mut data = first.data.clone();
        for t in iter {
            if t.dims.channels != dims.channels || t.dims.rows != dims.rows || t.dims.cols != dims.cols {
                return Err(Error::config(format!(
                    "cannot stack {} onto {}",
                    t.dims, dims
                )));
            }
            dims.batch += t.dims.batch;
            data.extend_from_slice(&t.data);
        }
        Ok(Tensor4 { dims, data })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor4 {
        Tensor4 {
            dims: self.dims,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn dot(&self, other: &Tensor4) -> f64 {
        debug_assert_eq!(self.dims, other.dims);
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn add_assign(&mut self, other: &Tensor4) -> Result<()> {
        if self.dims != other.dims {
            return Err(Error::config(format!(
                "cannot add {} to {}",
                other.dims, self.dims
            )));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }
}

/// Convolution weights `(out_channels, in_channels, k_rows, k_cols)` plus one
/// bias per output channel.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelBank {
    out_channels: usize,
    in_channels: usize,
    k_rows: usize,
    k_cols: usize,
    pub data: Vec<f64>,
    pub bias: Vec<f64>,
}

impl KernelBank {
    pub fn zeros(out_channels: usize, in_channels: usize, k_rows: usize, k_cols: usize) -> Result<Self> {
        let len = out_channels * in_channels * k_rows * k_cols;
        Self::from_parts(
            out_channels,
            in_channels,
            k_rows,
            k_cols,
            vec![0.0; len],
            vec![0.0; out_channels],
        )
    }

    pub fn from_parts(
        out_channels: usize,
        in_channels: usize,
        k_rows: usize,
        k_cols: usize,
        data: Vec<f64>,
        bias: Vec<f64>,
    ) -> Result<Self> {
        if out_channels == 0 || in_channels == 0 || k_rows == 0 || k_cols == 0 {
            return Err(Error::config("kernel bank dims must all be >= 1"));
        }
        if k_rows % 2 == 0 || k_cols % 2 == 0 {
            return Err(Error::config(format!(
                "kernel sides must be odd, got {k_rows}x{k_cols}"
            )));
        }
        if data.len() != out_channels * in_channels * k_rows * k_cols {
            return Err(Error::config("kernel data length does not match dims"));
        }
        if bias.len() != out_channels {
            return Err(Error::config(format!(
                "bias length {} != out_channels {out_channels}",
                bias.len()
            )));
        }
        Ok(KernelBank {
            out_channels,
            in_channels,
            k_rows,
            k_cols,
            data,
            bias,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn k_rows(&self) -> usize {
        self.k_rows
    }

    pub fn k_cols(&self) -> usize {
        self.k_cols
    }

    #[inline]
    pub fn index(&self, o: usize, i: usize, ky: usize, kx: usize) -> usize {
        ((o * self.in_channels + i) * self.k_rows + ky) * self.k_cols + kx
    }

    #[inline]
    pub fn weight(&self, o: usize, i: usize, ky: usize, kx: usize) -> f64 {
        self.data[self.index(o, i, ky, kx)]
    }

    /// Rotate every kernel by 180 degrees and swap the channel axes, turning
    /// an `(out, in)` bank into an `(in, out)` one. The bias is reset to zero
    /// with the new out-channel count. Applying it twice restores the weights.
    pub fn flip_swap(&self) -> KernelBank {
        let mut data = vec![0.0; self.data.len()];
        let (kr, kc) = (self.k_rows, self.k_cols);
        for o in 0..self.out_channels {
            for i in 0..self.in_channels {
                for ky in 0..kr {
                    for kx in 0..kc {
                        let dst = ((i * self.out_channels + o) * kr + (kr - 1 - ky)) * kc + (kc - 1 - kx);
                        data[dst] = self.weight(o, i, ky, kx);
                    }
                }
            }
        }
        KernelBank {
            out_channels: self.in_channels,
            in_channels: self.out_channels,
            k_rows: kr,
            k_cols: kc,
            data,
            bias: vec![0.0; self.in_channels],
        }
    }
}

/// Output extent of a same-padded convolution along one axis.
pub fn conv_out_len(len: usize, stride: usize) -> usize {
    len.div_ceil(stride)
}

/// Range of output positions `o` for which `o * stride + k_off - pad` lands
/// inside `[0, in_len)`.
#[inline]
fn valid_range(k_off: usize, pad: usize, stride: usize, in_len: usize, out_len: usize) -> (usize, usize) {
    let lo = if pad > k_off {
        (pad - k_off).div_ceil(stride)
    } else {
        0
    };
    if in_len + pad <= k_off {
        return (0, 0);
    }
    let hi = ((in_len - 1 + pad - k_off) / stride + 1).min(out_len);
    (lo.min(hi), hi)
}

fn check_stride(stride: usize) -> Result<()> {
    if stride == 1 || stride == 2 {
        Ok(())
    } else {
        Err(Error::config(format!("stride must be 1 or 2, got {stride}")))
    }
}

/// Same-padded 2-D cross-correlation with per-output-channel bias.
pub fn conv2d(input: &Tensor4, kernels: &KernelBank, stride: usize) -> Result<Tensor4> {
    check_stride(stride)?;
    let d = input.dims();
    if d.channels != kernels.in_channels {
        return Err(Error::config(format!(
            "conv2d: input has {} channels, kernels expect {}",
            d.channels, kernels.in_channels
        )));
    }
    let (orows, ocols) = (conv_out_len(d.rows, stride), conv_out_len(d.cols, stride));
    let od = Dims4::new(d.batch, kernels.out_channels, orows, ocols);
    let mut out = Tensor4::zeros(od)?;
    let (kr, kc) = (kernels.k_rows, kernels.k_cols);
    let (pr, pc) = (kr / 2, kc / 2);
    let (iplane, oplane) = (d.plane(), od.plane());
    for b in 0..d.batch {
        for o in 0..kernels.out_channels {
            let obase = (b * od.channels + o) * oplane;
            let out_plane = &mut out.data[obase..obase + oplane];
            out_plane.fill(kernels.bias[o]);
            for i in 0..d.channels {
                let ibase = (b * d.channels + i) * iplane;
                let in_plane = &input.data[ibase..ibase + iplane];
                for ky in 0..kr {
                    let (oy_lo, oy_hi) = valid_range(ky, pr, stride, d.rows, orows);
                    for kx in 0..kc {
                        let w = kernels.weight(o, i, ky, kx);
                        if w == 0.0 {
                            continue;
                        }
                        let (ox_lo, ox_hi) = valid_range(kx, pc, stride, d.cols, ocols);
                        for oy in oy_lo..oy_hi {
                            let iy = oy * stride + ky - pr;
                            let in_row = &in_plane[iy * d.cols..(iy + 1) * d.cols];
                            let out_row = &mut out_plane[oy * ocols..(oy + 1) * ocols];
                            for ox in ox_lo..ox_hi {
                                out_row[ox] += w * in_row[ox * stride + kx - pc];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Adjoint of [`conv2d`] with respect to its input (bias not applied).
///
/// `out_spatial` picks the input extent to produce; it must map back onto
/// `features` under conv2d's shape rule for `stride`.
pub fn conv2d_transpose(
    features: &Tensor4,
    kernels: &KernelBank,
    stride: usize,
    out_spatial: (usize, usize),
) -> Result<Tensor4> {
    check_stride(stride)?;
    let d = features.dims();
    if d.channels != kernels.out_channels {
        return Err(Error::config(format!(
            "conv2d_transpose: features have {} channels, kernels produce {}",
            d.channels, kernels.out_channels
        )));
    }
    let (rows, cols) = out_spatial;
    if rows == 0 || cols == 0 || conv_out_len(rows, stride) != d.rows || conv_out_len(cols, stride) != d.cols {
        return Err(Error::config(format!(
            "conv2d_transpose: out_spatial {rows}x{cols} inconsistent with features {}x{} at stride {stride}",
            d.rows, d.cols
        )));
    }
    let od = Dims4::new(d.batch, kernels.in_channels, rows, cols);
    let mut out = Tensor4::zeros(od)?;
    let (kr, kc) = (kernels.k_rows, kernels.k_cols);
    let (pr, pc) = (kr / 2, kc / 2);
    let (fplane, oplane) = (d.plane(), od.plane());
    for b in 0..d.batch {
        for o in 0..kernels.out_channels {
            let fbase = (b * d.channels + o) * fplane;
            let f_plane = &features.data[fbase..fbase + fplane];
            for i in 0..kernels.in_channels {
                let obase = (b * od.channels + i) * oplane;
                let out_plane = &mut out.data[obase..obase + oplane];
                for ky in 0..kr {
                    let (fy_lo, fy_hi) = valid_range(ky, pr, stride, rows, d.rows);
                    for kx in 0..kc {
                        let w = kernels.weight(o, i, ky, kx);
                        if w == 0.0 {
                            continue;
                        }
                        let (fx_lo, fx_hi) = valid_range(kx, pc, stride, cols, d.cols);
                        for fy in fy_lo..fy_hi {
                            let y = fy * stride + ky - pr;
                            let f_row = &f_plane[fy * d.cols..(fy + 1) * d.cols];
                            let out_row = &mut out_plane[y * cols..(y + 1) * cols];
                            for fx in fx_lo..fx_hi {
                                out_row[fx * stride + kx - pc] += w * f_row[fx];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Gradient of `<conv2d(input, K, stride), grad_out>` with respect to the
/// weights and bias of `K`, returned as a bank shaped like `like`.
pub fn conv2d_kernel_grad(
    input: &Tensor4,
    grad_out: &Tensor4,
    like: &KernelBank,
    stride: usize,
) -> Result<KernelBank> {
    check_stride(stride)?;
    let d = input.dims();
    let gd = grad_out.dims();
    if d.channels != like.in_channels
        || gd.channels != like.out_channels
        || gd.batch != d.batch
        || gd.rows != conv_out_len(d.rows, stride)
        || gd.cols != conv_out_len(d.cols, stride)
    {
        return Err(Error::config(format!(
            "conv2d_kernel_grad: input {d} and grad {gd} do not match kernel {}x{}",
            like.out_channels, like.in_channels
        )));
    }
    let mut grad = KernelBank::zeros(like.out_channels, like.in_channels, like.k_rows, like.k_cols)?;
    let (kr, kc) = (like.k_rows, like.k_cols);
    let (pr, pc) = (kr / 2, kc / 2);
    let (iplane, gplane) = (d.plane(), gd.plane());
    for b in 0..d.batch {
        for o in 0..like.out_channels {
            let gbase = (b * gd.channels + o) * gplane;
            let g_plane = &grad_out.data[gbase..gbase + gplane];
            grad.bias[o] += g_plane.iter().sum::<f64>();
            for i in 0..d.channels {
                let ibase = (b * d.channels + i) * iplane;
                let in_plane = &input.data[ibase..ibase + iplane];
                for ky in 0..kr {
                    let (oy_lo, oy_hi) = valid_range(ky, pr, stride, d.rows, gd.rows);
                    for kx in 0..kc {
                        let (ox_lo, ox_hi) = valid_range(kx, pc, stride, d.cols, gd.cols);
                        let mut acc = 0.0;
                        for oy in oy_lo..oy_hi {
                            let iy = oy * stride + ky - pr;
                            let in_row = &in_plane[iy * d.cols..(iy + 1) * d.cols];
                            let g_row = &g_plane[oy * gd.cols..(oy + 1) * gd.cols];
                            for ox in ox_lo..ox_hi {
                                acc += g_row[ox] * in_row[ox * stride + kx - pc];
                            }
                        }
                        let idx = grad.index(o, i, ky, kx);
                        grad.data[idx] += acc;
                    }
                }
            }
        }
    }
    Ok(grad)
}

/// Record of one 2x2 max-pool: the pooled input and, per output cell, the
/// `(row, col)` offset of its winner within the window.
#[derive(Clone, Debug, PartialEq)]
pub struct PoolTrace {
    pre_pool: Tensor4,
    argmax: Vec<(u8, u8)>,
    pooled: Dims4,
}

impl PoolTrace {
    pub fn pre_pool(&self) -> &Tensor4 {
        &self.pre_pool
    }

    /// Winner offsets in output-cell order (same layout as the pooled tensor).
    pub fn argmax(&self) -> &[(u8, u8)] {
        &self.argmax
    }

    pub fn pooled_dims(&self) -> Dims4 {
        self.pooled
    }

    /// Per-window maximum-magnitude value of the pre-pool input (sign kept),
    /// laid out like the pooled tensor. Ties go to the first cell in
    /// row-major window order.
    pub fn window_absmax(&self) -> Tensor4 {
        let pd = self.pooled;
        let d = self.pre_pool.dims();
        let mut out = Tensor4::zeros(pd).expect("pooled dims are valid");
        for b in 0..pd.batch {
            for c in 0..pd.channels {
                for oy in 0..pd.rows {
                    for ox in 0..pd.cols {
                        let mut best = 0.0f64;
                        let mut seen = false;
                        for dy in 0..2 {
                            for dx in 0..2 {
                                let (y, x) = (2 * oy + dy, 2 * ox + dx);
                                if y >= d.rows || x >= d.cols {
                                    continue;
                                }
                                let v = self.pre_pool.get(b, c, y, x);
                                if !seen || v.abs() > best.abs() {
                                    best = v;
                                    seen = true;
                                }
                            }
                        }
                        out.set(b, c, oy, ox, best);
                    }
                }
            }
        }
        out
    }
}

/// 2x2 max-pool, stride 2, ceil mode: edge windows are truncated when the
/// input side is odd.
pub fn maxpool2(input: &Tensor4) -> (Tensor4, PoolTrace) {
    let d = input.dims();
    let pd = Dims4::new(d.batch, d.channels, d.rows.div_ceil(2), d.cols.div_ceil(2));
    let mut out = Tensor4::zeros(pd).expect("pooled dims are valid");
    let mut argmax = Vec::with_capacity(pd.len());
    for b in 0..d.batch {
        for c in 0..d.channels {
            for oy in 0..pd.rows {
                for ox in 0..pd.cols {
                    let mut best = f64::NEG_INFINITY;
                    let mut arg = (0u8, 0u8);
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let (y, x) = (2 * oy + dy, 2 * ox + dx);
                            if y >= d.rows || x >= d.cols {
                                continue;
                            }
                            let v = input.get(b, c, y, x);
                            if v > best {
                                best = v;
                                arg = (dy as u8, dx as u8);
                            }
                        }
                    }
                    out.set(b, c, oy, ox, best);
                    argmax.push(arg);
                }
            }
        }
    }
    let trace = PoolTrace {
        pre_pool: input.clone(),
        argmax,
        pooled: pd,
    };
    (out, trace)
}

/// Route a pooled-shape gradient back to each window's recorded winner.
pub fn maxpool2_backward(trace: &PoolTrace, grad_out: &Tensor4) -> Result<Tensor4> {
    if grad_out.dims() != trace.pooled {
        return Err(Error::config(format!(
            "maxpool backward: grad {} does not match pooled {}",
            grad_out.dims(),
            trace.pooled
        )));
    }
    let mut grad = trace.pre_pool.zeros_like();
    let pd = trace.pooled;
    let mut cell = 0;
    for b in 0..pd.batch {
        for c in 0..pd.channels {
            for oy in 0..pd.rows {
                for ox in 0..pd.cols {
                    let (dy, dx) = trace.argmax[cell];
                    let (y, x) = (2 * oy + dy as usize, 2 * ox + dx as usize);
                    let i = grad.index(b, c, y, x);
                    grad.data[i] += grad_out.data[cell];
                    cell += 1;
                }
            }
        }
    }
    Ok(grad)
}

/// Fill every cell of each pooling window with the given per-window value,
/// producing a tensor with the trace's pre-pool dims.
pub fn unpool_fill(values: &Tensor4, trace: &PoolTrace) -> Result<Tensor4> {
    if values.dims() != trace.pooled {
        return Err(Error::config(format!(
            "unpool: values {} do not match pooled {}",
            values.dims(),
            trace.pooled
        )));
    }
    let d = trace.pre_pool.dims();
    let mut out = trace.pre_pool.zeros_like();
    for b in 0..d.batch {
        for c in 0..d.channels {
            for y in 0..d.rows {
                for x in 0..d.cols {
                    out.set(b, c, y, x, values.get(b, c, y / 2, x / 2));
                }
            }
        }
    }
    Ok(out)
}

/// Upsample a pooling window by filling all its cells with the window's
/// value of largest magnitude, sign preserved.
pub fn unpool_absmax(trace: &PoolTrace) -> Tensor4 {
    unpool_fill(&trace.window_absmax(), trace).expect("window_absmax has pooled dims")
}

pub fn tanh_map(input: &Tensor4) -> Tensor4 {
    input.map(f64::tanh)
}

/// Derivative of tanh expressed through its output: `1 - y^2`.
pub fn tanh_grad(output: &Tensor4) -> Tensor4 {
    output.map(|y| 1.0 - y * y)
}
