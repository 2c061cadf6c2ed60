//! Parameterized layers with forward, backward, and parameter-gradient
//! contracts.
//!
//! Every activation travels as a [`Tensor4`]; dense-style layers flatten
//! each sample and emit `(batch, neurons, 1, 1)`.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{
    conv2d, conv2d_kernel_grad, conv2d_transpose, maxpool2, maxpool2_backward, tanh_grad, tanh_map, Dims4,
    KernelBank, PoolTrace, Tensor4,
};

pub mod gradcheck;

/// Glorot-uniform half-width.
pub fn glorot_limit(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvTanh {
    pub bank: KernelBank,
    pub stride: usize,
}

impl ConvTanh {
    pub fn new_random<R: Rng>(
        maps: usize,
        in_channels: usize,
        filter: usize,
        stride: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let mut bank = KernelBank::zeros(maps, in_channels, filter, filter)?;
        let s = glorot_limit(in_channels * filter * filter, maps * filter * filter);
        bank.data.iter_mut().for_each(|w| *w = rng.gen_range(-s..=s));
        Ok(ConvTanh { bank, stride })
    }

    pub fn forward(&self, input: &Tensor4) -> Result<Tensor4> {
        Ok(tanh_map(&conv2d(input, &self.bank, self.stride)?))
    }

    pub fn backward(&self, input: &Tensor4, output: &Tensor4, grad_out: &Tensor4) -> Result<(Tensor4, ParamGrads)> {
        check_grad_shape(output, grad_out)?;
        let mut pre = tanh_grad(output);
        for (p, g) in pre.data_mut().iter_mut().zip(grad_out.data()) {
            *p *= g;
        }
        let kg = conv2d_kernel_grad(input, &pre, &self.bank, self.stride)?;
        let d = input.dims();
        let grad_in = conv2d_transpose(&pre, &self.bank, self.stride, (d.rows, d.cols))?;
        Ok((grad_in, ParamGrads(vec![kg.data, kg.bias])))
    }

    /// Parameter gradients only, skipping the input gradient.
    pub fn param_grads(&self, input: &Tensor4, output: &Tensor4, grad_out: &Tensor4) -> Result<ParamGrads> {
        check_grad_shape(output, grad_out)?;
        let mut pre = tanh_grad(output);
        for (p, g) in pre.data_mut().iter_mut().zip(grad_out.data()) {
            *p *= g;
        }
        let kg = conv2d_kernel_grad(input, &pre, &self.bank, self.stride)?;
        Ok(ParamGrads(vec![kg.data, kg.bias]))
    }
}

/// Fully connected layer: `out x in` row-major weights plus bias.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub out: usize,
    pub inp: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn zeros(out: usize, inp: usize) -> Result<Self> {
        if out == 0 || inp == 0 {
            return Err(Error::config(format!("dense layer needs positive widths, got {out}x{inp}")));
        }
        Ok(Dense {
            out,
            inp,
            weights: vec![0.0; out * inp],
            bias: vec![0.0; out],
        })
    }

    pub fn new_random<R: Rng>(out: usize, inp: usize, rng: &mut R) -> Result<Self> {
        let mut d = Dense::zeros(out, inp)?;
        let s = glorot_limit(inp, out);
        d.weights.iter_mut().for_each(|w| *w = rng.gen_range(-s..=s));
        Ok(d)
    }

    pub fn from_parts(out: usize, inp: usize, weights: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        if weights.len() != out * inp || bias.len() != out {
            return Err(Error::config("dense parameter lengths do not match widths"));
        }
        Ok(Dense { out, inp, weights, bias })
    }

    /// Affine map `W x + b` per sample, no activation.
    pub fn affine(&self, input: &Tensor4) -> Result<Tensor4> {
        let d = input.dims();
        if d.sample_len() != self.inp {
            return Err(Error::config(format!(
                "dense layer expects {} inputs per sample, got {} ({d})",
                self.inp,
                d.sample_len()
            )));
        }
        let mut out = Vec::with_capacity(d.batch * self.out);
        for b in 0..d.batch {
            let x = input.sample_slice(b);
            for j in 0..self.out {
                let row = &self.weights[j * self.inp..(j + 1) * self.inp];
                let z: f64 = row.iter().zip(x).map(|(w, v)| w * v).sum();
                out.push(z + self.bias[j]);
            }
        }
        Tensor4::from_vec(Dims4::new(d.batch, self.out, 1, 1), out)
    }

    pub fn forward_tanh(&self, input: &Tensor4) -> Result<Tensor4> {
        Ok(tanh_map(&self.affine(input)?))
    }

    /// Backpropagate a gradient on the affine output `z = W x + b`.
    pub fn backward_affine(&self, input: &Tensor4, grad_z: &Tensor4) -> Result<(Tensor4, ParamGrads)> {
        let d = input.dims();
        if grad_z.dims() != Dims4::new(d.batch, self.out, 1, 1) {
            return Err(Error::config(format!(
                "dense backward: grad {} does not match output width {}",
                grad_z.dims(),
                self.out
            )));
        }
        let mut gw = vec![0.0; self.weights.len()];
        let mut gb = vec![0.0; self.out];
        let mut gx = vec![0.0; d.len()];
        for b in 0..d.batch {
            let x = input.sample_slice(b);
            let gz = grad_z.sample_slice(b);
            let gxs = &mut gx[b * self.inp..(b + 1) * self.inp];
            for j in 0..self.out {
                let g = gz[j];
                if g == 0.0 {
                    continue;
                }
                gb[j] += g;
                let row = &self.weights[j * self.inp..(j + 1) * self.inp];
                let grow = &mut gw[j * self.inp..(j + 1) * self.inp];
                for k in 0..self.inp {
                    grow[k] += g * x[k];
                    gxs[k] += g * row[k];
                }
            }
        }
        Ok((Tensor4::from_vec(d, gx)?, ParamGrads(vec![gw, gb])))
    }

    pub fn backward_tanh(&self, input: &Tensor4, output: &Tensor4, grad_out: &Tensor4) -> Result<(Tensor4, ParamGrads)> {
        check_grad_shape(output, grad_out)?;
        let mut gz = tanh_grad(output);
        for (p, g) in gz.data_mut().iter_mut().zip(grad_out.data()) {
            *p *= g;
        }
        self.backward_affine(input, &gz)
    }
}

/// Where the hyperlayer reads each convolutional scale.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TapPoint {
    PostPool,
    PrePool,
}

/// Multi-scale fusion layer: one dense tanh block per tapped scale, sized in
/// proportion to that scale's importance weight, concatenated in tap order.
#[derive(Clone, Debug, PartialEq)]
pub struct Hyper {
    pub weights: Vec<u32>,
    pub out_neurons: usize,
    pub blocks: Vec<Dense>,
}

/// Split `out_neurons` across taps in proportion to `weights`, rounding by
/// largest remainder (ties to the lower index) so the blocks sum exactly.
pub fn hyper_block_sizes(out_neurons: usize, weights: &[u32]) -> Result<Vec<usize>> {
    if weights.is_empty() {
        return Err(Error::config("hyperlayer needs at least one tap weight"));
    }
    if weights.contains(&0) {
        return Err(Error::config("hyperlayer weights must be >= 1"));
    }
    let total: u64 = weights.iter().map(|&w| w as u64).sum();
    let n = out_neurons as u64;
    let mut sizes: Vec<usize> = weights.iter().map(|&w| (n * w as u64 / total) as usize).collect();
    let assigned: usize = sizes.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by_key(|&i| (std::cmp::Reverse(n * weights[i] as u64 % total), i));
    for &i in order.iter().take(out_neurons - assigned) {
        sizes[i] += 1;
    }
    Ok(sizes)
}

impl Hyper {
    /// `tap_lens` are the flattened per-sample sizes of each tapped scale.
    pub fn new_random<R: Rng>(weights: Vec<u32>, out_neurons: usize, tap_lens: &[usize], rng: &mut R) -> Result<Self> {
        if tap_lens.len() != weights.len() {
            return Err(Error::config(format!(
                "hyperlayer has {} weights but {} taps",
                weights.len(),
                tap_lens.len()
            )));
        }
        let sizes = hyper_block_sizes(out_neurons, &weights)?;
        let mut blocks = Vec::with_capacity(sizes.len());
        for (i, (&size, &inp)) in sizes.iter().zip(tap_lens).enumerate() {
            if size == 0 {
                return Err(Error::config(format!(
                    "hyperlayer block {i} would be empty ({out_neurons} neurons, weights {weights:?})"
                )));
            }
            blocks.push(Dense::new_random(size, inp, rng)?);
        }
        Ok(Hyper {
            weights,
            out_neurons,
            blocks,
        })
    }

    pub fn block_sizes(&self) -> Vec<usize> {
        self.blocks.iter().map(|b| b.out).collect()
    }

    /// Fuse taps into `(batch, out_neurons, 1, 1)`. Also returns each block's
    /// activation for the backward pass.
    pub fn forward(&self, taps: &[Tensor4]) -> Result<(Tensor4, Vec<Tensor4>)> {
        if taps.len() != self.blocks.len() {
            return Err(Error::config(format!(
                "hyperlayer expects {} taps, got {}",
                self.blocks.len(),
                taps.len()
            )));
        }
        let batch = taps[0].dims().batch;
        let mut parts = Vec::with_capacity(taps.len());
        for (tap, block) in taps.iter().zip(&self.blocks) {
            if tap.dims().batch != batch {
                return Err(Error::config("hyperlayer taps disagree on batch size"));
            }
            parts.push(block.forward_tanh(tap)?);
        }
        let mut out = Vec::with_capacity(batch * self.out_neurons);
        for b in 0..batch {
            for p in &parts {
                out.extend_from_slice(p.sample_slice(b));
            }
        }
        Ok((Tensor4::from_vec(Dims4::new(batch, self.out_neurons, 1, 1), out)?, parts))
    }

    pub fn backward(&self, taps: &[Tensor4], parts: &[Tensor4], grad_out: &Tensor4) -> Result<(Vec<Tensor4>, ParamGrads)> {
        let batch = grad_out.dims().batch;
        if grad_out.dims() != Dims4::new(batch, self.out_neurons, 1, 1) {
            return Err(Error::config("hyperlayer backward: gradient shape mismatch"));
        }
        let mut tap_grads = Vec::with_capacity(taps.len());
        let mut grads = Vec::with_capacity(2 * taps.len());
        let mut offset = 0;
        for ((tap, part), block) in taps.iter().zip(parts).zip(&self.blocks) {
            let mut g = Vec::with_capacity(batch * block.out);
            for b in 0..batch {
                let s = grad_out.sample_slice(b);
                g.extend_from_slice(&s[offset..offset + block.out]);
            }
            let g = Tensor4::from_vec(Dims4::new(batch, block.out, 1, 1), g)?;
            let (gx, pg) = block.backward_tanh(tap, part, &g)?;
            tap_grads.push(gx.reshape(tap.dims())?);
            grads.extend(pg.0);
            offset += block.out;
        }
        Ok((tap_grads, ParamGrads(grads)))
    }
}

/// One entry of a layer stack.
#[derive(Clone, Debug, PartialEq)]
pub enum LayerKind {
    ConvTanh(ConvTanh),
    MaxPool,
    Hyper(Hyper),
    Dense(Dense),
    /// Affine logits followed by softmax.
    SoftmaxOut(Dense),
}

/// Values cached by a forward pass for the matching backward pass.
#[derive(Clone, Debug)]
pub enum Cache {
    Conv { input: Tensor4, output: Tensor4 },
    Pool(PoolTrace),
    Dense { input: Tensor4, output: Tensor4 },
    Hyper { taps: Vec<Tensor4>, parts: Vec<Tensor4> },
    Softmax { input: Tensor4, probs: Tensor4 },
}

/// Parameter gradients in the layer's declared parameter order.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamGrads(pub Vec<Vec<f64>>);

impl ParamGrads {
    pub fn add_assign(&mut self, other: &ParamGrads) {
        if self.0.is_empty() {
            self.0 = other.0.clone();
            return;
        }
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }
}

fn check_grad_shape(output: &Tensor4, grad: &Tensor4) -> Result<()> {
    if output.dims() != grad.dims() {
        return Err(Error::config(format!(
            "gradient {} does not match layer output {}",
            grad.dims(),
            output.dims()
        )));
    }
    Ok(())
}

/// Row-wise softmax over `(batch, n, 1, 1)` logits with max subtraction.
pub fn softmax(logits: &Tensor4) -> Tensor4 {
    let d = logits.dims();
    let n = d.sample_len();
    let mut out = logits.clone();
    for row in out.data_mut().chunks_mut(n) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

impl LayerKind {
    pub fn name(&self) -> &'static str {
        match self {
            LayerKind::ConvTanh(_) => "conv",
            LayerKind::MaxPool => "maxpool",
            LayerKind::Hyper(_) => "hyper",
            LayerKind::Dense(_) => "dense",
            LayerKind::SoftmaxOut(_) => "softmax",
        }
    }

    pub fn params(&self) -> Vec<&[f64]> {
        match self {
            LayerKind::ConvTanh(c) => vec![&c.bank.data, &c.bank.bias],
            LayerKind::MaxPool => vec![],
            LayerKind::Hyper(h) => h.blocks.iter().flat_map(|b| [&b.weights[..], &b.bias[..]]).collect(),
            LayerKind::Dense(d) | LayerKind::SoftmaxOut(d) => vec![&d.weights, &d.bias],
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        match self {
            LayerKind::ConvTanh(c) => vec![&mut c.bank.data, &mut c.bank.bias],
            LayerKind::MaxPool => vec![],
            LayerKind::Hyper(h) => h
                .blocks
                .iter_mut()
                .flat_map(|b| [&mut b.weights[..], &mut b.bias[..]])
                .collect(),
            LayerKind::Dense(d) | LayerKind::SoftmaxOut(d) => vec![&mut d.weights, &mut d.bias],
        }
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    /// Single-input forward. The hyperlayer takes several taps; use
    /// [`hyper_forward`] for it.
    pub fn forward(&self, input: &Tensor4) -> Result<(Tensor4, Cache)> {
        match self {
            LayerKind::ConvTanh(c) => {
                let out = c.forward(input)?;
                Ok((
                    out.clone(),
                    Cache::Conv {
                        input: input.clone(),
                        output: out,
                    },
                ))
            }
            LayerKind::MaxPool => {
                let (out, trace) = maxpool2(input);
                Ok((out, Cache::Pool(trace)))
            }
            LayerKind::Dense(d) => {
                let out = d.forward_tanh(input)?;
                Ok((
                    out.clone(),
                    Cache::Dense {
                        input: input.clone(),
                        output: out,
                    },
                ))
            }
            LayerKind::SoftmaxOut(d) => {
                let probs = softmax(&d.affine(input)?);
                Ok((
                    probs.clone(),
                    Cache::Softmax {
                        input: input.clone(),
                        probs,
                    },
                ))
            }
            LayerKind::Hyper(_) => Err(Error::usage("hyperlayer consumes taps; call hyper_forward")),
        }
    }

    /// Backward for single-input layers: `(grad wrt input, param grads)`.
    pub fn backward(&self, cache: &Cache, grad_out: &Tensor4) -> Result<(Tensor4, ParamGrads)> {
        match (self, cache) {
            (LayerKind::ConvTanh(c), Cache::Conv { input, output }) => c.backward(input, output, grad_out),
            (LayerKind::MaxPool, Cache::Pool(trace)) => Ok((maxpool2_backward(trace, grad_out)?, ParamGrads::default())),
            (LayerKind::Dense(d), Cache::Dense { input, output }) => d.backward_tanh(input, output, grad_out),
            (LayerKind::SoftmaxOut(d), Cache::Softmax { input, probs }) => {
                check_grad_shape(probs, grad_out)?;
                // dz = p * (g - <g, p>) per sample
                let n = probs.dims().sample_len();
                let mut gz = probs.clone();
                for (prow, grow) in gz.data_mut().chunks_mut(n).zip(grad_out.data().chunks(n)) {
                    let dot: f64 = prow.iter().zip(grow).map(|(p, g)| p * g).sum();
                    for (p, g) in prow.iter_mut().zip(grow) {
                        *p *= g - dot;
                    }
                }
                d.backward_affine(input, &gz)
            }
            (LayerKind::Hyper(_), _) => Err(Error::usage("hyperlayer backward needs taps; call hyper_backward")),
            _ => Err(Error::usage(format!("cache does not belong to a {} layer", self.name()))),
        }
    }
}

pub fn layer_forward(layer: &LayerKind, input: &Tensor4) -> Result<(Tensor4, Cache)> {
    layer.forward(input)
}

pub fn layer_backward(layer: &LayerKind, cache: Option<&Cache>, grad_out: &Tensor4) -> Result<(Tensor4, ParamGrads)> {
    let cache = cache.ok_or_else(|| Error::usage(format!("{} backward called without a forward cache", layer.name())))?;
    layer.backward(cache, grad_out)
}

/// Run the hyperlayer over its taps.
pub fn hyper_forward(taps: &[Tensor4], hyper: &Hyper) -> Result<(Tensor4, Cache)> {
    let (out, parts) = hyper.forward(taps)?;
    Ok((
        out,
        Cache::Hyper {
            taps: taps.to_vec(),
            parts,
        },
    ))
}

pub fn hyper_backward(hyper: &Hyper, cache: &Cache, grad_out: &Tensor4) -> Result<(Vec<Tensor4>, ParamGrads)> {
    match cache {
        Cache::Hyper { taps, parts } => hyper.backward(taps, parts, grad_out),
        _ => Err(Error::usage("cache does not belong to a hyperlayer")),
    }
}
