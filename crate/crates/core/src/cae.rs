//! Convolutional auto-encoders and greedy layer-wise pretraining.
//!
//! A layer encodes `h = tanh(conv2d(x, W, s) + b)` and decodes
//! `y = tanh(conv2d_transpose(h, flip_swap(W~), s) + c)`. The decoder bank
//! `W~` is stored as an ordinary `(in, out)` convolution bank, so at stride
//! 1 decoding is plain `conv2d(h, W~) + c`. In tied mode `W~` is kept equal
//! to `flip_swap(W)`.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::layers::glorot_limit;
use crate::network::NetworkConfig;
use crate::tensor::{
    conv2d, conv2d_kernel_grad, conv2d_transpose, maxpool2, tanh_grad, tanh_map, KernelBank, Tensor4,
};

#[derive(Clone, Debug, PartialEq)]
pub struct CaeLayer {
    pub encoder: KernelBank,
    pub decoder: KernelBank,
    pub stride: usize,
    pub tied: bool,
}

/// Per-layer, per-epoch mean reconstruction MSE.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PretrainReport {
    pub layers: Vec<Vec<f64>>,
}

/// Training schedule for one pretraining phase.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PretrainSchedule {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub tied: bool,
}

struct CaeGrads {
    encoder: KernelBank,
    decoder: KernelBank,
}

impl CaeLayer {
    pub fn new_random<R: Rng>(
        in_channels: usize,
        maps: usize,
        filter: usize,
        stride: usize,
        tied: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let s = glorot_limit(in_channels * filter * filter, maps * filter * filter);
        let mut encoder = KernelBank::zeros(maps, in_channels, filter, filter)?;
        encoder.data.iter_mut().for_each(|w| *w = rng.gen_range(-s..=s));
        let decoder = if tied {
            encoder.flip_swap()
        } else {
            let mut d = KernelBank::zeros(in_channels, maps, filter, filter)?;
            d.data.iter_mut().for_each(|w| *w = rng.gen_range(-s..=s));
            d
        };
        Ok(CaeLayer {
            encoder,
            decoder,
            stride,
            tied,
        })
    }

    /// Check the channel pairing between encoder and decoder and, when tied,
    /// that the decoder is exactly the flip-swap of the encoder.
    pub fn validate(&self) -> Result<()> {
        let (e, d) = (&self.encoder, &self.decoder);
        if d.out_channels() != e.in_channels()
            || d.in_channels() != e.out_channels()
            || d.k_rows() != e.k_rows()
            || d.k_cols() != e.k_cols()
        {
            return Err(Error::config("decoder bank does not mirror encoder bank"));
        }
        if self.tied && self.decoder.data != self.encoder.flip_swap().data {
            return Err(Error::config("tied decoder drifted from flip-swapped encoder"));
        }
        Ok(())
    }

    /// Decoder weights re-expressed in the encoder's `(out, in)` layout, as
    /// consumed by `conv2d_transpose`.
    fn decoder_as_encoder_bank(&self) -> KernelBank {
        self.decoder.flip_swap()
    }
}

pub fn cae_encode(layer: &CaeLayer, x: &Tensor4) -> Result<Tensor4> {
    Ok(tanh_map(&conv2d(x, &layer.encoder, layer.stride)?))
}

pub fn cae_decode(layer: &CaeLayer, h: &Tensor4, out_spatial: (usize, usize)) -> Result<Tensor4> {
    if h.dims().channels != layer.encoder.out_channels() {
        return Err(Error::config(format!(
            "decode: code has {} channels, encoder produces {}",
            h.dims().channels,
            layer.encoder.out_channels()
        )));
    }
    let mut y = conv2d_transpose(h, &layer.decoder_as_encoder_bank(), layer.stride, out_spatial)?;
    add_channel_bias(&mut y, &layer.decoder.bias);
    Ok(tanh_map(&y))
}

pub(crate) fn add_channel_bias(t: &mut Tensor4, bias: &[f64]) {
    let d = t.dims();
    let plane = d.plane();
    for (k, chunk) in t.data_mut().chunks_mut(plane).enumerate() {
        let c = bias[k % d.channels];
        chunk.iter_mut().for_each(|v| *v += c);
    }
}

/// Mean squared difference over all elements.
pub fn cae_loss(x: &Tensor4, y: &Tensor4) -> Result<f64> {
    if x.dims() != y.dims() {
        return Err(Error::config(format!("loss: dims {} vs {}", x.dims(), y.dims())));
    }
    let n = x.data().len() as f64;
    Ok(x.data().iter().zip(y.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n)
}

/// Loss and parameter gradients of one encode/decode pass over a batch.
fn loss_and_grads(layer: &CaeLayer, x: &Tensor4) -> Result<(f64, CaeGrads)> {
    let d = x.dims();
    let h = cae_encode(layer, x)?;
    let y = cae_decode(layer, &h, (d.rows, d.cols))?;
    let loss = cae_loss(x, &y)?;
    let n = d.len() as f64;

    // d loss / d (decoder pre-activation)
    let mut gz = tanh_grad(&y);
    for ((g, yv), xv) in gz.data_mut().iter_mut().zip(y.data()).zip(x.data()) {
        *g *= 2.0 * (yv - xv) / n;
    }
    let dec_bank = layer.decoder_as_encoder_bank();
    // <conv2d_transpose(h, K), gz> = <h, conv2d(gz, K)>, so K's gradient is
    // the correlation kernel gradient with gz as input and h as output grad.
    let k_grad = conv2d_kernel_grad(&gz, &h, &dec_bank, layer.stride)?;
    let mut decoder = k_grad.flip_swap();
    decoder.bias = channel_sums(&gz);

    let mut no_bias = dec_bank;
    no_bias.bias.iter_mut().for_each(|b| *b = 0.0);
    let mut gh = conv2d(&gz, &no_bias, layer.stride)?;
    for (g, hv) in gh.data_mut().iter_mut().zip(h.data()) {
        *g *= 1.0 - hv * hv;
    }
    let mut encoder = conv2d_kernel_grad(x, &gh, &layer.encoder, layer.stride)?;
    if layer.tied {
        // W~ = flip_swap(W): fold the decoder-path gradient into W
        for (e, k) in encoder.data.iter_mut().zip(&k_grad.data) {
            *e += k;
        }
    }
    Ok((loss, CaeGrads { encoder, decoder }))
}

fn channel_sums(t: &Tensor4) -> Vec<f64> {
    let d = t.dims();
    let mut out = vec![0.0; d.channels];
    for (k, chunk) in t.data().chunks(d.plane()).enumerate() {
        out[k % d.channels] += chunk.iter().sum::<f64>();
    }
    out
}

fn apply(layer: &mut CaeLayer, grads: &CaeGrads, lr: f64) {
    for (w, g) in layer.encoder.data.iter_mut().zip(&grads.encoder.data) {
        *w -= lr * g;
    }
    for (w, g) in layer.encoder.bias.iter_mut().zip(&grads.encoder.bias) {
        *w -= lr * g;
    }
    if layer.tied {
        let bias = std::mem::take(&mut layer.decoder.bias);
        layer.decoder = layer.encoder.flip_swap();
        layer.decoder.bias = bias;
    } else {
        for (w, g) in layer.decoder.data.iter_mut().zip(&grads.decoder.data) {
            *w -= lr * g;
        }
    }
    for (w, g) in layer.decoder.bias.iter_mut().zip(&grads.decoder.bias) {
        *w -= lr * g;
    }
}

/// Minibatch SGD on the reconstruction loss. Inputs are single samples;
/// they are reshuffled every epoch from `seed`. Returns the mean per-sample
/// loss of each epoch.
pub fn pretrain_layer(
    layer: &mut CaeLayer,
    inputs: &[Tensor4],
    epochs: usize,
    learning_rate: f64,
    batch_size: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    if epochs == 0 {
        return Err(Error::usage("pretraining needs at least one epoch"));
    }
    if learning_rate.is_nan() || learning_rate < 0.0 {
        return Err(Error::usage(format!("learning rate must be >= 0, got {learning_rate}")));
    }
    if inputs.is_empty() || batch_size == 0 {
        return Err(Error::usage("pretraining needs samples and a positive batch size"));
    }
    layer.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..inputs.len()).collect();
    let mut losses = Vec::with_capacity(epochs);
    for epoch in 1..=epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(batch_size) {
            let batch = Tensor4::stack(chunk.iter().map(|&i| &inputs[i]))?;
            let (loss, grads) = loss_and_grads(layer, &batch)?;
            if !loss.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    detail: format!("reconstruction loss is {loss}"),
                });
            }
            total += loss * chunk.len() as f64;
            if learning_rate > 0.0 {
                apply(layer, &grads, learning_rate);
            }
        }
        losses.push(total / inputs.len() as f64);
    }
    Ok(losses)
}

/// Train the convolutional stack one layer at a time. Layer `k + 1` sees the
/// (pooled, when the config pools) codes of the frozen layer `k`.
pub fn pretrain_stack(
    config: &NetworkConfig,
    images: &[Tensor4],
    schedule: &PretrainSchedule,
) -> Result<(Vec<CaeLayer>, PretrainReport)> {
    config.validate()?;
    let mut layers = Vec::with_capacity(config.convs.len());
    let mut report = PretrainReport::default();
    let mut inputs: Vec<Tensor4> = images.to_vec();
    let mut in_channels = 1;
    for (k, spec) in config.convs.iter().enumerate() {
        let layer_seed = schedule.seed.wrapping_add(1000 * (k as u64 + 1));
        let mut init_rng = ChaCha8Rng::seed_from_u64(layer_seed);
        let mut layer = CaeLayer::new_random(
            in_channels,
            spec.maps,
            spec.filter,
            spec.stride,
            schedule.tied,
            &mut init_rng,
        )?;
        let losses = pretrain_layer(
            &mut layer,
            &inputs,
            schedule.epochs,
            schedule.learning_rate,
            schedule.batch_size,
            layer_seed.wrapping_add(1),
        )?;
        report.layers.push(losses);
        if k + 1 < config.convs.len() {
            inputs = inputs
                .iter()
                .map(|x| {
                    let h = cae_encode(&layer, x)?;
                    Ok(if config.pool { maxpool2(&h).0 } else { h })
                })
                .collect::<Result<_>>()?;
        }
        in_channels = spec.maps;
        layers.push(layer);
    }
    Ok((layers, report))
}
