//! Image reconstruction from convolutional features, and the signed
//! red/green rendering of reconstructions.
//!
//! Going down from the requested scale, each scale is unpooled and then
//! decoded with `tanh(conv2d_transpose(h, W, s) + c)`. The topmost pooled
//! features are upsampled by window abs-max over the recorded pre-pool
//! activations; lower scales spread each decoded value over its window.

use crate::cae::add_channel_bias;
use crate::data::pnm::Rgb;
use crate::error::{Error, Result};
use crate::layers::{LayerKind, TapPoint};
use crate::network::Model;
use crate::tensor::{conv2d_transpose, maxpool2, tanh_map, unpool_absmax, unpool_fill, KernelBank, PoolTrace, Tensor4};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WeightSource {
    /// The model's current encoder kernels, used transposed.
    FinetunedTied,
    /// The auto-encoder decoders stored at pretraining time.
    PretrainedDecoder,
}

#[derive(Clone, Copy, Debug)]
pub struct ReconstructionRequest<'a> {
    pub model: &'a Model,
    /// A single 1x1xHxW sample.
    pub image: &'a Tensor4,
    /// Convolutional scale, 1-based.
    pub from_layer: usize,
    pub weight_source: WeightSource,
}

struct Scale<'a> {
    bank: &'a KernelBank,
    stride: usize,
    input_spatial: (usize, usize),
    pre_pool: Tensor4,
    trace: Option<PoolTrace>,
}

pub fn reconstruct_from_layer(req: &ReconstructionRequest) -> Result<Tensor4> {
    let model = req.model;
    let cfg = &model.config;
    let n_scales = cfg.convs.len();
    if req.from_layer == 0 || req.from_layer > n_scales {
        return Err(Error::usage(format!(
            "layer {} out of range: model has {n_scales} convolutional scales",
            req.from_layer
        )));
    }
    let d = req.image.dims();
    if d.batch != 1 || d.channels != 1 || d.rows != cfg.input_rows || d.cols != cfg.input_cols {
        return Err(Error::usage(format!(
            "image {d} does not match model input 1x1x{}x{}",
            cfg.input_rows, cfg.input_cols
        )));
    }
    let decoders = match (req.weight_source, &model.decoders) {
        (WeightSource::PretrainedDecoder, None) => {
            return Err(Error::config("model has no stored auto-encoder decoders"))
        }
        (_, decs) => decs.as_deref(),
    };
    let index = model.index();
    let mut scales: Vec<Scale> = Vec::with_capacity(req.from_layer);
    let mut x = req.image.clone();
    for k in 0..req.from_layer {
        let LayerKind::ConvTanh(conv) = &model.layers[index.conv[k]] else {
            return Err(Error::config(format!("layer {} is not a convolution", index.conv[k] + 1)));
        };
        let input_spatial = (x.dims().rows, x.dims().cols);
        let h = conv.forward(&x)?;
        let trace = if cfg.pool {
            let (p, t) = maxpool2(&h);
            x = p;
            Some(t)
        } else {
            x = h.clone();
            None
        };
        scales.push(Scale {
            bank: &conv.bank,
            stride: conv.stride,
            input_spatial,
            pre_pool: h,
            trace,
        });
    }
    let top = scales.last().expect("from_layer >= 1");
    let mut h = match (&top.trace, cfg.hyper.tap_point) {
        (Some(t), TapPoint::PostPool) => unpool_absmax(t),
        _ => top.pre_pool.clone(),
    };
    for k in (0..req.from_layer).rev() {
        let s = &scales[k];
        let mut y = match req.weight_source {
            WeightSource::FinetunedTied => conv2d_transpose(&h, s.bank, s.stride, s.input_spatial)?,
            WeightSource::PretrainedDecoder => {
                let dec = &decoders.expect("checked above")[k];
                conv2d_transpose(&h, &dec.flip_swap(), s.stride, s.input_spatial)?
            }
        };
        if let Some(decs) = decoders {
            add_channel_bias(&mut y, &decs[k].bias);
        }
        let y = tanh_map(&y);
        h = match (k, &scales.get(k.wrapping_sub(1)).and_then(|p| p.trace.as_ref())) {
            (0, _) => y,
            (_, Some(t)) => unpool_fill(&y, t)?,
            (_, None) => y,
        };
    }
    Ok(h)
}

/// Negative values in red, positive in green, magnitude
/// `round_half_even(255 * min(|v|, 1))`.
pub fn render_signed(recon: &Tensor4) -> Result<Rgb> {
    let d = recon.dims();
    if d.batch != 1 || d.channels != 1 {
        return Err(Error::usage(format!("signed rendering needs one channel, got {d}")));
    }
    let level = |v: f64| (255.0 * v.abs().min(1.0)).round_ties_even() as u8;
    let pixels = recon
        .data()
        .iter()
        .map(|&v| {
            if v < 0.0 {
                [level(v), 0, 0]
            } else if v > 0.0 {
                [0, level(v), 0]
            } else {
                [0, 0, 0]
            }
        })
        .collect();
    Ok(Rgb {
        rows: d.rows,
        cols: d.cols,
        pixels,
    })
}

/// Mean squared 5-point Laplacian over interior pixels of every plane.
pub fn laplacian_energy(t: &Tensor4) -> Result<f64> {
    let d = t.dims();
    if d.rows < 3 || d.cols < 3 {
        return Err(Error::usage(format!("laplacian needs planes of at least 3x3, got {d}")));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for b in 0..d.batch {
        for c in 0..d.channels {
            for r in 1..d.rows - 1 {
                for col in 1..d.cols - 1 {
                    let lap = t.get(b, c, r - 1, col)
                        + t.get(b, c, r + 1, col)
                        + t.get(b, c, r, col - 1)
                        + t.get(b, c, r, col + 1)
                        - 4.0 * t.get(b, c, r, col);
                    sum += lap * lap;
                    count += 1;
                }
            }
        }
    }
    Ok(sum / count as f64)
}

/// Average Laplacian energy of reconstructions from each scale, over a set
/// of images. Entry `k` is for scale `k + 1`.
pub fn energy_by_layer(model: &Model, images: &[Tensor4], source: WeightSource) -> Result<Vec<f64>> {
    if images.is_empty() {
        return Err(Error::usage("no images to reconstruct"));
    }
    (1..=model.config.convs.len())
        .map(|layer| {
            let mut total = 0.0;
            for image in images {
                let recon = reconstruct_from_layer(&ReconstructionRequest {
                    model,
                    image,
                    from_layer: layer,
                    weight_source: source,
                })?;
                total += laplacian_energy(&recon)?;
            }
            Ok(total / images.len() as f64)
        })
        .collect()
}
