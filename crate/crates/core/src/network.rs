//! Full classification network: convolution/pool stack, multi-scale fusion,
//! dense tanh layers, and a softmax output trained with negative
//! log-likelihood.

use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::cae::CaeLayer;
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::layers::gradcheck::GradProbe;
use crate::layers::{hyper_backward, hyper_block_sizes, hyper_forward, Cache, ConvTanh, Dense, Hyper, LayerKind, ParamGrads, TapPoint};
use crate::tensor::{conv_out_len, Dims4, KernelBank, Tensor4};

mod model_file;

pub use model_file::{load_model, model_from_bytes, model_to_bytes, save_model, MODEL_MAGIC, MODEL_VERSION};

/// Probabilities are clamped to this before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub maps: usize,
    pub filter: usize,
    pub stride: usize,
}

/// How convolutional scales reach the dense layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fusion {
    /// Weighted hyperlayer over every scale.
    Hyper,
    /// Plain dense layer of the same width fed by the top scale only.
    TopOnly,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HyperSpec {
    pub out_neurons: usize,
    pub weights: Vec<u32>,
    pub tap_point: TapPoint,
    pub fusion: Fusion,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingParams {
    pub lr_pretrain: f64,
    pub lr_finetune: f64,
    pub batch_size: usize,
    pub epochs_pretrain: usize,
    pub epochs_finetune: usize,
    pub seed: u64,
    /// Epochs without validation improvement before stopping; 0 disables.
    pub early_stop_patience: usize,
    pub tied: bool,
}

impl Default for TrainingParams {
    fn default() -> Self {
        TrainingParams {
            lr_pretrain: 0.05,
            lr_finetune: 0.01,
            batch_size: 32,
            epochs_pretrain: 20,
            epochs_finetune: 100,
            seed: 42,
            early_stop_patience: 10,
            tied: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkConfig {
    pub input_rows: usize,
    pub input_cols: usize,
    pub convs: Vec<ConvSpec>,
    /// 2x2 max-pool after every convolution.
    pub pool: bool,
    pub hyper: HyperSpec,
    pub dense: Vec<usize>,
    pub classes: usize,
    pub training: TrainingParams,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig::paper()
    }
}

impl NetworkConfig {
    /// The full-size architecture: 100x100 input, three conv/pool scales,
    /// 900-neuron hyperlayer weighted 3:2:1, dense 512/100/50, two classes.
    pub fn paper() -> Self {
        NetworkConfig {
            input_rows: 100,
            input_cols: 100,
            convs: vec![
                ConvSpec { maps: 50, filter: 13, stride: 2 },
                ConvSpec { maps: 100, filter: 9, stride: 1 },
                ConvSpec { maps: 150, filter: 3, stride: 1 },
            ],
            pool: true,
            hyper: HyperSpec {
                out_neurons: 900,
                weights: vec![3, 2, 1],
                tap_point: TapPoint::PostPool,
                fusion: Fusion::Hyper,
            },
            dense: vec![512, 100, 50],
            classes: 2,
            training: TrainingParams::default(),
        }
    }

    /// Proportional shrink for desk-scale runs on 32x32 patches.
    pub fn desk() -> Self {
        NetworkConfig {
            input_rows: 32,
            input_cols: 32,
            convs: vec![
                ConvSpec { maps: 8, filter: 7, stride: 2 },
                ConvSpec { maps: 16, filter: 5, stride: 1 },
                ConvSpec { maps: 24, filter: 3, stride: 1 },
            ],
            pool: true,
            hyper: HyperSpec {
                out_neurons: 90,
                weights: vec![3, 2, 1],
                tap_point: TapPoint::PostPool,
                fusion: Fusion::Hyper,
            },
            dense: vec![64, 32, 16],
            classes: 2,
            training: TrainingParams::default(),
        }
    }

    /// Small geometry used for end-to-end gradient checks.
    pub fn reduced() -> Self {
        NetworkConfig {
            input_rows: 24,
            input_cols: 24,
            convs: vec![
                ConvSpec { maps: 4, filter: 5, stride: 2 },
                ConvSpec { maps: 6, filter: 3, stride: 1 },
                ConvSpec { maps: 8, filter: 3, stride: 1 },
            ],
            pool: true,
            hyper: HyperSpec {
                out_neurons: 30,
                weights: vec![3, 2, 1],
                tap_point: TapPoint::PostPool,
                fusion: Fusion::Hyper,
            },
            dense: vec![16, 12, 8],
            classes: 2,
            training: TrainingParams::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_rows == 0 || self.input_cols == 0 {
            return Err(Error::config("input size must be positive"));
        }
        if self.convs.is_empty() {
            return Err(Error::config("at least one convolutional layer is required"));
        }
        for (k, c) in self.convs.iter().enumerate() {
            if c.maps == 0 {
                return Err(Error::config(format!("conv {}: maps must be >= 1", k + 1)));
            }
            if c.filter == 0 || c.filter % 2 == 0 {
                return Err(Error::config(format!("conv {}: filter side must be odd, got {}", k + 1, c.filter)));
            }
            if c.stride != 1 && c.stride != 2 {
                return Err(Error::config(format!("conv {}: stride must be 1 or 2, got {}", k + 1, c.stride)));
            }
        }
        if self.hyper.weights.len() != self.convs.len() {
            return Err(Error::config(format!(
                "hyper weights ({}) must match conv layer count ({})",
                self.hyper.weights.len(),
                self.convs.len()
            )));
        }
        if self.hyper.out_neurons == 0 {
            return Err(Error::config("hyper out_neurons must be >= 1"));
        }
        if self.hyper.weights.contains(&0) {
            return Err(Error::config("hyper weights must be >= 1"));
        }
        if self.dense.contains(&0) {
            return Err(Error::config("dense widths must be >= 1"));
        }
        if self.classes < 2 {
            return Err(Error::config(format!("classes must be >= 2, got {}", self.classes)));
        }
        let t = &self.training;
        if t.batch_size == 0 {
            return Err(Error::config("batch_size must be >= 1"));
        }
        for (name, lr) in [("lr_pretrain", t.lr_pretrain), ("lr_finetune", t.lr_finetune)] {
            if !lr.is_finite() || lr < 0.0 {
                return Err(Error::config(format!("{name} must be finite and >= 0, got {lr}")));
            }
        }
        Ok(())
    }

    /// Spatial input extent each convolution sees.
    pub fn conv_input_spatial(&self) -> Vec<(usize, usize)> {
        let (mut r, mut c) = (self.input_rows, self.input_cols);
        let mut out = Vec::with_capacity(self.convs.len());
        for spec in &self.convs {
            out.push((r, c));
            r = conv_out_len(r, spec.stride);
            c = conv_out_len(c, spec.stride);
            if self.pool {
                r = r.div_ceil(2);
                c = c.div_ceil(2);
            }
        }
        out
    }
}

/// Activation shape between layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shape {
    Maps { maps: usize, rows: usize, cols: usize },
    Neurons(usize),
}

impl Shape {
    pub fn len(&self) -> usize {
        match *self {
            Shape::Maps { maps, rows, cols } => maps * rows * cols,
            Shape::Neurons(n) => n,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Shape::Maps { maps, rows, cols } => write!(f, "{maps}M x {rows}x{cols}N"),
            Shape::Neurons(n) => write!(f, "{n}N"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RowKind {
    Input,
    Conv,
    MaxPool,
    Hyper,
    Dense,
    Output,
}

impl RowKind {
    pub fn code(&self) -> &'static str {
        match self {
            RowKind::Input => "I",
            RowKind::Conv => "C",
            RowKind::MaxPool => "MP",
            RowKind::Hyper => "H",
            RowKind::Dense => "FC",
            RowKind::Output => "LG",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ShapeRow {
    pub kind: RowKind,
    pub shape: Shape,
}

/// Row-by-row output shape of every layer, starting with the input.
pub fn shape_trace(config: &NetworkConfig) -> Result<Vec<ShapeRow>> {
    config.validate()?;
    let mut rows = vec![ShapeRow {
        kind: RowKind::Input,
        shape: Shape::Maps {
            maps: 1,
            rows: config.input_rows,
            cols: config.input_cols,
        },
    }];
    let (mut r, mut c) = (config.input_rows, config.input_cols);
    for spec in &config.convs {
        r = conv_out_len(r, spec.stride);
        c = conv_out_len(c, spec.stride);
        rows.push(ShapeRow {
            kind: RowKind::Conv,
            shape: Shape::Maps { maps: spec.maps, rows: r, cols: c },
        });
        if config.pool {
            r = r.div_ceil(2);
            c = c.div_ceil(2);
            rows.push(ShapeRow {
                kind: RowKind::MaxPool,
                shape: Shape::Maps { maps: spec.maps, rows: r, cols: c },
            });
        }
    }
    let fusion_kind = match config.hyper.fusion {
        Fusion::Hyper => RowKind::Hyper,
        Fusion::TopOnly => RowKind::Dense,
    };
    rows.push(ShapeRow {
        kind: fusion_kind,
        shape: Shape::Neurons(config.hyper.out_neurons),
    });
    for &w in &config.dense {
        rows.push(ShapeRow {
            kind: RowKind::Dense,
            shape: Shape::Neurons(w),
        });
    }
    rows.push(ShapeRow {
        kind: RowKind::Output,
        shape: Shape::Neurons(config.classes),
    });
    Ok(rows)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Provenance {
    pub pretrained: bool,
    pub finetuned: bool,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub layers: Vec<LayerKind>,
    pub config: NetworkConfig,
    pub provenance: Provenance,
    /// Auto-encoder decoders kept from pretraining, one per conv scale.
    pub decoders: Option<Vec<KernelBank>>,
}

/// Where each convolution, its pool, and its hyperlayer tap sit in the
/// layer list.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerIndex {
    pub conv: Vec<usize>,
    pub pool: Vec<Option<usize>>,
    pub taps: Vec<usize>,
    pub fusion: usize,
}

impl LayerIndex {
    pub fn of(config: &NetworkConfig) -> Self {
        let mut conv = Vec::new();
        let mut pool = Vec::new();
        let mut taps = Vec::new();
        let mut i = 0;
        for _ in &config.convs {
            conv.push(i);
            i += 1;
            let p = if config.pool {
                i += 1;
                Some(i - 1)
            } else {
                None
            };
            pool.push(p);
            taps.push(match (config.hyper.tap_point, p) {
                (TapPoint::PostPool, Some(p)) => p,
                _ => i - 1 - p.is_some() as usize,
            });
        }
        LayerIndex {
            conv,
            pool,
            taps,
            fusion: i,
        }
    }
}

fn tap_shapes(config: &NetworkConfig) -> Vec<Shape> {
    let mut out = Vec::new();
    let (mut r, mut c) = (config.input_rows, config.input_cols);
    for spec in &config.convs {
        r = conv_out_len(r, spec.stride);
        c = conv_out_len(c, spec.stride);
        let pre = Shape::Maps { maps: spec.maps, rows: r, cols: c };
        if config.pool {
            r = r.div_ceil(2);
            c = c.div_ceil(2);
        }
        let post = Shape::Maps { maps: spec.maps, rows: r, cols: c };
        out.push(match config.hyper.tap_point {
            TapPoint::PostPool => post,
            TapPoint::PrePool => pre,
        });
    }
    out
}

/// Assemble a model. Convolutions take the pretrained encoders when given;
/// every other layer is drawn from `seed`. Random draws happen for all
/// layers in order either way, so the upper layers do not depend on
/// whether pretrained weights were supplied.
pub fn build_network(config: &NetworkConfig, pretrained: Option<&[CaeLayer]>, seed: u64) -> Result<Model> {
    config.validate()?;
    if let Some(stack) = pretrained {
        if stack.len() != config.convs.len() {
            return Err(Error::config(format!(
                "pretrained stack has {} layers, config has {} convolutions",
                stack.len(),
                config.convs.len()
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let index = LayerIndex::of(config);
    let mut layers = Vec::new();
    let mut in_channels = 1;
    for (k, spec) in config.convs.iter().enumerate() {
        let mut conv = ConvTanh::new_random(spec.maps, in_channels, spec.filter, spec.stride, &mut rng)?;
        if let Some(stack) = pretrained {
            let enc = &stack[k].encoder;
            if enc.out_channels() != spec.maps
                || enc.in_channels() != in_channels
                || enc.k_rows() != spec.filter
                || enc.k_cols() != spec.filter
                || stack[k].stride != spec.stride
            {
                return Err(Error::config(format!(
                    "layer {}: pretrained encoder {}x{}x{}x{} stride {} does not match config {}x{}x{}x{} stride {}",
                    index.conv[k] + 1,
                    enc.out_channels(),
                    enc.in_channels(),
                    enc.k_rows(),
                    enc.k_cols(),
                    stack[k].stride,
                    spec.maps,
                    in_channels,
                    spec.filter,
                    spec.filter,
                    spec.stride
                )));
            }
            conv.bank = enc.clone();
        }
        layers.push(LayerKind::ConvTanh(conv));
        if config.pool {
            layers.push(LayerKind::MaxPool);
        }
        in_channels = spec.maps;
    }
    let taps = tap_shapes(config);
    let tap_lens: Vec<usize> = taps.iter().map(Shape::len).collect();
    let fusion = match config.hyper.fusion {
        Fusion::Hyper => {
            let sizes = hyper_block_sizes(config.hyper.out_neurons, &config.hyper.weights)?;
            if let Some(i) = sizes.iter().position(|&s| s == 0) {
                return Err(Error::config(format!(
                    "layer {}: hyperlayer block for scale {} would be empty",
                    index.fusion + 1,
                    i + 1
                )));
            }
            LayerKind::Hyper(Hyper::new_random(
                config.hyper.weights.clone(),
                config.hyper.out_neurons,
                &tap_lens,
                &mut rng,
            )?)
        }
        Fusion::TopOnly => LayerKind::Dense(Dense::new_random(
            config.hyper.out_neurons,
            *tap_lens.last().expect("at least one conv"),
            &mut rng,
        )?),
    };
    layers.push(fusion);
    let mut width = config.hyper.out_neurons;
    for &w in &config.dense {
        layers.push(LayerKind::Dense(Dense::new_random(w, width, &mut rng)?));
        width = w;
    }
    layers.push(LayerKind::SoftmaxOut(Dense::new_random(config.classes, width, &mut rng)?));
    let decoders = pretrained.map(|s| s.iter().map(|l| l.decoder.clone()).collect());
    Ok(Model {
        layers,
        config: config.clone(),
        provenance: Provenance {
            pretrained: pretrained.is_some(),
            finetuned: false,
            seed,
        },
        decoders,
    })
}

/// Per-layer caches of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardTape {
    pub caches: Vec<Cache>,
    /// Output of each tapped layer, in scale order.
    pub taps: Vec<Tensor4>,
}

impl Model {
    pub fn index(&self) -> LayerIndex {
        LayerIndex::of(&self.config)
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(LayerKind::param_count).sum()
    }

    fn check_batch(&self, batch: &Tensor4) -> Result<()> {
        let d = batch.dims();
        if d.channels != 1 || d.rows != self.config.input_rows || d.cols != self.config.input_cols {
            return Err(Error::config(format!(
                "batch {d} does not match model input 1x{}x{}",
                self.config.input_rows, self.config.input_cols
            )));
        }
        Ok(())
    }

    /// Forward pass returning the probability tensor `(batch, classes, 1, 1)`.
    pub fn forward(&self, batch: &Tensor4) -> Result<(Tensor4, ForwardTape)> {
        self.check_batch(batch)?;
        let index = self.index();
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut taps = Vec::with_capacity(index.taps.len());
        let mut x = batch.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let (out, cache) = if i == index.fusion {
                match layer {
                    LayerKind::Hyper(h) => hyper_forward(&taps, h)?,
                    other => other.forward(taps.last().expect("at least one tap"))?,
                }
            } else {
                layer.forward(&x)?
            };
            if index.taps.contains(&i) {
                taps.push(out.clone());
            }
            caches.push(cache);
            x = out;
        }
        Ok((x, ForwardTape { caches, taps }))
    }

    /// Backpropagate `d loss / d probs` through the tape. Returns parameter
    /// gradients per layer (empty for parameter-free layers).
    pub fn backward(&self, tape: &ForwardTape, grad_probs: &Tensor4) -> Result<Vec<ParamGrads>> {
        let index = self.index();
        let n = self.layers.len();
        let mut grads: Vec<ParamGrads> = vec![ParamGrads::default(); n];
        let mut tap_grads: Vec<Option<Tensor4>> = vec![None; n];
        let mut grad = Some(grad_probs.clone());
        for i in (0..n).rev() {
            if let Some(tg) = tap_grads[i].take() {
                grad = Some(match grad {
                    Some(mut g) => {
                        g.add_assign(&tg)?;
                        g
                    }
                    None => tg,
                });
            }
            let layer = &self.layers[i];
            let cache = &tape.caches[i];
            if i == index.fusion {
                let g = grad.take().ok_or_else(|| Error::usage("no gradient reached the fusion layer"))?;
                match layer {
                    LayerKind::Hyper(h) => {
                        let (tgs, pg) = hyper_backward(h, cache, &g)?;
                        for (t, tg) in index.taps.iter().zip(tgs) {
                            tap_grads[*t] = Some(tg);
                        }
                        grads[i] = pg;
                    }
                    other => {
                        let (gx, pg) = other.backward(cache, &g)?;
                        tap_grads[*index.taps.last().expect("at least one tap")] = Some(gx);
                        grads[i] = pg;
                    }
                }
                continue;
            }
            match grad.take() {
                Some(g) => {
                    if i == 0 {
                        // the input gradient is never needed
                        if let (LayerKind::ConvTanh(c), Cache::Conv { input, output }) = (layer, cache) {
                            grads[i] = c.param_grads(input, output, &g)?;
                            continue;
                        }
                    }
                    let (gx, pg) = layer.backward(cache, &g)?;
                    grads[i] = pg;
                    grad = Some(gx);
                }
                None => {
                    grads[i] = ParamGrads(layer.params().iter().map(|p| vec![0.0; p.len()]).collect());
                }
            }
        }
        Ok(grads)
    }

    pub fn apply_sgd(&mut self, grads: &[ParamGrads], lr: f64) {
        for (layer, g) in self.layers.iter_mut().zip(grads) {
            for (p, gp) in layer.params_mut().into_iter().zip(&g.0) {
                for (w, d) in p.iter_mut().zip(gp) {
                    *w -= lr * d;
                }
            }
        }
    }
}

fn probs_to_rows(probs: &Tensor4) -> Vec<Vec<f64>> {
    let n = probs.dims().sample_len();
    probs.data().chunks(n).map(<[f64]>::to_vec).collect()
}

/// Class probabilities for every sample in `batch`.
pub fn forward_classify(model: &Model, batch: &Tensor4) -> Result<(Vec<Vec<f64>>, ForwardTape)> {
    let (probs, tape) = model.forward(batch)?;
    Ok((probs_to_rows(&probs), tape))
}

/// Index of the largest entry; ties go to the lower index.
pub fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = i;
        }
    }
    best
}

pub fn predict(model: &Model, batch: &Tensor4) -> Result<Vec<usize>> {
    let (probs, _) = model.forward(batch)?;
    Ok(probs_to_rows(&probs).iter().map(|p| argmax(p)).collect())
}

/// Mean of `-ln p[label]` with probabilities floored at [`PROB_FLOOR`].
pub fn nll_loss(probs: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    if probs.len() != labels.len() || probs.is_empty() {
        return Err(Error::usage(format!(
            "nll: {} probability rows for {} labels",
            probs.len(),
            labels.len()
        )));
    }
    let mut total = 0.0;
    for (p, &y) in probs.iter().zip(labels) {
        let py = *p
            .get(y)
            .ok_or_else(|| Error::usage(format!("label {y} out of range for {} classes", p.len())))?;
        total -= py.max(PROB_FLOOR).ln();
    }
    Ok(total / probs.len() as f64)
}

/// Gradient of [`nll_loss`] with respect to the probability tensor.
pub fn nll_grad(probs: &Tensor4, labels: &[usize]) -> Result<Tensor4> {
    let d = probs.dims();
    let classes = d.sample_len();
    let mut g = probs.zeros_like();
    let scale = 1.0 / d.batch as f64;
    for (b, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(Error::usage(format!("label {y} out of range for {classes} classes")));
        }
        let p = probs.data()[b * classes + y];
        if p > PROB_FLOOR {
            g.data_mut()[b * classes + y] = -scale / p;
        }
    }
    Ok(g)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_nll: f64,
    pub val_nll: f64,
    pub val_error_rate: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
    pub selected_epoch: usize,
}

impl TrainLog {
    pub fn selected(&self) -> Option<&EpochRecord> {
        self.epochs.iter().find(|e| e.epoch == self.selected_epoch)
    }

    /// First epoch whose validation NLL is at or below `threshold`.
    pub fn epochs_to_reach(&self, threshold: f64) -> Option<usize> {
        self.epochs.iter().find(|e| e.val_nll <= threshold).map(|e| e.epoch)
    }
}

const EVAL_BATCH: usize = 64;

/// Mean NLL and error rate (percent) of `model` on `set`.
pub fn evaluate(model: &Model, set: &LabeledDataset) -> Result<(f64, f64)> {
    if set.is_empty() {
        return Err(Error::usage("cannot evaluate on an empty set"));
    }
    let mut total = 0.0;
    let mut wrong = 0usize;
    for start in (0..set.len()).step_by(EVAL_BATCH) {
        let end = (start + EVAL_BATCH).min(set.len());
        let batch = Tensor4::stack(&set.images[start..end])?;
        let (probs, _) = forward_classify(model, &batch)?;
        let labels = &set.labels[start..end];
        total += nll_loss(&probs, labels)? * (end - start) as f64;
        wrong += probs.iter().zip(labels).filter(|(p, &y)| argmax(p) != y).count();
    }
    Ok((total / set.len() as f64, 100.0 * wrong as f64 / set.len() as f64))
}

/// Predicted class of every sample in `set`, in order.
pub fn predict_set(model: &Model, set: &LabeledDataset) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(set.len());
    for start in (0..set.len()).step_by(EVAL_BATCH) {
        let end = (start + EVAL_BATCH).min(set.len());
        out.extend(predict(model, &Tensor4::stack(&set.images[start..end])?)?);
    }
    Ok(out)
}

/// Supervised minibatch SGD on NLL through every layer. Keeps the snapshot
/// with the lowest validation NLL and leaves the model there.
pub fn finetune(
    model: &mut Model,
    train_set: &LabeledDataset,
    val_set: &LabeledDataset,
    params: &TrainingParams,
) -> Result<TrainLog> {
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::usage("fine-tuning needs non-empty training and validation sets"));
    }
    if params.batch_size == 0 {
        return Err(Error::usage("batch_size must be >= 1"));
    }
    if !params.lr_finetune.is_finite() || params.lr_finetune < 0.0 {
        return Err(Error::usage(format!("learning rate must be >= 0, got {}", params.lr_finetune)));
    }
    let classes = model.config.classes;
    if let Some(&bad) = train_set.labels.iter().chain(&val_set.labels).find(|&&y| y >= classes) {
        return Err(Error::usage(format!("label {bad} out of range for {classes} classes")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed ^ 0x5eed_f17e);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut log = TrainLog::default();
    let mut best: Option<(f64, Vec<LayerKind>)> = None;
    let mut since_best = 0;
    for epoch in 1..=params.epochs_finetune {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(params.batch_size) {
            let batch = Tensor4::stack(chunk.iter().map(|&i| &train_set.images[i]))?;
            let labels: Vec<usize> = chunk.iter().map(|&i| train_set.labels[i]).collect();
            let (probs, tape) = model.forward(&batch)?;
            let loss = nll_loss(&probs_to_rows(&probs), &labels)?;
            if !loss.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    detail: format!("training NLL is {loss}"),
                });
            }
            total += loss * chunk.len() as f64;
            if params.lr_finetune > 0.0 {
                let grads = model.backward(&tape, &nll_grad(&probs, &labels)?)?;
                model.apply_sgd(&grads, params.lr_finetune);
            }
        }
        let (val_nll, val_error_rate) = evaluate(model, val_set)?;
        if !val_nll.is_finite() {
            return Err(Error::Divergence {
                epoch,
                detail: format!("validation NLL is {val_nll}"),
            });
        }
        log.epochs.push(EpochRecord {
            epoch,
            train_nll: total / train_set.len() as f64,
            val_nll,
            val_error_rate,
        });
        if best.as_ref().is_none_or(|(b, _)| val_nll < *b) {
            best = Some((val_nll, model.layers.clone()));
            log.selected_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
            if params.early_stop_patience > 0 && since_best >= params.early_stop_patience {
                break;
            }
        }
    }
    if let Some((_, layers)) = best {
        model.layers = layers;
    }
    model.provenance.finetuned = true;
    Ok(log)
}

/// End-to-end NLL probe for finite-difference checks over every
/// parameterized layer.
pub struct NetworkProbe {
    pub model: Model,
    pub batch: Tensor4,
    pub labels: Vec<usize>,
    /// Perturb the analytic gradient so the check must fail; for testing
    /// the checker itself.
    pub corrupt: bool,
    groups: Vec<usize>,
}

impl NetworkProbe {
    pub fn new(model: Model, batch: Tensor4, labels: Vec<usize>) -> Self {
        let groups = model
            .layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.param_count() > 0)
            .map(|(i, _)| i)
            .collect();
        NetworkProbe {
            model,
            batch,
            labels,
            corrupt: false,
            groups,
        }
    }
}

impl GradProbe for NetworkProbe {
    fn group_names(&self) -> Vec<String> {
        self.groups
            .iter()
            .map(|&i| format!("layer {} ({})", i + 1, self.model.layers[i].name()))
            .collect()
    }

    fn group_params_mut(&mut self, group: usize) -> Vec<&mut [f64]> {
        self.model.layers[self.groups[group]].params_mut()
    }

    fn loss(&self) -> Result<f64> {
        let (probs, _) = forward_classify(&self.model, &self.batch)?;
        nll_loss(&probs, &self.labels)
    }

    fn gradients(&self) -> Result<Vec<Vec<Vec<f64>>>> {
        let (probs, tape) = self.model.forward(&self.batch)?;
        let grads = self.model.backward(&tape, &nll_grad(&probs, &self.labels)?)?;
        let mut out: Vec<Vec<Vec<f64>>> = self.groups.iter().map(|&i| grads[i].0.clone()).collect();
        if self.corrupt {
            for g in &mut out {
                let v = &mut g[0][0];
                *v += 0.1 * v.abs() + 1e-3;
            }
        }
        Ok(out)
    }
}

/// Dims of a single input sample for `config`.
pub fn input_dims(config: &NetworkConfig, batch: usize) -> Dims4 {
    Dims4::new(batch, 1, config.input_rows, config.input_cols)
}
