//! Central finite-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{hyper_backward, hyper_forward, LayerKind};
use crate::error::{Error, Result};
use crate::tensor::Tensor4;

/// Groups larger than this are checked on a random sample.
pub const FULL_CHECK_LIMIT: usize = 10_000;
pub const SAMPLE_SIZE: usize = 200;

/// Something with a scalar loss, named parameter groups, and an analytic
/// gradient for every parameter.
pub trait GradProbe {
    fn group_names(&self) -> Vec<String>;
    fn group_params_mut(&mut self, group: usize) -> Vec<&mut [f64]>;
    fn loss(&self) -> Result<f64>;
    /// Analytic gradients: per group, per parameter array.
    fn gradients(&self) -> Result<Vec<Vec<Vec<f64>>>>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroupReport {
    pub name: String,
    pub params: usize,
    pub checked: usize,
    pub max_rel_error: f64,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-12)
}

fn finite_loss<P: GradProbe>(probe: &P) -> Result<f64> {
    let l = probe.loss()?;
    if !l.is_finite() {
        return Err(Error::Numeric(format!("probe loss is {l}")));
    }
    Ok(l)
}

/// Compare analytic against central-difference gradients group by group.
pub fn grad_check_groups<P: GradProbe>(probe: &mut P, eps: f64, seed: u64) -> Result<Vec<GroupReport>> {
    if eps.is_nan() || eps <= 0.0 {
        return Err(Error::usage(format!("finite-difference step must be > 0, got {eps}")));
    }
    finite_loss(probe)?;
    let analytic = probe.gradients()?;
    let names = probe.group_names();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reports = Vec::with_capacity(names.len());
    for (g, name) in names.into_iter().enumerate() {
        let sizes: Vec<usize> = probe.group_params_mut(g).iter().map(|a| a.len()).collect();
        let total: usize = sizes.iter().sum();
        let flat: Vec<usize> = if total > FULL_CHECK_LIMIT {
            let mut idx = sample(&mut rng, total, SAMPLE_SIZE).into_vec();
            idx.sort_unstable();
            idx
        } else {
            (0..total).collect()
        };
        let mut worst = 0.0f64;
        for &k in &flat {
            let (mut arr, mut off) = (0, k);
            while off >= sizes[arr] {
                off -= sizes[arr];
                arr += 1;
            }
            let orig = probe.group_params_mut(g)[arr][off];
            probe.group_params_mut(g)[arr][off] = orig + eps;
            let plus = finite_loss(probe);
            probe.group_params_mut(g)[arr][off] = orig - eps;
            let minus = finite_loss(probe);
            probe.group_params_mut(g)[arr][off] = orig;
            let numeric = (plus? - minus?) / (2.0 * eps);
            worst = worst.max(relative_error(analytic[g][arr][off], numeric));
        }
        reports.push(GroupReport {
            name,
            params: total,
            checked: flat.len(),
            max_rel_error: worst,
        });
    }
    Ok(reports)
}

/// Largest relative error over every checked parameter; 0 when the probe
/// has no parameters.
pub fn grad_check<P: GradProbe>(probe: &mut P, eps: f64, seed: u64) -> Result<f64> {
    Ok(grad_check_groups(probe, eps, seed)?
        .iter()
        .map(|r| r.max_rel_error)
        .fold(0.0, f64::max))
}

/// Probe loss `sum(r * layer(x))` for a single layer, with a fixed random
/// weighting tensor `r`. Optionally also checks the input gradient.
pub struct LayerProbe {
    pub layer: LayerKind,
    pub inputs: Vec<Tensor4>,
    pub weighting: Tensor4,
    pub check_inputs: bool,
}

impl LayerProbe {
    pub fn new(layer: LayerKind, inputs: Vec<Tensor4>, seed: u64) -> Result<Self> {
        let out = forward(&layer, &inputs)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = out.dims();
        let data = (0..d.len()).map(|_| rand::Rng::gen_range(&mut rng, -1.0..1.0)).collect();
        Ok(LayerProbe {
            layer,
            inputs,
            weighting: Tensor4::from_vec(d, data)?,
            check_inputs: false,
        })
    }

    pub fn with_input_check(mut self) -> Self {
        self.check_inputs = true;
        self
    }
}

fn forward(layer: &LayerKind, inputs: &[Tensor4]) -> Result<Tensor4> {
    match layer {
        LayerKind::Hyper(h) => Ok(hyper_forward(inputs, h)?.0),
        _ => {
            let x = inputs.first().ok_or_else(|| Error::usage("layer probe needs an input"))?;
            Ok(layer.forward(x)?.0)
        }
    }
}

impl GradProbe for LayerProbe {
    fn group_names(&self) -> Vec<String> {
        let mut v = vec![self.layer.name().to_string()];
        if self.check_inputs {
            v.push("input".to_string());
        }
        v
    }

    fn group_params_mut(&mut self, group: usize) -> Vec<&mut [f64]> {
        if group == 0 {
            self.layer.params_mut()
        } else {
            self.inputs.iter_mut().map(|t| t.data_mut()).collect()
        }
    }

    fn loss(&self) -> Result<f64> {
        Ok(forward(&self.layer, &self.inputs)?.dot(&self.weighting))
    }

    fn gradients(&self) -> Result<Vec<Vec<Vec<f64>>>> {
        let (input_grads, params) = match &self.layer {
            LayerKind::Hyper(h) => {
                let (_, cache) = hyper_forward(&self.inputs, h)?;
                hyper_backward(h, &cache, &self.weighting)?
            }
            layer => {
                let (_, cache) = layer.forward(&self.inputs[0])?;
                let (gx, pg) = layer.backward(&cache, &self.weighting)?;
                (vec![gx], pg)
            }
        };
        let mut out = vec![params.0];
        if self.check_inputs {
            out.push(input_grads.into_iter().map(Tensor4::into_data).collect());
        }
        Ok(out)
    }
}
