//! Feedforward networks whose first layer may consume missing data points.
//!
//! Layer 0 can be a generalized ReLU or RBF layer: for an incomplete point it
//! builds the conditional mixture once and outputs every unit's expected
//! activation. Complete points take the classical path and never touch the
//! density. All later layers are ordinary dense layers. Gradients flow back
//! into the mixture parameters, so the density is trained with the weights.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::activations::{affine, rbf_backward, rbf_classical, rbf_value, relu_backward, relu_value, CondGrad};
use crate::data::DatasetWithMask;
use crate::density::{conditional, conditional_backward, ConditionalGmm, GmmGradient, GmmParams, MissingPoint, VARIANCE_FLOOR};
use crate::error::{Error, Result};
use crate::special::{log_sum_exp, softmax_into};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Sigmoid,
    Linear,
    Softmax,
}

impl Activation {
    fn apply(self, z: &[f64], out: &mut [f64]) {
        match self {
            Activation::Relu => out.iter_mut().zip(z).for_each(|(o, &v)| *o = v.max(0.0)),
            Activation::Sigmoid => out.iter_mut().zip(z).for_each(|(o, &v)| *o = sigmoid(v)),
            Activation::Linear => out.copy_from_slice(z),
            Activation::Softmax => softmax_into(z, out),
        }
    }

    /// Elementwise derivative given pre-activation `z` and output `a`.
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => a * (1.0 - a),
            Activation::Linear => 1.0,
            Activation::Softmax => unreachable!("softmax is only differentiated through the loss"),
        }
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LayerSpec {
    GeneralizedRelu { width: usize },
    GeneralizedRbf { width: usize },
    /// Classical RBF layer; the imputation baselines' counterpart of
    /// `GeneralizedRbf`.
    Rbf { width: usize },
    Dense { width: usize, activation: Activation },
}

impl LayerSpec {
    pub fn width(&self) -> usize {
        match *self {
            LayerSpec::GeneralizedRelu { width }
            | LayerSpec::GeneralizedRbf { width }
            | LayerSpec::Rbf { width }
            | LayerSpec::Dense { width, .. } => width,
        }
    }

    pub fn is_generalized(&self) -> bool {
        matches!(self, LayerSpec::GeneralizedRelu { .. } | LayerSpec::GeneralizedRbf { .. })
    }

    fn is_rbf(&self) -> bool {
        matches!(self, LayerSpec::GeneralizedRbf { .. } | LayerSpec::Rbf { .. })
    }

    fn activation(&self) -> Option<Activation> {
        match self {
            LayerSpec::Dense { activation, .. } => Some(*activation),
            LayerSpec::GeneralizedRelu { .. } => Some(Activation::Relu),
            _ => None,
        }
    }
}

/// Layer parameters. Affine layers hold `out × in` weights and `out` biases;
/// RBF layers hold `out × in` centers and `out × in` log-variances.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerParams {
    Affine { weights: Vec<f64>, bias: Vec<f64> },
    Rbf { centers: Vec<f64>, log_gamma: Vec<f64> },
}

impl LayerParams {
    fn groups(&self) -> [&[f64]; 2] {
        match self {
            LayerParams::Affine { weights, bias } => [weights, bias],
            LayerParams::Rbf { centers, log_gamma } => [centers, log_gamma],
        }
    }

    fn groups_mut(&mut self) -> [&mut [f64]; 2] {
        match self {
            LayerParams::Affine { weights, bias } => [weights, bias],
            LayerParams::Rbf { centers, log_gamma } => [centers, log_gamma],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub spec: LayerSpec,
    pub inputs: usize,
    pub params: LayerParams,
}

impl Layer {
    pub fn outputs(&self) -> usize {
        self.spec.width()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    MaskedMse,
    CrossEntropy,
}

/// What a training example is scored against.
#[derive(Clone, Debug)]
pub enum Target {
    Class(usize),
    /// Reconstruction target; only observed coordinates contribute.
    Masked(MissingPoint),
}

#[derive(Clone, Debug)]
pub struct Example {
    pub input: MissingPoint,
    pub target: Target,
}

/// Mean squared error over the observed coordinates of `target`; 0 when
/// nothing is observed.
pub fn loss_masked_mse(pred: &[f64], target: &MissingPoint) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for (j, x) in target.observed() {
        let e = pred[j] - x;
        sum += e * e;
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// `-ln softmax(logits)[label]`.
pub fn loss_cross_entropy(logits: &[f64], label: usize) -> Result<f64> {
    if label >= logits.len() {
        return Err(Error::invalid(format!(
            "label {label} out of range for {} classes",
            logits.len()
        )));
    }
    Ok(log_sum_exp(logits) - logits[label])
}

/// A feedforward network, optionally carrying the missing-data density used
/// by a generalized first layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkModel {
    pub input_dim: usize,
    pub layers: Vec<Layer>,
    pub density: Option<GmmParams>,
    pub loss: LossKind,
}

/// Per-sample forward state kept for backpropagation.
struct Trace {
    cond: Option<ConditionalGmm>,
    /// `pre[l]` is layer `l`'s pre-activation (empty for layer 0 unless dense).
    pre: Vec<Vec<f64>>,
    /// `act[l]` is layer `l`'s output.
    act: Vec<Vec<f64>>,
}

/// Gradients laid out like the model parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub layers: Vec<[Vec<f64>; 2]>,
    pub density: Option<GmmGradient>,
}

impl Gradients {
    fn zeros(model: &NetworkModel) -> Self {
        Gradients {
            layers: model
                .layers
                .iter()
                .map(|l| {
                    let [a, b] = l.params.groups();
                    [vec![0.0; a.len()], vec![0.0; b.len()]]
                })
                .collect(),
            density: model.density.as_ref().map(GmmGradient::zeros),
        }
    }

    fn scale(&mut self, s: f64) {
        for [a, b] in &mut self.layers {
            a.iter_mut().chain(b.iter_mut()).for_each(|g| *g *= s);
        }
        if let Some(d) = &mut self.density {
            d.scale(s);
        }
    }

    /// All gradient entries in [`NetworkModel::flat_params`] order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out: Vec<f64> = self.layers.iter().flat_map(|[a, b]| a.iter().chain(b)).copied().collect();
        if let Some(d) = &self.density {
            out.extend(d.logits.iter().chain(&d.means).chain(&d.log_vars));
        }
        out
    }
}

fn he_bound(fan_in: usize) -> f64 {
    (6.0 / fan_in as f64).sqrt()
}

fn xavier_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

impl NetworkModel {
    /// Builds a network with seeded weight initialization: uniform He bounds
    /// for ReLU layers, Xavier bounds otherwise, zero biases. RBF layers start
    /// with zero centers and unit variances; see [`NetworkModel::init_rbf_from_data`].
    pub fn new(
        input_dim: usize,
        specs: Vec<LayerSpec>,
        loss: LossKind,
        density: Option<GmmParams>,
        seed: u64,
    ) -> Result<Self> {
        if input_dim == 0 || specs.is_empty() {
            return Err(Error::invalid("network needs a positive input width and at least one layer"));
        }
        for (i, s) in specs.iter().enumerate() {
            if s.width() == 0 {
                return Err(Error::invalid(format!("layer {i} has zero width")));
            }
            if i > 0 && (s.is_generalized() || s.is_rbf()) {
                return Err(Error::invalid("generalized and RBF layers are only allowed at position 0"));
            }
            if s.activation() == Some(Activation::Softmax) && i + 1 != specs.len() {
                return Err(Error::invalid("softmax is only allowed on the last layer"));
            }
        }
        let generalized = specs[0].is_generalized();
        match (&density, generalized) {
            (None, true) => return Err(Error::invalid("a generalized first layer needs a density")),
            (Some(_), false) => return Err(Error::invalid("density given but first layer is not generalized")),
            (Some(g), true) if g.dim() != input_dim => {
                return Err(Error::invalid(format!(
                    "density dimension {} differs from input width {input_dim}",
                    g.dim()
                )))
            }
            _ => {}
        }
        let last = specs.last().expect("non-empty");
        match loss {
            LossKind::CrossEntropy if last.activation() != Some(Activation::Softmax) => {
                return Err(Error::invalid("cross-entropy needs a softmax output layer"))
            }
            LossKind::MaskedMse if last.activation() == Some(Activation::Softmax) => {
                return Err(Error::invalid("masked MSE cannot be used with a softmax output"))
            }
            _ => {}
        }

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::with_capacity(specs.len());
        let mut fan_in = input_dim;
        for spec in specs {
            let out = spec.width();
            let params = if spec.is_rbf() {
                LayerParams::Rbf {
                    centers: vec![0.0; out * fan_in],
                    log_gamma: vec![0.0; out * fan_in],
                }
            } else {
                let bound = match spec.activation() {
                    Some(Activation::Relu) => he_bound(fan_in),
                    _ => xavier_bound(fan_in, out),
                };
                LayerParams::Affine {
                    weights: (0..out * fan_in).map(|_| rng.gen_range(-bound..bound)).collect(),
                    bias: vec![0.0; out],
                }
            };
            layers.push(Layer {
                spec,
                inputs: fan_in,
                params,
            });
            fan_in = out;
        }
        Ok(NetworkModel {
            input_dim,
            layers,
            density,
            loss,
        })
    }

    /// RBF initialization: centers are training rows drawn at random (missing
    /// cells mean-imputed); each variance is `|z| + floor` with `z ~ N(0, 1)`.
    pub fn init_rbf_from_data(&mut self, data: &DatasetWithMask, seed: u64) -> Result<()> {
        let Some(first) = self.layers.first_mut() else {
            return Ok(());
        };
        let LayerParams::Rbf { centers, log_gamma } = &mut first.params else {
            return Ok(());
        };
        if data.n_rows() == 0 {
            return Err(Error::EmptyDataset);
        }
        if data.n_cols() != first.inputs {
            return Err(Error::invalid("RBF init data width differs from layer input"));
        }
        let d = first.inputs;
        let filled = data.mean_imputed();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (u, c) in centers.chunks_mut(d).enumerate() {
            let r = rng.gen_range(0..data.n_rows());
            c.copy_from_slice(&filled[r * d..(r + 1) * d]);
            for lg in &mut log_gamma[u * d..(u + 1) * d] {
                let z: f64 = rng.sample(StandardNormal);
                *lg = (z.abs() + VARIANCE_FLOOR).ln();
            }
        }
        Ok(())
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, Layer::outputs)
    }

    pub fn is_generalized(&self) -> bool {
        self.layers.first().is_some_and(|l| l.spec.is_generalized())
    }

    pub fn n_params(&self) -> usize {
        self.flat_params().len()
    }

    /// Whether every parameter is finite.
    pub fn params_finite(&self) -> bool {
        let layers = self
            .layers
            .iter()
            .all(|l| l.params.groups().iter().all(|g| g.iter().all(|v| v.is_finite())));
        layers
            && self.density.as_ref().map_or(true, |g| {
                let (a, b, c) = g.parts();
                a.iter().chain(b).chain(c).all(|v| v.is_finite())
            })
    }

    /// Every trainable parameter: layers in order (two groups each), then the
    /// density's logits, means and log-variances.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut out: Vec<f64> = self
            .layers
            .iter()
            .flat_map(|l| {
                let [a, b] = l.params.groups();
                a.iter().chain(b.iter()).copied().collect::<Vec<_>>()
            })
            .collect();
        if let Some(g) = &self.density {
            let (a, b, c) = g.parts();
            out.extend(a.iter().chain(b).chain(c));
        }
        out
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.n_params() {
            return Err(Error::invalid("flat parameter vector has the wrong length"));
        }
        let mut pos = 0;
        let mut take = |dst: &mut [f64]| {
            dst.copy_from_slice(&flat[pos..pos + dst.len()]);
            pos += dst.len();
        };
        for l in &mut self.layers {
            for g in l.params.groups_mut() {
                take(g);
            }
        }
        if let Some(g) = &mut self.density {
            let (a, b, c) = g.parts_mut();
            take(a);
            take(b);
            take(c);
        }
        Ok(())
    }

    fn check_input(&self, point: &MissingPoint) -> Result<()> {
        if point.dim() != self.input_dim {
            return Err(Error::invalid(format!(
                "point has dimension {} but the network expects {}",
                point.dim(),
                self.input_dim
            )));
        }
        if !self.is_generalized() && !point.is_complete() {
            return Err(Error::invalid("a classical first layer cannot consume missing values"));
        }
        Ok(())
    }

    fn run(&self, point: &MissingPoint) -> Result<Trace> {
        self.check_input(point)?;
        let cond = match (&self.density, point.is_complete()) {
            (Some(g), false) => Some(conditional(g, point)?),
            _ => None,
        };
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut act: Vec<Vec<f64>> = Vec::with_capacity(self.layers.len());
        for (l, layer) in self.layers.iter().enumerate() {
            let out_w = layer.outputs();
            let d = layer.inputs;
            if l == 0 {
                let x = point.values();
                let mut out = vec![0.0; out_w];
                let mut z0 = Vec::new();
                match (&layer.spec, &layer.params) {
                    (LayerSpec::GeneralizedRelu { .. }, LayerParams::Affine { weights, bias }) => {
                        for u in 0..out_w {
                            let w = &weights[u * d..(u + 1) * d];
                            out[u] = match &cond {
                                Some(c) => relu_value(w, bias[u], c, point),
                                None => affine(w, bias[u], x).max(0.0),
                            };
                        }
                    }
                    (LayerSpec::GeneralizedRbf { .. } | LayerSpec::Rbf { .. }, LayerParams::Rbf { centers, log_gamma }) => {
                        for u in 0..out_w {
                            let (c, lg) = (&centers[u * d..(u + 1) * d], &log_gamma[u * d..(u + 1) * d]);
                            out[u] = match &cond {
                                Some(cg) => rbf_value(c, lg, cg, point),
                                None => rbf_classical(c, lg, x),
                            };
                        }
                    }
                    (LayerSpec::Dense { activation, .. }, LayerParams::Affine { weights, bias }) => {
                        z0 = (0..out_w)
                            .map(|u| affine(&weights[u * d..(u + 1) * d], bias[u], x))
                            .collect();
                        activation.apply(&z0, &mut out);
                    }
                    _ => return Err(Error::Internal("layer spec and parameters disagree".into())),
                }
                pre.push(z0);
                act.push(out);
            } else {
                let (LayerSpec::Dense { activation, .. }, LayerParams::Affine { weights, bias }) =
                    (&layer.spec, &layer.params)
                else {
                    return Err(Error::Internal("hidden layer must be dense".into()));
                };
                let input = &act[l - 1];
                let z: Vec<f64> = (0..out_w)
                    .map(|u| affine(&weights[u * d..(u + 1) * d], bias[u], input))
                    .collect();
                let mut out = vec![0.0; out_w];
                activation.apply(&z, &mut out);
                pre.push(z);
                act.push(out);
            }
        }
        Ok(Trace { cond, pre, act })
    }

    /// Network output for one point (probabilities for a softmax head).
    pub fn forward(&self, point: &MissingPoint) -> Result<Vec<f64>> {
        Ok(self.run(point)?.act.pop().expect("at least one layer"))
    }

    /// Output of layer 0 only.
    pub fn first_layer(&self, point: &MissingPoint) -> Result<Vec<f64>> {
        Ok(self.run(point)?.act.swap_remove(0))
    }

    /// Propagates a given layer-0 output through the remaining layers.
    pub fn forward_from_first(&self, first: &[f64]) -> Result<Vec<f64>> {
        let mut a = first.to_vec();
        for layer in &self.layers[1..] {
            let LayerParams::Affine { weights, bias } = &layer.params else {
                return Err(Error::Internal("hidden layer must be dense".into()));
            };
            let act = layer.spec.activation().expect("dense");
            let d = layer.inputs;
            let z: Vec<f64> = (0..layer.outputs())
                .map(|u| affine(&weights[u * d..(u + 1) * d], bias[u], &a))
                .collect();
            let mut out = vec![0.0; z.len()];
            act.apply(&z, &mut out);
            a = out;
        }
        Ok(a)
    }

    /// Predicted class (argmax of the output).
    pub fn predict_class(&self, point: &MissingPoint) -> Result<usize> {
        let out = self.forward(point)?;
        Ok(out
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
            .0)
    }

    fn sample_loss(&self, trace: &Trace, target: &Target) -> Result<f64> {
        let l = self.layers.len() - 1;
        match (self.loss, target) {
            (LossKind::CrossEntropy, Target::Class(c)) => loss_cross_entropy(&trace.pre[l], *c),
            (LossKind::MaskedMse, Target::Masked(t)) => {
                if t.dim() != self.output_dim() {
                    return Err(Error::invalid("reconstruction target width differs from output"));
                }
                Ok(loss_masked_mse(&trace.act[l], t))
            }
            _ => Err(Error::invalid("target kind does not match the network loss")),
        }
    }

    /// Loss of one example.
    pub fn loss(&self, example: &Example) -> Result<f64> {
        let trace = self.run(&example.input)?;
        self.sample_loss(&trace, &example.target)
    }

    /// Mean loss over `batch`.
    pub fn batch_loss(&self, batch: &[Example]) -> Result<f64> {
        let mut sum = 0.0;
        for ex in batch {
            sum += self.loss(ex)?;
        }
        Ok(sum / batch.len().max(1) as f64)
    }

    /// Mean loss over `batch` and its exact gradient with respect to every
    /// layer parameter and, when present, the density parameters.
    pub fn backward(&self, batch: &[Example]) -> Result<(f64, Gradients)> {
        if batch.is_empty() {
            return Err(Error::invalid("backward needs a non-empty batch"));
        }
        let mut grads = Gradients::zeros(self);
        let mut total = 0.0;
        for ex in batch {
            total += self.accumulate(ex, &mut grads)?;
        }
        let inv = 1.0 / batch.len() as f64;
        grads.scale(inv);
        Ok((total * inv, grads))
    }

    fn accumulate(&self, ex: &Example, grads: &mut Gradients) -> Result<f64> {
        let trace = self.run(&ex.input)?;
        let loss = self.sample_loss(&trace, &ex.target)?;
        let last = self.layers.len() - 1;

        // delta = dLoss / d(pre-activation) of the current layer
        let mut delta: Vec<f64> = match (&ex.target, self.loss) {
            (Target::Class(c), LossKind::CrossEntropy) => {
                let mut d = trace.act[last].clone();
                d[*c] -= 1.0;
                d
            }
            (Target::Masked(t), LossKind::MaskedMse) => {
                let act = self.layers[last].spec.activation();
                let a = &trace.act[last];
                let n_obs = t.observed().count();
                let mut d = vec![0.0; a.len()];
                if n_obs > 0 {
                    let scale = 2.0 / n_obs as f64;
                    for (j, x) in t.observed() {
                        let g = scale * (a[j] - x);
                        d[j] = match act {
                            Some(f) if last > 0 || !self.layers[0].spec.is_generalized() && !self.layers[0].spec.is_rbf() => {
                                g * f.derivative(trace.pre[last][j], a[j])
                            }
                            _ => g,
                        };
                    }
                }
                d
            }
            _ => return Err(Error::invalid("target kind does not match the network loss")),
        };

        for l in (0..=last).rev() {
            let layer = &self.layers[l];
            let d = layer.inputs;
            let is_dense = matches!(layer.spec, LayerSpec::Dense { .. });
            if l > 0 || is_dense {
                let LayerParams::Affine { weights, .. } = &layer.params else {
                    return Err(Error::Internal("dense layer without affine parameters".into()));
                };
                let input: &[f64] = if l == 0 { ex.input.values() } else { &trace.act[l - 1] };
                let [gw, gb] = &mut grads.layers[l];
                for (u, &du) in delta.iter().enumerate() {
                    if du == 0.0 {
                        continue;
                    }
                    gb[u] += du;
                    for (g, &x) in gw[u * d..(u + 1) * d].iter_mut().zip(input) {
                        *g += du * x;
                    }
                }
                if l == 0 {
                    break;
                }
                // dLoss / d(output of layer l-1)
                let mut up = vec![0.0; d];
                for (u, &du) in delta.iter().enumerate() {
                    if du == 0.0 {
                        continue;
                    }
                    for (o, &w) in up.iter_mut().zip(&weights[u * d..(u + 1) * d]) {
                        *o += du * w;
                    }
                }
                let prev = &self.layers[l - 1];
                delta = match prev.spec.activation() {
                    Some(f) if matches!(prev.spec, LayerSpec::Dense { .. }) => up
                        .iter()
                        .zip(&trace.pre[l - 1])
                        .zip(&trace.act[l - 1])
                        .map(|((&g, &z), &a)| g * f.derivative(z, a))
                        .collect(),
                    // Generalized and RBF units: the output is the activation itself.
                    _ => up,
                };
            } else {
                // Layer 0, generalized or RBF; `delta` is dLoss / d(unit output).
                let point = &ex.input;
                let mut acc = trace.cond.as_ref().map(CondGrad::zeros);
                let fallback;
                let cond = match &trace.cond {
                    Some(c) => c,
                    None => {
                        fallback = ConditionalGmm::from_parts(vec![], point.mask().to_vec(), vec![], vec![])?;
                        &fallback
                    }
                };
                let [g0, g1] = &mut grads.layers[0];
                match &layer.params {
                    LayerParams::Affine { weights, bias } => {
                        for (u, &du) in delta.iter().enumerate() {
                            if du == 0.0 {
                                continue;
                            }
                            relu_backward(
                                &weights[u * d..(u + 1) * d],
                                bias[u],
                                cond,
                                point,
                                du,
                                &mut g0[u * d..(u + 1) * d],
                                &mut g1[u],
                                acc.as_mut(),
                            );
                        }
                    }
                    LayerParams::Rbf { centers, log_gamma } => {
                        for (u, &du) in delta.iter().enumerate() {
                            if du == 0.0 {
                                continue;
                            }
                            rbf_backward(
                                &centers[u * d..(u + 1) * d],
                                &log_gamma[u * d..(u + 1) * d],
                                cond,
                                point,
                                du,
                                &mut g0[u * d..(u + 1) * d],
                                &mut g1[u * d..(u + 1) * d],
                                acc.as_mut(),
                            );
                        }
                    }
                }
                if let (Some(acc), Some(cond), Some(gmm), Some(dg)) =
                    (acc, &trace.cond, &self.density, grads.density.as_mut())
                {
                    conditional_backward(gmm, point, cond, &acc.d_resp, &acc.d_means, &acc.d_vars, dg);
                }
            }
        }
        Ok(loss)
    }

    /// Checkpoint as a single JSON document.
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let m: NetworkModel = serde_json::from_str(text)?;
        if let Some(g) = &m.density {
            g.validate()?;
        }
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd { lr: f64 },
    Adam { lr: f64, beta1: f64, beta2: f64, eps: f64 },
}

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::Adam {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl OptimizerKind {
    pub fn lr(&self) -> f64 {
        match *self {
            OptimizerKind::Sgd { lr } | OptimizerKind::Adam { lr, .. } => lr,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    #[serde(default)]
    pub optimizer: OptimizerKind,
    pub batch_size: usize,
    pub epochs: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "one")]
    pub gmm_lr_scale: f64,
    #[serde(default)]
    pub patience: Option<usize>,
}

fn one() -> f64 {
    1.0
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            optimizer: OptimizerKind::default(),
            batch_size: 32,
            epochs: 20,
            seed: 0,
            gmm_lr_scale: 1.0,
            patience: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.optimizer.lr() >= 0.0) || self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config(
                "learning rate must be >= 0 and batch size and epochs positive".into(),
            ));
        }
        if !(self.gmm_lr_scale >= 0.0) {
            return Err(Error::Config("gmm_lr_scale must be >= 0".into()));
        }
        Ok(())
    }
}

/// Adam/SGD state over the model's parameter groups.
pub struct Optimizer {
    kind: OptimizerKind,
    gmm_lr_scale: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, gmm_lr_scale: f64, model: &NetworkModel) -> Self {
        let sizes = group_sizes(model);
        Optimizer {
            kind,
            gmm_lr_scale,
            step: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    /// Number of updates applied so far.
    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update and re-floors the density variances.
    pub fn step(&mut self, model: &mut NetworkModel, grads: &Gradients) {
        self.step += 1;
        let t = self.step as i32;
        let mut groups: Vec<(&mut [f64], &[f64], f64)> = Vec::new();
        for (layer, g) in model.layers.iter_mut().zip(&grads.layers) {
            let [p0, p1] = layer.params.groups_mut();
            groups.push((p0, &g[0], 1.0));
            groups.push((p1, &g[1], 1.0));
        }
        if let (Some(gmm), Some(dg)) = (model.density.as_mut(), grads.density.as_ref()) {
            let (a, b, c) = gmm.parts_mut();
            groups.push((a, &dg.logits, self.gmm_lr_scale));
            groups.push((b, &dg.means, self.gmm_lr_scale));
            groups.push((c, &dg.log_vars, self.gmm_lr_scale));
        }
        for (gi, (p, g, lr_scale)) in groups.into_iter().enumerate() {
            match self.kind {
                OptimizerKind::Sgd { lr } => {
                    let lr = lr * lr_scale;
                    for (pi, gi) in p.iter_mut().zip(g) {
                        *pi -= lr * gi;
                    }
                }
                OptimizerKind::Adam { lr, beta1, beta2, eps } => {
                    let lr = lr * lr_scale;
                    let bc1 = 1.0 - beta1.powi(t);
                    let bc2 = 1.0 - beta2.powi(t);
                    let (m, v) = (&mut self.m[gi], &mut self.v[gi]);
                    for ((pi, &gv), (mi, vi)) in p.iter_mut().zip(g).zip(m.iter_mut().zip(v.iter_mut())) {
                        *mi = beta1 * *mi + (1.0 - beta1) * gv;
                        *vi = beta2 * *vi + (1.0 - beta2) * gv * gv;
                        let mh = *mi / bc1;
                        let vh = *vi / bc2;
                        *pi -= lr * mh / (vh.sqrt() + eps);
                    }
                }
            }
        }
        if let Some(gmm) = model.density.as_mut() {
            gmm.floor_variances(VARIANCE_FLOOR);
        }
    }
}

fn group_sizes(model: &NetworkModel) -> Vec<usize> {
    let mut s: Vec<usize> = model
        .layers
        .iter()
        .flat_map(|l| l.params.groups().map(<[f64]>::len))
        .collect();
    if let Some(g) = &model.density {
        s.extend([g.k(), g.k() * g.dim(), g.k() * g.dim()]);
    }
    s
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochMetrics>,
    pub stopped_early: bool,
}

/// Mini-batch training with a seeded shuffle. When `val` and a patience are
/// given, training stops after `patience` epochs without validation
/// improvement and the best parameters are restored.
pub fn train(
    model: &mut NetworkModel,
    examples: &[Example],
    val: Option<&[Example]>,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    train_with_callback(model, examples, val, cfg, |_, _| {})
}

/// As [`train`], calling `on_epoch(epoch, model)` after every epoch.
pub fn train_with_callback(
    model: &mut NetworkModel,
    examples: &[Example],
    val: Option<&[Example]>,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(usize, &NetworkModel),
) -> Result<TrainReport> {
    cfg.validate()?;
    if examples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Optimizer::new(cfg.optimizer, cfg.gmm_lr_scale, model);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, NetworkModel)> = None;
    let mut since_best = 0usize;
    let mut stopped_early = false;
    let mut batch = Vec::with_capacity(cfg.batch_size);

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            batch.clear();
            batch.extend(chunk.iter().map(|&i| examples[i].clone()));
            // after the first update a numerical breakdown (e.g. every mixture
            // component losing all mass) means the run has blown up
            let (loss, grads) = match model.backward(&batch) {
                Err(Error::Internal(_)) if opt.steps() > 0 => {
                    return Err(Error::TrainingDiverged { epoch, loss: f64::NAN })
                }
                r => r?,
            };
            if !loss.is_finite() {
                return Err(Error::TrainingDiverged { epoch, loss });
            }
            sum += loss * chunk.len() as f64;
            opt.step(model, &grads);
            if !model.params_finite() {
                return Err(Error::TrainingDiverged { epoch, loss });
            }
        }
        let train_loss = sum / examples.len() as f64;
        if !train_loss.is_finite() {
            return Err(Error::TrainingDiverged { epoch, loss: train_loss });
        }
        let val_loss = match val {
            Some(v) if !v.is_empty() => Some(model.batch_loss(v)?),
            _ => None,
        };
        history.push(EpochMetrics {
            epoch,
            train_loss,
            val_loss,
        });
        on_epoch(epoch, model);
        if let (Some(vl), Some(patience)) = (val_loss, cfg.patience) {
            if best.as_ref().map_or(true, |(b, _)| vl < *b) {
                best = Some((vl, model.clone()));
                since_best = 0;
            } else {
                since_best += 1;
                if since_best > patience {
                    stopped_early = true;
                    break;
                }
            }
        }
    }
    if let Some((_, m)) = best {
        *model = m;
    }
    Ok(TrainReport {
        epochs: history,
        stopped_early,
    })
}

/// Classification examples from a labeled dataset.
pub fn class_examples(data: &DatasetWithMask) -> Result<Vec<Example>> {
    let labels = data
        .labels()
        .ok_or_else(|| Error::invalid("classification needs labels"))?;
    Ok((0..data.n_rows())
        .map(|i| Example {
            input: data.point(i),
            target: Target::Class(labels[i]),
        })
        .collect())
}

/// Reconstruction examples: each row is both input and masked target.
pub fn reconstruction_examples(data: &DatasetWithMask) -> Vec<Example> {
    (0..data.n_rows())
        .map(|i| {
            let p = data.point(i);
            Example {
                input: p.clone(),
                target: Target::Masked(p),
            }
        })
        .collect()
}

/// Trains on a dataset using the loss the model was built with.
pub fn train_dataset(model: &mut NetworkModel, data: &DatasetWithMask, cfg: &TrainConfig) -> Result<TrainReport> {
    let examples = match model.loss {
        LossKind::CrossEntropy => class_examples(data)?,
        LossKind::MaskedMse => reconstruction_examples(data),
    };
    train(model, &examples, None, cfg)
}

/// Fraction of correctly classified examples.
pub fn accuracy(model: &NetworkModel, examples: &[Example]) -> Result<f64> {
    if examples.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0usize;
    for ex in examples {
        if let Target::Class(c) = ex.target {
            if model.predict_class(&ex.input)? == c {
                hits += 1;
            }
        }
    }
    Ok(hits as f64 / examples.len() as f64)
}
