//! Small classifiers with exact per-sample gradients.
//!
//! Every model is a stack of [`LayerSpec`]s with ReLU after each layer but
//! the last, followed by a log-softmax. The loss is the negative
//! log-likelihood of the label. Parameters are flattened layer by layer in
//! declaration order, weights before biases, row-major within a tensor.

mod checkpoint;
mod layers;

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{check_len, Error, Result};

pub use checkpoint::{read_checkpoint, write_checkpoint};
pub use layers::{LayerSpec, ParamGrad};

/// Side length of the square grayscale inputs the CNN expects.
pub const CNN_INPUT_SIDE: usize = 28;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Architecture {
    /// Fully connected layers; `sizes[0]` is the input width and the last
    /// entry is the number of classes.
    Mlp(Vec<usize>),
    /// conv(1->5, k5) -> conv(5->10, k5) -> fc(4000->100) -> fc(100->2).
    Cnn,
}

impl Architecture {
    pub fn layers(&self) -> Vec<LayerSpec> {
        match self {
            Architecture::Mlp(sizes) => sizes
                .windows(2)
                .map(|w| LayerSpec::Dense {
                    inputs: w[0],
                    outputs: w[1],
                })
                .collect(),
            Architecture::Cnn => vec![
                LayerSpec::Conv2d {
                    in_channels: 1,
                    out_channels: 5,
                    kernel: 5,
                    in_height: CNN_INPUT_SIDE,
                    in_width: CNN_INPUT_SIDE,
                },
                LayerSpec::Conv2d {
                    in_channels: 5,
                    out_channels: 10,
                    kernel: 5,
                    in_height: 24,
                    in_width: 24,
                },
                LayerSpec::Dense {
                    inputs: 4000,
                    outputs: 100,
                },
                LayerSpec::Dense {
                    inputs: 100,
                    outputs: 2,
                },
            ],
        }
    }

    fn validate(&self) -> Result<()> {
        if let Architecture::Mlp(sizes) = self {
            if sizes.len() < 2 || sizes.contains(&0) {
                return Err(Error::InvalidArgument(format!(
                    "MLP needs at least an input and an output width, all nonzero: {sizes:?}"
                )));
            }
        }
        Ok(())
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Architecture::Cnn => f.write_str("cnn"),
            Architecture::Mlp(sizes) => {
                let s: Vec<String> = sizes.iter().map(|s| s.to_string()).collect();
                write!(f, "mlp:{}", s.join("-"))
            }
        }
    }
}

impl FromStr for Architecture {
    type Err = Error;

    /// Parses `cnn` or `mlp:<in>-<hidden>...-<classes>`.
    fn from_str(s: &str) -> Result<Self> {
        let arch = match s.trim() {
            "cnn" => Architecture::Cnn,
            other => {
                let sizes = other
                    .strip_prefix("mlp:")
                    .ok_or_else(|| Error::InvalidArgument(format!("unknown architecture `{s}`")))?;
                let sizes = sizes
                    .split('-')
                    .map(|t| {
                        t.trim()
                            .parse::<usize>()
                            .map_err(|_| Error::InvalidArgument(format!("bad layer width `{t}`")))
                    })
                    .collect::<Result<Vec<_>>>()?;
                Architecture::Mlp(sizes)
            }
        };
        arch.validate()?;
        Ok(arch)
    }
}

impl TryFrom<String> for Architecture {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Architecture> for String {
    fn from(a: Architecture) -> String {
        a.to_string()
    }
}

/// Flat model parameters; always finite.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector(Vec<f64>);

impl ParamVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("parameter {i} is {}", values[i])));
        }
        Ok(ParamVector(values))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    arch: Architecture,
    layers: Vec<LayerSpec>,
    offsets: Vec<usize>,
    params: ParamVector,
}

impl Model {
    /// Model with all parameters set to zero.
    pub fn zeros(arch: Architecture) -> Result<Self> {
        arch.validate()?;
        let layers = arch.layers();
        let mut offsets = Vec::with_capacity(layers.len() + 1);
        let mut total = 0;
        for l in &layers {
            offsets.push(total);
            total += l.param_len();
        }
        offsets.push(total);
        Ok(Model {
            arch,
            layers,
            offsets,
            params: ParamVector(vec![0.0; total]),
        })
    }

    /// Draws every weight and bias of a layer from
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn init<R: Rng + ?Sized>(arch: Architecture, rng: &mut R) -> Result<Self> {
        let mut model = Model::zeros(arch)?;
        for (l, spec) in model.layers.iter().enumerate() {
            let bound = 1.0 / (spec.fan_in() as f64).sqrt();
            for v in &mut model.params.0[model.offsets[l]..model.offsets[l + 1]] {
                *v = rng.random_range(-bound..bound);
            }
        }
        Ok(model)
    }

    pub fn with_params(arch: Architecture, params: Vec<f64>) -> Result<Self> {
        let mut model = Model::zeros(arch)?;
        model.set_params(params)?;
        Ok(model)
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        self.params.as_slice()
    }

    pub fn set_params(&mut self, params: Vec<f64>) -> Result<()> {
        check_len(self.param_count(), params.len())?;
        self.params = ParamVector::new(params)?;
        Ok(())
    }

    /// Overwrites parameters in place after a finiteness check.
    pub fn update_params(&mut self, f: impl FnOnce(&mut [f64])) -> Result<()> {
        f(&mut self.params.0);
        if let Some(i) = self.params.0.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "parameter {i} became {} after update",
                self.params.0[i]
            )));
        }
        Ok(())
    }

    pub fn input_len(&self) -> usize {
        self.layers[0].input_len()
    }

    pub fn classes(&self) -> usize {
        self.layers[self.layers.len() - 1].output_len()
    }

    fn layer_params(&self, l: usize) -> &[f64] {
        &self.params.0[self.offsets[l]..self.offsets[l + 1]]
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_len() {
            return Err(Error::Shape(format!(
                "{} expects {} input values, got {}",
                self.arch,
                self.input_len(),
                x.len()
            )));
        }
        Ok(())
    }

    fn check_label(&self, y: usize) -> Result<()> {
        if y >= self.classes() {
            return Err(Error::InvalidArgument(format!(
                "label {y} outside 0..{}",
                self.classes()
            )));
        }
        Ok(())
    }

    /// Runs the network, leaving post-activation outputs in `ws`.
    /// The last activation holds log-probabilities.
    fn forward_into(&self, x: &[f64], ws: &mut Workspace) {
        let last = self.layers.len() - 1;
        for (l, spec) in self.layers.iter().enumerate() {
            let (before, after) = ws.acts.split_at_mut(l);
            let input = if l == 0 { x } else { &before[l - 1] };
            let out = &mut after[0];
            spec.forward(self.layer_params(l), input, out);
            if l == last {
                log_softmax_in_place(out);
            } else {
                out.iter_mut().for_each(|v| *v = v.max(0.0));
            }
        }
    }

    /// Log-probabilities over classes.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let mut ws = Workspace::new(self);
        self.forward_into(x, &mut ws);
        Ok(ws.acts.pop().expect("at least one layer"))
    }

    /// Negative log-likelihood of `y` at the current parameters.
    pub fn sample_loss(&self, x: &[f64], y: usize) -> Result<f64> {
        self.check_label(y)?;
        loss(&self.forward(x)?, y)
    }

    /// Shared backward sweep; returns the sample loss.
    fn backward_into(&self, x: &[f64], y: usize, ws: &mut Workspace, mut sink: GradSink<'_>) -> f64 {
        self.forward_into(x, ws);
        let last = self.layers.len() - 1;
        let log_probs = &ws.acts[last];
        let sample_loss = -log_probs[y];

        // d(NLL)/d(logits) = softmax - onehot
        let delta = &mut ws.deltas[last];
        for (d, lp) in delta.iter_mut().zip(log_probs) {
            *d = lp.exp();
        }
        delta[y] -= 1.0;

        for l in (0..=last).rev() {
            let input = if l == 0 { x } else { &ws.acts[l - 1] };
            let (lower, upper) = ws.deltas.split_at_mut(l);
            let dout = &upper[0];
            let dx = if l == 0 { None } else { Some(&mut lower[l - 1][..]) };
            let grad = match &mut sink {
                GradSink::Write(g) => {
                    ParamGrad::Write(&mut g[self.offsets[l]..self.offsets[l + 1]])
                }
                GradSink::SquaredNorm(acc) => ParamGrad::SquaredNorm(acc),
            };
            self.layers[l].backward(self.layer_params(l), input, dout, grad, dx);
            if l > 0 {
                // ReLU: pass gradient only where the activation was positive.
                for (d, a) in lower[l - 1].iter_mut().zip(&ws.acts[l - 1]) {
                    if *a <= 0.0 {
                        *d = 0.0;
                    }
                }
            }
        }
        sample_loss
    }

    /// Exact gradient of the sample loss with respect to all parameters.
    pub fn per_sample_gradient(&self, x: &[f64], y: usize) -> Result<Vec<f64>> {
        Ok(self.loss_and_gradient(x, y)?.1)
    }

    pub fn loss_and_gradient(&self, x: &[f64], y: usize) -> Result<(f64, Vec<f64>)> {
        self.check_input(x)?;
        self.check_label(y)?;
        let mut grad = vec![0.0; self.param_count()];
        let mut ws = Workspace::new(self);
        let l = self.backward_into(x, y, &mut ws, GradSink::Write(&mut grad));
        Ok((l, grad))
    }

    /// Loss and Euclidean norm of the per-sample gradient without
    /// materializing the gradient.
    pub fn loss_and_gradient_norm(&self, x: &[f64], y: usize) -> Result<(f64, f64)> {
        self.check_input(x)?;
        self.check_label(y)?;
        let mut ws = Workspace::new(self);
        Ok(self.norm_with(x, y, &mut ws))
    }

    fn norm_with(&self, x: &[f64], y: usize, ws: &mut Workspace) -> (f64, f64) {
        let mut sq = 0.0;
        let l = self.backward_into(x, y, ws, GradSink::SquaredNorm(&mut sq));
        (l, sq.sqrt())
    }

    fn check_dataset(&self, data: &Dataset) -> Result<()> {
        if data.input_len() != self.input_len() {
            return Err(Error::Shape(format!(
                "dataset `{}` has inputs of length {}, {} expects {}",
                data.name(),
                data.input_len(),
                self.arch,
                self.input_len()
            )));
        }
        if data.classes() > self.classes() {
            return Err(Error::Shape(format!(
                "dataset `{}` has {} classes, model outputs {}",
                data.name(),
                data.classes(),
                self.classes()
            )));
        }
        Ok(())
    }

    /// Per-item gradients and their norms at the current parameters.
    pub fn grad_table(&self, data: &Dataset) -> Result<GradTable> {
        self.check_dataset(data)?;
        let grads = (0..data.len())
            .into_par_iter()
            .map(|i| self.per_sample_gradient(data.input(i), data.label(i)))
            .collect::<Result<Vec<_>>>()?;
        Ok(GradTable::from_grads(grads))
    }

    /// Per-item losses and gradient norms, evaluated in parallel and
    /// assembled in index order.
    pub fn loss_and_norms(&self, data: &Dataset) -> Result<(Vec<f64>, Vec<f64>)> {
        self.check_dataset(data)?;
        Ok((0..data.len())
            .into_par_iter()
            .map_init(|| Workspace::new(self), |ws, i| self.norm_with(data.input(i), data.label(i), ws))
            .unzip())
    }

    /// Gradient norms for a subset of items.
    pub fn norms_for(&self, data: &Dataset, items: &[usize]) -> Result<Vec<f64>> {
        self.check_dataset(data)?;
        Ok(items
            .par_iter()
            .map_init(|| Workspace::new(self), |ws, &i| self.norm_with(data.input(i), data.label(i), ws).1)
            .collect())
    }

    /// Mean loss over the whole dataset.
    pub fn mean_loss(&self, data: &Dataset) -> Result<f64> {
        self.check_dataset(data)?;
        let losses: Vec<f64> = (0..data.len())
            .into_par_iter()
            .map_init(
                || Workspace::new(self),
                |ws, i| {
                    self.forward_into(data.input(i), ws);
                    -ws.acts[self.layers.len() - 1][data.label(i)]
                },
            )
            .collect();
        Ok(losses.iter().sum::<f64>() / losses.len() as f64)
    }

    /// Fraction of items whose arg-max class equals the label.
    pub fn accuracy(&self, data: &Dataset) -> Result<f64> {
        self.check_dataset(data)?;
        let correct: usize = (0..data.len())
            .into_par_iter()
            .map_init(
                || Workspace::new(self),
                |ws, i| {
                    self.forward_into(data.input(i), ws);
                    let lp = &ws.acts[self.layers.len() - 1];
                    let arg = (0..lp.len()).fold(0, |b, k| if lp[k] > lp[b] { k } else { b });
                    usize::from(arg == data.label(i))
                },
            )
            .sum();
        Ok(correct as f64 / data.len() as f64)
    }
}

enum GradSink<'a> {
    Write(&'a mut [f64]),
    SquaredNorm(&'a mut f64),
}

/// Reusable activation and delta buffers for one thread.
struct Workspace {
    acts: Vec<Vec<f64>>,
    deltas: Vec<Vec<f64>>,
}

impl Workspace {
    fn new(model: &Model) -> Self {
        let bufs: Vec<Vec<f64>> = model.layers.iter().map(|l| vec![0.0; l.output_len()]).collect();
        Workspace {
            acts: bufs.clone(),
            deltas: bufs,
        }
    }
}

fn log_softmax_in_place(z: &mut [f64]) {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    z.iter_mut().for_each(|v| *v -= lse);
}

/// Negative log-likelihood: `-log_probs[y]`.
pub fn loss(log_probs: &[f64], y: usize) -> Result<f64> {
    log_probs
        .get(y)
        .map(|lp| -lp)
        .ok_or_else(|| Error::InvalidArgument(format!("label {y} outside 0..{}", log_probs.len())))
}

/// Per-sample gradients and their Euclidean norms.
#[derive(Debug, Clone, PartialEq)]
pub struct GradTable {
    pub grads: Vec<Vec<f64>>,
    pub norms: Vec<f64>,
}

impl GradTable {
    pub fn from_grads(grads: Vec<Vec<f64>>) -> Self {
        let norms = grads.iter().map(|g| layers::dot(g, g).sqrt()).collect();
        GradTable { grads, norms }
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// Full-batch mean gradient `(1/N) sum_i grad_i`.
    pub fn mean_gradient(&self) -> Vec<f64> {
        let n = self.grads.len() as f64;
        let mut mean = vec![0.0; self.grads.first().map_or(0, Vec::len)];
        for g in &self.grads {
            mean.iter_mut().zip(g).for_each(|(m, x)| *m += x);
        }
        mean.iter_mut().for_each(|m| *m /= n);
        mean
    }
}

/// Central differences `(f(theta + h e_k) - f(theta - h e_k)) / 2h` on the
/// listed coordinates.
pub fn central_differences(
    mut f: impl FnMut(&[f64]) -> f64,
    theta: &[f64],
    h: f64,
    coords: &[usize],
) -> Result<Vec<f64>> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::InvalidArgument(format!("step {h} must be positive")));
    }
    let mut probe = theta.to_vec();
    coords
        .iter()
        .map(|&k| {
            if k >= theta.len() {
                return Err(Error::InvalidArgument(format!("coordinate {k} out of range")));
            }
            let orig = probe[k];
            probe[k] = orig + h;
            let plus = f(&probe);
            probe[k] = orig - h;
            let minus = f(&probe);
            probe[k] = orig;
            Ok((plus - minus) / (2.0 * h))
        })
        .collect()
}

/// Finite-difference gradient of the sample loss on a subset of parameter
/// coordinates. Verification oracle for [`Model::per_sample_gradient`].
pub fn finite_diff_coords(model: &Model, x: &[f64], y: usize, h: f64, coords: &[usize]) -> Result<Vec<f64>> {
    model.check_input(x)?;
    model.check_label(y)?;
    let mut probe = model.clone();
    let mut ws = Workspace::new(model);
    let last = model.layers.len() - 1;
    central_differences(
        |theta| {
            probe.params.0.copy_from_slice(theta);
            probe.forward_into(x, &mut ws);
            -ws.acts[last][y]
        },
        model.params(),
        h,
        coords,
    )
}

/// Finite-difference gradient over every parameter.
pub fn finite_diff_gradient(model: &Model, x: &[f64], y: usize, h: f64) -> Result<Vec<f64>> {
    let coords: Vec<usize> = (0..model.param_count()).collect();
    finite_diff_coords(model, x, y, h, &coords)
}

/// `|a - b| / max(|a|, |b|, floor)`, maximized over coordinates. The floor
/// keeps rounding noise on near-zero entries from dominating.
pub fn max_relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Denominator floor used by [`gradient_check`].
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

/// Compares backprop with central differences on `probes` random
/// (parameters, input, label) triples. Each probe checks `coords` random
/// coordinates, or every coordinate when `coords` is `None`. Inputs are
/// uniform on `[0, 1]`. Returns the worst relative error.
pub fn gradient_check<R: Rng + ?Sized>(
    arch: &Architecture,
    probes: usize,
    coords: Option<usize>,
    h: f64,
    rng: &mut R,
) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for _ in 0..probes {
        let model = Model::init(arch.clone(), rng)?;
        let x: Vec<f64> = (0..model.input_len()).map(|_| rng.random::<f64>()).collect();
        let y = rng.random_range(0..model.classes());
        let exact = model.per_sample_gradient(&x, y)?;
        let picked: Vec<usize> = match coords {
            Some(k) => rand::seq::index::sample(rng, model.param_count(), k.min(model.param_count())).into_vec(),
            None => (0..model.param_count()).collect(),
        };
        let fd = finite_diff_coords(&model, &x, y, h, &picked)?;
        let bp: Vec<f64> = picked.iter().map(|&k| exact[k]).collect();
        worst = worst.max(max_relative_error(&bp, &fd, GRAD_CHECK_FLOOR));
    }
    Ok(worst)
}
