//! Importance-weighted minibatch estimates and optimizer update rules.
//!
//! Importance weights `1/(N p_i)` multiply gradients that were already
//! computed; they are plain numbers and never enter a differentiated
//! expression.

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::prob::Scheme;

pub const DEFAULT_LR: f64 = 0.01;
pub const DEFAULT_MOMENTUM: f64 = 0.5;
pub const DEFAULT_ALPHA: f64 = 0.99;
pub const DEFAULT_BETA1: f64 = 0.9;
pub const DEFAULT_BETA2: f64 = 0.999;
pub const DEFAULT_EPS: f64 = 1e-8;

/// `1 / (n p_i)`.
pub fn importance_weight(n: usize, p_i: f64) -> Result<f64> {
    if n == 0 {
        return Err(Error::InvalidArgument("importance weight over zero items".into()));
    }
    if !(p_i > 0.0 && p_i.is_finite()) {
        return Err(Error::InvalidArgument(format!("probability {p_i} must be positive")));
    }
    Ok(1.0 / (n as f64 * p_i))
}

/// How sampled gradients are weighted in the minibatch mean.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Weighting {
    /// `w_i = 1/(N p_i)`; unbiased for the full-batch gradient.
    #[default]
    Importance,
    /// `w_i = 1` regardless of `p`. Biased unless `p` is uniform; kept to
    /// demonstrate the effect of forgetting the weights.
    Unweighted,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceEstimate {
    pub g: Vec<f64>,
    pub indices: Vec<usize>,
    pub weights: Vec<f64>,
}

/// `G = (1/B) sum_k w_{i_k} grad_{i_k}` where `batch[k]` is the gradient of
/// item `indices[k]`.
pub fn estimate_from_batch(
    batch: &[Vec<f64>],
    p: &Scheme,
    indices: &[usize],
    weighting: Weighting,
) -> Result<ImportanceEstimate> {
    if indices.is_empty() {
        return Err(Error::InvalidArgument("empty minibatch".into()));
    }
    check_len(indices.len(), batch.len())?;
    let n = p.len();
    let dim = batch[0].len();
    let mut g = vec![0.0; dim];
    let mut weights = Vec::with_capacity(indices.len());
    for (grad, &i) in batch.iter().zip(indices) {
        if i >= n {
            return Err(Error::InvalidArgument(format!("index {i} outside 0..{n}")));
        }
        check_len(dim, grad.len())?;
        let w = match weighting {
            Weighting::Importance => importance_weight(n, p[i])?,
            Weighting::Unweighted => 1.0,
        };
        for (acc, x) in g.iter_mut().zip(grad) {
            *acc += w * x;
        }
        weights.push(w);
    }
    let b = indices.len() as f64;
    g.iter_mut().for_each(|v| *v /= b);
    if g.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("importance estimate".into()));
    }
    Ok(ImportanceEstimate {
        g,
        indices: indices.to_vec(),
        weights,
    })
}

/// [`estimate_from_batch`] reading gradients from a per-item table.
pub fn build_estimate(grads: &[Vec<f64>], p: &Scheme, indices: &[usize]) -> Result<ImportanceEstimate> {
    check_len(p.len(), grads.len())?;
    let batch = indices
        .iter()
        .map(|&i| {
            grads
                .get(i)
                .cloned()
                .ok_or_else(|| Error::InvalidArgument(format!("index {i} outside 0..{}", grads.len())))
        })
        .collect::<Result<Vec<_>>>()?;
    estimate_from_batch(&batch, p, indices, Weighting::Importance)
}

/// Second-moment accumulator of the adaptive optimizers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SecondMoment {
    /// One scalar tracking `||G||^2`, as in the convergence-speed algebra.
    PaperScalar,
    /// One accumulator per coordinate tracking `G_k^2`.
    #[default]
    Elementwise,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Accumulator {
    Scalar(f64),
    Elementwise(Vec<f64>),
}

impl Accumulator {
    pub fn zeros(mode: SecondMoment, dim: usize) -> Self {
        match mode {
            SecondMoment::PaperScalar => Accumulator::Scalar(0.0),
            SecondMoment::Elementwise => Accumulator::Elementwise(vec![0.0; dim]),
        }
    }

    /// `v = decay * v + (1 - decay) * (squared G)`.
    fn update(&mut self, decay: f64, g: &[f64]) {
        match self {
            Accumulator::Scalar(v) => {
                let sq: f64 = g.iter().map(|x| x * x).sum();
                *v = decay * *v + (1.0 - decay) * sq;
            }
            Accumulator::Elementwise(v) => {
                for (vk, gk) in v.iter_mut().zip(g) {
                    *vk = decay * *vk + (1.0 - decay) * gk * gk;
                }
            }
        }
    }

    fn get(&self, k: usize) -> f64 {
        match self {
            Accumulator::Scalar(v) => *v,
            Accumulator::Elementwise(v) => v[k],
        }
    }
}

fn check_step(theta: &[f64], g: &[f64]) -> Result<()> {
    check_len(theta.len(), g.len())?;
    if let Some(k) = g.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("gradient coordinate {k} is {}", g[k])));
    }
    Ok(())
}

fn check_result(theta: &[f64]) -> Result<()> {
    match theta.iter().position(|v| !v.is_finite()) {
        Some(k) => Err(Error::NonFinite(format!("parameter {k} diverged to {}", theta[k]))),
        None => Ok(()),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sgd {
    pub lr: f64,
}

impl Sgd {
    /// `theta -= lr * G`
    pub fn step(&mut self, theta: &mut [f64], g: &[f64]) -> Result<()> {
        check_step(theta, g)?;
        for (t, gk) in theta.iter_mut().zip(g) {
            *t -= self.lr * gk;
        }
        check_result(theta)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Momentum {
    pub lr: f64,
    pub mu: f64,
    pub velocity: Vec<f64>,
}

impl Momentum {
    /// `v = mu * v + G; theta -= lr * v`
    pub fn step(&mut self, theta: &mut [f64], g: &[f64]) -> Result<()> {
        check_step(theta, g)?;
        check_len(theta.len(), self.velocity.len())?;
        for ((t, v), gk) in theta.iter_mut().zip(&mut self.velocity).zip(g) {
            *v = self.mu * *v + gk;
            *t -= self.lr * *v;
        }
        check_result(theta)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RmsProp {
    pub lr: f64,
    pub alpha: f64,
    pub eps: f64,
    pub v: Accumulator,
}

impl RmsProp {
    /// `v = alpha * v + (1 - alpha) * G^2; theta -= lr / (eps + sqrt(v)) * G`
    pub fn step(&mut self, theta: &mut [f64], g: &[f64]) -> Result<()> {
        check_step(theta, g)?;
        self.v.update(self.alpha, g);
        for (k, (t, gk)) in theta.iter_mut().zip(g).enumerate() {
            let rate = self.lr / (self.eps + self.v.get(k).sqrt());
            *t -= rate * gk;
        }
        check_result(theta)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: Vec<f64>,
    pub v: Accumulator,
    /// Number of updates applied so far; the next update uses `t + 1`.
    pub t: u64,
}

impl Adam {
    pub fn step(&mut self, theta: &mut [f64], g: &[f64]) -> Result<()> {
        check_step(theta, g)?;
        check_len(theta.len(), self.m.len())?;
        self.t += 1;
        let t = self.t as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        self.v.update(self.beta2, g);
        for (k, (th, gk)) in theta.iter_mut().zip(g).enumerate() {
            let m = &mut self.m[k];
            *m = self.beta1 * *m + (1.0 - self.beta1) * gk;
            let m_hat = *m / c1;
            let v_hat = self.v.get(k) / c2;
            *th -= self.lr * m_hat / (self.eps + v_hat.sqrt());
        }
        check_result(theta)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Momentum,
    RmsProp,
    Adam,
}

impl OptimizerKind {
    pub const ALL: [OptimizerKind; 4] = [
        OptimizerKind::Sgd,
        OptimizerKind::Momentum,
        OptimizerKind::RmsProp,
        OptimizerKind::Adam,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Momentum => "momentum",
            OptimizerKind::RmsProp => "rmsprop",
            OptimizerKind::Adam => "adam",
        }
    }
}

impl std::fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "momentum" | "sgd-m" | "sgdm" => Ok(OptimizerKind::Momentum),
            "rmsprop" => Ok(OptimizerKind::RmsProp),
            "adam" => Ok(OptimizerKind::Adam),
            other => Err(Error::InvalidArgument(format!("unknown optimizer `{other}`"))),
        }
    }
}

/// Optimizer choice plus hyperparameters; unused fields are ignored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub momentum: f64,
    pub alpha: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub mode: SecondMoment,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Sgd,
            lr: DEFAULT_LR,
            momentum: DEFAULT_MOMENTUM,
            alpha: DEFAULT_ALPHA,
            beta1: DEFAULT_BETA1,
            beta2: DEFAULT_BETA2,
            eps: DEFAULT_EPS,
            mode: SecondMoment::default(),
        }
    }
}

impl OptimizerConfig {
    pub fn new(kind: OptimizerKind) -> Self {
        OptimizerConfig {
            kind,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str, v: f64| Err(Error::InvalidArgument(format!("{what} = {v} out of range")));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("learning rate", self.lr);
        }
        if !(0.0..=1.0).contains(&self.momentum) {
            return bad("momentum", self.momentum);
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad("alpha", self.alpha);
        }
        // beta = 1 would zero the bias-correction denominators.
        if !(0.0..1.0).contains(&self.beta1) {
            return bad("beta1", self.beta1);
        }
        if !(0.0..1.0).contains(&self.beta2) {
            return bad("beta2", self.beta2);
        }
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return bad("eps", self.eps);
        }
        Ok(())
    }

    /// Fresh optimizer state (`v = 0`, `m = 0`) for `dim` parameters.
    pub fn build(&self, dim: usize) -> Result<Optimizer> {
        self.validate()?;
        Ok(match self.kind {
            OptimizerKind::Sgd => Optimizer::Sgd(Sgd { lr: self.lr }),
            OptimizerKind::Momentum => Optimizer::Momentum(Momentum {
                lr: self.lr,
                mu: self.momentum,
                velocity: vec![0.0; dim],
            }),
            OptimizerKind::RmsProp => Optimizer::RmsProp(RmsProp {
                lr: self.lr,
                alpha: self.alpha,
                eps: self.eps,
                v: Accumulator::zeros(self.mode, dim),
            }),
            OptimizerKind::Adam => Optimizer::Adam(Adam {
                lr: self.lr,
                beta1: self.beta1,
                beta2: self.beta2,
                eps: self.eps,
                m: vec![0.0; dim],
                v: Accumulator::zeros(self.mode, dim),
                t: 0,
            }),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Optimizer {
    Sgd(Sgd),
    Momentum(Momentum),
    RmsProp(RmsProp),
    Adam(Adam),
}

impl Optimizer {
    pub fn step(&mut self, theta: &mut [f64], g: &[f64]) -> Result<()> {
        match self {
            Optimizer::Sgd(o) => o.step(theta, g),
            Optimizer::Momentum(o) => o.step(theta, g),
            Optimizer::RmsProp(o) => o.step(theta, g),
            Optimizer::Adam(o) => o.step(theta, g),
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        match self {
            Optimizer::Sgd(_) => OptimizerKind::Sgd,
            Optimizer::Momentum(_) => OptimizerKind::Momentum,
            Optimizer::RmsProp(_) => OptimizerKind::RmsProp,
            Optimizer::Adam(_) => OptimizerKind::Adam,
        }
    }
}
