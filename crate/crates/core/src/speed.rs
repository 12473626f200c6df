//! Convergence-speed analytics.
//!
//! The convergence speed of one `B = 1` update under scheme `p` is
//!
//! ```text
//! S(p) = -E_{i~p}[ ||theta_{t+1}(i) - theta*||^2 - ||theta_t - theta*||^2 ]
//! ```
//!
//! [`speed_oracle`] evaluates this definition exactly by enumerating the `N`
//! possible draws and running the real optimizer step for each. The
//! `speed_*_closed` functions evaluate the expanded closed forms instead; the
//! two routes must agree to rounding. The RMSProp and ADAM closed forms hold
//! for the scalar (`||G||^2`) second moment only.

use rand::Rng;
use serde::Serialize;

use crate::error::{check_len, Error, Result};
use crate::optim::{importance_weight, Accumulator, Adam, Momentum, Optimizer, RmsProp, Sgd};
use crate::prob::{gradient_norm_scheme, normalize, BoxSpec, Scheme};

/// Relative slack for the `H(p_gn) <= H(p) <= H(u)` comparisons.
pub const SANDWICH_SLACK: f64 = 1e-9;

/// Oracle-vs-closed-form tolerance, relative to `max(1, |oracle|)`.
pub const ORACLE_TOLERANCE: f64 = 1e-10;

/// `H(p) = sum_i g_i^2 / p_i`.
pub fn variance_functional(p: &Scheme, norms: &[f64]) -> Result<f64> {
    check_len(p.len(), norms.len())?;
    Ok(norms.iter().zip(p.probs()).map(|(g, pi)| g * g / pi).sum())
}

/// Snapshot needed to evaluate one step's convergence speed.
#[derive(Debug, Clone)]
pub struct SpeedContext {
    pub theta: Vec<f64>,
    pub theta_star: Vec<f64>,
    /// Unweighted per-item gradients at `theta`.
    pub grads: Vec<Vec<f64>>,
    pub scheme: Scheme,
    pub lr: f64,
}

impl SpeedContext {
    pub fn new(theta: Vec<f64>, theta_star: Vec<f64>, grads: Vec<Vec<f64>>, scheme: Scheme, lr: f64) -> Result<Self> {
        check_len(theta.len(), theta_star.len())?;
        check_len(scheme.len(), grads.len())?;
        for g in &grads {
            check_len(theta.len(), g.len())?;
        }
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(Error::InvalidArgument(format!("learning rate {lr} must be >= 0")));
        }
        Ok(SpeedContext {
            theta,
            theta_star,
            grads,
            scheme,
            lr,
        })
    }

    pub fn n(&self) -> usize {
        self.grads.len()
    }

    fn dim(&self) -> usize {
        self.theta.len()
    }

    /// `theta_t - theta*`
    fn offset(&self) -> Vec<f64> {
        self.theta.iter().zip(&self.theta_star).map(|(a, b)| a - b).collect()
    }

    /// `G_i = grad_i / (N p_i)`
    fn weighted(&self, i: usize) -> Result<Vec<f64>> {
        let w = importance_weight(self.n(), self.scheme[i])?;
        Ok(self.grads[i].iter().map(|g| w * g).collect())
    }

    fn norms(&self) -> Vec<f64> {
        self.grads.iter().map(|g| dot(g, g).sqrt()).collect()
    }

    /// `(1/N) sum_i grad_i`, which equals `E_{i~p}[G_i]` for every `p`.
    fn mean_gradient(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.dim()];
        for g in &self.grads {
            m.iter_mut().zip(g).for_each(|(a, b)| *a += b);
        }
        let n = self.n() as f64;
        m.iter_mut().for_each(|a| *a /= n);
        m
    }
}

/// Optimizer and its state before the step being analysed.
#[derive(Debug, Clone, PartialEq)]
pub enum PriorState {
    Sgd,
    Momentum {
        mu: f64,
        v_prev: Vec<f64>,
    },
    /// Scalar second moment only.
    RmsProp {
        alpha: f64,
        eps: f64,
        v_prev: f64,
    },
    /// `t` is the index of the step being analysed (`t >= 1`).
    Adam {
        beta1: f64,
        beta2: f64,
        eps: f64,
        m_prev: Vec<f64>,
        v_prev: f64,
        t: u64,
    },
}

impl PriorState {
    pub fn name(&self) -> &'static str {
        match self {
            PriorState::Sgd => "sgd",
            PriorState::Momentum { .. } => "momentum",
            PriorState::RmsProp { .. } => "rmsprop",
            PriorState::Adam { .. } => "adam",
        }
    }

    fn optimizer(&self, lr: f64, dim: usize) -> Result<Optimizer> {
        Ok(match self {
            PriorState::Sgd => Optimizer::Sgd(Sgd { lr }),
            PriorState::Momentum { mu, v_prev } => {
                check_len(dim, v_prev.len())?;
                Optimizer::Momentum(Momentum {
                    lr,
                    mu: *mu,
                    velocity: v_prev.clone(),
                })
            }
            PriorState::RmsProp { alpha, eps, v_prev } => Optimizer::RmsProp(RmsProp {
                lr,
                alpha: *alpha,
                eps: *eps,
                v: Accumulator::Scalar(*v_prev),
            }),
            PriorState::Adam {
                beta1,
                beta2,
                eps,
                m_prev,
                v_prev,
                t,
            } => {
                check_len(dim, m_prev.len())?;
                if *t == 0 {
                    return Err(Error::InvalidArgument("ADAM step index starts at 1".into()));
                }
                Optimizer::Adam(Adam {
                    lr,
                    beta1: *beta1,
                    beta2: *beta2,
                    eps: *eps,
                    m: m_prev.clone(),
                    v: Accumulator::Scalar(*v_prev),
                    t: t - 1,
                })
            }
        })
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn finite(v: f64, what: &str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite(format!("{what} evaluated to {v}")))
    }
}

/// Exact expectation over the `N` draws, stepping a copy of the optimizer
/// for each draw.
pub fn speed_oracle(ctx: &SpeedContext, prior: &PriorState) -> Result<f64> {
    let base = prior.optimizer(ctx.lr, ctx.dim())?;
    let before = sq_dist(&ctx.theta, &ctx.theta_star);
    let mut s = 0.0;
    for i in 0..ctx.n() {
        let g = ctx.weighted(i)?;
        let mut opt = base.clone();
        let mut theta = ctx.theta.clone();
        opt.step(&mut theta, &g)?;
        let after = sq_dist(&theta, &ctx.theta_star);
        s -= ctx.scheme[i] * (after - before);
    }
    finite(s, "speed oracle")
}

/// `2 lr (theta - theta*)^T E[G] - lr^2 E[G^T G]`, with `E[G]` the
/// full-batch mean and `E[G^T G] = H(p) / N^2`.
pub fn speed_sgd_closed(ctx: &SpeedContext) -> Result<f64> {
    let n = ctx.n() as f64;
    let h = variance_functional(&ctx.scheme, &ctx.norms())?;
    let lr = ctx.lr;
    let s = 2.0 * lr * dot(&ctx.offset(), &ctx.mean_gradient()) - lr * lr * h / (n * n);
    finite(s, "SGD closed form")
}

pub fn speed_momentum_closed(ctx: &SpeedContext, mu: f64, v_prev: &[f64]) -> Result<f64> {
    check_len(ctx.dim(), v_prev.len())?;
    let n = ctx.n() as f64;
    let lr = ctx.lr;
    let mean = ctx.mean_gradient();
    let d = ctx.offset();
    let e_gg = variance_functional(&ctx.scheme, &ctx.norms())? / (n * n);
    let s = -lr * lr * mu * mu * dot(v_prev, v_prev) - 2.0 * lr * lr * mu * dot(v_prev, &mean) - lr * lr * e_gg
        + 2.0 * lr * mu * dot(&d, v_prev)
        + 2.0 * lr * dot(&d, &mean);
    finite(s, "momentum closed form")
}

pub fn speed_rmsprop_closed(ctx: &SpeedContext, alpha: f64, eps: f64, v_prev: f64) -> Result<f64> {
    let lr = ctx.lr;
    let d = ctx.offset();
    let mut s = 0.0;
    for i in 0..ctx.n() {
        let g = ctx.weighted(i)?;
        let gg = dot(&g, &g);
        let denom = eps + (alpha * v_prev + (1.0 - alpha) * gg).sqrt();
        s -= ctx.scheme[i] * (lr * lr * gg / (denom * denom) - 2.0 * lr * dot(&g, &d) / denom);
    }
    finite(s, "RMSProp closed form")
}

pub fn speed_adam_closed(
    ctx: &SpeedContext,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m_prev: &[f64],
    v_prev: f64,
    t: u64,
) -> Result<f64> {
    check_len(ctx.dim(), m_prev.len())?;
    if t == 0 {
        return Err(Error::InvalidArgument("ADAM step index starts at 1".into()));
    }
    let lr = ctx.lr;
    let d = ctx.offset();
    let c1 = 1.0 - beta1.powi(t as i32);
    let c2 = 1.0 - beta2.powi(t as i32);
    let mut s = 0.0;
    for i in 0..ctx.n() {
        let g = ctx.weighted(i)?;
        let gg = dot(&g, &g);
        let m: Vec<f64> = m_prev.iter().zip(&g).map(|(a, b)| beta1 * a + (1.0 - beta1) * b).collect();
        let denom = eps + ((beta2 * v_prev + (1.0 - beta2) * gg) / c2).sqrt();
        let quad = lr * lr * dot(&m, &m) / (denom * denom * c1 * c1);
        let lin = 2.0 * lr * dot(&d, &m) / (denom * c1);
        s -= ctx.scheme[i] * (quad - lin);
    }
    finite(s, "ADAM closed form")
}

/// Dispatches to the closed form matching `prior`.
pub fn speed_closed(ctx: &SpeedContext, prior: &PriorState) -> Result<f64> {
    match prior {
        PriorState::Sgd => speed_sgd_closed(ctx),
        PriorState::Momentum { mu, v_prev } => speed_momentum_closed(ctx, *mu, v_prev),
        PriorState::RmsProp { alpha, eps, v_prev } => speed_rmsprop_closed(ctx, *alpha, *eps, *v_prev),
        PriorState::Adam {
            beta1,
            beta2,
            eps,
            m_prev,
            v_prev,
            t,
        } => speed_adam_closed(ctx, *beta1, *beta2, *eps, m_prev, *v_prev, *t),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Certificate {
    pub h_pgn: f64,
    pub h_p: f64,
    pub h_u: f64,
    pub holds: bool,
}

fn le_slack(a: f64, b: f64) -> bool {
    a <= b + SANDWICH_SLACK * a.abs().max(b.abs())
}

/// Checks `H(p_gn) <= H(p) <= H(u)` for a scheme inside the box.
pub fn theorem_certificate(u: &Scheme, pgn: &Scheme, p: &Scheme, norms: &[f64]) -> Result<Certificate> {
    let bx = BoxSpec::new(u, pgn)?;
    if let Some(i) = bx.first_violation(p)? {
        return Err(Error::OutsideBox {
            index: i,
            p: p[i],
            u: u[i],
            pgn: pgn[i],
        });
    }
    let h_pgn = variance_functional(pgn, norms)?;
    let h_p = variance_functional(p, norms)?;
    let h_u = variance_functional(u, norms)?;
    Ok(Certificate {
        h_pgn,
        h_p,
        h_u,
        holds: le_slack(h_pgn, h_p) && le_slack(h_p, h_u),
    })
}

/// Randomized instance generators and suites shared by the CLI and tests.
pub mod check {
    use super::*;

    fn normal_vec<R: Rng + ?Sized>(rng: &mut R, dim: usize, scale: f64) -> Vec<f64> {
        (0..dim).map(|_| rng.random_range(-scale..scale)).collect()
    }

    /// Strictly positive scheme with a wide spread of probabilities.
    pub fn random_scheme<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Scheme {
        let w: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0f64..3.0).exp()).collect();
        normalize(&w).expect("positive weights")
    }

    pub fn random_context<R: Rng + ?Sized>(rng: &mut R) -> SpeedContext {
        let n = rng.random_range(5..=20);
        let dim = rng.random_range(3..=10);
        let grads = (0..n)
            .map(|_| {
                let scale = rng.random_range(0.1..3.0);
                normal_vec(rng, dim, scale)
            })
            .collect();
        SpeedContext::new(
            normal_vec(rng, dim, 2.0),
            normal_vec(rng, dim, 2.0),
            grads,
            random_scheme(rng, n),
            rng.random_range(1e-3..0.5),
        )
        .expect("consistent shapes")
    }

    pub fn random_prior<R: Rng + ?Sized>(rng: &mut R, name: &str, dim: usize) -> PriorState {
        match name {
            "sgd" => PriorState::Sgd,
            "momentum" => PriorState::Momentum {
                mu: rng.random_range(0.0..=1.0),
                v_prev: normal_vec(rng, dim, 1.0),
            },
            "rmsprop" => PriorState::RmsProp {
                alpha: rng.random_range(0.0..=1.0),
                eps: 10f64.powf(rng.random_range(-8.0..-1.0)),
                v_prev: rng.random_range(0.0..5.0),
            },
            "adam" => PriorState::Adam {
                beta1: rng.random_range(0.0..0.999),
                beta2: rng.random_range(0.0..0.9999),
                eps: 10f64.powf(rng.random_range(-8.0..-1.0)),
                m_prev: normal_vec(rng, dim, 1.0),
                v_prev: rng.random_range(0.0..5.0),
                t: rng.random_range(1..=50),
            },
            other => panic!("unknown optimizer {other}"),
        }
    }

    #[derive(Debug, Clone, Serialize)]
    pub struct OracleReport {
        pub optimizer: &'static str,
        pub trials: usize,
        pub max_rel_dev: f64,
        pub passed: bool,
    }

    /// `|closed - oracle| / max(1, |oracle|)`
    pub fn relative_deviation(closed: f64, oracle: f64) -> f64 {
        (closed - oracle).abs() / oracle.abs().max(1.0)
    }

    /// Closed form vs enumeration on `trials` random instances for every
    /// optimizer.
    pub fn oracle_suite<R: Rng + ?Sized>(rng: &mut R, trials: usize) -> Result<Vec<OracleReport>> {
        ["sgd", "momentum", "rmsprop", "adam"]
            .into_iter()
            .map(|name| {
                let mut worst: f64 = 0.0;
                for _ in 0..trials {
                    let ctx = random_context(rng);
                    let prior = random_prior(rng, name, ctx.theta.len());
                    let oracle = speed_oracle(&ctx, &prior)?;
                    let closed = speed_closed(&ctx, &prior)?;
                    worst = worst.max(relative_deviation(closed, oracle));
                }
                Ok(OracleReport {
                    optimizer: name,
                    trials,
                    max_rel_dev: worst,
                    passed: worst < ORACLE_TOLERANCE,
                })
            })
            .collect()
    }

    /// Box-interior scheme: independent mixing coordinates, renormalized,
    /// re-checked; violators are redrawn.
    pub fn random_box_scheme<R: Rng + ?Sized>(rng: &mut R, u: &Scheme, pgn: &Scheme) -> Result<Scheme> {
        let bx = BoxSpec::new(u, pgn)?;
        loop {
            let raw: Vec<f64> = u
                .probs()
                .iter()
                .zip(pgn.probs())
                .map(|(a, b)| {
                    let t: f64 = rng.random();
                    t * a + (1.0 - t) * b
                })
                .collect();
            let p = normalize(&raw)?;
            if bx.contains(&p)? {
                return Ok(p);
            }
        }
    }

    #[derive(Debug, Clone, Serialize)]
    pub struct SandwichReport {
        pub trials: usize,
        pub failures: usize,
        /// Largest `H(p) / H(u)` seen; at most 1 when the theorem holds.
        pub worst_upper_ratio: f64,
    }

    pub fn sandwich_suite<R: Rng + ?Sized>(rng: &mut R, trials: usize) -> Result<SandwichReport> {
        let mut failures = 0;
        let mut worst: f64 = 0.0;
        for _ in 0..trials {
            let n = rng.random_range(2..=30);
            let norms: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0f64..2.0).exp()).collect();
            let pgn = gradient_norm_scheme(&norms)?;
            let u = Scheme::uniform(n)?;
            let p = random_box_scheme(rng, &u, &pgn)?;
            let cert = theorem_certificate(&u, &pgn, &p, &norms)?;
            if !cert.holds {
                failures += 1;
            }
            worst = worst.max(cert.h_p / cert.h_u);
        }
        Ok(SandwichReport {
            trials,
            failures,
            worst_upper_ratio: worst,
        })
    }
}
