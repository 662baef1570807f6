//! Adadelta, RMSprop and Adam over a [`ParamStore`].

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;

pub const RMSPROP_RHO: f64 = 0.9;
pub const RMSPROP_EPS: f64 = 1e-8;
pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
pub const ADADELTA_RHO: f64 = 0.95;
pub const ADADELTA_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adadelta,
    Rmsprop,
    Adam,
}

impl OptimizerKind {
    pub const ALL: [OptimizerKind; 3] = [OptimizerKind::Adadelta, OptimizerKind::Rmsprop, OptimizerKind::Adam];

    pub fn as_str(self) -> &'static str {
        match self {
            OptimizerKind::Adadelta => "adadelta",
            OptimizerKind::Rmsprop => "rmsprop",
            OptimizerKind::Adam => "adam",
        }
    }
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "adadelta" => Ok(OptimizerKind::Adadelta),
            "rmsprop" => Ok(OptimizerKind::Rmsprop),
            "adam" => Ok(OptimizerKind::Adam),
            other => Err(Error::config(format!("unknown optimizer {other:?}"))),
        }
    }
}

/// `v ← ρv + (1−ρ)g²;  θ ← θ − lr·g/(√v + ε)`
pub fn rmsprop_step<S: Scalar>(theta: &mut [S], grad: &[S], v: &mut [S], lr: S) {
    let (rho, eps) = (S::of(RMSPROP_RHO), S::of(RMSPROP_EPS));
    for ((p, &g), v) in theta.iter_mut().zip(grad).zip(v.iter_mut()) {
        *v = rho * *v + (S::one() - rho) * g * g;
        *p -= lr * g / (v.sqrt() + eps);
    }
}

/// Bias-corrected Adam; `step` is the 1-based update count.
pub fn adam_step<S: Scalar>(theta: &mut [S], grad: &[S], m: &mut [S], v: &mut [S], lr: S, step: u64) {
    let (b1, b2, eps) = (S::of(ADAM_BETA1), S::of(ADAM_BETA2), S::of(ADAM_EPS));
    let c1 = S::one() - b1.powi(step as i32);
    let c2 = S::one() - b2.powi(step as i32);
    for (((p, &g), m), v) in theta.iter_mut().zip(grad).zip(m.iter_mut()).zip(v.iter_mut()) {
        *m = b1 * *m + (S::one() - b1) * g;
        *v = b2 * *v + (S::one() - b2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= lr * m_hat / (v_hat.sqrt() + eps);
    }
}

/// Adadelta with the learning rate scaling the computed delta:
///
/// ```text
/// Eg ← ρEg + (1−ρ)g²
/// Δ  = √(Ed + ε)/√(Eg + ε) · g
/// Ed ← ρEd + (1−ρ)Δ²
/// θ  ← θ − lr·Δ
/// ```
pub fn adadelta_step<S: Scalar>(theta: &mut [S], grad: &[S], acc_grad: &mut [S], acc_delta: &mut [S], lr: S) {
    let (rho, eps) = (S::of(ADADELTA_RHO), S::of(ADADELTA_EPS));
    for (((p, &g), eg), ed) in theta
        .iter_mut()
        .zip(grad)
        .zip(acc_grad.iter_mut())
        .zip(acc_delta.iter_mut())
    {
        *eg = rho * *eg + (S::one() - rho) * g * g;
        let delta = (*ed + eps).sqrt() / (*eg + eps).sqrt() * g;
        *ed = rho * *ed + (S::one() - rho) * delta * delta;
        *p -= lr * delta;
    }
}

/// Per-parameter accumulators. Non-trainable parameters get no slots.
#[derive(Clone, Debug, PartialEq)]
struct Slots<S> {
    first: Vec<S>,
    second: Vec<S>,
}

#[derive(Clone, Debug)]
pub struct Optimizer<S> {
    kind: OptimizerKind,
    lr: S,
    clip_norm: Option<f64>,
    step: u64,
    slots: Vec<Option<Slots<S>>>,
}

impl<S: Scalar> Optimizer<S> {
    pub fn new(kind: OptimizerKind, learning_rate: f64, params: &ParamStore<S>) -> Self {
        let slots = params
            .entries()
            .iter()
            .map(|e| {
                e.trainable.then(|| Slots {
                    first: vec![S::zero(); e.tensor.len()],
                    second: vec![S::zero(); e.tensor.len()],
                })
            })
            .collect();
        Optimizer {
            kind,
            lr: S::of(learning_rate),
            clip_norm: None,
            step: 0,
            slots,
        }
    }

    /// Rescales the gradient set whenever its global L2 norm exceeds `max_norm`.
    pub fn with_clip_norm(mut self, max_norm: Option<f64>) -> Self {
        self.clip_norm = max_norm;
        self
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    /// Number of updates applied so far.
    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update. Trainable parameters absent from `grads` are
    /// updated with a zero gradient so their accumulators keep decaying.
    pub fn step(&mut self, params: &mut ParamStore<S>, grads: &[(ParamId, Vec<S>)]) -> Result<()> {
        if params.len() != self.slots.len() {
            return Err(Error::contract(format!(
                "optimizer built for {} parameters, store has {}",
                self.slots.len(),
                params.len()
            )));
        }
        let scale = match self.clip_norm {
            Some(max) => {
                let norm = grads
                    .iter()
                    .flat_map(|(_, g)| g.iter())
                    .map(|&g| g.as_f64() * g.as_f64())
                    .sum::<f64>()
                    .sqrt();
                (norm > max && norm > 0.0).then(|| S::of(max / norm))
            }
            None => None,
        };
        self.step += 1;
        let mut by_id: Vec<Option<&[S]>> = vec![None; params.len()];
        for (id, g) in grads {
            let expected = params.get(*id).len();
            if g.len() != expected {
                return Err(Error::Dimension {
                    op: "optimizer",
                    lhs: params.get(*id).shape().to_vec(),
                    rhs: vec![g.len()],
                });
            }
            by_id[id.index()] = Some(g);
        }
        let ids: Vec<ParamId> = params.trainable_ids().collect();
        for id in ids {
            let slots = self.slots[id.index()].as_mut().expect("trainable param has slots");
            let theta = params.get_mut(id).data_mut();
            let owned;
            let grad: &[S] = match (by_id[id.index()], scale) {
                (Some(g), Some(s)) => {
                    owned = g.iter().map(|&v| v * s).collect::<Vec<_>>();
                    &owned
                }
                (Some(g), None) => g,
                (None, _) => {
                    owned = vec![S::zero(); theta.len()];
                    &owned
                }
            };
            match self.kind {
                OptimizerKind::Rmsprop => rmsprop_step(theta, grad, &mut slots.second, self.lr),
                OptimizerKind::Adam => adam_step(theta, grad, &mut slots.first, &mut slots.second, self.lr, self.step),
                OptimizerKind::Adadelta => adadelta_step(theta, grad, &mut slots.second, &mut slots.first, self.lr),
            }
        }
        Ok(())
    }

    /// True when every accumulator value is finite.
    pub fn state_is_finite(&self) -> bool {
        self.slots
            .iter()
            .flatten()
            .all(|s| s.first.iter().chain(&s.second).all(|v| v.is_finite()))
    }
}
