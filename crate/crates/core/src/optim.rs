//! SGD, Adam with coupled L2 weight decay, AdamW with decoupled weight
//! decay, and the MultiStep learning-rate schedule.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
    AdamW,
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adam => "adam",
            OptimizerKind::AdamW => "adamw",
        })
    }
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            "adamw" => Ok(OptimizerKind::AdamW),
            other => Err(Error::Config(format!("unknown optimizer `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl OptimizerConfig {
    /// Defaults for `kind`: weight decay 0 for SGD and 0.01 for the Adam
    /// family; betas (0.9, 0.999); eps 1e-8.
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        Self {
            kind,
            lr,
            weight_decay: match kind {
                OptimizerKind::Sgd => 0.0,
                OptimizerKind::Adam | OptimizerKind::AdamW => 0.01,
            },
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn sgd(lr: f64) -> Self {
        Self::new(OptimizerKind::Sgd, lr)
    }

    pub fn adam(lr: f64) -> Self {
        Self::new(OptimizerKind::Adam, lr)
    }

    pub fn adamw(lr: f64) -> Self {
        Self::new(OptimizerKind::AdamW, lr)
    }

    pub fn with_weight_decay(self, weight_decay: f64) -> Self {
        Self {
            weight_decay,
            ..self
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && self.weight_decay >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer config {self:?}")))
        }
    }
}

/// Step counter and per-parameter moment buffers.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct OptimizerState {
    pub t: u64,
    pub m: BTreeMap<String, Vec<f64>>,
    pub v: BTreeMap<String, Vec<f64>>,
}

fn check_pair<'a>(
    name: &str,
    param: &Tensor,
    grads: &'a BTreeMap<String, Tensor>,
) -> Result<&'a [f64]> {
    let g = grads
        .get(name)
        .ok_or_else(|| Error::invalid(format!("no gradient for parameter `{name}`")))?;
    if g.shape() != param.shape() {
        return Err(Error::invalid(format!(
            "gradient shape {:?} differs from parameter `{name}` {:?}",
            g.shape(),
            param.shape()
        )));
    }
    if !g.is_finite() {
        return Err(Error::NanGradient(name.to_string()));
    }
    Ok(g.data())
}

/// `theta <- theta - lr * (g + lambda * theta)`.
pub fn sgd_step(
    params: &mut BTreeMap<String, Tensor>,
    grads: &BTreeMap<String, Tensor>,
    state: &mut OptimizerState,
    cfg: &OptimizerConfig,
    lr: f64,
) -> Result<()> {
    for (name, p) in params.iter() {
        check_pair(name, p, grads)?;
    }
    state.t += 1;
    for (name, p) in params.iter_mut() {
        let g = grads[name].data();
        for (w, &gi) in p.data_mut().iter_mut().zip(g) {
            *w -= lr * (gi + cfg.weight_decay * *w);
        }
    }
    Ok(())
}

fn adam_like(
    params: &mut BTreeMap<String, Tensor>,
    grads: &BTreeMap<String, Tensor>,
    state: &mut OptimizerState,
    cfg: &OptimizerConfig,
    lr: f64,
    decoupled: bool,
) -> Result<()> {
    for (name, p) in params.iter() {
        check_pair(name, p, grads)?;
    }
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let lambda = cfg.weight_decay;
    for (name, p) in params.iter_mut() {
        let g = grads[name].data();
        let n = p.len();
        let m = state.m.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
        let v = state.v.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
        for (((w, &gl), mi), vi) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
            let theta = *w;
            let gt = if decoupled { gl } else { gl + lambda * theta };
            *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gt;
            *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gt * gt;
            let m_hat = *mi / bc1;
            let v_hat = *vi / bc2;
            let mut next = theta - lr * m_hat / (v_hat.sqrt() + cfg.eps);
            if decoupled {
                next -= lr * lambda * theta;
            }
            *w = next;
        }
    }
    Ok(())
}

/// Adam with L2 decay folded into the gradient: `g = grad + lambda * theta`.
pub fn adam_step(
    params: &mut BTreeMap<String, Tensor>,
    grads: &BTreeMap<String, Tensor>,
    state: &mut OptimizerState,
    cfg: &OptimizerConfig,
    lr: f64,
) -> Result<()> {
    adam_like(params, grads, state, cfg, lr, false)
}

/// AdamW: moments see the raw gradient; `lr * lambda * theta_{t-1}` is
/// subtracted after the adaptive step.
pub fn adamw_step(
    params: &mut BTreeMap<String, Tensor>,
    grads: &BTreeMap<String, Tensor>,
    state: &mut OptimizerState,
    cfg: &OptimizerConfig,
    lr: f64,
) -> Result<()> {
    adam_like(params, grads, state, cfg, lr, true)
}

/// An optimizer config bound to its state.
#[derive(Debug, Clone)]
pub struct Optimizer {
    pub cfg: OptimizerConfig,
    pub state: OptimizerState,
}

impl Optimizer {
    pub fn new(cfg: OptimizerConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            state: OptimizerState::default(),
        })
    }

    pub fn step(
        &mut self,
        params: &mut BTreeMap<String, Tensor>,
        grads: &BTreeMap<String, Tensor>,
        lr: f64,
    ) -> Result<()> {
        match self.cfg.kind {
            OptimizerKind::Sgd => sgd_step(params, grads, &mut self.state, &self.cfg, lr),
            OptimizerKind::Adam => adam_step(params, grads, &mut self.state, &self.cfg, lr),
            OptimizerKind::AdamW => adamw_step(params, grads, &mut self.state, &self.cfg, lr),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    /// Decay by 0.2 at epochs `2E/3` and `5E/6` (integer division).
    MultiStep,
    Constant,
}

impl FromStr for Schedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "multistep" => Ok(Schedule::MultiStep),
            "constant" => Ok(Schedule::Constant),
            other => Err(Error::Config(format!("unknown schedule `{other}`"))),
        }
    }
}

impl fmt::Display for Schedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Schedule::MultiStep => "multistep",
            Schedule::Constant => "constant",
        })
    }
}

pub const MULTISTEP_GAMMA: f64 = 0.2;

/// MultiStep learning rate for `epoch` (0-based) out of `total_epochs`.
pub fn lr_schedule(epoch: i64, total_epochs: usize, base_lr: f64) -> Result<f64> {
    if epoch < 0 {
        return Err(Error::invalid(format!("negative epoch {epoch}")));
    }
    let milestones = [2 * total_epochs / 3, 5 * total_epochs / 6];
    let passed = milestones.iter().filter(|&&m| epoch as usize >= m).count();
    Ok((0..passed).fold(base_lr, |lr, _| lr * MULTISTEP_GAMMA))
}

impl Schedule {
    pub fn lr(&self, epoch: usize, total_epochs: usize, base_lr: f64) -> f64 {
        match self {
            Schedule::MultiStep => lr_schedule(epoch as i64, total_epochs, base_lr).expect("non-negative epoch"),
            Schedule::Constant => base_lr,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(v: f64) -> BTreeMap<String, Tensor> {
        BTreeMap::from([("w".to_string(), Tensor::from_vec(vec![v]))])
    }

    #[test]
    fn sgd_examples() {
        let mut st = OptimizerState::default();
        let mut p = one(1.0);
        sgd_step(&mut p, &one(0.5), &mut st, &OptimizerConfig::sgd(0.1), 0.1).unwrap();
        assert_eq!(p["w"].data()[0], 0.95);
        let mut p = one(1.0);
        sgd_step(&mut p, &one(0.0), &mut st, &OptimizerConfig::sgd(0.1), 0.1).unwrap();
        assert_eq!(p["w"].data()[0], 1.0);
        let mut p = one(1.0);
        let cfg = OptimizerConfig::sgd(0.1).with_weight_decay(0.1);
        sgd_step(&mut p, &one(0.0), &mut st, &cfg, 0.1).unwrap();
        assert!((p["w"].data()[0] - 0.99).abs() < 1e-15);
    }

    #[test]
    fn adam_zero_decay_zero_grad_is_noop() {
        let cfg = OptimizerConfig::adam(0.001).with_weight_decay(0.0);
        let mut st = OptimizerState::default();
        let mut p = one(0.7);
        for _ in 0..10 {
            adam_step(&mut p, &one(0.0), &mut st, &cfg, cfg.lr).unwrap();
        }
        assert_eq!(p["w"].data()[0], 0.7);
        assert_eq!(st.t, 10);
    }

    #[test]
    fn adam_first_moment_bias_correction() {
        let cfg = OptimizerConfig::adam(0.001).with_weight_decay(0.0);
        let mut st = OptimizerState::default();
        let mut p = one(0.0);
        adam_step(&mut p, &one(0.3), &mut st, &cfg, cfg.lr).unwrap();
        let m_hat = st.m["w"][0] / (1.0 - cfg.beta1);
        assert!((m_hat - 0.3).abs() < 1e-15);
    }

    #[test]
    fn adamw_single_step_magnitude() {
        let cfg = OptimizerConfig::adamw(0.001).with_weight_decay(0.0);
        let mut st = OptimizerState::default();
        let mut p = one(2.0);
        adamw_step(&mut p, &one(1.0), &mut st, &cfg, cfg.lr).unwrap();
        let delta = p["w"].data()[0] - 2.0;
        assert!((delta + 0.001).abs() < 1e-10, "{delta}");
    }

    #[test]
    fn nan_gradient_aborts() {
        let cfg = OptimizerConfig::adamw(0.001);
        let mut st = OptimizerState::default();
        let mut p = one(1.0);
        let err = adamw_step(&mut p, &one(f64::NAN), &mut st, &cfg, cfg.lr).unwrap_err();
        assert!(matches!(err, Error::NanGradient(_)));
        assert_eq!(p["w"].data()[0], 1.0);
        assert_eq!(st.t, 0);
    }

    #[test]
    fn schedule_examples() {
        assert_eq!(lr_schedule(100, 300, 0.001).unwrap(), 0.001);
        assert!((lr_schedule(220, 300, 0.001).unwrap() - 0.0002).abs() < 1e-18);
        assert!((lr_schedule(260, 300, 0.001).unwrap() - 0.00004).abs() < 1e-18);
        assert!(lr_schedule(-1, 300, 0.001).is_err());
        assert_eq!(Schedule::Constant.lr(299, 300, 0.5), 0.5);
    }

    #[test]
    fn config_validation() {
        assert!(OptimizerConfig::adam(0.0).validate().is_err());
        let mut c = OptimizerConfig::adam(0.1);
        c.beta2 = 1.0;
        assert!(c.validate().is_err());
        assert!(OptimizerConfig::sgd(0.1).with_weight_decay(-1.0).validate().is_err());
    }
}
