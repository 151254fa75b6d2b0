//! SGD (Nesterov momentum, coupled L2 weight decay), Adam, and a
//! reduce-on-plateau learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::mlp::MlpParams;
use crate::{Error, Result};

/// Anything that exposes its parameters as a fixed list of flat tensors.
pub trait ParamSet {
    fn tensors(&self) -> Vec<&[f64]>;
    fn tensors_mut(&mut self) -> Vec<&mut [f64]>;
}

impl ParamSet for MlpParams {
    fn tensors(&self) -> Vec<&[f64]> {
        vec![
            self.hidden.weight.as_slice(),
            &self.hidden.bias,
            self.output.weight.as_slice(),
            &self.output.bias,
        ]
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        vec![
            self.hidden.weight.as_mut_slice(),
            &mut self.hidden.bias,
            self.output.weight.as_mut_slice(),
            &mut self.output.bias,
        ]
    }
}

impl ParamSet for Vec<f64> {
    fn tensors(&self) -> Vec<&[f64]> {
        vec![self.as_slice()]
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        vec![self.as_mut_slice()]
    }
}

pub trait Optimizer {
    fn step(&mut self, params: &mut dyn ParamSet, grads: &dyn ParamSet) -> Result<()>;
    fn lr(&self) -> f64;
    fn set_lr(&mut self, lr: f64);
}

fn check_shapes(params: &[&mut [f64]], grads: &[&[f64]], state: &[Vec<f64>]) -> Result<()> {
    let ok = params.len() == grads.len()
        && params.iter().zip(grads).all(|(p, g)| p.len() == g.len())
        && (state.is_empty()
            || (state.len() == params.len() && state.iter().zip(params).all(|(s, p)| s.len() == p.len())));
    if ok {
        Ok(())
    } else {
        Err(Error::Consistency(
            "gradient or optimizer state shapes do not match the parameters".into(),
        ))
    }
}

fn zeros_like(params: &[&mut [f64]]) -> Vec<Vec<f64>> {
    params.iter().map(|p| vec![0.0; p.len()]).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub nesterov: bool,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 0.0005,
            nesterov: true,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Sgd {
    cfg: SgdConfig,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(cfg: SgdConfig) -> Result<Self> {
        if !(cfg.lr > 0.0) || !(0.0..1.0).contains(&cfg.momentum) || cfg.weight_decay < 0.0 {
            return Err(Error::Config(format!("invalid SGD settings {cfg:?}")));
        }
        Ok(Self {
            cfg,
            velocity: Vec::new(),
        })
    }

    pub fn config(&self) -> &SgdConfig {
        &self.cfg
    }
}

impl Optimizer for Sgd {
    fn step(&mut self, params: &mut dyn ParamSet, grads: &dyn ParamSet) -> Result<()> {
        let mut ps = params.tensors_mut();
        let gs = grads.tensors();
        check_shapes(&ps, &gs, &self.velocity)?;
        if self.velocity.is_empty() {
            self.velocity = zeros_like(&ps);
        }
        let SgdConfig {
            lr,
            momentum,
            weight_decay,
            nesterov,
        } = self.cfg;
        for ((p, g), v) in ps.iter_mut().zip(&gs).zip(&mut self.velocity) {
            for ((pk, &gk), vk) in p.iter_mut().zip(g.iter()).zip(v.iter_mut()) {
                let d = gk + weight_decay * *pk;
                *vk = momentum * *vk + d;
                let update = if nesterov { d + momentum * *vk } else { *vk };
                *pk -= lr * update;
            }
        }
        Ok(())
    }

    fn lr(&self) -> f64 {
        self.cfg.lr
    }

    fn set_lr(&mut self, lr: f64) {
        self.cfg.lr = lr;
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0005,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Adam {
    cfg: AdamConfig,
    step_count: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Result<Self> {
        if !(cfg.lr > 0.0)
            || !(0.0..1.0).contains(&cfg.beta1)
            || !(0.0..1.0).contains(&cfg.beta2)
            || !(cfg.eps > 0.0)
            || cfg.weight_decay < 0.0
        {
            return Err(Error::Config(format!("invalid Adam settings {cfg:?}")));
        }
        Ok(Self {
            cfg,
            step_count: 0,
            first: Vec::new(),
            second: Vec::new(),
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }
}

impl Optimizer for Adam {
    fn step(&mut self, params: &mut dyn ParamSet, grads: &dyn ParamSet) -> Result<()> {
        let mut ps = params.tensors_mut();
        let gs = grads.tensors();
        check_shapes(&ps, &gs, &self.first)?;
        if self.first.is_empty() {
            self.first = zeros_like(&ps);
            self.second = zeros_like(&ps);
        }
        self.step_count += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.cfg;
        let t = self.step_count as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for (((p, g), m), v) in ps.iter_mut().zip(&gs).zip(&mut self.first).zip(&mut self.second) {
            for (((pk, &gk), mk), vk) in p.iter_mut().zip(g.iter()).zip(m.iter_mut()).zip(v.iter_mut()) {
                let d = gk + weight_decay * *pk;
                *mk = beta1 * *mk + (1.0 - beta1) * d;
                *vk = beta2 * *vk + (1.0 - beta2) * d * d;
                let m_hat = *mk / bc1;
                let v_hat = *vk / bc2;
                *pk -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }

    fn lr(&self) -> f64 {
        self.cfg.lr
    }

    fn set_lr(&mut self, lr: f64) {
        self.cfg.lr = lr;
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlateauConfig {
    pub factor: f64,
    pub min_lr: f64,
    /// Non-improving epochs tolerated before the rate is cut.
    pub patience: usize,
    /// Relative improvement required to reset the counter.
    pub threshold: f64,
}

impl Default for PlateauConfig {
    fn default() -> Self {
        Self {
            factor: 0.5,
            min_lr: 1e-7,
            patience: 25,
            threshold: 0.0005,
        }
    }
}

/// Cuts the learning rate by `factor` once the monitored loss has gone
/// `patience` epochs without beating `best · (1 − threshold)`.
#[derive(Clone, Debug)]
pub struct PlateauScheduler {
    cfg: PlateauConfig,
    best: f64,
    bad_epochs: usize,
}

impl PlateauScheduler {
    pub fn new(cfg: PlateauConfig) -> Result<Self> {
        if !(cfg.factor > 0.0 && cfg.factor < 1.0) || cfg.min_lr < 0.0 || cfg.patience == 0 || cfg.threshold < 0.0 {
            return Err(Error::Config(format!("invalid plateau scheduler settings {cfg:?}")));
        }
        Ok(Self {
            cfg,
            best: f64::INFINITY,
            bad_epochs: 0,
        })
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    pub fn epochs_since_improvement(&self) -> usize {
        self.bad_epochs
    }

    /// Feeds one epoch's loss; returns whether the rate was reduced.
    pub fn update(&mut self, loss: f64, opt: &mut dyn Optimizer) -> Result<bool> {
        if !loss.is_finite() {
            return Err(Error::Domain(format!("scheduler received non-finite loss {loss}")));
        }
        if loss < self.best * (1.0 - self.cfg.threshold) {
            self.best = loss;
            self.bad_epochs = 0;
            return Ok(false);
        }
        self.bad_epochs += 1;
        if self.bad_epochs < self.cfg.patience {
            return Ok(false);
        }
        self.bad_epochs = 0;
        let lr = opt.lr();
        let next = (lr * self.cfg.factor).max(self.cfg.min_lr);
        opt.set_lr(next);
        Ok(next < lr)
    }
}
