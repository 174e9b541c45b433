//! Parameter update rules and the learning-rate schedule.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Training-loop and update-rule settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    /// Registered update rule, see [`OptimizerRegistry`].
    pub name: String,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_max: f64,
    /// Starting warm-up rate and the floor of the cosine decay.
    pub lr_min: f64,
    pub warmup_proportion: f64,
    pub weight_decay: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            name: "sgd".into(),
            epochs: 8,
            batch_size: 8,
            lr_max: 0.1,
            lr_min: 1e-3,
            warmup_proportion: 0.1,
            weight_decay: 0.0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            invalid!("batch_size must be positive");
        }
        if !(self.lr_max > 0.0 && self.lr_min >= 0.0 && self.lr_min <= self.lr_max) {
            invalid!("need 0 <= lr_min <= lr_max and lr_max > 0");
        }
        if !(0.0..1.0).contains(&self.warmup_proportion) {
            invalid!("warmup_proportion must lie in [0, 1)");
        }
        if self.weight_decay < 0.0 {
            invalid!("weight_decay must be non-negative");
        }
        OptimizerRegistry::builtin().get(&self.name)?;
        Ok(())
    }
}

/// Learning rate at `step` of `total`: linear warm-up from `lr_min` to
/// `lr_max` over the first `warmup_proportion` of steps, then cosine decay
/// back to `lr_min`.
pub fn cosine_schedule(cfg: &OptimizerConfig, step: usize, total: usize) -> f64 {
    let warmup = (cfg.warmup_proportion * total as f64).ceil() as usize;
    let span = cfg.lr_max - cfg.lr_min;
    if step < warmup {
        return cfg.lr_min + span * (step + 1) as f64 / warmup as f64;
    }
    let decay = total.saturating_sub(warmup).max(1);
    let progress = ((step - warmup) as f64 / decay as f64).min(1.0);
    cfg.lr_min + 0.5 * span * (1.0 + (PI * progress).cos())
}

/// An update rule applied once per mini-batch.
pub trait Optimizer: Send {
    fn name(&self) -> &'static str;
    fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64);
}

/// Plain gradient descent, optionally with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct Sgd {
    weight_decay: f64,
}

impl Sgd {
    pub fn new(cfg: &OptimizerConfig) -> Self {
        Self {
            weight_decay: cfg.weight_decay,
        }
    }
}

impl Optimizer for Sgd {
    fn name(&self) -> &'static str {
        "sgd"
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        for (p, g) in params.iter_mut().zip(grad) {
            *p -= lr * (g + self.weight_decay * *p);
        }
    }
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    t: i32,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamW {
    pub fn new(cfg: &OptimizerConfig, num_params: usize) -> Self {
        Self {
            beta1: cfg.adam_beta1,
            beta2: cfg.adam_beta2,
            eps: cfg.adam_eps,
            weight_decay: cfg.weight_decay,
            t: 0,
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
        }
    }
}

impl Optimizer for AdamW {
    fn name(&self) -> &'static str {
        "adamw"
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let step = (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + self.eps);
            params[i] -= lr * (step + self.weight_decay * params[i]);
        }
    }
}

type Factory = fn(&OptimizerConfig, usize) -> Box<dyn Optimizer>;

/// Update rules addressable by name from configuration.
pub struct OptimizerRegistry {
    factories: BTreeMap<&'static str, Factory>,
}

impl OptimizerRegistry {
    pub fn empty() -> Self {
        Self {
            factories: BTreeMap::new(),
        }
    }

    pub fn builtin() -> Self {
        let mut r = Self::empty();
        r.register("sgd", |cfg, _| Box::new(Sgd::new(cfg)));
        r.register("adamw", |cfg, n| Box::new(AdamW::new(cfg, n)));
        r
    }

    pub fn register(&mut self, name: &'static str, factory: Factory) {
        self.factories.insert(name, factory);
    }

    pub fn get(&self, name: &str) -> Result<Factory> {
        match self.factories.get(name) {
            Some(f) => Ok(*f),
            None => invalid!("unknown optimizer {name:?}; known: {:?}", self.names()),
        }
    }

    pub fn build(&self, cfg: &OptimizerConfig, num_params: usize) -> Result<Box<dyn Optimizer>> {
        Ok(self.get(&cfg.name)?(cfg, num_params))
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.factories.keys().copied().collect()
    }
}

pub fn optimizer_names() -> Vec<&'static str> {
    OptimizerRegistry::builtin().names()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_warms_up_then_decays() {
        let cfg = OptimizerConfig {
            lr_max: 1e-4,
            lr_min: 1e-6,
            ..OptimizerConfig::default()
        };
        let total = 100;
        let lrs: Vec<f64> = (0..total).map(|s| cosine_schedule(&cfg, s, total)).collect();
        assert!((lrs[9] - 1e-4).abs() < 1e-15);
        assert!(lrs[..10].windows(2).all(|w| w[0] < w[1]));
        assert!(lrs[10..].windows(2).all(|w| w[0] >= w[1]));
        assert!(lrs[0] > 1e-6 && lrs[0] < 2e-5);
        assert!((lrs[99] - 1e-6).abs() < 1e-7);
    }

    #[test]
    fn registry_lookup() {
        let r = OptimizerRegistry::builtin();
        assert_eq!(r.names(), vec!["adamw", "sgd"]);
        assert!(r.get("lion").is_err());
        let cfg = OptimizerConfig::default();
        assert_eq!(r.build(&cfg, 3).unwrap().name(), "sgd");
    }

    #[test]
    fn updates_descend_a_quadratic() {
        for name in ["sgd", "adamw"] {
            let cfg = OptimizerConfig { name: name.into(), ..OptimizerConfig::default() };
            let mut opt = OptimizerRegistry::builtin().build(&cfg, 2).unwrap();
            let mut x = vec![3.0, -2.0];
            for _ in 0..500 {
                let g: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
                opt.step(&mut x, &g, 0.05);
            }
            assert!(x.iter().all(|v| v.abs() < 1e-2), "{name}: {x:?}");
        }
    }
}
