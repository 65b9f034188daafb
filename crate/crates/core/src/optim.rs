//! Optimizers and gradient clipping over a [`ParamStore`].

use serde::{Deserialize, Serialize};

use crate::nn::{ParamKind, ParamStore};
use crate::tensor::{Scalar, Tensor};

fn updatable<T>(p: &crate::nn::Param<T>) -> bool {
    p.trainable && p.kind == ParamKind::Weight
}

/// Global L2 norm of all trainable gradients.
pub fn grad_norm<T: Scalar>(store: &ParamStore<T>) -> f64 {
    store
        .iter()
        .filter(|(_, p)| updatable(p))
        .map(|(_, p)| p.grad.data().iter().map(|g| g.as_f64() * g.as_f64()).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

/// Rescales trainable gradients so their global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<T: Scalar>(store: &mut ParamStore<T>, max_norm: f64) -> f64 {
    let norm = grad_norm(store);
    if norm > max_norm && norm > 0.0 {
        let k = T::from_f64(max_norm / norm);
        for p in store.iter_mut().filter(|p| updatable(p)) {
            p.grad.data_mut().iter_mut().for_each(|g| *g *= k);
        }
    }
    norm
}

fn slots<T: Scalar>(store: &ParamStore<T>) -> Vec<Tensor<T>> {
    store
        .iter()
        .map(|(_, p)| Tensor::zeros(p.value.rows(), p.value.cols()))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdadeltaConfig {
    pub rho: f64,
    pub eps: f64,
    pub lr: f64,
    /// Factor applied to `eps` when validation loss stops improving.
    pub eps_decay: f64,
}

impl Default for AdadeltaConfig {
    fn default() -> Self {
        Self {
            rho: 0.95,
            eps: 1e-8,
            lr: 1.0,
            eps_decay: 1e-2,
        }
    }
}

pub struct Adadelta<T> {
    pub rho: f64,
    pub eps: f64,
    pub lr: f64,
    sq_grad: Vec<Tensor<T>>,
    sq_delta: Vec<Tensor<T>>,
}

impl<T: Scalar> Adadelta<T> {
    pub fn new(config: &AdadeltaConfig, store: &ParamStore<T>) -> Self {
        Self {
            rho: config.rho,
            eps: config.eps,
            lr: config.lr,
            sq_grad: slots(store),
            sq_delta: slots(store),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore<T>) {
        let (rho, eps, lr) = (self.rho, self.eps, self.lr);
        for (i, p) in store.iter_mut().enumerate() {
            if !updatable(p) {
                continue;
            }
            let eg = self.sq_grad[i].data_mut();
            let ed = self.sq_delta[i].data_mut();
            for (j, (x, &g)) in p.value.data_mut().iter_mut().zip(p.grad.data()).enumerate() {
                let g = g.as_f64();
                let acc_g = rho * eg[j].as_f64() + (1.0 - rho) * g * g;
                let den = (acc_g + eps).sqrt();
                // a coordinate that has never seen a gradient stays put
                let dx = if den > 0.0 {
                    -((ed[j].as_f64() + eps).sqrt() / den) * g
                } else {
                    0.0
                };
                eg[j] = T::from_f64(acc_g);
                ed[j] = T::from_f64(rho * ed[j].as_f64() + (1.0 - rho) * dx * dx);
                *x += T::from_f64(lr * dx);
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-6,
        }
    }
}

pub struct Adam<T> {
    pub config: AdamConfig,
    t: i32,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: &AdamConfig, store: &ParamStore<T>) -> Self {
        Self {
            config: config.clone(),
            t: 0,
            m: slots(store),
            v: slots(store),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore<T>) {
        self.t += 1;
        let c = &self.config;
        let b1 = T::from_f64(c.beta1);
        let b2 = T::from_f64(c.beta2);
        let bc1 = T::from_f64(1.0 - c.beta1.powi(self.t));
        let bc2 = T::from_f64(1.0 - c.beta2.powi(self.t));
        let lr = T::from_f64(c.lr);
        let eps = T::from_f64(c.eps);
        for (i, p) in store.iter_mut().enumerate() {
            if !updatable(p) {
                continue;
            }
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (j, (x, &g)) in p.value.data_mut().iter_mut().zip(p.grad.data()).enumerate() {
                m[j] = b1 * m[j] + (T::one() - b1) * g;
                v[j] = b2 * v[j] + (T::one() - b2) * g * g;
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                *x -= lr * mh / (vh.sqrt() + eps);
            }
        }
    }
}

/// Optimizer choice for recognizer training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerConfig {
    Adadelta(AdadeltaConfig),
    Adam(AdamConfig),
}

pub enum Optimizer<T> {
    Adadelta(Adadelta<T>),
    Adam(Adam<T>),
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(config: &OptimizerConfig, store: &ParamStore<T>) -> Self {
        match config {
            OptimizerConfig::Adadelta(c) => Self::Adadelta(Adadelta::new(c, store)),
            OptimizerConfig::Adam(c) => Self::Adam(Adam::new(c, store)),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore<T>) {
        match self {
            Self::Adadelta(o) => o.step(store),
            Self::Adam(o) => o.step(store),
        }
    }

    /// Reacts to a validation loss that failed to improve. Adadelta shrinks
    /// its epsilon; Adam is left unchanged.
    pub fn on_plateau(&mut self, config: &OptimizerConfig) {
        if let (Self::Adadelta(o), OptimizerConfig::Adadelta(c)) = (self, config) {
            o.eps *= c.eps_decay;
        }
    }

    pub fn eps(&self) -> f64 {
        match self {
            Self::Adadelta(o) => o.eps,
            Self::Adam(o) => o.config.eps,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quad_store() -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.add("x", Tensor::from_vec(1, 2, vec![3.0, -2.0]));
        s.add("frozen", Tensor::from_vec(1, 1, vec![5.0]));
        s.set_trainable_prefix("frozen", false);
        s
    }

    fn set_quad_grad(s: &mut ParamStore<f64>) {
        for p in s.iter_mut() {
            p.grad = p.value.clone();
        }
    }

    #[test]
    fn clipping_scales_to_max_norm() {
        let mut s = quad_store();
        set_quad_grad(&mut s);
        let before = clip_grad_norm(&mut s, 1.0);
        assert!((before - 13f64.sqrt()).abs() < 1e-12);
        assert!((grad_norm(&s) - 1.0).abs() < 1e-12);
        assert_eq!(s.by_name("frozen").unwrap().grad.item(), 5.0);
    }

    #[test]
    fn adam_descends_and_skips_frozen() {
        let mut s = quad_store();
        let mut opt = Adam::new(&AdamConfig { lr: 0.1, ..Default::default() }, &s);
        for _ in 0..200 {
            set_quad_grad(&mut s);
            opt.step(&mut s);
        }
        assert!(s.by_name("x").unwrap().value.max_abs() < 0.1);
        assert_eq!(s.by_name("frozen").unwrap().value.item(), 5.0);
    }

    #[test]
    fn adadelta_first_step_matches_closed_form() {
        let mut s = quad_store();
        let cfg = AdadeltaConfig { eps: 1e-6, ..Default::default() };
        let mut opt = Adadelta::new(&cfg, &s);
        set_quad_grad(&mut s);
        opt.step(&mut s);
        let g: f64 = 3.0;
        let expect = 3.0 - (1e-6f64).sqrt() / (0.05 * g * g + 1e-6).sqrt() * g;
        assert!((s.by_name("x").unwrap().value.data()[0] - expect).abs() < 1e-12);
    }

    #[test]
    fn optimizer_config_round_trips_and_decays() {
        let cfg = OptimizerConfig::Adadelta(AdadeltaConfig::default());
        let json = serde_json::to_string(&cfg).unwrap();
        assert!(json.contains("\"kind\":\"adadelta\""));
        assert_eq!(serde_json::from_str::<OptimizerConfig>(&json).unwrap(), cfg);
        let adam: OptimizerConfig = serde_json::from_str(r#"{"kind":"adam","lr":0.01}"#).unwrap();
        assert_eq!(adam, OptimizerConfig::Adam(AdamConfig { lr: 0.01, ..Default::default() }));
        let s = quad_store();
        let mut opt = Optimizer::new(&cfg, &s);
        opt.on_plateau(&cfg);
        assert!((opt.eps() - 1e-10).abs() < 1e-24);
        let mut opt = Optimizer::new(&adam, &s);
        opt.on_plateau(&adam);
        assert_eq!(opt.eps(), 1e-6);
    }

    #[test]
    fn adadelta_with_vanishing_eps_stays_finite() {
        let mut s = quad_store();
        let cfg = AdadeltaConfig { eps: 0.0, ..Default::default() };
        let mut opt = Adadelta::new(&cfg, &s);
        s.zero_grad();
        opt.step(&mut s);
        assert!(s.iter().all(|(_, p)| p.value.all_finite()));
    }
}
