use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use super::ParamMap;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct Moments {
    pub(crate) first: Vec<f64>,
    pub(crate) second: Vec<f64>,
    pub(crate) shape: Vec<usize>,
    pub(crate) steps: u64,
}

/// Adam with bias correction. Moments are keyed by parameter name and
/// created lazily on the first update of each parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    step: u64,
    pub(crate) moments: BTreeMap<String, Moments>,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Self {
        AdamState {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    /// Number of completed optimizer steps.
    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub(crate) fn set_step_count(&mut self, step: u64) {
        self.step = step;
    }

    /// Applies one update to every parameter that has a gradient, using the
    /// configured learning rate scaled by `lr_scale(name)`.
    pub fn step(
        &mut self,
        params: &mut ParamMap,
        grads: &BTreeMap<String, Tensor>,
        lr_scale: impl Fn(&str) -> f64,
    ) -> Result<()> {
        for (name, grad) in grads {
            let param = params
                .get_mut(name)
                .ok_or_else(|| Error::Invariant(format!("gradient for unknown parameter {name}")))?;
            let lr = self.config.lr * lr_scale(name);
            self.update_one(name, param, grad, lr)?;
        }
        self.step += 1;
        Ok(())
    }

    fn update_one(&mut self, name: &str, param: &mut Tensor, grad: &Tensor, lr: f64) -> Result<()> {
        if param.shape() != grad.shape() {
            return Err(Error::shape("adam", format!("{name}: {:?} vs {:?}", param.shape(), grad.shape())));
        }
        let entry = self.moments.entry(name.to_string()).or_insert_with(|| Moments {
            first: vec![0.0; param.numel()],
            second: vec![0.0; param.numel()],
            shape: param.shape().to_vec(),
            steps: 0,
        });
        if entry.shape != param.shape() {
            return Err(Error::shape("adam", format!("moment shape for {name}")));
        }
        entry.steps += 1;
        let AdamConfig { beta1, beta2, eps, .. } = self.config;
        let c1 = 1.0 - beta1.powi(entry.steps as i32);
        let c2 = 1.0 - beta2.powi(entry.steps as i32);
        for (((p, g), m), v) in param
            .data_mut()
            .iter_mut()
            .zip(grad.data())
            .zip(entry.first.iter_mut())
            .zip(entry.second.iter_mut())
        {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        Ok(())
    }
}

/// Shadow copy of a parameter set updated as
/// `shadow <- d·shadow + (1-d)·params`.
///
/// With `warmup` on, the effective decay is `min(decay, (1+n)/(10+n))`
/// after `n` updates, so early shadows are not dominated by the
/// initialization.
#[derive(Clone, Debug, PartialEq)]
pub struct EmaState {
    pub decay: f64,
    pub warmup: bool,
    updates: u64,
    shadow: ParamMap,
}

impl EmaState {
    pub fn new(params: &ParamMap, decay: f64, warmup: bool) -> Result<Self> {
        if !(0.0..1.0).contains(&decay) {
            return Err(Error::Config(format!("ema decay {decay} outside [0,1)")));
        }
        Ok(EmaState {
            decay,
            warmup,
            updates: 0,
            shadow: params.clone(),
        })
    }

    pub fn shadow(&self) -> &ParamMap {
        &self.shadow
    }

    pub fn updates(&self) -> u64 {
        self.updates
    }

    pub fn effective_decay(&self) -> f64 {
        if self.warmup {
            let n = self.updates as f64;
            self.decay.min((1.0 + n) / (10.0 + n))
        } else {
            self.decay
        }
    }

    pub fn update(&mut self, params: &ParamMap) -> Result<()> {
        let d = self.effective_decay();
        for (name, shadow) in &mut self.shadow {
            let p = params
                .get(name)
                .filter(|p| p.shape() == shadow.shape())
                .ok_or_else(|| Error::shape("ema", format!("parameter {name} missing or reshaped")))?;
            for (s, v) in shadow.data_mut().iter_mut().zip(p.data()) {
                *s = d * *s + (1.0 - d) * v;
            }
        }
        self.updates += 1;
        Ok(())
    }

    /// Exchanges shadow and live tensors. Applying it twice restores both.
    pub fn swap(&mut self, params: &mut ParamMap) -> Result<()> {
        for (name, shadow) in &mut self.shadow {
            let p = params
                .get_mut(name)
                .filter(|p| p.shape() == shadow.shape())
                .ok_or_else(|| Error::shape("ema", format!("parameter {name} missing or reshaped")))?;
            std::mem::swap(p, shadow);
        }
        Ok(())
    }

    pub(crate) fn restore(decay: f64, warmup: bool, updates: u64, shadow: ParamMap) -> Self {
        EmaState {
            decay,
            warmup,
            updates,
            shadow,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(name: &str, values: Vec<f64>) -> ParamMap {
        let mut m = ParamMap::new();
        m.insert(name.into(), Tensor::new(vec![values.len()], values).unwrap());
        m
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut params = single("w", vec![0.3, -0.7]);
        let before = params.clone();
        let mut adam = AdamState::new(AdamConfig::default());
        let grads: BTreeMap<_, _> = [("w".to_string(), Tensor::zeros(&[2]))].into();
        for _ in 0..5 {
            adam.step(&mut params, &grads, |_| 1.0).unwrap();
        }
        assert_eq!(params, before);
        assert_eq!(adam.step_count(), 5);
    }

    #[test]
    fn first_step_hand_evaluated() {
        let mut params = single("w", vec![0.0]);
        let mut adam = AdamState::new(AdamConfig::default());
        let grads: BTreeMap<_, _> = [("w".to_string(), Tensor::full(&[1], 1.0))].into();
        adam.step(&mut params, &grads, |_| 1.0).unwrap();
        // m_hat = 1, v_hat = 1  =>  delta = -lr / (1 + eps)
        let expected = -1e-3 / (1.0 + 1e-8);
        assert!((params["w"].item() - expected).abs() < 1e-18);
    }

    #[test]
    fn constant_gradient_step_matches_closed_form() {
        // For constant g the bias-corrected moments are exactly g and g²,
        // so every step is -lr·|g|/(|g|+eps)·sign(g).
        let g = -0.37;
        let cfg = AdamConfig::default();
        let mut params = single("w", vec![1.0]);
        let mut adam = AdamState::new(cfg);
        let grads: BTreeMap<_, _> = [("w".to_string(), Tensor::full(&[1], g))].into();
        let mut prev = 1.0;
        for t in 1..=200 {
            adam.step(&mut params, &grads, |_| 1.0).unwrap();
            let now = params["w"].item();
            let m = (1.0 - cfg.beta1.powi(t)) * g / (1.0 - cfg.beta1.powi(t));
            let v = (1.0 - cfg.beta2.powi(t)) * g * g / (1.0 - cfg.beta2.powi(t));
            let expected = -cfg.lr * m / (v.sqrt() + cfg.eps);
            assert!(((now - prev) - expected).abs() < 1e-15, "step {t}");
            prev = now;
        }
        assert!(((1.0 - prev) / 200.0 + cfg.lr).abs() < 1e-9);
    }

    #[test]
    fn ema_zero_decay_copies() {
        let p0 = single("w", vec![1.0, 2.0]);
        let p1 = single("w", vec![5.0, -3.0]);
        let mut ema = EmaState::new(&p0, 0.0, false).unwrap();
        ema.update(&p1).unwrap();
        assert_eq!(ema.shadow(), &p1);
    }

    #[test]
    fn ema_converges_to_constant_params() {
        let p0 = single("w", vec![0.0]);
        let p1 = single("w", vec![1.0]);
        let mut ema = EmaState::new(&p0, 0.9, false).unwrap();
        for _ in 0..400 {
            ema.update(&p1).unwrap();
        }
        assert!((ema.shadow()["w"].item() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ema_swap_is_an_involution() {
        let p0 = single("w", vec![0.1, 0.2, 0.3]);
        let mut live = single("w", vec![7.0, 8.0, 9.0]);
        let mut ema = EmaState::new(&p0, 0.99, true).unwrap();
        ema.update(&live).unwrap();
        let (live_before, shadow_before) = (live.clone(), ema.shadow().clone());
        ema.swap(&mut live).unwrap();
        assert!(live["w"].bit_eq(&shadow_before["w"]));
        ema.swap(&mut live).unwrap();
        assert!(live["w"].bit_eq(&live_before["w"]));
        assert!(ema.shadow()["w"].bit_eq(&shadow_before["w"]));
    }

    #[test]
    fn ema_warmup_schedule() {
        let p = single("w", vec![0.0]);
        let mut ema = EmaState::new(&p, 0.99, true).unwrap();
        assert!((ema.effective_decay() - 0.1).abs() < 1e-15);
        for _ in 0..1000 {
            ema.update(&p).unwrap();
        }
        assert_eq!(ema.effective_decay(), 0.99);
    }
}
