use bvos_tensor::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{extent, Result};
use crate::params::Params;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            learning_rate: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.07,
        }
    }
}

/// Adam with decoupled weight decay. Decay applies to matrices and
/// convolution kernels only (tensors of rank ≥ 2).
#[derive(Clone, Debug)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig, params: &Params) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        Self {
            cfg,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update with `grads` aligned to `params`.
    pub fn step(&mut self, params: &mut Params, grads: &[Tensor]) -> Result<()> {
        if grads.len() != params.len() || grads.len() != self.m.len() {
            return Err(extent("AdamW", format!("{} gradients for {} parameters", grads.len(), params.len())));
        }
        self.step += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (((p, g), m), v) in params.tensors_mut().iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            if p.shape() != g.shape() {
                return Err(extent("AdamW", format!("gradient {:?} for parameter {:?}", g.shape(), p.shape())));
            }
            let decay = if p.ndim() >= 2 { c.weight_decay } else { 0.0 };
            let mut data = p.data().to_vec();
            for (((x, &gi), mi), vi) in data.iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = c.beta1 * *mi + (1.0 - c.beta1) * gi;
                *vi = c.beta2 * *vi + (1.0 - c.beta2) * gi * gi;
                let update = (*mi / bc1) / ((*vi / bc2).sqrt() + c.eps);
                *x -= c.learning_rate * (update + decay * *x);
            }
            *p = Tensor::new(p.shape(), data)?;
        }
        Ok(())
    }
}

/// Exponential moving average of parameters with warm-up: the effective
/// decay at update `t` is `min(decay, (1 + t)/(10 + t))`.
#[derive(Clone, Debug)]
pub struct Ema {
    pub decay: f64,
    updates: u64,
    shadow: Params,
}

impl Ema {
    pub fn new(decay: f64, params: &Params) -> Self {
        Self {
            decay,
            updates: 0,
            shadow: params.clone(),
        }
    }

    pub fn effective_decay(&self) -> f64 {
        let t = self.updates as f64;
        self.decay.min((1.0 + t) / (10.0 + t))
    }

    pub fn update(&mut self, params: &Params) -> Result<()> {
        let d = self.effective_decay();
        for (s, p) in self.shadow.tensors_mut().iter_mut().zip(params.tensors()) {
            if d == 0.0 {
                *s = p.clone();
            } else {
                *s = s.scale(d).add(&p.scale(1.0 - d))?;
            }
        }
        self.updates += 1;
        Ok(())
    }

    pub fn shadow(&self) -> &Params {
        &self.shadow
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params() -> Params {
        let mut p = Params::new();
        p.add("w", Tensor::new(&[1, 2], vec![1.0, -2.0]).unwrap());
        p.add("b", Tensor::new(&[1], vec![0.5]).unwrap());
        p
    }

    #[test]
    fn zero_learning_rate_leaves_parameters() {
        let mut p = params();
        let before = p.clone();
        let mut opt = AdamW::new(AdamWConfig { learning_rate: 0.0, ..Default::default() }, &p);
        let grads = vec![Tensor::ones(&[1, 2]), Tensor::ones(&[1])];
        for _ in 0..5 {
            opt.step(&mut p, &grads).unwrap();
        }
        assert_eq!(p.tensors(), before.tensors());
    }

    #[test]
    fn zero_decay_ema_tracks_weights() {
        let mut p = params();
        let mut ema = Ema::new(0.0, &p);
        p.tensors_mut()[0] = Tensor::new(&[1, 2], vec![7.0, 8.0]).unwrap();
        ema.update(&p).unwrap();
        assert_eq!(ema.shadow().tensors(), p.tensors());
    }

    #[test]
    fn ema_warmup_caps_decay() {
        let p = params();
        let mut ema = Ema::new(0.999, &p);
        assert_eq!(ema.effective_decay(), 0.1);
        ema.update(&p).unwrap();
        assert!((ema.effective_decay() - 2.0 / 11.0).abs() < 1e-15);
    }
}
