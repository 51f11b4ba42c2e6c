use bvos_tensor::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::optim::{AdamW, AdamWConfig};
use crate::error::{CoreError, Result};
use crate::flow::{flow_mse_var, CalibConfig, CalibNet};
use crate::params::Params;
use crate::synthetic::Sequence;

/// Standalone training of the flow calibration network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibTrainConfig {
    pub calibration: CalibConfig,
    pub learning_rate: f64,
    pub iterations: usize,
    pub batch_size: usize,
    /// Weight of the MSE tether between calibrated and observed flow.
    pub tether_weight: f64,
    pub seed: u64,
}

impl Default for CalibTrainConfig {
    fn default() -> Self {
        Self {
            calibration: CalibConfig::toy(),
            learning_rate: 1e-3,
            iterations: 300,
            batch_size: 4,
            tether_weight: 0.1,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct CalibTrainOutcome {
    pub net: CalibNet,
    pub params: Params,
    pub losses: Vec<f64>,
}

/// Fits `calibrate(observed, mask_{t−1}) ≈ gt` with loss
/// `mse(calibrated, gt) + λ·mse(calibrated, observed)`.
pub fn train_calibration(cfg: &CalibTrainConfig, data: &[Sequence]) -> Result<CalibTrainOutcome> {
    let clips: Vec<&Sequence> = data.iter().filter(|s| s.len() >= 2).collect();
    if clips.is_empty() || cfg.batch_size == 0 {
        return Err(CoreError::Invalid("calibration training needs sequences and a positive batch".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = Params::new();
    let net = CalibNet::new(&mut params, "calib", &cfg.calibration, &mut rng)?;
    let mut opt = AdamW::new(
        AdamWConfig {
            learning_rate: cfg.learning_rate,
            ..AdamWConfig::default()
        },
        &params,
    );
    let mut losses = Vec::with_capacity(cfg.iterations);
    for step in 0..cfg.iterations {
        let mut grads: Vec<Tensor> = params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        let mut total = 0.0;
        for _ in 0..cfg.batch_size {
            let seq = clips[rng.random_range(0..clips.len())];
            let t = rng.random_range(1..seq.len());
            let (h, w) = (seq.scene.height, seq.scene.width);
            let tape = Tape::new();
            let b = params.bind(&tape, true);
            let observed = tape.constant(seq.noisy_flows[t - 1].tensor().clone());
            let fg = seq.masks[t - 1].iter().map(|&l| f64::from(l > 0)).collect();
            let mask = tape.constant(Tensor::new(&[1, h, w], fg)?);
            let out = net.forward(&b, observed, mask)?;
            let gt = tape.constant(seq.flows[t - 1].tensor().clone());
            let loss = flow_mse_var(out, gt)?.add(flow_mse_var(out, observed)?.scale(cfg.tether_weight))?;
            total += loss.value().item();
            let mut g = tape.backward(loss)?;
            for (acc, gi) in grads.iter_mut().zip(b.gradients(&mut g)) {
                *acc = acc.add(&gi)?;
            }
        }
        let n = cfg.batch_size as f64;
        if !(total / n).is_finite() {
            return Err(CoreError::Diverged { step });
        }
        let grads: Vec<Tensor> = grads.iter().map(|g| g.scale(1.0 / n)).collect();
        opt.step(&mut params, &grads)?;
        losses.push(total / n);
    }
    Ok(CalibTrainOutcome { net, params, losses })
}
