//! Losses, optimiser, EMA and the training loop.

mod calibration;
mod loss;
mod optim;

use bvos_tensor::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::flow::flow_mse_var;
use crate::model::{Model, ModelConfig};
use crate::params::{Bound, Params};
use crate::synthetic::Sequence;

pub use calibration::{train_calibration, CalibTrainConfig, CalibTrainOutcome};
pub use loss::{bootstrapped_ce, hardest_pixels, slot_softmax, soft_jaccard};
pub use optim::{AdamW, AdamWConfig, Ema};

/// Mixed into the training seed for the sample stream.
const SAMPLER_SALT: u64 = 0x5eed_da7a_5a3b_1e00;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub iterations: usize,
    pub batch_size: usize,
    pub ce_weight: f64,
    pub jaccard_weight: f64,
    pub mse_weight: f64,
    pub ema_decay: f64,
    /// Fraction of hardest pixels kept by the bootstrapped cross-entropy.
    pub top_fraction: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 2e-4,
            weight_decay: 0.07,
            iterations: 500,
            batch_size: 4,
            ce_weight: 1.0,
            jaccard_weight: 1.0,
            mse_weight: 0.1,
            ema_decay: 0.999,
            top_fraction: 0.15,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) || self.weight_decay < 0.0 {
            return Err(CoreError::Config("learning rate and weight decay must be non-negative".into()));
        }
        if self.batch_size == 0 {
            return Err(CoreError::Config("batch size must be positive".into()));
        }
        if [self.ce_weight, self.jaccard_weight, self.mse_weight].iter().any(|w| !(*w >= 0.0)) {
            return Err(CoreError::Config("loss weights must be non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return Err(CoreError::Config(format!("EMA decay {} outside [0, 1]", self.ema_decay)));
        }
        if !(self.top_fraction > 0.0 && self.top_fraction <= 1.0) {
            return Err(CoreError::Config(format!("top fraction {} outside (0, 1]", self.top_fraction)));
        }
        Ok(())
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            learning_rate: self.learning_rate,
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }
}

/// Batch-mean loss components of one optimiser step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub total: f64,
    pub ce: f64,
    pub jaccard: f64,
    pub mse: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// The model carrying the EMA weights.
    pub model: Model,
    /// Final raw (non-averaged) weights.
    pub raw: Params,
    pub losses: Vec<LossRecord>,
    /// Step at which a non-finite loss or weight stopped training; the
    /// returned weights are from the last finite step.
    pub diverged: Option<usize>,
}

/// Frames of one sequence as tensors, converted once.
struct Clip<'a> {
    seq: &'a Sequence,
    images: Vec<Tensor>,
}

fn foreground_tensor(mask: &[u8], h: usize, w: usize) -> Result<Tensor> {
    Ok(Tensor::new(&[1, h, w], mask.iter().map(|&l| f64::from(l > 0)).collect())?)
}

/// Loss for query frame `t` with memory `{0, t−1}` and the observed flow
/// `t−1 → t`, calibrated with the ground-truth mask of frame `t−1`.
fn sample_loss<'t>(
    model: &Model,
    tape: &'t Tape,
    b: &Bound<'t>,
    clip: &Clip<'_>,
    t: usize,
    tc: &TrainConfig,
) -> Result<(Var<'t>, [f64; 3])> {
    let seq = clip.seq;
    let (h, w) = (seq.scene.height, seq.scene.width);
    let mut memory = Vec::new();
    for m in if t == 1 { vec![0] } else { vec![0, t - 1] } {
        memory.push(model.memory_on_tape(b, tape.constant(clip.images[m].clone()), &seq.masks[m])?);
    }
    let out = model.forward_frame(
        b,
        tape.constant(clip.images[t].clone()),
        &memory,
        tape.constant(seq.noisy_flows[t - 1].tensor().clone()),
        tape.constant(foreground_tensor(&seq.masks[t - 1], h, w)?),
    )?;
    let gt = &seq.masks[t];
    let ce = bootstrapped_ce(out.logits, gt, tc.top_fraction)?;
    let jac = soft_jaccard(slot_softmax(out.logits)?, gt)?;
    let mse = flow_mse_var(out.flow, tape.constant(seq.flows[t - 1].tensor().clone()))?;
    let parts = [ce.value().item(), jac.value().item(), mse.value().item()];
    let total = ce
        .scale(tc.ce_weight)
        .add(jac.scale(tc.jaccard_weight))?
        .add(mse.scale(tc.mse_weight))?;
    Ok((total, parts))
}

fn all_finite(p: &Params) -> bool {
    p.tensors().iter().all(Tensor::all_finite)
}

pub fn train(model_cfg: &ModelConfig, tc: &TrainConfig, data: &[Sequence]) -> Result<TrainOutcome> {
    train_with(model_cfg, tc, data, |_| {})
}

/// Trains from a fresh initialisation seeded by `tc.seed`, calling
/// `on_step` after every optimiser step.
pub fn train_with(
    model_cfg: &ModelConfig,
    tc: &TrainConfig,
    data: &[Sequence],
    mut on_step: impl FnMut(&LossRecord),
) -> Result<TrainOutcome> {
    tc.validate()?;
    let clips: Vec<Clip<'_>> = data
        .iter()
        .filter(|s| s.len() >= 2)
        .map(|seq| Clip {
            seq,
            images: seq.frames.iter().map(|f| f.to_tensor()).collect(),
        })
        .collect();
    if clips.is_empty() {
        return Err(CoreError::Invalid("training needs at least one sequence of two or more frames".into()));
    }
    let mut model = Model::new(model_cfg.clone(), tc.seed)?;
    let mut opt = AdamW::new(tc.adamw(), model.params());
    let mut ema = Ema::new(tc.ema_decay, model.params());
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed ^ SAMPLER_SALT);
    let mut losses = Vec::with_capacity(tc.iterations);
    let mut diverged = None;
    for step in 0..tc.iterations {
        let mut grads: Vec<Tensor> = model.params().tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        let mut sums = [0.0; 4];
        for _ in 0..tc.batch_size {
            let clip = &clips[rng.random_range(0..clips.len())];
            let t = rng.random_range(1..clip.seq.len());
            let tape = Tape::new();
            let b = model.params().bind(&tape, true);
            let (loss, parts) = sample_loss(&model, &tape, &b, clip, t, tc)?;
            sums[0] += loss.value().item();
            for (s, p) in sums[1..].iter_mut().zip(parts) {
                *s += p;
            }
            let mut g = tape.backward(loss)?;
            for (acc, gi) in grads.iter_mut().zip(b.gradients(&mut g)) {
                acc.add_assign(&gi)?;
            }
        }
        let n = tc.batch_size as f64;
        let record = LossRecord {
            step,
            total: sums[0] / n,
            ce: sums[1] / n,
            jaccard: sums[2] / n,
            mse: sums[3] / n,
        };
        if !record.total.is_finite() {
            diverged = Some(step);
            break;
        }
        let grads: Vec<Tensor> = grads.iter().map(|g| g.scale(1.0 / n)).collect();
        let before = model.params().clone();
        opt.step(model.params_mut(), &grads)?;
        if !all_finite(model.params()) {
            *model.params_mut() = before;
            diverged = Some(step);
            break;
        }
        ema.update(model.params())?;
        on_step(&record);
        losses.push(record);
    }
    let raw = model.params().clone();
    *model.params_mut() = ema.shadow().clone();
    Ok(TrainOutcome {
        model,
        raw,
        losses,
        diverged,
    })
}
