use std::rc::Rc;
use std::sync::Arc;

use bvos_tensor::kernels::LAYER_NORM_EPS;
use bvos_tensor::{concat0, grad_check, grad_check_sampled, GradCheckReport, Tape, Tensor, TensorError, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{build_bilateral_mask, ops, spatial_window_mask, AttentionConfig, BilateralEncoding};
use crate::error::Result;
use crate::flow::{CalibConfig, CalibNet};
use crate::model::{Model, ModelConfig};
use crate::params::{Bound, Params};
use crate::train::{bootstrapped_ce, slot_softmax, soft_jaccard};

/// Relative error every check must stay below.
pub const GRAD_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradRow {
    pub name: String,
    pub seed: u64,
    pub max_rel_error: f64,
    pub coordinates: usize,
}

impl GradRow {
    pub fn passes(&self) -> bool {
        self.max_rel_error < GRAD_TOLERANCE
    }
}

fn core(e: crate::CoreError) -> TensorError {
    TensorError::Format(e.to_string())
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn randn(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(shape, 1.0, r)
}

/// Fixed random weighting of every output coordinate, averaged.
fn weighted<'t>(y: Var<'t>, seed: u64) -> bvos_tensor::Result<Var<'t>> {
    let w = Tensor::randn(&y.shape(), 1.0, &mut rng(seed ^ 0x5eed));
    Ok(y.mul(y.tape().constant(w))?.mean())
}

struct Suite {
    rows: Vec<GradRow>,
}

impl Suite {
    fn push(&mut self, name: &str, seed: u64, report: bvos_tensor::Result<GradCheckReport>) -> Result<()> {
        let report = report?;
        self.rows.push(GradRow {
            name: name.to_string(),
            seed,
            max_rel_error: report.max_rel_error,
            coordinates: report.coordinates_checked,
        });
        Ok(())
    }

    fn full<F>(&mut self, name: &str, seed: u64, inputs: &[Tensor], f: F) -> Result<()>
    where
        F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> bvos_tensor::Result<Var<'t>>,
    {
        self.push(name, seed, grad_check(f, inputs))
    }
}

fn primitives(s: &mut Suite, seed: u64) -> Result<()> {
    let mut r = rng(seed);
    let admit = Rc::new(vec![true, false, true, true, false, true, false, false, true, true, true, false]);
    s.full("matmul", seed, &[randn(&[3, 4], &mut r), randn(&[4, 2], &mut r)], move |_, v| {
        weighted(v[0].matmul(v[1])?, seed)
    })?;
    s.full("matmul_bt", seed, &[randn(&[3, 4], &mut r), randn(&[5, 4], &mut r)], move |_, v| {
        weighted(v[0].matmul_bt(v[1])?, seed)
    })?;
    s.full("elementwise", seed, &[randn(&[2, 3], &mut r), randn(&[2, 3], &mut r)], move |_, v| {
        let y = v[0].add(v[1])?.mul(v[0].sub(v[1])?)?.scale(0.7).add(v[1].square())?;
        weighted(y, seed)
    })?;
    s.full("silu_gelu", seed, &[Tensor::randn(&[10], 1.5, &mut r)], move |_, v| {
        weighted(v[0].silu().add(v[0].gelu())?, seed)
    })?;
    let lin = [randn(&[4, 3], &mut r), randn(&[3, 5], &mut r), randn(&[5], &mut r)];
    s.full("linear", seed, &lin, move |_, v| weighted(v[0].linear(v[1], Some(v[2]))?, seed))?;
    s.full("concat_tokens", seed, &[randn(&[2, 3, 2], &mut r), randn(&[1, 3, 2], &mut r)], move |_, v| {
        let c = concat0(&[v[0], v[1]])?;
        weighted(c.to_tokens()?.transpose()?, seed)?.add(c.sum())
    })?;
    s.full("softmax_rows", seed, &[Tensor::randn(&[3, 5], 2.0, &mut r)], move |_, v| {
        weighted(v[0].softmax_rows()?, seed)
    })?;
    s.full("masked_softmax_rows", seed, &[Tensor::randn(&[3, 4], 2.0, &mut r)], move |_, v| {
        weighted(v[0].masked_softmax_rows(admit.clone())?, seed)
    })?;
    let ln = [randn(&[4, 6], &mut r), randn(&[6], &mut r), randn(&[6], &mut r)];
    s.full("layer_norm", seed, &ln, move |_, v| weighted(v[0].layer_norm(v[1], v[2], LAYER_NORM_EPS)?, seed))?;
    for (stride, pad) in [(1, 1), (2, 1)] {
        let conv = [randn(&[2, 5, 6], &mut r), randn(&[3, 2, 3, 3], &mut r), randn(&[3], &mut r)];
        s.full(&format!("conv2d_s{stride}"), seed, &conv, move |_, v| {
            weighted(v[0].conv2d(v[1], Some(v[2]), stride, pad)?, seed)
        })?;
    }
    s.full("bilinear_resize", seed, &[randn(&[2, 3, 4], &mut r)], move |_, v| {
        weighted(v[0].bilinear_resize(7, 5)?, seed)
    })?;
    s.full("upsample_nearest", seed, &[randn(&[2, 2, 3], &mut r)], move |_, v| {
        weighted(v[0].upsample_nearest(2)?, seed)
    })?;
    Ok(())
}

fn attention(s: &mut Suite, seed: u64) -> Result<()> {
    let mut r = rng(100 + seed);
    let (h, w, c) = (3, 3, 4);
    let e: Vec<f64> = randn(&[h * w], &mut r).data().to_vec();
    let cfg = AttentionConfig {
        spatial_window: 1,
        bilateral_window: 3,
        ..AttentionConfig::toy(c, 1)
    };
    let mask = Arc::new(build_bilateral_mask(&BilateralEncoding::from_values(h, w, e.clone())?, &cfg)?);
    let q = randn(&[h * w, c], &mut r);
    let k = randn(&[2 * h * w, c], &mut r);
    let v = randn(&[2 * h * w, c], &mut r);
    let et = Tensor::new(&[h * w, 1], e)?;
    let with_e = [q.clone(), k.clone(), v.clone(), et];
    let m = mask.clone();
    s.full("windowed_attention", seed, &with_e, move |_, x| {
        weighted(ops::windowed_attention(x[0], x[1], x[2], m.clone(), Some(x[3]), 2).map_err(core)?, seed)
    })?;
    let m = mask.clone();
    s.full("additive_attention", seed, &with_e, move |_, x| {
        weighted(ops::additive_attention(x[0], x[1], x[2], &m, x[3], 1e4).map_err(core)?, seed)
    })?;
    let qkv = [q, k, v];
    let m = mask.clone();
    s.full("exact_attention", seed, &qkv, move |_, x| {
        weighted(ops::exact_attention(x[0], x[1], x[2], &m).map_err(core)?, seed)
    })?;
    s.full("global_attention", seed, &qkv, move |_, x| {
        weighted(ops::global_attention(x[0], x[1], x[2], 2, 9).map_err(core)?, seed)
    })?;
    Ok(())
}

fn losses(s: &mut Suite, seed: u64) -> Result<()> {
    let mut r = rng(200 + seed);
    let logits = randn(&[3, 4, 5], &mut r);
    let gt: Vec<u8> = randn(&[20], &mut r).data().iter().map(|&x| (x.abs() * 2.0) as u8 % 3).collect();
    let g = gt.clone();
    s.full("bootstrapped_ce", seed, std::slice::from_ref(&logits), move |_, v| {
        bootstrapped_ce(v[0], &g, 0.15).map_err(core)
    })?;
    s.full("soft_jaccard", seed, std::slice::from_ref(&logits), move |_, v| {
        soft_jaccard(slot_softmax(v[0]).map_err(core)?, &gt).map_err(core)
    })?;
    Ok(())
}

/// Replaces all-zero convolution kernels, which would hide upstream
/// gradients.
fn randomize_zero_kernels(p: &mut Params, r: &mut ChaCha8Rng) -> Result<()> {
    for id in p.ids().collect::<Vec<_>>() {
        let t = p.get(id);
        if t.ndim() == 4 && t.max_abs() == 0.0 {
            let shape = t.shape().to_vec();
            p.set(id, Tensor::randn(&shape, 0.3, r))?;
        }
    }
    Ok(())
}

fn calibration(s: &mut Suite, seed: u64) -> Result<()> {
    let mut r = rng(300 + seed);
    let mut p = Params::new();
    let net = CalibNet::new(&mut p, "calib", &CalibConfig { channels: vec![3, 4] }, &mut r)?;
    randomize_zero_kernels(&mut p, &mut r)?;
    let mask = Tensor::from_fn(&[1, 4, 4], |i| f64::from((i as u64 + seed).is_multiple_of(3)));
    let n = p.len();
    let mut inputs = p.tensors().to_vec();
    inputs.push(randn(&[2, 4, 4], &mut r));
    s.full("flow_calibration", seed, &inputs, |tape, v| {
        let b = Bound::from_vars(&p, v[..n].to_vec()).map_err(core)?;
        let out = net.forward(&b, v[n], tape.constant(mask.clone())).map_err(core)?;
        weighted(out, seed)?.add(out.square().mean())
    })
}

/// The 1-block, 1-head toy model on 8×8 frames; `per_input` coordinates of
/// every parameter tensor and input are probed.
fn model(s: &mut Suite, seed: u64, per_input: usize) -> Result<()> {
    let cfg = ModelConfig {
        num_blocks: 1,
        attention: AttentionConfig::toy(ModelConfig::toy().channels, 1),
        ..ModelConfig::toy()
    };
    let mut model = Model::new(cfg, seed)?;
    let mut r = rng(400 + seed);
    randomize_zero_kernels(model.params_mut(), &mut r)?;
    let (h, w) = (8, 8);
    let stride = model.config().stride();
    let mem_img = Tensor::from_fn(&[3, h, w], |_| r.random::<f64>());
    let query = Tensor::from_fn(&[3, h, w], |_| r.random::<f64>());
    let labels: Vec<u8> = (0..h * w).map(|p| u8::from((2..6).contains(&(p % w)) && (2..6).contains(&(p / w)))).collect();
    let prev = Tensor::new(&[1, h, w], labels.iter().map(|&l| f64::from(l)).collect())?;
    let flow = randn(&[2, h, w], &mut r);
    // the rank mask is piecewise constant in E, so it is held fixed
    let fixed = Arc::new(spatial_window_mask(h / stride, w / stride, model.config().attention.spatial_window));
    let n = model.params().len();
    let mut inputs = model.params().tensors().to_vec();
    inputs.push(query);
    inputs.push(flow);
    let report = grad_check_sampled(
        |tape, v| {
            let b = Bound::from_vars(model.params(), v[..n].to_vec()).map_err(core)?;
            let mem = model.memory_on_tape(&b, tape.constant(mem_img.clone()), &labels).map_err(core)?;
            let out = model
                .forward_frame_masked(&b, v[n], &[mem], v[n + 1], tape.constant(prev.clone()), Some(fixed.clone()))
                .map_err(core)?;
            weighted(out.logits, seed)?.add(out.flow.square().mean().scale(0.1))
        },
        &inputs,
        per_input,
        seed,
    );
    s.push("model_1block", seed, report)
}

/// Finite-difference checks of every differentiable operation and of the
/// 1-block toy model, for seeds `0..seeds`.
pub fn gradient_suite(seeds: u64, model_coordinates: usize) -> Result<Vec<GradRow>> {
    let mut s = Suite { rows: Vec::new() };
    for seed in 0..seeds {
        primitives(&mut s, seed)?;
        attention(&mut s, seed)?;
        losses(&mut s, seed)?;
        calibration(&mut s, seed)?;
        model(&mut s, seed, model_coordinates)?;
    }
    Ok(s.rows)
}
