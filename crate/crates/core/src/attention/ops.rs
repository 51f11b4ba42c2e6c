//! Attention kernels recorded on a gradient tape.

use std::rc::Rc;
use std::sync::Arc;

use bvos_tensor::{Tape, Tensor, Var};

use super::kernels::{fused_backward, fused_forward, AttnDims, KeySet};
use super::BilateralMask;
use crate::error::{extent, Result};

fn fused<'t>(
    kernel: &'static str,
    q: Var<'t>,
    k: Var<'t>,
    v: Var<'t>,
    bias: Option<Var<'t>>,
    heads: usize,
    tokens: usize,
    mask: Option<Arc<BilateralMask>>,
) -> Result<Var<'t>> {
    let (qt, kt, vt) = (q.value(), k.value(), v.value());
    let dims = AttnDims::infer(&qt, &kt, &vt, heads, tokens)?;
    if let Some(m) = &mask {
        if m.len() != dims.queries || m.len() != tokens {
            return Err(extent(kernel, format!("mask over {} tokens, {} queries", m.len(), dims.queries)));
        }
    }
    let bias_t = bias.map(|b| b.value());
    if let Some(b) = &bias_t {
        if b.shape() != [tokens, 1] {
            return Err(extent(kernel, format!("bias {:?} for {tokens} key positions", b.shape())));
        }
    }
    let keys = match &mask {
        Some(m) => KeySet::Masked(m),
        None => KeySet::All,
    };
    let (out, cache) = fused_forward(&qt, &kt, &vt, &dims, &keys, bias_t.as_deref().map(|b| b.data()));
    let tape = q.tape();
    let mut parents = vec![q, k, v];
    parents.extend(bias);
    Ok(tape.custom(kernel, &parents, out, move |g, needs| {
        let keys = match &mask {
            Some(m) => KeySet::Masked(m),
            None => KeySet::All,
        };
        let (dq, dk, dv, db) = fused_backward(&qt, &kt, &vt, &dims, &keys, &cache, g);
        let mut grads = vec![needs[0].then_some(dq), needs[1].then_some(dk), needs[2].then_some(dv)];
        if needs.len() > 3 {
            grads.push(Some(db));
        }
        grads
    }))
}

/// Multi-head attention restricted to mask-admitted keys (all frames).
/// `bias: [HW×1]`, when given, is added to every admitted score by key
/// position, which is how gradients reach the bilateral encoding.
pub fn windowed_attention<'t>(
    q: Var<'t>,
    k: Var<'t>,
    v: Var<'t>,
    mask: Arc<BilateralMask>,
    bias: Option<Var<'t>>,
    heads: usize,
) -> Result<Var<'t>> {
    let tokens = mask.len();
    fused("windowed_attention", q, k, v, bias, heads, tokens, Some(mask))
}

/// Multi-head attention over every key; `k, v` hold `frames × tokens` rows.
pub fn global_attention<'t>(q: Var<'t>, k: Var<'t>, v: Var<'t>, heads: usize, tokens: usize) -> Result<Var<'t>> {
    fused("global_attention", q, k, v, None, heads, tokens, None)
}

/// Dense `[HW × T·HW]` additive term: `E(key position)` where admitted,
/// `−L` elsewhere.
pub fn bilateral_bias<'t>(e: Var<'t>, mask: &BilateralMask, frames: usize, suppression: f64) -> Result<Var<'t>> {
    let ev = e.value();
    let n = mask.len();
    if ev.shape() != [n, 1] {
        return Err(extent("bilateral_bias", format!("E {:?} for {n} tokens", ev.shape())));
    }
    let dense = mask.to_dense_frames(frames);
    let total = n * frames;
    let out: Vec<f64> = dense
        .iter()
        .enumerate()
        .map(|(idx, &admit)| if admit { ev.data()[idx % total % n] } else { -suppression })
        .collect();
    let out = Tensor::new(&[n, total], out)?;
    Ok(e.tape().custom("bilateral_bias", &[e], out, move |g, _| {
        let mut de = vec![0.0; n];
        for (idx, &admit) in dense.iter().enumerate() {
            if admit {
                de[idx % total % n] += g.data()[idx];
            }
        }
        vec![Some(Tensor::new(&[n, 1], de).expect("shape"))]
    }))
}

/// Single-head dense masked attention composed from tape primitives.
pub fn exact_attention<'t>(q: Var<'t>, k: Var<'t>, v: Var<'t>, mask: &BilateralMask) -> Result<Var<'t>> {
    let c = q.shape()[1];
    let frames = k.shape()[0] / mask.len().max(1);
    let scores = q.matmul_bt(k)?.scale(1.0 / (c as f64).sqrt());
    let weights = scores.masked_softmax_rows(Rc::new(mask.to_dense_frames(frames)))?;
    Ok(weights.matmul(v)?)
}

/// Single-head additive relaxation composed from tape primitives.
pub fn additive_attention<'t>(
    q: Var<'t>,
    k: Var<'t>,
    v: Var<'t>,
    mask: &BilateralMask,
    e: Var<'t>,
    suppression: f64,
) -> Result<Var<'t>> {
    let c = q.shape()[1];
    let frames = k.shape()[0] / mask.len().max(1);
    let scores = q.matmul_bt(k)?.scale(1.0 / (c as f64).sqrt());
    let weights = scores.add(bilateral_bias(e, mask, frames, suppression)?)?.softmax_rows()?;
    Ok(weights.matmul(v)?)
}

/// Runs `f` on an inference tape and returns the output value.
pub fn forward_only<F>(f: F) -> Result<Tensor>
where
    F: for<'t> FnOnce(&'t Tape) -> Result<Var<'t>>,
{
    let tape = Tape::inference();
    let out = f(&tape)?;
    Ok(out.value().as_ref().clone())
}
