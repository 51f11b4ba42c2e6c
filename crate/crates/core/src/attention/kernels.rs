use bvos_tensor::kernels::{dot, gemm_acc, gemm_at_acc, gemm_bt_acc, matmul, softmax_in_place};
use bvos_tensor::Tensor;

use super::{BilateralEncoding, BilateralMask};
use crate::error::{extent, CoreError, Result};

/// Which keys each query may attend to.
#[derive(Clone, Debug)]
pub enum KeySet<'a> {
    /// Every key of every frame.
    All,
    /// Keys whose spatial position the mask admits, in every frame.
    Masked(&'a BilateralMask),
}

/// Extents of one attention call.
#[derive(Clone, Copy, Debug)]
pub(crate) struct AttnDims {
    pub queries: usize,
    /// Key tokens per frame.
    pub tokens: usize,
    pub frames: usize,
    pub heads: usize,
    pub head_dim: usize,
}

impl AttnDims {
    pub fn channels(&self) -> usize {
        self.heads * self.head_dim
    }

    pub fn scale(&self) -> f64 {
        1.0 / (self.head_dim as f64).sqrt()
    }

    /// Validates `q: [N×C]`, `k, v: [T·N_k×C]`.
    pub fn infer(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize, tokens: usize) -> Result<Self> {
        let shape_err = || {
            extent(
                "attention",
                format!("q {:?}, k {:?}, v {:?}, {heads} heads", q.shape(), k.shape(), v.shape()),
            )
        };
        if q.ndim() != 2 || k.ndim() != 2 || k.shape() != v.shape() || heads == 0 {
            return Err(shape_err());
        }
        let c = q.shape()[1];
        if k.shape()[1] != c || !c.is_multiple_of(heads) || tokens == 0 || !k.shape()[0].is_multiple_of(tokens) || k.shape()[0] == 0 {
            return Err(shape_err());
        }
        Ok(Self {
            queries: q.shape()[0],
            tokens,
            frames: k.shape()[0] / tokens,
            heads,
            head_dim: c / heads,
        })
    }
}

/// Fills `out` with `(key index, spatial position)` candidates for query `i`.
fn candidates(keys: &KeySet<'_>, dims: &AttnDims, i: usize, out: &mut Vec<(usize, usize)>) {
    out.clear();
    match keys {
        KeySet::All => {
            for f in 0..dims.frames {
                out.extend((0..dims.tokens).map(|p| (f * dims.tokens + p, p)));
            }
        }
        KeySet::Masked(m) => {
            for f in 0..dims.frames {
                out.extend(m.admitted(i).iter().map(|&p| (f * dims.tokens + p as usize, p as usize)));
            }
        }
    }
}

/// Saved state of a fused forward pass.
pub(crate) struct FusedCache {
    /// Softmax weights. Masked: per query, then head, then candidate.
    /// Unmasked: per head, then query, then key.
    pub probs: Vec<f64>,
    /// Start of each query's block in `probs`.
    pub offsets: Vec<usize>,
}

/// Multi-head attention over per-query candidate lists. `bias`, when given,
/// holds one value per key spatial position and is added to every admitted
/// score (the trainable bilateral relaxation restricted to admitted keys).
pub(crate) fn fused_forward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    dims: &AttnDims,
    keys: &KeySet<'_>,
    bias: Option<&[f64]>,
) -> (Tensor, FusedCache) {
    if let KeySet::All = keys {
        return dense_forward(q, k, v, dims, bias);
    }
    let (c, d, scale) = (dims.channels(), dims.head_dim, dims.scale());
    let (qd, kd, vd) = (q.data(), k.data(), v.data());
    let mut out = vec![0.0; dims.queries * c];
    let mut probs = Vec::new();
    let mut offsets = Vec::with_capacity(dims.queries + 1);
    let mut cand = Vec::new();
    for i in 0..dims.queries {
        offsets.push(probs.len());
        candidates(keys, dims, i, &mut cand);
        for h in 0..dims.heads {
            let qi = &qd[i * c + h * d..i * c + (h + 1) * d];
            let start = probs.len();
            let mut max = f64::NEG_INFINITY;
            for &(key, pos) in &cand {
                let mut s = dot(qi, &kd[key * c + h * d..key * c + (h + 1) * d]) * scale;
                if let Some(b) = bias {
                    s += b[pos];
                }
                max = max.max(s);
                probs.push(s);
            }
            let row = &mut probs[start..];
            let mut total = 0.0;
            for s in row.iter_mut() {
                *s = (*s - max).exp();
                total += *s;
            }
            let oi = &mut out[i * c + h * d..i * c + (h + 1) * d];
            for (s, &(key, _)) in row.iter_mut().zip(&cand) {
                *s /= total;
                let vk = &vd[key * c + h * d..key * c + (h + 1) * d];
                for (o, &x) in oi.iter_mut().zip(vk) {
                    *o += *s * x;
                }
            }
        }
    }
    offsets.push(probs.len());
    (
        Tensor::new(&[dims.queries, c], out).expect("consistent extents"),
        FusedCache { probs, offsets },
    )
}

/// Gradients `(dq, dk, dv, dbias)` of [`fused_forward`].
pub(crate) fn fused_backward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    dims: &AttnDims,
    keys: &KeySet<'_>,
    cache: &FusedCache,
    dout: &Tensor,
) -> (Tensor, Tensor, Tensor, Tensor) {
    if let KeySet::All = keys {
        return dense_backward(q, k, v, dims, cache, dout);
    }
    let (c, d, scale) = (dims.channels(), dims.head_dim, dims.scale());
    let (qd, kd, vd, god) = (q.data(), k.data(), v.data(), dout.data());
    let mut dq = vec![0.0; qd.len()];
    let mut dk = vec![0.0; kd.len()];
    let mut dv = vec![0.0; vd.len()];
    let mut dbias = vec![0.0; dims.tokens];
    let mut cand = Vec::new();
    let mut dp = Vec::new();
    for i in 0..dims.queries {
        candidates(keys, dims, i, &mut cand);
        let m = cand.len();
        for h in 0..dims.heads {
            let p = &cache.probs[cache.offsets[i] + h * m..cache.offsets[i] + (h + 1) * m];
            let go = &god[i * c + h * d..i * c + (h + 1) * d];
            let qi = &qd[i * c + h * d..i * c + (h + 1) * d];
            dp.clear();
            let mut weighted = 0.0;
            for (&pj, &(key, _)) in p.iter().zip(&cand) {
                let vk = &vd[key * c + h * d..key * c + (h + 1) * d];
                let g = dot(go, vk);
                weighted += pj * g;
                dp.push(g);
                let dvk = &mut dv[key * c + h * d..key * c + (h + 1) * d];
                for (a, &b) in dvk.iter_mut().zip(go) {
                    *a += pj * b;
                }
            }
            let dqi = &mut dq[i * c + h * d..i * c + (h + 1) * d];
            for ((&pj, &g), &(key, pos)) in p.iter().zip(&dp).zip(&cand) {
                let ds = pj * (g - weighted);
                if ds == 0.0 {
                    continue;
                }
                dbias[pos] += ds;
                let kk = &kd[key * c + h * d..key * c + (h + 1) * d];
                for (a, &b) in dqi.iter_mut().zip(kk) {
                    *a += ds * scale * b;
                }
                let dkk = &mut dk[key * c + h * d..key * c + (h + 1) * d];
                for (a, &b) in dkk.iter_mut().zip(qi) {
                    *a += ds * scale * b;
                }
            }
        }
    }
    (
        Tensor::new(q.shape(), dq).expect("shape"),
        Tensor::new(k.shape(), dk).expect("shape"),
        Tensor::new(v.shape(), dv).expect("shape"),
        Tensor::new(&[dims.tokens, 1], dbias).expect("shape"),
    )
}

/// Copies head `h` of `[rows×C]` into a contiguous `[rows×d]` buffer.
fn head_slice(x: &[f64], rows: usize, dims: &AttnDims, h: usize) -> Vec<f64> {
    let (c, d) = (dims.channels(), dims.head_dim);
    let mut out = Vec::with_capacity(rows * d);
    for r in 0..rows {
        out.extend_from_slice(&x[r * c + h * d..r * c + (h + 1) * d]);
    }
    out
}

fn scatter_head(dst: &mut [f64], src: &[f64], rows: usize, dims: &AttnDims, h: usize) {
    let (c, d) = (dims.channels(), dims.head_dim);
    for r in 0..rows {
        dst[r * c + h * d..r * c + (h + 1) * d].copy_from_slice(&src[r * d..(r + 1) * d]);
    }
}

/// Every key admitted: per-head matrix products.
fn dense_forward(q: &Tensor, k: &Tensor, v: &Tensor, dims: &AttnDims, bias: Option<&[f64]>) -> (Tensor, FusedCache) {
    let (n, m, d) = (dims.queries, dims.frames * dims.tokens, dims.head_dim);
    let mut out = vec![0.0; n * dims.channels()];
    let mut probs = vec![0.0; dims.heads * n * m];
    for h in 0..dims.heads {
        let qh = head_slice(q.data(), n, dims, h).iter().map(|x| x * dims.scale()).collect::<Vec<_>>();
        let kh = head_slice(k.data(), m, dims, h);
        let vh = head_slice(v.data(), m, dims, h);
        let p = &mut probs[h * n * m..(h + 1) * n * m];
        gemm_bt_acc(n, d, m, &qh, &kh, p);
        for row in p.chunks_mut(m) {
            if let Some(b) = bias {
                for (j, s) in row.iter_mut().enumerate() {
                    *s += b[j % dims.tokens];
                }
            }
            softmax_in_place(row);
        }
        let mut oh = vec![0.0; n * d];
        gemm_acc(n, m, d, p, &vh, &mut oh);
        scatter_head(&mut out, &oh, n, dims, h);
    }
    (
        Tensor::new(&[n, dims.channels()], out).expect("consistent extents"),
        FusedCache { probs, offsets: Vec::new() },
    )
}

fn dense_backward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    dims: &AttnDims,
    cache: &FusedCache,
    dout: &Tensor,
) -> (Tensor, Tensor, Tensor, Tensor) {
    let (n, m, d, scale) = (dims.queries, dims.frames * dims.tokens, dims.head_dim, dims.scale());
    let mut dq = vec![0.0; q.len()];
    let mut dk = vec![0.0; k.len()];
    let mut dv = vec![0.0; v.len()];
    let mut dbias = vec![0.0; dims.tokens];
    for h in 0..dims.heads {
        let p = &cache.probs[h * n * m..(h + 1) * n * m];
        let qh = head_slice(q.data(), n, dims, h);
        let kh = head_slice(k.data(), m, dims, h);
        let vh = head_slice(v.data(), m, dims, h);
        let go = head_slice(dout.data(), n, dims, h);
        let mut dvh = vec![0.0; m * d];
        gemm_at_acc(m, n, d, p, &go, &mut dvh);
        let mut ds = vec![0.0; n * m];
        gemm_bt_acc(n, d, m, &go, &vh, &mut ds);
        for (drow, prow) in ds.chunks_mut(m).zip(p.chunks(m)) {
            let weighted: f64 = drow.iter().zip(prow).map(|(g, p)| g * p).sum();
            for (j, (g, &pj)) in drow.iter_mut().zip(prow).enumerate() {
                *g = pj * (*g - weighted);
                dbias[j % dims.tokens] += *g;
            }
        }
        let mut dqh = vec![0.0; n * d];
        gemm_acc(n, m, d, &ds, &kh, &mut dqh);
        let mut dkh = vec![0.0; m * d];
        gemm_at_acc(m, n, d, &ds, &qh, &mut dkh);
        dqh.iter_mut().chain(dkh.iter_mut()).for_each(|x| *x *= scale);
        scatter_head(&mut dq, &dqh, n, dims, h);
        scatter_head(&mut dk, &dkh, m, dims, h);
        scatter_head(&mut dv, &dvh, m, dims, h);
    }
    (
        Tensor::new(q.shape(), dq).expect("shape"),
        Tensor::new(k.shape(), dk).expect("shape"),
        Tensor::new(v.shape(), dv).expect("shape"),
        Tensor::new(&[dims.tokens, 1], dbias).expect("shape"),
    )
}

fn check_mask(mask: &BilateralMask, q: &Tensor) -> Result<()> {
    if q.ndim() != 2 || q.shape()[0] != mask.len() {
        return Err(extent(
            "bilateral attention",
            format!("{:?} queries for a mask over {} tokens", q.shape(), mask.len()),
        ));
    }
    Ok(())
}

/// Queries per block of the dense reference.
const DENSE_BLOCK: usize = 32;

/// Dense reference: each query row computes scores against every key of every
/// frame, then softmaxes over admitted keys only (others get exactly zero
/// weight). `q: [HW×C]`, `k, v: [T·HW×C]`; scores are scaled by `1/√C`.
pub fn bi_attn_exact(q: &Tensor, k: &Tensor, v: &Tensor, mask: &BilateralMask) -> Result<Tensor> {
    check_mask(mask, q)?;
    let dims = AttnDims::infer(q, k, v, 1, mask.len())?;
    let (c, n, scale) = (dims.channels(), dims.tokens, dims.scale());
    let total = dims.frames * n;
    let mut out = vec![0.0; dims.queries * c];
    let mut admit = vec![false; n];
    let mut rows = vec![0.0; DENSE_BLOCK * total];
    for start in (0..dims.queries).step_by(DENSE_BLOCK) {
        let b = DENSE_BLOCK.min(dims.queries - start);
        let rows = &mut rows[..b * total];
        rows.iter_mut().for_each(|s| *s = 0.0);
        gemm_bt_acc(b, c, total, &q.data()[start * c..(start + b) * c], k.data(), rows);
        for (r, row) in rows.chunks_mut(total).enumerate() {
            let i = start + r;
            admit.iter_mut().for_each(|a| *a = false);
            let keys = mask.admitted(i);
            if keys.is_empty() {
                return Err(CoreError::Invalid(format!("query {i} admits no keys")));
            }
            for &p in keys {
                admit[p as usize] = true;
            }
            let mut max = f64::NEG_INFINITY;
            for (j, s) in row.iter_mut().enumerate() {
                *s *= scale;
                if admit[j % n] {
                    max = max.max(*s);
                }
            }
            let mut z = 0.0;
            for (j, s) in row.iter_mut().enumerate() {
                *s = if admit[j % n] { (*s - max).exp() } else { 0.0 };
                z += *s;
            }
            row.iter_mut().for_each(|s| *s /= z);
        }
        gemm_acc(b, total, c, rows, v.data(), &mut out[start * c..(start + b) * c]);
    }
    Ok(Tensor::new(&[dims.queries, c], out)?)
}

/// Dense softmax weights of the additive relaxation, `[HW × T·HW]`:
/// admitted scores get `+E(key position)`, the rest get `−L`.
pub fn additive_weights(
    q: &Tensor,
    k: &Tensor,
    mask: &BilateralMask,
    e: &BilateralEncoding,
    suppression: f64,
) -> Result<Tensor> {
    check_mask(mask, q)?;
    if e.len() != mask.len() {
        return Err(extent("bi_attn_additive", format!("{} encodings for {} tokens", e.len(), mask.len())));
    }
    let dims = AttnDims::infer(q, k, k, 1, mask.len())?;
    let (c, n, scale) = (dims.channels(), dims.tokens, dims.scale());
    let total = dims.frames * n;
    let ev = e.as_slice();
    let mut w = vec![0.0; dims.queries * total];
    let mut admit = vec![false; n];
    for i in 0..dims.queries {
        admit.iter_mut().for_each(|a| *a = false);
        for &p in mask.admitted(i) {
            admit[p as usize] = true;
        }
        let qi = &q.data()[i * c..(i + 1) * c];
        let row = &mut w[i * total..(i + 1) * total];
        for (j, s) in row.iter_mut().enumerate() {
            let pos = j % n;
            let base = dot(qi, &k.data()[j * c..(j + 1) * c]) * scale;
            *s = if admit[pos] { base + ev[pos] } else { base - suppression };
        }
        bvos_tensor::kernels::softmax_in_place(row);
    }
    Ok(Tensor::new(&[dims.queries, total], w)?)
}

/// Trainable relaxation of [`bi_attn_exact`]: plain softmax over all keys of
/// `QKᵀ/√C + E` (admitted) or `QKᵀ/√C − L` (not admitted).
pub fn bi_attn_additive(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    mask: &BilateralMask,
    e: &BilateralEncoding,
    suppression: f64,
) -> Result<Tensor> {
    if k.shape() != v.shape() {
        return Err(extent("bi_attn_additive", format!("k {:?} vs v {:?}", k.shape(), v.shape())));
    }
    let w = additive_weights(q, k, mask, e, suppression)?;
    Ok(matmul(&w, v)?)
}

/// Gathers only admitted keys per query; equal to [`bi_attn_exact`] up to
/// summation order.
pub fn bi_attn_windowed(q: &Tensor, k: &Tensor, v: &Tensor, mask: &BilateralMask) -> Result<Tensor> {
    check_mask(mask, q)?;
    let dims = AttnDims::infer(q, k, v, 1, mask.len())?;
    Ok(fused_forward(q, k, v, &dims, &KeySet::Masked(mask), None).0)
}

/// Plain multi-head scaled dot-product attention over all keys.
pub fn global_attention(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize, tokens_per_frame: usize) -> Result<Tensor> {
    let dims = AttnDims::infer(q, k, v, heads, tokens_per_frame)?;
    Ok(fused_forward(q, k, v, &dims, &KeySet::All, None).0)
}

/// Per-head input projections (`C×d` each) and the `C×C` output projection.
#[derive(Clone, Debug)]
pub struct HeadProjections {
    pub query: Vec<Tensor>,
    pub key: Vec<Tensor>,
    pub value: Vec<Tensor>,
    pub output: Tensor,
}

impl HeadProjections {
    pub fn heads(&self) -> usize {
        self.query.len()
    }

    fn validate(&self, channels: usize) -> Result<usize> {
        let h = self.heads();
        if h == 0 || self.key.len() != h || self.value.len() != h {
            return Err(extent("multi_head_bi_attn", "head counts of W^Q, W^K, W^V differ"));
        }
        let d = self.query[0].shape().get(1).copied().unwrap_or(0);
        for w in self.query.iter().chain(&self.key).chain(&self.value) {
            if w.shape() != [channels, d] {
                return Err(extent(
                    "multi_head_bi_attn",
                    format!("projection {:?}, expected [{channels}, {d}]", w.shape()),
                ));
            }
        }
        if self.output.shape() != [h * d, channels] {
            return Err(extent(
                "multi_head_bi_attn",
                format!("output projection {:?}, expected [{}, {channels}]", self.output.shape(), h * d),
            ));
        }
        Ok(d)
    }
}

/// `Concat(head_1..head_h)·W^O` with `head_i = BiAttn(QW_i^Q, KW_i^K, VW_i^V)`;
/// every head uses the same mask.
pub fn multi_head_bi_attn(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    mask: &BilateralMask,
    proj: &HeadProjections,
) -> Result<Tensor> {
    let channels = q.shape().get(1).copied().unwrap_or(0);
    let d = proj.validate(channels)?;
    let n = q.shape()[0];
    let h = proj.heads();
    let mut concat = vec![0.0; n * h * d];
    for i in 0..h {
        let head = bi_attn_windowed(
            &matmul(q, &proj.query[i])?,
            &matmul(k, &proj.key[i])?,
            &matmul(v, &proj.value[i])?,
            mask,
        )?;
        for r in 0..n {
            concat[r * h * d + i * d..r * h * d + (i + 1) * d].copy_from_slice(&head.data()[r * d..(r + 1) * d]);
        }
    }
    Ok(matmul(&Tensor::new(&[n, h * d], concat)?, &proj.output)?)
}
