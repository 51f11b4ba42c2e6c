//! Forward kernels and their backward rules as pure functions on [`Tensor`].
//!
//! The tape in [`crate::tape`] wires these together; they are also usable on
//! their own for inference and for building oracles.

use crate::error::{invalid, Result, TensorError};
use crate::tensor::Tensor;

/// Default epsilon added to the variance in [`layer_norm`].
pub const LAYER_NORM_EPS: f64 = 1e-5;

// ---------------------------------------------------------------------------
// matrix products

/// Index span covered by a `rows × cols` view with non-negative strides.
fn span(rows: usize, cols: usize, rs: usize, cs: usize) -> usize {
    (rows - 1) * rs + (cols - 1) * cs + 1
}

/// `c += op(a) · op(b)` on strided `m×k`, `k×n` and `m×n` views.
#[allow(clippy::too_many_arguments)]
fn gemm_view(
    (m, k, n): (usize, usize, usize),
    a: &[f64],
    (ars, acs): (usize, usize),
    b: &[f64],
    (brs, bcs): (usize, usize),
    c: &mut [f64],
    (crs, ccs): (usize, usize),
) {
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    assert!(
        a.len() >= span(m, k, ars, acs) && b.len() >= span(k, n, brs, bcs) && c.len() >= span(m, n, crs, ccs),
        "gemm operand too short"
    );
    // SAFETY: the assertion above bounds every index the kernel touches for
    // the given extents and strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            ars as isize,
            acs as isize,
            b.as_ptr(),
            brs as isize,
            bcs as isize,
            1.0,
            c.as_mut_ptr(),
            crs as isize,
            ccs as isize,
        );
    }
}

/// `c[m×n] += op(a) · op(b)` with explicit row/column strides for `a` and `b`.
#[allow(clippy::too_many_arguments)]
fn gemm_strided(m: usize, k: usize, n: usize, a: &[f64], ars: usize, acs: usize, b: &[f64], brs: usize, bcs: usize, c: &mut [f64]) {
    gemm_view((m, k, n), a, (ars, acs), b, (brs, bcs), c, (n, 1));
}

/// `c[m×n] += a[m×k] · b[k×n]` on raw row-major slices.
pub fn gemm_acc(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    gemm_strided(m, k, n, a, k, 1, b, n, 1, c);
}

/// `c[m×n] += a[m×k] · b[n×k]ᵀ`.
pub fn gemm_bt_acc(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    gemm_strided(m, k, n, a, k, 1, b, 1, k, c);
}

/// `c[m×n] += a[k×m]ᵀ · b[k×n]`.
pub fn gemm_at_acc(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    gemm_strided(m, k, n, a, 1, m, b, n, 1, c);
}

/// Dot product with a fixed four-lane reduction order.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let o = c * 4;
        acc[0] += a[o] * b[o];
        acc[1] += a[o + 1] * b[o + 1];
        acc[2] += a[o + 2] * b[o + 2];
        acc[3] += a[o + 3] * b[o + 3];
    }
    let mut tail = 0.0;
    for i in chunks * 4..a.len() {
        tail += a[i] * b[i];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

fn dims2(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    t.expect_ndim(2, op)?;
    Ok((t.shape()[0], t.shape()[1]))
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = dims2(a, "matmul")?;
    let (k2, n) = dims2(b, "matmul")?;
    if k != k2 {
        return Err(mismatch("matmul", a, b));
    }
    let mut c = vec![0.0; m * n];
    gemm_acc(m, k, n, a.data(), b.data(), &mut c);
    Ok(Tensor::from_parts(vec![m, n], c))
}

/// `a · bᵀ` without materializing the transpose.
pub fn matmul_bt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = dims2(a, "matmul_bt")?;
    let (n, k2) = dims2(b, "matmul_bt")?;
    if k != k2 {
        return Err(mismatch("matmul_bt", a, b));
    }
    let mut c = vec![0.0; m * n];
    gemm_bt_acc(m, k, n, a.data(), b.data(), &mut c);
    Ok(Tensor::from_parts(vec![m, n], c))
}

/// `aᵀ · b` without materializing the transpose.
pub fn matmul_at(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (k, m) = dims2(a, "matmul_at")?;
    let (k2, n) = dims2(b, "matmul_at")?;
    if k != k2 {
        return Err(mismatch("matmul_at", a, b));
    }
    let mut c = vec![0.0; m * n];
    gemm_at_acc(m, k, n, a.data(), b.data(), &mut c);
    Ok(Tensor::from_parts(vec![m, n], c))
}

pub fn transpose(a: &Tensor) -> Result<Tensor> {
    let (m, n) = dims2(a, "transpose")?;
    let src = a.data();
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = src[i * n + j];
        }
    }
    Ok(Tensor::from_parts(vec![n, m], out))
}

/// Adds `bias[n]` to every row of `x[m×n]`.
pub fn add_row_bias(x: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (_, n) = dims2(x, "add_row_bias")?;
    if bias.shape() != [n] {
        return Err(mismatch("add_row_bias", x, bias));
    }
    let b = bias.data();
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(n) {
        for (o, &bj) in row.iter_mut().zip(b) {
            *o += bj;
        }
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

/// Column sums of a 2-d tensor; the backward rule of [`add_row_bias`].
pub fn sum_rows(x: &Tensor) -> Result<Tensor> {
    let (_, n) = dims2(x, "sum_rows")?;
    let mut out = vec![0.0; n];
    for row in x.data().chunks(n) {
        for (o, &v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    Ok(Tensor::from_parts(vec![n], out))
}

// ---------------------------------------------------------------------------
// softmax

/// Row softmax with per-row max subtraction.
pub fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    let (_, n) = dims2(x, "softmax_rows")?;
    let mut out = x.data().to_vec();
    if n > 0 {
        for row in out.chunks_mut(n) {
            softmax_in_place(row);
        }
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

/// Row softmax restricted to entries where `admit` is true; the rest get
/// exactly zero weight. Every row must admit at least one entry.
pub fn masked_softmax_rows(x: &Tensor, admit: &[bool]) -> Result<Tensor> {
    let (m, n) = dims2(x, "masked_softmax_rows")?;
    if admit.len() != m * n {
        return Err(invalid(
            "masked_softmax_rows",
            format!("mask has {} entries for a {m}×{n} input", admit.len()),
        ));
    }
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &x.data()[i * n..(i + 1) * n];
        let keep = &admit[i * n..(i + 1) * n];
        let max = row
            .iter()
            .zip(keep)
            .filter(|(_, &k)| k)
            .map(|(&v, _)| v)
            .fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            return Err(invalid("masked_softmax_rows", format!("row {i} admits no entries")));
        }
        let o = &mut out[i * n..(i + 1) * n];
        let mut total = 0.0;
        for j in 0..n {
            if keep[j] {
                o[j] = (row[j] - max).exp();
                total += o[j];
            }
        }
        for v in o.iter_mut() {
            *v /= total;
        }
    }
    Ok(Tensor::from_parts(vec![m, n], out))
}

/// Backward rule shared by every row softmax: `dx = y ⊙ (dy − Σ dy⊙y)`.
pub fn softmax_rows_backward(y: &Tensor, dy: &Tensor) -> Result<Tensor> {
    let (_, n) = dims2(y, "softmax_rows_backward")?;
    y.expect_same_shape(dy, "softmax_rows_backward")?;
    let mut out = vec![0.0; y.len()];
    if n > 0 {
        for ((o, yr), dr) in out.chunks_mut(n).zip(y.data().chunks(n)).zip(dy.data().chunks(n)) {
            let s: f64 = yr.iter().zip(dr).map(|(a, b)| a * b).sum();
            for j in 0..n {
                o[j] = yr[j] * (dr[j] - s);
            }
        }
    }
    Ok(Tensor::from_parts(y.shape().to_vec(), out))
}

// ---------------------------------------------------------------------------
// layer norm

/// Saved statistics from a [`layer_norm`] forward pass.
#[derive(Clone, Debug)]
pub struct LayerNormCache {
    pub normalized: Tensor,
    pub rstd: Vec<f64>,
}

/// Normalizes the last axis then applies `gain` and `bias`.
pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<(Tensor, LayerNormCache)> {
    let c = *x
        .shape()
        .last()
        .ok_or_else(|| invalid("layer_norm", "scalar input"))?;
    if c == 0 {
        return Err(invalid("layer_norm", "zero channels"));
    }
    if gain.shape() != [c] {
        return Err(mismatch("layer_norm", x, gain));
    }
    if bias.shape() != [c] {
        return Err(mismatch("layer_norm", x, bias));
    }
    let rows = x.len() / c;
    let mut xhat = vec![0.0; x.len()];
    let mut out = vec![0.0; x.len()];
    let mut rstd = Vec::with_capacity(rows);
    for r in 0..rows {
        let xr = &x.data()[r * c..(r + 1) * c];
        let mean = xr.iter().sum::<f64>() / c as f64;
        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
        let rs = 1.0 / (var + eps).sqrt();
        rstd.push(rs);
        for j in 0..c {
            let h = (xr[j] - mean) * rs;
            xhat[r * c + j] = h;
            out[r * c + j] = h * gain.data()[j] + bias.data()[j];
        }
    }
    let shape = x.shape().to_vec();
    Ok((
        Tensor::from_parts(shape.clone(), out),
        LayerNormCache {
            normalized: Tensor::from_parts(shape, xhat),
            rstd,
        },
    ))
}

/// Returns `(dx, dgain, dbias)`.
pub fn layer_norm_backward(cache: &LayerNormCache, gain: &Tensor, dy: &Tensor) -> (Tensor, Tensor, Tensor) {
    let c = gain.len();
    let xhat = cache.normalized.data();
    let mut dx = vec![0.0; dy.len()];
    let mut dg = vec![0.0; c];
    let mut db = vec![0.0; c];
    for (r, &rs) in cache.rstd.iter().enumerate() {
        let dyr = &dy.data()[r * c..(r + 1) * c];
        let xr = &xhat[r * c..(r + 1) * c];
        let mut mean_g = 0.0;
        let mut mean_gx = 0.0;
        for j in 0..c {
            let g = dyr[j] * gain.data()[j];
            mean_g += g;
            mean_gx += g * xr[j];
            dg[j] += dyr[j] * xr[j];
            db[j] += dyr[j];
        }
        mean_g /= c as f64;
        mean_gx /= c as f64;
        for j in 0..c {
            let g = dyr[j] * gain.data()[j];
            dx[r * c + j] = rs * (g - mean_g - xr[j] * mean_gx);
        }
    }
    (
        Tensor::from_parts(dy.shape().to_vec(), dx),
        Tensor::from_parts(vec![c], dg),
        Tensor::from_parts(vec![c], db),
    )
}

// ---------------------------------------------------------------------------
// convolution

/// Geometry of a 2-d convolution over a `C×H×W` input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub out_channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_height: usize,
    pub out_width: usize,
}

impl ConvGeometry {
    pub fn new(x: &Tensor, w: &Tensor, stride: usize, padding: usize) -> Result<Self> {
        x.expect_ndim(3, "conv2d")?;
        w.expect_ndim(4, "conv2d")?;
        let (cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (cout, cin2, k, k2) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
        if cin != cin2 || k != k2 {
            return Err(mismatch("conv2d", x, w));
        }
        if k % 2 == 0 {
            return Err(invalid("conv2d", format!("kernel extent {k} must be odd")));
        }
        if stride == 0 {
            return Err(invalid("conv2d", "stride must be positive"));
        }
        if h + 2 * padding < k || wd + 2 * padding < k {
            return Err(invalid(
                "conv2d",
                format!("output extent would be non-positive for {h}×{wd} input, kernel {k}, padding {padding}"),
            ));
        }
        Ok(Self {
            in_channels: cin,
            out_channels: cout,
            height: h,
            width: wd,
            kernel: k,
            stride,
            padding,
            out_height: (h + 2 * padding - k) / stride + 1,
            out_width: (wd + 2 * padding - k) / stride + 1,
        })
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }

    fn positions(&self) -> usize {
        self.out_height * self.out_width
    }
}

/// Output columns `[lo, hi)` whose input column `ox·stride + kj − padding`
/// lies inside the grid.
fn valid_span(g: &ConvGeometry, kj: usize) -> (usize, usize) {
    let lo = g.padding.saturating_sub(kj).div_ceil(g.stride);
    let limit = g.width + g.padding - kj;
    let hi = if limit == 0 { 0 } else { (limit - 1) / g.stride + 1 };
    (lo.min(g.out_width), hi.min(g.out_width))
}

/// Unfolds input patches into a `(C·k·k) × (H'·W')` matrix; padding reads as zero.
fn im2col(g: &ConvGeometry, x: &[f64]) -> Vec<f64> {
    let p = g.positions();
    let mut cols = vec![0.0; g.patch_len() * p];
    for c in 0..g.in_channels {
        for ki in 0..g.kernel {
            for kj in 0..g.kernel {
                let row = (c * g.kernel + ki) * g.kernel + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                let (lo, hi) = valid_span(g, kj);
                if lo >= hi {
                    continue;
                }
                for oy in 0..g.out_height {
                    let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let src = &x[(c * g.height + iy as usize) * g.width..][..g.width];
                    let out = &mut dst[oy * g.out_width..(oy + 1) * g.out_width];
                    let start = lo * g.stride + kj - g.padding;
                    if g.stride == 1 {
                        out[lo..hi].copy_from_slice(&src[start..start + hi - lo]);
                    } else {
                        for (o, ix) in out[lo..hi].iter_mut().zip((start..).step_by(g.stride)) {
                            *o = src[ix];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-adds columns back onto the input grid.
fn col2im(g: &ConvGeometry, cols: &[f64]) -> Vec<f64> {
    let p = g.positions();
    let mut x = vec![0.0; g.in_channels * g.height * g.width];
    for c in 0..g.in_channels {
        for ki in 0..g.kernel {
            for kj in 0..g.kernel {
                let row = (c * g.kernel + ki) * g.kernel + kj;
                let src = &cols[row * p..(row + 1) * p];
                let (lo, hi) = valid_span(g, kj);
                if lo >= hi {
                    continue;
                }
                for oy in 0..g.out_height {
                    let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let base = (c * g.height + iy as usize) * g.width;
                    let start = base + lo * g.stride + kj - g.padding;
                    let seg = &src[oy * g.out_width + lo..oy * g.out_width + hi];
                    for (&v, ix) in seg.iter().zip((start..).step_by(g.stride)) {
                        x[ix] += v;
                    }
                }
            }
        }
    }
    x
}

/// Stride-1 convolution as one matrix product per kernel tap over the
/// zero-padded input. Outputs are computed on rows of the padded width; the
/// trailing `k − 1` columns of each row are scratch.
struct Shifted {
    /// Padded row length.
    row: usize,
    /// Padded plane size.
    plane: usize,
    /// Wide output length per channel, `H' · row`.
    wide: usize,
}

impl Shifted {
    fn new(g: &ConvGeometry) -> Self {
        let row = g.width + 2 * g.padding;
        let plane = (g.height + 2 * g.padding) * row;
        Self {
            row,
            plane,
            wide: g.out_height * row,
        }
    }

    /// Zero-padded copy of `x` with `k − 1` trailing zeros so every tap's
    /// view stays in bounds.
    fn pad(&self, g: &ConvGeometry, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; g.in_channels * self.plane + g.kernel - 1];
        for c in 0..g.in_channels {
            for y in 0..g.height {
                let dst = c * self.plane + (y + g.padding) * self.row + g.padding;
                out[dst..dst + g.width].copy_from_slice(&x[(c * g.height + y) * g.width..][..g.width]);
            }
        }
        out
    }

    fn tap_offset(&self, ki: usize, kj: usize) -> usize {
        ki * self.row + kj
    }
}

fn shifted_forward(g: &ConvGeometry, x: &[f64], w: &[f64]) -> Vec<f64> {
    let s = Shifted::new(g);
    let xp = s.pad(g, x);
    let kk = g.kernel * g.kernel;
    let mut wide = vec![0.0; g.out_channels * s.wide];
    for ki in 0..g.kernel {
        for kj in 0..g.kernel {
            let t = ki * g.kernel + kj;
            gemm_view(
                (g.out_channels, g.in_channels, s.wide),
                &w[t..],
                (g.in_channels * kk, kk),
                &xp[s.tap_offset(ki, kj)..],
                (s.plane, 1),
                &mut wide,
                (s.wide, 1),
            );
        }
    }
    let mut out = Vec::with_capacity(g.out_channels * g.positions());
    for c in 0..g.out_channels {
        for y in 0..g.out_height {
            out.extend_from_slice(&wide[c * s.wide + y * s.row..][..g.out_width]);
        }
    }
    out
}

/// `(dx, dw)` of [`shifted_forward`].
fn shifted_backward(g: &ConvGeometry, x: &[f64], w: &[f64], dy: &[f64], need_dx: bool) -> (Option<Vec<f64>>, Vec<f64>) {
    let s = Shifted::new(g);
    let xp = s.pad(g, x);
    let kk = g.kernel * g.kernel;
    let mut dwide = vec![0.0; g.out_channels * s.wide];
    for c in 0..g.out_channels {
        for y in 0..g.out_height {
            dwide[c * s.wide + y * s.row..][..g.out_width]
                .copy_from_slice(&dy[(c * g.out_height + y) * g.out_width..][..g.out_width]);
        }
    }
    let mut dw = vec![0.0; w.len()];
    let mut dxp = if need_dx { vec![0.0; xp.len()] } else { Vec::new() };
    for ki in 0..g.kernel {
        for kj in 0..g.kernel {
            let t = ki * g.kernel + kj;
            let off = s.tap_offset(ki, kj);
            gemm_view(
                (g.out_channels, s.wide, g.in_channels),
                &dwide,
                (s.wide, 1),
                &xp[off..],
                (1, s.plane),
                &mut dw[t..],
                (g.in_channels * kk, kk),
            );
            if need_dx {
                gemm_view(
                    (g.in_channels, g.out_channels, s.wide),
                    &w[t..],
                    (kk, g.in_channels * kk),
                    &dwide,
                    (s.wide, 1),
                    &mut dxp[off..],
                    (s.plane, 1),
                );
            }
        }
    }
    let dx = need_dx.then(|| {
        let mut dx = Vec::with_capacity(x.len());
        for c in 0..g.in_channels {
            for y in 0..g.height {
                dx.extend_from_slice(&dxp[c * s.plane + (y + g.padding) * s.row + g.padding..][..g.width]);
            }
        }
        dx
    });
    (dx, dw)
}

/// Cross-correlation with zero padding. `x: C_in×H×W`, `w: C_out×C_in×k×k`,
/// optional `bias: C_out`.
pub fn conv2d(x: &Tensor, w: &Tensor, bias: Option<&Tensor>, stride: usize, padding: usize) -> Result<Tensor> {
    conv2d_unfolded(x, w, bias, stride, padding).map(|(out, _)| out)
}

/// [`conv2d`] that also returns the unfolded input patches (`None` for a
/// pointwise convolution, whose patches are the input itself).
pub(crate) fn conv2d_unfolded(
    x: &Tensor,
    w: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    padding: usize,
) -> Result<(Tensor, Option<Vec<f64>>)> {
    let g = ConvGeometry::new(x, w, stride, padding)?;
    if let Some(b) = bias {
        if b.shape() != [g.out_channels] {
            return Err(mismatch("conv2d", w, b));
        }
    }
    let p = g.positions();
    let mut out = vec![0.0; g.out_channels * p];
    let cols = if g.is_pointwise() {
        gemm_acc(g.out_channels, g.in_channels, p, w.data(), x.data(), &mut out);
        None
    } else if g.stride == 1 {
        out = shifted_forward(&g, x.data(), w.data());
        None
    } else {
        let cols = im2col(&g, x.data());
        gemm_acc(g.out_channels, g.patch_len(), p, w.data(), &cols, &mut out);
        Some(cols)
    };
    if let Some(b) = bias {
        for (o, &bv) in out.chunks_mut(p).zip(b.data()) {
            for v in o {
                *v += bv;
            }
        }
    }
    Ok((Tensor::from_parts(vec![g.out_channels, g.out_height, g.out_width], out), cols))
}

/// Returns `(dx, dw, dbias)` for [`conv2d`].
pub fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    dy: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (dx, dw, db) = conv2d_backward_unfolded(x, None, w, dy, stride, padding, true)?;
    Ok((dx.expect("requested"), dw, db))
}

/// [`conv2d_backward`] reusing the patches from [`conv2d_unfolded`] and
/// skipping `dx` unless `need_dx`.
pub(crate) fn conv2d_backward_unfolded(
    x: &Tensor,
    cols: Option<&[f64]>,
    w: &Tensor,
    dy: &Tensor,
    stride: usize,
    padding: usize,
    need_dx: bool,
) -> Result<(Option<Tensor>, Tensor, Tensor)> {
    let g = ConvGeometry::new(x, w, stride, padding)?;
    let p = g.positions();
    if dy.shape() != [g.out_channels, g.out_height, g.out_width] {
        return Err(mismatch("conv2d_backward", dy, w));
    }
    let db: Vec<f64> = dy.data().chunks(p).map(|c| c.iter().sum()).collect();
    let db = Tensor::from_parts(vec![g.out_channels], db);
    if g.stride == 1 && !g.is_pointwise() {
        let (dx, dw) = shifted_backward(&g, x.data(), w.data(), dy.data(), need_dx);
        return Ok((
            dx.map(|dx| Tensor::from_parts(x.shape().to_vec(), dx)),
            Tensor::from_parts(w.shape().to_vec(), dw),
            db,
        ));
    }
    let pl = g.patch_len();
    let cols_owned;
    let cols: &[f64] = match cols {
        _ if g.is_pointwise() => x.data(),
        Some(c) => c,
        None => {
            cols_owned = im2col(&g, x.data());
            &cols_owned
        }
    };
    let mut dw = vec![0.0; g.out_channels * pl];
    gemm_bt_acc(g.out_channels, p, pl, dy.data(), cols, &mut dw);
    let dx = need_dx.then(|| {
        let mut dcols = vec![0.0; pl * p];
        gemm_at_acc(pl, g.out_channels, p, w.data(), dy.data(), &mut dcols);
        let dx = if g.is_pointwise() { dcols } else { col2im(&g, &dcols) };
        Tensor::from_parts(x.shape().to_vec(), dx)
    });
    Ok((dx, Tensor::from_parts(w.shape().to_vec(), dw), db))
}

// ---------------------------------------------------------------------------
// resampling

/// One output sample's two source taps and the weight of the upper tap.
#[derive(Clone, Copy, Debug)]
struct Taps {
    lo: usize,
    hi: usize,
    frac: f64,
}

/// Half-pixel-centre mapping (`align_corners = false`): output index `o`
/// samples source coordinate `(o + 0.5)·in/out − 0.5`, clamped to the grid.
fn linear_taps(input: usize, output: usize) -> Vec<Taps> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(input - 1);
            let hi = (lo + 1).min(input - 1);
            let frac = if lo == hi { 0.0 } else { src - lo as f64 };
            Taps { lo, hi, frac }
        })
        .collect()
}

/// Bilinear resize of a `C×H×W` tensor using the `align_corners = false`
/// convention (pixel centres at half-integer coordinates, edge clamping).
pub fn bilinear_resize(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    x.expect_ndim(3, "bilinear_resize")?;
    if out_h == 0 || out_w == 0 {
        return Err(invalid("bilinear_resize", "target extents must be positive"));
    }
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    if h == 0 || w == 0 {
        return Err(invalid("bilinear_resize", "empty input"));
    }
    let ty = linear_taps(h, out_h);
    let tx = linear_taps(w, out_w);
    let src = x.data();
    let mut out = vec![0.0; c * out_h * out_w];
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for (oy, a) in ty.iter().enumerate() {
            for (ox, b) in tx.iter().enumerate() {
                let top = plane[a.lo * w + b.lo] * (1.0 - b.frac) + plane[a.lo * w + b.hi] * b.frac;
                let bot = plane[a.hi * w + b.lo] * (1.0 - b.frac) + plane[a.hi * w + b.hi] * b.frac;
                out[(ch * out_h + oy) * out_w + ox] = top * (1.0 - a.frac) + bot * a.frac;
            }
        }
    }
    Ok(Tensor::from_parts(vec![c, out_h, out_w], out))
}

pub fn bilinear_resize_backward(input_shape: &[usize], dy: &Tensor) -> Result<Tensor> {
    let (c, h, w) = (input_shape[0], input_shape[1], input_shape[2]);
    let (out_h, out_w) = (dy.shape()[1], dy.shape()[2]);
    let ty = linear_taps(h, out_h);
    let tx = linear_taps(w, out_w);
    let mut dx = vec![0.0; c * h * w];
    for ch in 0..c {
        let plane = &mut dx[ch * h * w..(ch + 1) * h * w];
        for (oy, a) in ty.iter().enumerate() {
            for (ox, b) in tx.iter().enumerate() {
                let g = dy.data()[(ch * out_h + oy) * out_w + ox];
                plane[a.lo * w + b.lo] += g * (1.0 - a.frac) * (1.0 - b.frac);
                plane[a.lo * w + b.hi] += g * (1.0 - a.frac) * b.frac;
                plane[a.hi * w + b.lo] += g * a.frac * (1.0 - b.frac);
                plane[a.hi * w + b.hi] += g * a.frac * b.frac;
            }
        }
    }
    Ok(Tensor::from_parts(input_shape.to_vec(), dx))
}

/// Nearest-neighbour upsampling of a `C×H×W` tensor by an integer factor.
pub fn upsample_nearest(x: &Tensor, factor: usize) -> Result<Tensor> {
    x.expect_ndim(3, "upsample_nearest")?;
    if factor == 0 {
        return Err(invalid("upsample_nearest", "factor must be positive"));
    }
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (oh, ow) = (h * factor, w * factor);
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        for y in 0..oh {
            for xx in 0..ow {
                out[(ch * oh + y) * ow + xx] = x.data()[(ch * h + y / factor) * w + xx / factor];
            }
        }
    }
    Ok(Tensor::from_parts(vec![c, oh, ow], out))
}

pub fn upsample_nearest_backward(input_shape: &[usize], dy: &Tensor, factor: usize) -> Tensor {
    let (c, h, w) = (input_shape[0], input_shape[1], input_shape[2]);
    let (oh, ow) = (h * factor, w * factor);
    let mut dx = vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..oh {
            for xx in 0..ow {
                dx[(ch * h + y / factor) * w + xx / factor] += dy.data()[(ch * oh + y) * ow + xx];
            }
        }
    }
    Tensor::from_parts(input_shape.to_vec(), dx)
}

// ---------------------------------------------------------------------------
// activations

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

pub fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Tanh approximation of GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_permutation() {
        let a = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let p = t(&[2, 2], &[0.0, 1.0, 1.0, 0.0]);
        assert_eq!(matmul(&a, &p).unwrap().data(), &[2.0, 1.0, 4.0, 3.0]);
    }

    #[test]
    fn matmul_identity() {
        let a = Tensor::from_fn(&[3, 4], |i| (i as f64).sin());
        assert_eq!(matmul(&a, &Tensor::eye(4)).unwrap(), a);
    }

    #[test]
    fn matmul_reports_both_shapes() {
        let err = matmul(&Tensor::zeros(&[2, 3]), &Tensor::zeros(&[4, 5])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 5]"), "{msg}");
    }

    #[test]
    fn transposed_products_agree() {
        let a = Tensor::from_fn(&[3, 5], |i| (i as f64 * 0.37).cos());
        let b = Tensor::from_fn(&[4, 5], |i| (i as f64 * 0.11).sin());
        let direct = matmul(&a, &transpose(&b).unwrap()).unwrap();
        assert!(matmul_bt(&a, &b).unwrap().max_abs_diff(&direct).unwrap() < 1e-14);
        let c = Tensor::from_fn(&[3, 4], |i| i as f64 - 5.0);
        let direct = matmul(&transpose(&a).unwrap(), &c).unwrap();
        assert!(matmul_at(&a, &c).unwrap().max_abs_diff(&direct).unwrap() < 1e-14);
    }

    #[test]
    fn softmax_uniform_row() {
        let y = softmax_rows(&t(&[1, 3], &[0.0, 0.0, 0.0])).unwrap();
        for &v in y.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_large_logit_no_overflow() {
        let y = softmax_rows(&t(&[1, 2], &[1000.0, 0.0])).unwrap();
        assert_eq!(y.data()[0], 1.0);
        assert!(y.data()[1] < 1e-300);
        assert!(y.all_finite());
    }

    #[test]
    fn masked_softmax_zeroes_excluded() {
        let x = t(&[1, 4], &[5.0, 1.0, 2.0, 9.0]);
        let y = masked_softmax_rows(&x, &[false, true, true, false]).unwrap();
        assert_eq!(y.data()[0], 0.0);
        assert_eq!(y.data()[3], 0.0);
        let e = 1f64.exp();
        assert!((y.data()[2] - e / (1.0 + e)).abs() < 1e-15);
    }

    #[test]
    fn masked_softmax_rejects_empty_row() {
        assert!(masked_softmax_rows(&t(&[1, 2], &[0.0, 0.0]), &[false, false]).is_err());
    }

    #[test]
    fn layer_norm_constant_token_is_zero() {
        let x = Tensor::full(&[2, 6], 3.5);
        let (y, _) = layer_norm(&x, &Tensor::ones(&[6]), &Tensor::zeros(&[6]), LAYER_NORM_EPS).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_pointwise_identity_mixing() {
        let x = Tensor::from_fn(&[3, 4, 5], |i| i as f64 * 0.1);
        let w = Tensor::eye(3).reshape(&[3, 3, 1, 1]).unwrap();
        assert_eq!(conv2d(&x, &w, None, 1, 0).unwrap(), x);
    }

    #[test]
    fn conv_average_on_constant_image() {
        let x = Tensor::full(&[1, 6, 6], 2.0);
        let w = Tensor::full(&[1, 1, 3, 3], 1.0 / 9.0);
        let y = conv2d(&x, &w, None, 1, 1).unwrap();
        for i in 1..5 {
            for j in 1..5 {
                assert!((y.at(&[0, i, j]) - 2.0).abs() < 1e-14);
            }
        }
        // corners see four of nine taps
        assert!((y.at(&[0, 0, 0]) - 2.0 * 4.0 / 9.0).abs() < 1e-14);
    }

    #[test]
    fn conv_output_extents() {
        let x = Tensor::zeros(&[2, 64, 64]);
        let w = Tensor::zeros(&[4, 2, 3, 3]);
        assert_eq!(conv2d(&x, &w, None, 2, 1).unwrap().shape(), &[4, 32, 32]);
        assert!(conv2d(&Tensor::zeros(&[2, 1, 1]), &w, None, 1, 0).is_err());
        assert!(conv2d(&x, &Tensor::zeros(&[4, 2, 2, 2]), None, 1, 0).is_err());
    }

    #[test]
    fn bilinear_same_size_is_identity() {
        let x = Tensor::from_fn(&[2, 3, 5], |i| (i as f64).sqrt());
        assert_eq!(bilinear_resize(&x, 3, 5).unwrap(), x);
    }

    #[test]
    fn bilinear_constant_stays_constant() {
        let x = Tensor::full(&[1, 3, 3], 0.25);
        let y = bilinear_resize(&x, 7, 2).unwrap();
        assert!(y.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn bilinear_golden_2x2_to_4x4() {
        // Hand evaluation of the half-pixel convention: 1-d taps for 2→4 are
        // weights (0, .25, .75, 1) on the second sample.
        let x = t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let y = bilinear_resize(&x, 4, 4).unwrap();
        let golden = [
            1.0, 1.25, 1.75, 2.0, //
            1.5, 1.75, 2.25, 2.5, //
            2.5, 2.75, 3.25, 3.5, //
            3.0, 3.25, 3.75, 4.0,
        ];
        assert_eq!(y.data(), &golden);
    }

    #[test]
    fn activation_derivatives_match_differences() {
        for &x in &[-3.0, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let ds = (silu(x + h) - silu(x - h)) / (2.0 * h);
            let dg = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((ds - silu_grad(x)).abs() < 1e-8);
            assert!((dg - gelu_grad(x)).abs() < 1e-8);
        }
    }
}
