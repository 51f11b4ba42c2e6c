//! Reference implementations shared by the integration tests.
#![allow(dead_code)]

use bvos_tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(shape, 1.0, rng)
}

/// Exhaustive admission test: for query `q` and every position `p` of the
/// query-centred clipped window, rank = number of window positions ordered
/// before `p` by `(E, row-major index)`.
pub fn brute_force_mask(e: &[f64], h: usize, w: usize, wd: usize, wb: usize) -> Vec<bool> {
    let n = h * w;
    let mut dense = vec![false; n * n];
    for qh in 0..h {
        for qw in 0..w {
            let q = qh * w + qw;
            let mut window = Vec::new();
            for i in 0..h {
                for j in 0..w {
                    if i.abs_diff(qh) <= wd && j.abs_diff(qw) <= wd {
                        window.push(i * w + j);
                    }
                }
            }
            let before = |a: usize, b: usize| e[a] < e[b] || (e[a] == e[b] && a < b);
            let rank = |p: usize| window.iter().filter(|&&o| before(o, p)).count();
            let rq = rank(q);
            for &p in &window {
                if rank(p).abs_diff(rq) <= wb {
                    dense[q * n + p] = true;
                }
            }
        }
    }
    dense
}

/// Materializes the full masked score matrix `[N × T·N]`, writes `-inf` at
/// non-admitted entries, softmaxes each row and multiplies by `V`.
pub fn dense_row_attention(q: &Tensor, k: &Tensor, v: &Tensor, admit: &[bool], tokens: usize) -> Tensor {
    let (n, c) = (q.shape()[0], q.shape()[1]);
    let total = k.shape()[0];
    let scale = 1.0 / (c as f64).sqrt();
    let mut scores = vec![f64::NEG_INFINITY; n * total];
    for i in 0..n {
        for j in 0..total {
            if admit[i * tokens + j % tokens] {
                let mut s = 0.0;
                for ch in 0..c {
                    s += q.data()[i * c + ch] * k.data()[j * c + ch];
                }
                scores[i * total + j] = s * scale;
            }
        }
    }
    let mut out = vec![0.0; n * c];
    for i in 0..n {
        let row = &scores[i * total..(i + 1) * total];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|s| (s - max).exp()).sum();
        for j in 0..total {
            let p = (row[j] - max).exp() / z;
            for ch in 0..c {
                out[i * c + ch] += p * v.data()[j * c + ch];
            }
        }
    }
    Tensor::new(&[n, c], out).unwrap()
}

/// Random encoding values; `ties` draws from a small integer set so equal
/// values are common.
pub fn random_encoding(n: usize, ties: bool, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n)
        .map(|_| {
            if ties {
                rng.random_range(0..4) as f64
            } else {
                rng.random_range(-1.0..1.0)
            }
        })
        .collect()
}
