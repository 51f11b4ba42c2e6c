mod common;

use std::sync::Arc;

use bvos_core::attention::{
    additive_weights, bi_attn_additive, bi_attn_exact, bi_attn_windowed, build_bilateral_mask, encode_bilateral_space,
    global_attention, multi_head_bi_attn, ops, spatial_window_mask, AttentionConfig, BilateralEncoding, BilateralMask,
    HeadProjections,
};
use bvos_core::TokenGrid;
use bvos_tensor::kernels::matmul;
use bvos_tensor::{grad_check, Tensor};
use common::{brute_force_mask, dense_row_attention, randn, random_encoding, rng};
use proptest::prelude::*;

fn cfg(wd: usize, wb: usize) -> AttentionConfig {
    AttentionConfig {
        spatial_window: wd,
        bilateral_window: wb,
        ..AttentionConfig::toy(4, 1)
    }
}

fn mask_from(e: &[f64], h: usize, w: usize, wd: usize, wb: usize) -> BilateralMask {
    let enc = BilateralEncoding::from_values(h, w, e.to_vec()).unwrap();
    build_bilateral_mask(&enc, &cfg(wd, wb)).unwrap()
}

#[test]
fn index_ordered_encoding_on_4x4_matches_exhaustive_rule() {
    let e: Vec<f64> = (0..16).map(|i| i as f64).collect();
    let m = mask_from(&e, 4, 4, 1, 2);
    assert_eq!(m.to_dense(), brute_force_mask(&e, 4, 4, 1, 2));
    // with E increasing in row-major order, rank is row-major order in the window
    assert_eq!(m.admitted(0), &[0, 1, 4]);
    assert_eq!(m.admitted(5), &[2, 4, 5, 6, 8]);
    assert_eq!(m.admitted(15), &[11, 14, 15]);
}

#[test]
fn mask_matches_brute_force_with_ties_and_borders() {
    let mut r = rng(3);
    for (h, w) in [(1, 1), (1, 5), (3, 7), (6, 6)] {
        for wd in 0..=2 {
            let side = 2 * wd + 1;
            for wb in 0..side * side {
                let e = random_encoding(h * w, wb % 2 == 0, &mut r);
                assert_eq!(mask_from(&e, h, w, wd, wb).to_dense(), brute_force_mask(&e, h, w, wd, wb));
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn admitted_keys_lie_in_window_and_forms_agree(
        h in 1usize..=8, w in 1usize..=8, wd in 0usize..=2, wb_frac in 0.0f64..=1.0, seed in any::<u64>()
    ) {
        let side = 2 * wd + 1;
        let wb = ((side * side - 1) as f64 * wb_frac).round() as usize;
        let e = random_encoding(h * w, seed % 2 == 0, &mut rng(seed));
        let m = mask_from(&e, h, w, wd, wb);
        let dense = m.to_dense();
        let n = h * w;
        for q in 0..n {
            prop_assert!(m.admits(q, q));
            for k in 0..n {
                prop_assert_eq!(dense[q * n + k], m.admits(q, k));
                if dense[q * n + k] {
                    prop_assert!((q / w).abs_diff(k / w) <= wd && (q % w).abs_diff(k % w) <= wd);
                }
            }
            prop_assert!(m.admitted(q).len() <= side * side);
        }
    }

    #[test]
    fn maximal_rank_window_ignores_encoding(h in 1usize..=8, w in 1usize..=8, wd in 0usize..=2, seed in any::<u64>()) {
        let c = cfg(wd, 0).spatial_local();
        let e = random_encoding(h * w, seed % 3 == 0, &mut rng(seed));
        let enc = BilateralEncoding::from_values(h, w, e).unwrap();
        prop_assert_eq!(build_bilateral_mask(&enc, &c).unwrap(), spatial_window_mask(h, w, wd));
    }
}

#[test]
fn encoding_matches_per_pixel_dot_product() {
    let mut r = rng(11);
    let (h, w, c, cf) = (5, 3, 6, 2);
    let q = TokenGrid::new(h, w, randn(&[h * w, c], &mut r)).unwrap();
    let f = TokenGrid::new(h, w, randn(&[h * w, cf], &mut r)).unwrap();
    let proj = randn(&[1, c + cf, 1, 1], &mut r);
    let bias = Tensor::new(&[1], vec![0.25]).unwrap();
    let e = encode_bilateral_space(&q, &f, &proj, Some(&bias)).unwrap();
    for row in 0..h {
        for col in 0..w {
            let mut want = 0.25;
            for (ch, &x) in q.token(row, col).iter().chain(f.token(row, col)).enumerate() {
                want += x * proj.data()[ch];
            }
            assert!((e.get(row, col) - want).abs() < 1e-12);
        }
    }
}

fn random_instance(seed: u64, frames: usize) -> (Tensor, Tensor, Tensor, BilateralMask, Vec<f64>) {
    let mut r = rng(seed);
    let (h, w, c) = (6, 6, 8);
    let e = random_encoding(h * w, seed.is_multiple_of(2), &mut r);
    let m = mask_from(&e, h, w, 2, (seed % 25) as usize);
    (
        randn(&[h * w, c], &mut r),
        randn(&[frames * h * w, c], &mut r),
        randn(&[frames * h * w, c], &mut r),
        m,
        e,
    )
}

#[test]
fn exact_and_windowed_equal_dense_row_oracle() {
    for seed in 0..20 {
        let frames = 1 + (seed % 3) as usize;
        let (q, k, v, m, _) = random_instance(seed, frames);
        let oracle = dense_row_attention(&q, &k, &v, &m.to_dense(), m.len());
        let exact = bi_attn_exact(&q, &k, &v, &m).unwrap();
        let windowed = bi_attn_windowed(&q, &k, &v, &m).unwrap();
        assert!(exact.max_abs_diff(&oracle).unwrap() < 1e-10);
        assert!(windowed.max_abs_diff(&exact).unwrap() < 1e-10);
    }
}

#[test]
fn additive_form_suppresses_non_admitted_keys() {
    for seed in 0..10 {
        let (q, k, v, m, _) = random_instance(seed, 2);
        let zero = BilateralEncoding::from_values(6, 6, vec![0.0; 36]).unwrap();
        let weights = additive_weights(&q, &k, &m, &zero, 1e4).unwrap();
        let dense = m.to_dense_frames(2);
        let leaked: f64 = weights.data().iter().zip(&dense).filter(|(_, &a)| !a).map(|(p, _)| p).sum();
        assert!(leaked < 1e-8);
        for row in weights.data().chunks(72) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let additive = bi_attn_additive(&q, &k, &v, &m, &zero, 1e4).unwrap();
        assert!(additive.max_abs_diff(&bi_attn_exact(&q, &k, &v, &m).unwrap()).unwrap() < 1e-8);
    }
}

#[test]
fn fused_bias_equals_additive_relaxation() {
    let (q, k, v, m, e) = random_instance(5, 2);
    let enc = BilateralEncoding::from_values(6, 6, e.clone()).unwrap();
    let additive = bi_attn_additive(&q, &k, &v, &m, &enc, 1e4).unwrap();
    let m = Arc::new(m);
    let fused = ops::forward_only(|t| {
        let bias = t.constant(Tensor::new(&[36, 1], e.clone()).unwrap());
        ops::windowed_attention(t.constant(q.clone()), t.constant(k.clone()), t.constant(v.clone()), m.clone(), Some(bias), 1)
    })
    .unwrap();
    assert!(fused.max_abs_diff(&additive).unwrap() < 1e-10);
}

#[test]
fn tape_ops_match_plain_kernels() {
    let (q, k, v, m, e) = random_instance(8, 2);
    let exact = bi_attn_exact(&q, &k, &v, &m).unwrap();
    let composed = ops::forward_only(|t| {
        ops::exact_attention(t.constant(q.clone()), t.constant(k.clone()), t.constant(v.clone()), &m)
    })
    .unwrap();
    assert!(composed.max_abs_diff(&exact).unwrap() < 1e-12);
    let enc = BilateralEncoding::from_values(6, 6, e.clone()).unwrap();
    let additive = bi_attn_additive(&q, &k, &v, &m, &enc, 1e4).unwrap();
    let composed = ops::forward_only(|t| {
        let ev = t.constant(Tensor::new(&[36, 1], e.clone()).unwrap());
        ops::additive_attention(t.constant(q.clone()), t.constant(k.clone()), t.constant(v.clone()), &m, ev, 1e4)
    })
    .unwrap();
    assert!(composed.max_abs_diff(&additive).unwrap() < 1e-12);
    let global = ops::forward_only(|t| {
        ops::global_attention(t.constant(q.clone()), t.constant(k.clone()), t.constant(v.clone()), 2, 36)
    })
    .unwrap();
    assert_eq!(global, global_attention(&q, &k, &v, 2, 36).unwrap());
}

fn transpose_tokens(x: &Tensor, h: usize, w: usize) -> Tensor {
    let c = x.shape()[1];
    let frames = x.shape()[0] / (h * w);
    let mut out = vec![0.0; x.len()];
    for f in 0..frames {
        for r in 0..h {
            for col in 0..w {
                let src = f * h * w + r * w + col;
                let dst = f * h * w + col * h + r;
                out[dst * c..(dst + 1) * c].copy_from_slice(&x.data()[src * c..(src + 1) * c]);
            }
        }
    }
    Tensor::new(x.shape(), out).unwrap()
}

#[test]
fn grid_transposition_commutes_with_attention() {
    let mut r = rng(21);
    let (h, w, c) = (4, 7, 4);
    let e = random_encoding(h * w, false, &mut r);
    let (q, k, v) = (randn(&[h * w, c], &mut r), randn(&[2 * h * w, c], &mut r), randn(&[2 * h * w, c], &mut r));
    let m = mask_from(&e, h, w, 1, 3);
    let et = transpose_tokens(&Tensor::new(&[h * w, 1], e).unwrap(), h, w);
    let mt = mask_from(et.data(), w, h, 1, 3);
    let out = bi_attn_windowed(&q, &k, &v, &m).unwrap();
    let out_t = bi_attn_windowed(
        &transpose_tokens(&q, h, w),
        &transpose_tokens(&k, h, w),
        &transpose_tokens(&v, h, w),
        &mt,
    )
    .unwrap();
    assert!(transpose_tokens(&out, h, w).max_abs_diff(&out_t).unwrap() < 1e-12);
}

fn split_heads(x: &Tensor, heads: usize) -> Vec<Tensor> {
    let (n, c) = (x.shape()[0], x.shape()[1]);
    let d = c / heads;
    (0..heads)
        .map(|h| Tensor::from_fn(&[n, d], |i| x.data()[(i / d) * c + h * d + i % d]))
        .collect()
}

#[test]
fn single_identity_head_equals_exact() {
    let (q, k, v, m, _) = random_instance(2, 1);
    let id = Tensor::eye(8);
    let proj = HeadProjections {
        query: vec![id.clone()],
        key: vec![id.clone()],
        value: vec![id.clone()],
        output: id,
    };
    let out = multi_head_bi_attn(&q, &k, &v, &m, &proj).unwrap();
    assert!(out.max_abs_diff(&bi_attn_exact(&q, &k, &v, &m).unwrap()).unwrap() < 1e-12);
}

#[test]
fn two_heads_match_explicit_computation_and_head_order_is_irrelevant() {
    let (q, k, v, m, _) = random_instance(4, 2);
    let mut r = rng(40);
    let d = 3;
    let proj = HeadProjections {
        query: vec![randn(&[8, d], &mut r), randn(&[8, d], &mut r)],
        key: vec![randn(&[8, d], &mut r), randn(&[8, d], &mut r)],
        value: vec![randn(&[8, d], &mut r), randn(&[8, d], &mut r)],
        output: randn(&[2 * d, 8], &mut r),
    };
    let out = multi_head_bi_attn(&q, &k, &v, &m, &proj).unwrap();

    let dense = m.to_dense();
    let heads: Vec<Tensor> = (0..2)
        .map(|i| {
            dense_row_attention(
                &matmul(&q, &proj.query[i]).unwrap(),
                &matmul(&k, &proj.key[i]).unwrap(),
                &matmul(&v, &proj.value[i]).unwrap(),
                &dense,
                36,
            )
        })
        .collect();
    let concat = Tensor::from_fn(&[36, 2 * d], |i| {
        let (row, col) = (i / (2 * d), i % (2 * d));
        heads[col / d].data()[row * d + col % d]
    });
    let oracle = matmul(&concat, &proj.output).unwrap();
    assert!(out.max_abs_diff(&oracle).unwrap() < 1e-12);

    let wo = split_heads(&bvos_tensor::kernels::transpose(&proj.output).unwrap(), 2);
    let swapped_out = Tensor::from_fn(&[2 * d, 8], |i| {
        let (row, col) = (i / 8, i % 8);
        wo[1 - row / d].data()[col * d + row % d]
    });
    let swapped = HeadProjections {
        query: vec![proj.query[1].clone(), proj.query[0].clone()],
        key: vec![proj.key[1].clone(), proj.key[0].clone()],
        value: vec![proj.value[1].clone(), proj.value[0].clone()],
        output: swapped_out,
    };
    let out_swapped = multi_head_bi_attn(&q, &k, &v, &m, &swapped).unwrap();
    assert!(out.max_abs_diff(&out_swapped).unwrap() < 1e-12);
}

fn weighted<'t>(out: bvos_tensor::Var<'t>, seed: u64) -> bvos_tensor::Result<bvos_tensor::Var<'t>> {
    let shape = out.shape();
    let w = Tensor::randn(&shape, 1.0, &mut rng(seed));
    Ok(out.mul(out.tape().constant(w))?.sum())
}

#[test]
fn attention_gradients_pass_finite_difference_checks() {
    for seed in 0..10u64 {
        let mut r = rng(100 + seed);
        let (h, w, c) = (3, 3, 4);
        let e = random_encoding(h * w, false, &mut r);
        let m = Arc::new(mask_from(&e, h, w, 1, 3));
        let q = randn(&[h * w, c], &mut r);
        let k = randn(&[2 * h * w, c], &mut r);
        let v = randn(&[2 * h * w, c], &mut r);
        let et = Tensor::new(&[h * w, 1], e).unwrap();

        let mm = m.clone();
        let report = grad_check(
            move |_, x| {
                let out = ops::windowed_attention(x[0], x[1], x[2], mm.clone(), Some(x[3]), 2)
                    .map_err(|e| bvos_tensor::TensorError::Format(e.to_string()))?;
                weighted(out, seed)
            },
            &[q.clone(), k.clone(), v.clone(), et.clone()],
        )
        .unwrap();
        assert!(report.passes(1e-4), "windowed seed {seed}: {report:?}");

        let mm = m.clone();
        let report = grad_check(
            move |_, x| {
                let out = ops::additive_attention(x[0], x[1], x[2], &mm, x[3], 1e4)
                    .map_err(|e| bvos_tensor::TensorError::Format(e.to_string()))?;
                weighted(out, seed)
            },
            &[q.clone(), k.clone(), v.clone(), et.clone()],
        )
        .unwrap();
        assert!(report.passes(1e-4), "additive seed {seed}: {report:?}");

        let mm = m.clone();
        let report = grad_check(
            move |_, x| {
                let out = ops::exact_attention(x[0], x[1], x[2], &mm)
                    .map_err(|e| bvos_tensor::TensorError::Format(e.to_string()))?;
                weighted(out, seed)
            },
            &[q.clone(), k.clone(), v.clone()],
        )
        .unwrap();
        assert!(report.passes(1e-4), "exact seed {seed}: {report:?}");

        let report = grad_check(
            move |_, x| {
                let out = ops::global_attention(x[0], x[1], x[2], 2, 9)
                    .map_err(|e| bvos_tensor::TensorError::Format(e.to_string()))?;
                weighted(out, seed)
            },
            &[q, k, v],
        )
        .unwrap();
        assert!(report.passes(1e-4), "global seed {seed}: {report:?}");
    }
}

#[test]
fn unmasked_kernel_matches_full_mask_with_bias() {
    let mut r = rng(77);
    let (h, w, c) = (3, 4, 8);
    let q = randn(&[h * w, c], &mut r);
    let k = randn(&[2 * h * w, c], &mut r);
    let v = randn(&[2 * h * w, c], &mut r);
    let bias = randn(&[h * w, 1], &mut r);
    let full = Arc::new(BilateralMask::full(h, w));
    let tape = bvos_tensor::Tape::new();
    let (qv, kv, vv, bv) = (tape.leaf(q.clone()), tape.leaf(k.clone()), tape.leaf(v.clone()), tape.leaf(bias));
    let masked = ops::windowed_attention(qv, kv, vv, full, Some(bv), 2).unwrap();
    let plain = ops::global_attention(qv, kv, vv, 2, h * w).unwrap();
    let no_bias = ops::windowed_attention(qv, kv, vv, Arc::new(BilateralMask::full(h, w)), None, 2).unwrap();
    assert!(plain.value().max_abs_diff(&no_bias.value()).unwrap() < 1e-12);
    assert!(masked.value().max_abs_diff(&plain.value()).unwrap() > 1e-6);
    let dense = dense_row_attention(&q, &k, &v, &vec![true; h * w * h * w], h * w);
    let single = global_attention(&q, &k, &v, 1, h * w).unwrap();
    assert!(single.max_abs_diff(&dense).unwrap() < 1e-10);
}
