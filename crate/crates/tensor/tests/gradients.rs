//! Every backward rule against central finite differences, ten seeds each.

use bvos_tensor::kernels::LAYER_NORM_EPS;
use bvos_tensor::{concat0, grad_check, Result, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-4;
const SEEDS: u64 = 10;

/// Reduces any output to a scalar with fixed random weights so every output
/// coordinate contributes to the gradient.
fn weighted_sum<'t>(y: Var<'t>, seed: u64) -> Result<Var<'t>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let w = Tensor::randn(&y.shape(), 1.0, &mut rng);
    Ok(y.mul(y.tape().constant(w))?.sum())
}

fn check_all<F>(name: &str, make_inputs: impl Fn(&mut ChaCha8Rng) -> Vec<Tensor>, f: F)
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>> + Copy,
{
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = make_inputs(&mut rng);
        let report = grad_check(f, &inputs).unwrap();
        assert!(report.passes(TOL), "{name} seed {seed}: {report:?}");
    }
}

#[test]
fn matmul_rules() {
    check_all(
        "matmul",
        |r| vec![Tensor::randn(&[3, 4], 1.0, r), Tensor::randn(&[4, 2], 1.0, r)],
        |_, v| weighted_sum(v[0].matmul(v[1])?, 1),
    );
    check_all(
        "matmul_bt",
        |r| vec![Tensor::randn(&[3, 4], 1.0, r), Tensor::randn(&[5, 4], 1.0, r)],
        |_, v| weighted_sum(v[0].matmul_bt(v[1])?, 2),
    );
}

#[test]
fn elementwise_rules() {
    check_all(
        "add/sub/mul/scale/square",
        |r| vec![Tensor::randn(&[2, 3], 1.0, r), Tensor::randn(&[2, 3], 1.0, r)],
        |_, v| {
            let y = v[0].add(v[1])?.mul(v[0].sub(v[1])?)?.scale(0.7).add(v[1].square())?;
            weighted_sum(y, 3)
        },
    );
    check_all(
        "silu/gelu",
        |r| vec![Tensor::randn(&[10], 1.5, r)],
        |_, v| weighted_sum(v[0].silu().add(v[0].gelu())?, 4),
    );
}

#[test]
fn bias_and_reshape_rules() {
    check_all(
        "linear",
        |r| {
            vec![
                Tensor::randn(&[4, 3], 1.0, r),
                Tensor::randn(&[3, 5], 1.0, r),
                Tensor::randn(&[5], 1.0, r),
            ]
        },
        |_, v| weighted_sum(v[0].linear(v[1], Some(v[2]))?, 5),
    );
    check_all(
        "tokens/concat",
        |r| vec![Tensor::randn(&[2, 3, 2], 1.0, r), Tensor::randn(&[1, 3, 2], 1.0, r)],
        |_, v| {
            let c = concat0(&[v[0], v[1]])?;
            weighted_sum(c.to_tokens()?.transpose()?.mean().add(c.sum())?, 6)
        },
    );
}

#[test]
fn softmax_rules() {
    check_all(
        "softmax_rows",
        |r| vec![Tensor::randn(&[3, 5], 2.0, r)],
        |_, v| weighted_sum(v[0].softmax_rows()?, 7),
    );
    check_all(
        "masked_softmax_rows",
        |r| vec![Tensor::randn(&[3, 4], 2.0, r)],
        |_, v| {
            let admit = std::rc::Rc::new(vec![
                true, false, true, true, //
                false, true, false, false, //
                true, true, true, false,
            ]);
            weighted_sum(v[0].masked_softmax_rows(admit)?, 8)
        },
    );
}

#[test]
fn layer_norm_rule() {
    check_all(
        "layer_norm",
        |r| {
            vec![
                Tensor::randn(&[4, 6], 1.0, r),
                Tensor::randn(&[6], 1.0, r),
                Tensor::randn(&[6], 1.0, r),
            ]
        },
        |_, v| weighted_sum(v[0].layer_norm(v[1], v[2], LAYER_NORM_EPS)?, 9),
    );
}

#[test]
fn layer_norm_then_matmul_chain() {
    check_all(
        "layer_norm+matmul",
        |r| {
            vec![
                Tensor::randn(&[5, 4], 1.0, r),
                Tensor::randn(&[4], 1.0, r),
                Tensor::randn(&[4], 1.0, r),
                Tensor::randn(&[4, 3], 1.0, r),
            ]
        },
        |_, v| weighted_sum(v[0].layer_norm(v[1], v[2], LAYER_NORM_EPS)?.matmul(v[3])?, 10),
    );
}

#[test]
fn conv_rules() {
    for (stride, pad) in [(1, 1), (2, 1), (1, 0)] {
        check_all(
            "conv2d",
            |r| {
                vec![
                    Tensor::randn(&[2, 5, 6], 1.0, r),
                    Tensor::randn(&[3, 2, 3, 3], 1.0, r),
                    Tensor::randn(&[3], 1.0, r),
                ]
            },
            move |_, v| weighted_sum(v[0].conv2d(v[1], Some(v[2]), stride, pad)?, 11),
        );
    }
    check_all(
        "conv2d 1x1",
        |r| vec![Tensor::randn(&[3, 4, 4], 1.0, r), Tensor::randn(&[2, 3, 1, 1], 1.0, r)],
        |_, v| weighted_sum(v[0].conv2d(v[1], None, 1, 0)?, 12),
    );
}

#[test]
fn resampling_rules() {
    check_all(
        "bilinear_resize",
        |r| vec![Tensor::randn(&[2, 3, 4], 1.0, r)],
        |_, v| weighted_sum(v[0].bilinear_resize(7, 5)?.add(v[0].bilinear_resize(7, 5)?)?, 13),
    );
    check_all(
        "bilinear_resize down",
        |r| vec![Tensor::randn(&[1, 8, 8], 1.0, r)],
        |_, v| weighted_sum(v[0].bilinear_resize(3, 2)?, 14),
    );
    check_all(
        "upsample_nearest",
        |r| vec![Tensor::randn(&[2, 2, 3], 1.0, r)],
        |_, v| weighted_sum(v[0].upsample_nearest(2)?, 15),
    );
}
