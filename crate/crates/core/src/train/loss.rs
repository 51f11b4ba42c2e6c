use bvos_tensor::{Tensor, Var};

use crate::error::{extent, CoreError, Result};

fn check_logits(op: &'static str, shape: &[usize], gt: &[u8]) -> Result<(usize, usize)> {
    if shape.len() != 3 || shape[1] * shape[2] != gt.len() || shape[0] == 0 {
        return Err(extent(op, format!("logits {shape:?} for {} labels", gt.len())));
    }
    if let Some(&label) = gt.iter().find(|&&l| l as usize >= shape[0]) {
        return Err(CoreError::Label { label, slots: shape[0] });
    }
    Ok((shape[0], gt.len()))
}

/// Per-pixel cross-entropy of `[S×H×W]` logits against labels, with the
/// channel softmax of every pixel.
fn pixel_ce(logits: &Tensor, gt: &[u8], slots: usize, n: usize) -> (Vec<f64>, Vec<f64>) {
    let d = logits.data();
    let mut ce = Vec::with_capacity(n);
    let mut probs = vec![0.0; slots * n];
    for p in 0..n {
        let max = (0..slots).map(|s| d[s * n + p]).fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = (0..slots).map(|s| (d[s * n + p] - max).exp()).sum();
        for s in 0..slots {
            probs[s * n + p] = (d[s * n + p] - max).exp() / z;
        }
        ce.push(z.ln() + max - d[gt[p] as usize * n + p]);
    }
    (ce, probs)
}

/// Indices of the `ceil(fraction·n)` largest losses; ties keep the lower
/// pixel index first.
pub fn hardest_pixels(losses: &[f64], fraction: f64) -> Vec<usize> {
    let k = ((fraction * losses.len() as f64).ceil() as usize).clamp(1, losses.len().max(1));
    let mut order: Vec<usize> = (0..losses.len()).collect();
    order.sort_by(|&a, &b| losses[b].total_cmp(&losses[a]));
    order.truncate(k);
    order
}

/// Cross-entropy averaged over the hardest `top_fraction` of pixels.
pub fn bootstrapped_ce<'t>(logits: Var<'t>, gt: &[u8], top_fraction: f64) -> Result<Var<'t>> {
    if !(top_fraction > 0.0 && top_fraction <= 1.0) {
        return Err(CoreError::Config(format!("top fraction {top_fraction} outside (0, 1]")));
    }
    let value = logits.value();
    let (slots, n) = check_logits("bootstrapped_ce", value.shape(), gt)?;
    let (ce, probs) = pixel_ce(&value, gt, slots, n);
    let picked = hardest_pixels(&ce, top_fraction);
    let k = picked.len() as f64;
    let loss = picked.iter().map(|&p| ce[p]).sum::<f64>() / k;
    let shape = value.shape().to_vec();
    let gt = gt.to_vec();
    Ok(logits.tape().custom("bootstrapped_ce", &[logits], Tensor::scalar(loss), move |g, _| {
        let scale = g.item() / k;
        let mut d = vec![0.0; slots * n];
        for &p in &picked {
            for s in 0..slots {
                d[s * n + p] = probs[s * n + p] * scale;
            }
            d[gt[p] as usize * n + p] -= scale;
        }
        vec![Some(Tensor::new(&shape, d).expect("logit shape"))]
    }))
}

/// Channel softmax of `[S×H×W]` logits.
pub fn slot_softmax<'t>(logits: Var<'t>) -> Result<Var<'t>> {
    let s = logits.shape();
    if s.len() != 3 {
        return Err(extent("slot_softmax", format!("expected S×H×W, got {s:?}")));
    }
    Ok(logits.to_tokens()?.softmax_rows()?.to_feature_map(s[1], s[2])?)
}

/// `1 − Σmin(p, g) / Σmax(p, g)` averaged over the object slots `1..S` that
/// appear in `gt`; zero when none does.
pub fn soft_jaccard<'t>(probs: Var<'t>, gt: &[u8]) -> Result<Var<'t>> {
    let value = probs.value();
    let (slots, n) = check_logits("soft_jaccard", value.shape(), gt)?;
    let present: Vec<usize> = (1..slots).filter(|&s| gt.iter().any(|&l| l as usize == s)).collect();
    let d = value.data();
    // with g ∈ {0, 1} and p ∈ [0, 1]: min = p·g and max = p + g − p·g
    let mut terms = Vec::with_capacity(present.len());
    for &s in &present {
        let (mut inter, mut union) = (0.0, 0.0);
        for (p, &l) in d[s * n..(s + 1) * n].iter().zip(gt) {
            let g = f64::from(l as usize == s);
            inter += p.min(g);
            union += p.max(g);
        }
        terms.push((s, inter, union));
    }
    let count = present.len().max(1) as f64;
    let loss = terms.iter().map(|&(_, i, u)| 1.0 - i / u).sum::<f64>() / count;
    let shape = value.shape().to_vec();
    let gt = gt.to_vec();
    Ok(probs.tape().custom("soft_jaccard", &[probs], Tensor::scalar(loss), move |g, _| {
        let mut grad = vec![0.0; slots * n];
        for &(s, inter, union) in &terms {
            for (p, &l) in gt.iter().enumerate() {
                let gv = f64::from(l as usize == s);
                grad[s * n + p] = -g.item() * (gv * union - inter * (1.0 - gv)) / (union * union * count);
            }
        }
        vec![Some(Tensor::new(&shape, grad).expect("prob shape"))]
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use bvos_tensor::Tape;

    #[test]
    fn full_fraction_is_plain_mean_ce() {
        let tape = Tape::new();
        let logits = tape.leaf(Tensor::new(&[2, 1, 2], vec![0.0, 1.0, 0.0, -1.0]).unwrap());
        let loss = bootstrapped_ce(logits, &[1, 0], 1.0).unwrap().value().item();
        let ce0 = (2.0f64).ln();
        let ce1 = (1.0 + (-2.0f64).exp()).ln();
        assert!((loss - (ce0 + ce1) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn saturated_logits_give_small_loss() {
        let gt = [0u8, 1, 2, 1];
        let mut d = vec![0.0; 12];
        for (p, &l) in gt.iter().enumerate() {
            d[l as usize * 4 + p] = 1000.0;
        }
        let tape = Tape::new();
        let logits = tape.leaf(Tensor::new(&[3, 2, 2], d).unwrap());
        assert!(bootstrapped_ce(logits, &gt, 0.15).unwrap().value().item() < 1e-3);
    }

    #[test]
    fn jaccard_extremes() {
        let gt = [0u8, 1, 1, 0];
        let tape = Tape::new();
        let onehot = tape.leaf(Tensor::new(&[2, 2, 2], vec![1.0, 0.0, 0.0, 1.0, 0.0, 1.0, 1.0, 0.0]).unwrap());
        assert_eq!(soft_jaccard(onehot, &gt).unwrap().value().item(), 0.0);
        let zero = tape.leaf(Tensor::new(&[2, 2, 2], vec![1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0]).unwrap());
        assert_eq!(soft_jaccard(zero, &gt).unwrap().value().item(), 1.0);
        let background_only = tape.leaf(Tensor::zeros(&[2, 2, 2]));
        assert_eq!(soft_jaccard(background_only, &[0; 4]).unwrap().value().item(), 0.0);
    }

    #[test]
    fn rejects_bad_inputs() {
        let tape = Tape::new();
        let logits = tape.leaf(Tensor::zeros(&[2, 1, 2]));
        assert!(bootstrapped_ce(logits, &[0, 2], 1.0).is_err());
        assert!(bootstrapped_ce(logits, &[0, 1], 0.0).is_err());
        assert!(bootstrapped_ce(logits, &[0], 1.0).is_err());
    }
}
