//! Region similarity `J`, boundary accuracy `F` and their aggregation.
//!
//! `F` matches boundaries by Chebyshev dilation (a pixel matches if an
//! opposite boundary pixel lies within `tolerance` in both axes), the usual
//! fast stand-in for bipartite matching.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{extent, CoreError, Result};

/// `|pred ∩ gt| / |pred ∪ gt|` for label `id`; 1 when both are empty.
pub fn region_j(pred: &[u8], gt: &[u8], id: u8) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(extent("region_j", format!("{} vs {} pixels", pred.len(), gt.len())));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &g) in pred.iter().zip(gt) {
        let (p, g) = (p == id, g == id);
        inter += (p && g) as usize;
        union += (p || g) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Foreground pixels with at least one background 4-neighbour inside the
/// image.
pub fn boundary(mask: &[bool], width: usize, height: usize) -> Vec<bool> {
    let mut out = vec![false; mask.len()];
    for y in 0..height {
        for x in 0..width {
            let p = y * width + x;
            if !mask[p] {
                continue;
            }
            let bg = |q: usize| !mask[q];
            out[p] = (x > 0 && bg(p - 1))
                || (x + 1 < width && bg(p + 1))
                || (y > 0 && bg(p - width))
                || (y + 1 < height && bg(p + width));
        }
    }
    out
}

/// Square (Chebyshev) dilation by `radius` pixels.
pub fn dilate(mask: &[bool], width: usize, height: usize, radius: usize) -> Vec<bool> {
    // separable: rows then columns
    let mut rows = vec![false; mask.len()];
    for y in 0..height {
        for x in 0..width {
            let lo = x.saturating_sub(radius);
            let hi = (x + radius).min(width - 1);
            rows[y * width + x] = (lo..=hi).any(|i| mask[y * width + i]);
        }
    }
    let mut out = vec![false; mask.len()];
    for y in 0..height {
        let lo = y.saturating_sub(radius);
        let hi = (y + radius).min(height - 1);
        for x in 0..width {
            out[y * width + x] = (lo..=hi).any(|j| rows[j * width + x]);
        }
    }
    out
}

/// `max(1, round(0.008 · image diagonal))`.
pub fn default_tolerance(width: usize, height: usize) -> usize {
    let diag = ((width * width + height * height) as f64).sqrt();
    ((0.008 * diag).round() as usize).max(1)
}

/// Boundary F-measure for label `id`: 1 if both boundaries are empty, 0 if
/// exactly one is.
pub fn boundary_f(pred: &[u8], gt: &[u8], width: usize, height: usize, id: u8, tolerance: usize) -> Result<f64> {
    if pred.len() != gt.len() || pred.len() != width * height {
        return Err(extent(
            "boundary_f",
            format!("{} and {} pixels for {width}×{height}", pred.len(), gt.len()),
        ));
    }
    let pb = boundary(&pred.iter().map(|&l| l == id).collect::<Vec<_>>(), width, height);
    let gb = boundary(&gt.iter().map(|&l| l == id).collect::<Vec<_>>(), width, height);
    let (np, ng) = (pb.iter().filter(|&&b| b).count(), gb.iter().filter(|&&b| b).count());
    match (np, ng) {
        (0, 0) => return Ok(1.0),
        (0, _) | (_, 0) => return Ok(0.0),
        _ => {}
    }
    let pd = dilate(&pb, width, height, tolerance);
    let gd = dilate(&gb, width, height, tolerance);
    let hit_p = pb.iter().zip(&gd).filter(|(&b, &d)| b && d).count();
    let hit_g = gb.iter().zip(&pd).filter(|(&b, &d)| b && d).count();
    let precision = hit_p as f64 / np as f64;
    let recall = hit_g as f64 / ng as f64;
    Ok(if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    })
}

/// One row of the per-frame report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameScore {
    pub sequence: String,
    pub frame: usize,
    pub object: u8,
    pub j: f64,
    pub f: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct JfSummary {
    pub j: f64,
    pub f: f64,
    pub jf: f64,
    pub sequences: usize,
    pub rows: usize,
}

/// Scores frames `1..` of a predicted sequence against ground truth, for
/// every label present in the first ground-truth mask.
pub fn score_sequence(
    name: &str,
    preds: &[Vec<u8>],
    gts: &[Vec<u8>],
    width: usize,
    height: usize,
    tolerance: usize,
) -> Result<Vec<FrameScore>> {
    if preds.len() != gts.len() || gts.is_empty() {
        return Err(extent("score_sequence", format!("{} predictions for {} frames", preds.len(), gts.len())));
    }
    let objects = crate::synthetic::labels_of(&gts[0]);
    let mut rows = Vec::new();
    for t in 1..gts.len() {
        for &id in &objects {
            rows.push(FrameScore {
                sequence: name.to_string(),
                frame: t,
                object: id,
                j: region_j(&preds[t], &gts[t], id)?,
                f: boundary_f(&preds[t], &gts[t], width, height, id, tolerance)?,
            });
        }
    }
    Ok(rows)
}

/// Mean over objects within a frame, then over frames within a sequence,
/// then over sequences.
pub fn jf_report(rows: &[FrameScore]) -> Result<JfSummary> {
    if rows.is_empty() {
        return Err(CoreError::Invalid("no scores to aggregate".into()));
    }
    let mut frames: BTreeMap<(&str, usize), (f64, f64, usize)> = BTreeMap::new();
    for r in rows {
        let e = frames.entry((r.sequence.as_str(), r.frame)).or_default();
        e.0 += r.j;
        e.1 += r.f;
        e.2 += 1;
    }
    let mut seqs: BTreeMap<&str, (f64, f64, usize)> = BTreeMap::new();
    for ((s, _), (j, f, n)) in frames {
        let e = seqs.entry(s).or_default();
        e.0 += j / n as f64;
        e.1 += f / n as f64;
        e.2 += 1;
    }
    let count = seqs.len() as f64;
    let (j, f) = seqs
        .values()
        .fold((0.0, 0.0), |(a, b), &(j, f, n)| (a + j / n as f64, b + f / n as f64));
    let (j, f) = (j / count, f / count);
    Ok(JfSummary {
        j,
        f,
        jf: (j + f) / 2.0,
        sequences: seqs.len(),
        rows: rows.len(),
    })
}

/// CSV with header `sequence,frame,object,J,F`.
pub fn write_csv<W: Write>(out: &mut W, rows: &[FrameScore]) -> Result<()> {
    writeln!(out, "sequence,frame,object,J,F")?;
    for r in rows {
        writeln!(out, "{},{},{},{:.6},{:.6}", r.sequence, r.frame, r.object, r.j, r.f)?;
    }
    Ok(())
}

pub fn summary_line(s: &JfSummary) -> String {
    format!(
        "J&F {:.4}  J {:.4}  F {:.4}  ({} sequences, {} rows)",
        s.jf, s.j, s.f, s.sequences, s.rows
    )
}
