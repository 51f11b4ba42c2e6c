use std::cmp::Ordering;
use std::fmt::Write as _;
use std::io::Write;

use rayon::prelude::*;

use super::{AttentionConfig, BilateralEncoding};
use crate::error::{CoreError, Result};

/// Per-query admitted key positions (row-major flat indices, ascending),
/// stored in compressed-row form over a single `H×W` grid.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BilateralMask {
    height: usize,
    width: usize,
    spatial_window: usize,
    offsets: Vec<usize>,
    keys: Vec<u32>,
}

/// Clipped window bounds `[lo, hi]` along one axis.
fn window_span(center: usize, half: usize, extent: usize) -> (usize, usize) {
    (center.saturating_sub(half), (center + half).min(extent - 1))
}

/// Builds the bilateral mask from `E`.
///
/// For query `(h, w)` the spatial window is clipped to the grid and its
/// positions are sorted by `E` ascending (ties broken by row-major position).
/// A key `(i, j)` in the window is admitted iff its rank differs from the
/// query's rank by at most `W_b`. The query itself always passes.
pub fn build_bilateral_mask(e: &BilateralEncoding, cfg: &AttentionConfig) -> Result<BilateralMask> {
    if let Some(i) = e.as_slice().iter().position(|v| !v.is_finite()) {
        return Err(CoreError::Invalid(format!("bilateral encoding is not finite at token {i}")));
    }
    let (h, w) = (e.height, e.width);
    let half = cfg.spatial_window;
    let wb = cfg.bilateral_window;
    let values = e.as_slice();
    let rows: Vec<Vec<u32>> = (0..h * w)
        .into_par_iter()
        .map_init(Vec::new, |window, q| {
            let (qh, qw) = (q / w, q % w);
            let (r0, r1) = window_span(qh, half, h);
            let (c0, c1) = window_span(qw, half, w);
            window.clear();
            for i in r0..=r1 {
                for j in c0..=c1 {
                    window.push((i * w + j) as u32);
                }
            }
            // stable sort keeps row-major order among equal values
            window.sort_by(|&a, &b| {
                values[a as usize]
                    .partial_cmp(&values[b as usize])
                    .unwrap_or(Ordering::Equal)
            });
            let q_rank = window.iter().position(|&p| p as usize == q).expect("query in own window");
            let lo = q_rank.saturating_sub(wb);
            let hi = (q_rank + wb).min(window.len() - 1);
            let mut admitted = window[lo..=hi].to_vec();
            admitted.sort_unstable();
            admitted
        })
        .collect();
    Ok(BilateralMask::from_rows(h, w, half, rows))
}

/// The fixed geometric window mask (every in-window key admitted).
pub fn spatial_window_mask(height: usize, width: usize, spatial_window: usize) -> BilateralMask {
    let rows = (0..height * width)
        .map(|q| {
            let (r0, r1) = window_span(q / width, spatial_window, height);
            let (c0, c1) = window_span(q % width, spatial_window, width);
            (r0..=r1)
                .flat_map(|i| (c0..=c1).map(move |j| (i * width + j) as u32))
                .collect()
        })
        .collect();
    BilateralMask::from_rows(height, width, spatial_window, rows)
}

impl BilateralMask {
    fn from_rows(height: usize, width: usize, spatial_window: usize, rows: Vec<Vec<u32>>) -> Self {
        let mut offsets = Vec::with_capacity(rows.len() + 1);
        offsets.push(0);
        let mut keys = Vec::new();
        for r in rows {
            keys.extend_from_slice(&r);
            offsets.push(keys.len());
        }
        Self {
            height,
            width,
            spatial_window,
            offsets,
            keys,
        }
    }

    /// Admits every key for every query (plain global attention).
    pub fn full(height: usize, width: usize) -> Self {
        let n = height * width;
        let rows = (0..n).map(|_| (0..n as u32).collect()).collect();
        Self::from_rows(height, width, height.max(width), rows)
    }

    /// Admits only the query's own position.
    pub fn identity(height: usize, width: usize) -> Self {
        let rows = (0..height * width).map(|q| vec![q as u32]).collect();
        Self::from_rows(height, width, 0, rows)
    }

    /// From explicit per-query rows; positions are sorted and deduplicated.
    pub fn from_admitted(height: usize, width: usize, rows: Vec<Vec<u32>>) -> Result<Self> {
        let n = height * width;
        if rows.len() != n {
            return Err(CoreError::Invalid(format!("{} rows for {n} queries", rows.len())));
        }
        let mut clean = Vec::with_capacity(n);
        for (q, mut r) in rows.into_iter().enumerate() {
            r.sort_unstable();
            r.dedup();
            if r.is_empty() {
                return Err(CoreError::Invalid(format!("query {q} admits no keys")));
            }
            if r.iter().any(|&k| k as usize >= n) {
                return Err(CoreError::Invalid(format!("query {q} admits an out-of-grid key")));
            }
            clean.push(r);
        }
        Ok(Self::from_rows(height, width, height.max(width), clean))
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn spatial_window(&self) -> usize {
        self.spatial_window
    }

    /// Number of query tokens.
    pub fn len(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Admitted key positions of query `q`, ascending.
    pub fn admitted(&self, q: usize) -> &[u32] {
        &self.keys[self.offsets[q]..self.offsets[q + 1]]
    }

    pub fn admits(&self, q: usize, k: usize) -> bool {
        self.admitted(q).binary_search(&(k as u32)).is_ok()
    }

    /// Dense `HW×HW` form, row-major.
    pub fn to_dense(&self) -> Vec<bool> {
        self.to_dense_frames(1)
    }

    /// Dense `HW×(T·HW)` form: a key in any frame is admitted iff its spatial
    /// position is.
    pub fn to_dense_frames(&self, frames: usize) -> Vec<bool> {
        let n = self.len();
        let mut dense = vec![false; n * n * frames];
        for q in 0..n {
            for &k in self.admitted(q) {
                for f in 0..frames {
                    dense[q * n * frames + f * n + k as usize] = true;
                }
            }
        }
        dense
    }

    pub fn max_candidates(&self) -> usize {
        (0..self.len()).map(|q| self.admitted(q).len()).max().unwrap_or(0)
    }

    pub fn mean_candidates(&self) -> f64 {
        self.keys.len() as f64 / self.len().max(1) as f64
    }

    pub fn total_admitted(&self) -> usize {
        self.keys.len()
    }

    /// Text dump: one line per query, `h w : i1,j1 i2,j2 …`.
    pub fn dump_text(&self) -> String {
        let mut out = String::new();
        for q in 0..self.len() {
            let _ = write!(out, "{} {} :", q / self.width, q % self.width);
            for &k in self.admitted(q) {
                let _ = write!(out, " {},{}", k as usize / self.width, k as usize % self.width);
            }
            out.push('\n');
        }
        out
    }

    /// Binary PGM overlay for one query: 255 at the query, 192 on admitted
    /// keys, 96 on in-window keys that were rejected, 0 elsewhere. Each token
    /// is drawn as a `scale×scale` block.
    pub fn write_query_pgm<W: Write>(&self, out: &mut W, query: usize, scale: usize) -> Result<()> {
        if query >= self.len() {
            return Err(CoreError::Invalid(format!("query {query} outside {} tokens", self.len())));
        }
        let scale = scale.max(1);
        let (qh, qw) = (query / self.width, query % self.width);
        let (r0, r1) = window_span(qh, self.spatial_window, self.height);
        let (c0, c1) = window_span(qw, self.spatial_window, self.width);
        let (ph, pw) = (self.height * scale, self.width * scale);
        let mut pixels = vec![0u8; ph * pw];
        for y in 0..ph {
            for x in 0..pw {
                let (i, j) = (y / scale, x / scale);
                let k = i * self.width + j;
                pixels[y * pw + x] = if k == query {
                    255
                } else if self.admits(query, k) {
                    192
                } else if (r0..=r1).contains(&i) && (c0..=c1).contains(&j) {
                    96
                } else {
                    0
                };
            }
        }
        crate::image_io::write_pgm(out, pw, ph, &pixels)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(wd: usize, wb: usize) -> AttentionConfig {
        AttentionConfig {
            spatial_window: wd,
            bilateral_window: wb,
            ..AttentionConfig::toy(4, 1)
        }
    }

    #[test]
    fn constant_encoding_gives_contiguous_row_major_band() {
        let e = BilateralEncoding::from_values(5, 5, vec![0.3; 25]).unwrap();
        let m = build_bilateral_mask(&e, &cfg(1, 2)).unwrap();
        // query (2,2): window rows 1..=3, cols 1..=3; its row-major rank is 4
        let q = 2 * 5 + 2;
        let window: Vec<u32> = [6, 7, 8, 11, 12, 13, 16, 17, 18].to_vec();
        assert_eq!(m.admitted(q), &window[2..=6]);
        // full window with maximal W_b
        let m = build_bilateral_mask(&e, &cfg(1, 8)).unwrap();
        assert_eq!(m.admitted(q), &window[..]);
    }

    #[test]
    fn query_always_admitted_even_with_zero_window() {
        let e = BilateralEncoding::from_values(3, 3, (0..9).map(|i| (i * 7 % 5) as f64).collect()).unwrap();
        let m = build_bilateral_mask(&e, &cfg(1, 0)).unwrap();
        for q in 0..9 {
            assert_eq!(m.admitted(q), &[q as u32]);
        }
    }

    #[test]
    fn non_finite_encoding_rejected() {
        let e = BilateralEncoding::from_values(1, 2, vec![0.0, f64::NAN]).unwrap();
        assert!(build_bilateral_mask(&e, &cfg(1, 1)).is_err());
    }

    #[test]
    fn dense_frames_replicate_spatial_admission() {
        let m = spatial_window_mask(2, 2, 0);
        let d = m.to_dense_frames(2);
        assert_eq!(d.len(), 4 * 8);
        assert!(d[8 + 1] && d[8 + 5]);
        assert_eq!(d.iter().filter(|&&b| b).count(), 8);
    }

    #[test]
    fn text_dump_format() {
        let m = spatial_window_mask(1, 2, 1);
        assert_eq!(m.dump_text(), "0 0 : 0,0 0,1\n0 1 : 0,0 0,1\n");
    }

    #[test]
    fn pgm_overlay_marks_query_window_and_admitted() {
        let e = BilateralEncoding::from_values(1, 3, vec![0.0, 5.0, 1.0]).unwrap();
        let m = build_bilateral_mask(&e, &cfg(1, 0)).unwrap();
        let mut buf = Vec::new();
        m.write_query_pgm(&mut buf, 0, 1).unwrap();
        assert!(buf.starts_with(b"P5\n3 1\n255\n"));
        assert_eq!(&buf[buf.len() - 3..], &[255, 96, 0]);
    }
}
