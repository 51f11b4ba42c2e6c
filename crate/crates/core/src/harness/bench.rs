use std::io::Write;
use std::time::Instant;

use bvos_tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{bi_attn_exact, bi_attn_windowed, build_bilateral_mask, AttentionConfig, BilateralEncoding};
use crate::error::{CoreError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub variant: String,
    pub side: usize,
    pub tokens: usize,
    pub median_seconds: f64,
    pub max_candidates: usize,
    pub mean_candidates: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    pub dense_slope: f64,
    pub windowed_slope: f64,
}

impl BenchReport {
    pub fn slope_gap(&self) -> f64 {
        self.dense_slope - self.windowed_slope
    }

    pub fn write_csv<W: Write>(&self, out: &mut W) -> Result<()> {
        writeln!(out, "variant,side,tokens,median_seconds,max_candidates,mean_candidates")?;
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{},{:.9},{},{:.3}",
                r.variant, r.side, r.tokens, r.median_seconds, r.max_candidates, r.mean_candidates
            )?;
        }
        Ok(())
    }
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let xs: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
    let cov: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let var: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    cov / var
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn time<F: FnMut() -> Result<()>>(reps: usize, mut f: F) -> Result<f64> {
    let mut samples = Vec::with_capacity(reps);
    for _ in 0..reps {
        let t0 = Instant::now();
        f()?;
        samples.push(t0.elapsed().as_secs_f64());
    }
    Ok(median(samples))
}

/// Times dense-row and windowed bilateral attention on `side × side` token
/// grids, single-headed with `cfg.channels` channels, on one worker thread.
pub fn bench_attention(sides: &[usize], cfg: &AttentionConfig, reps: usize, seed: u64) -> Result<BenchReport> {
    cfg.validate()?;
    if sides.len() < 2 || sides.windows(2).any(|w| w[0] >= w[1]) || sides[0] == 0 {
        return Err(CoreError::Invalid("benchmark sizes must be at least two, ascending and positive".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .map_err(|e| CoreError::Invalid(e.to_string()))?;
    pool.install(|| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rows = Vec::new();
        for &side in sides {
            let n = side * side;
            let c = cfg.channels;
            let q = Tensor::randn(&[n, c], 1.0, &mut rng);
            let k = Tensor::randn(&[n, c], 1.0, &mut rng);
            let v = Tensor::randn(&[n, c], 1.0, &mut rng);
            let e = BilateralEncoding::new(side, side, Tensor::randn(&[n, 1], 1.0, &mut rng))?;
            let mask = build_bilateral_mask(&e, cfg)?;
            let max_candidates = mask.max_candidates();
            if max_candidates > cfg.window_area() {
                return Err(CoreError::Invalid(format!(
                    "{max_candidates} candidates exceed the {} window",
                    cfg.window_area()
                )));
            }
            for variant in ["dense", "windowed"] {
                let median_seconds = time(reps, || {
                    let out = match variant {
                        "dense" => bi_attn_exact(&q, &k, &v, &mask)?,
                        _ => bi_attn_windowed(&q, &k, &v, &mask)?,
                    };
                    std::hint::black_box(out);
                    Ok(())
                })?;
                rows.push(BenchRow {
                    variant: variant.to_string(),
                    side,
                    tokens: n,
                    median_seconds,
                    max_candidates: if variant == "dense" { n } else { max_candidates },
                    mean_candidates: if variant == "dense" { n as f64 } else { mask.mean_candidates() },
                });
            }
        }
        let slope = |variant: &str| {
            let pts: Vec<(f64, f64)> = rows
                .iter()
                .filter(|r| r.variant == variant)
                .map(|r| (r.tokens as f64, r.median_seconds))
                .collect();
            loglog_slope(&pts)
        };
        Ok(BenchReport {
            dense_slope: slope("dense"),
            windowed_slope: slope("windowed"),
            rows,
        })
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slope_of_power_law() {
        let pts: Vec<(f64, f64)> = [1.0, 2.0, 4.0, 8.0].iter().map(|&x: &f64| (x, 3.0 * x.powf(1.5))).collect();
        assert!((loglog_slope(&pts) - 1.5).abs() < 1e-12);
    }

    #[test]
    fn small_report_has_one_row_per_variant_and_size() {
        let r = bench_attention(&[4, 8], &AttentionConfig::toy(8, 1), 3, 1).unwrap();
        assert_eq!(r.rows.len(), 4);
        assert!(bench_attention(&[8, 4], &AttentionConfig::toy(8, 1), 3, 1).is_err());
    }
}
