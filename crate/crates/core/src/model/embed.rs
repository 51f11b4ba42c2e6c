use bvos_tensor::Tensor;

use crate::error::{extent, CoreError, Result};
use crate::grid::TokenGrid;

/// Largest wavelength parameter of the sinusoidal scheme.
const MAX_PERIOD: f64 = 10000.0;

/// Two-dimensional sinusoidal position embedding, `[HW×C]`.
///
/// The first `C/2` channels encode the row and the last `C/2` the column.
/// Within each half, channel `2i` is `sin(pos·ω_i)` and `2i+1` is
/// `cos(pos·ω_i)` with `ω_i = 10000^(−2i/(C/2))`.
pub fn sinusoidal_pos_embed(height: usize, width: usize, channels: usize) -> Result<TokenGrid> {
    if channels == 0 || !channels.is_multiple_of(4) {
        return Err(CoreError::Config(format!("position embedding needs C divisible by 4, got {channels}")));
    }
    let half = channels / 2;
    let mut data = vec![0.0; height * width * channels];
    for r in 0..height {
        for c in 0..width {
            let row = &mut data[(r * width + c) * channels..(r * width + c + 1) * channels];
            for (axis, pos) in [(0, r as f64), (1, c as f64)] {
                for i in 0..half / 2 {
                    let omega = MAX_PERIOD.powf(-((2 * i) as f64) / half as f64);
                    row[axis * half + 2 * i] = (pos * omega).sin();
                    row[axis * half + 2 * i + 1] = (pos * omega).cos();
                }
            }
        }
    }
    TokenGrid::new(height, width, Tensor::new(&[height * width, channels], data)?)
}

/// Nearest down-sampling of a label mask by `stride`, sampling the pixel at
/// `stride·r + stride/2` (the centre of each cell).
pub fn downscale_labels(mask: &[u8], width: usize, height: usize, stride: usize) -> Result<Vec<u8>> {
    if mask.len() != width * height || stride == 0 || !width.is_multiple_of(stride) || !height.is_multiple_of(stride) {
        return Err(extent(
            "downscale_labels",
            format!("{} labels for {width}×{height} at stride {stride}", mask.len()),
        ));
    }
    let (h, w) = (height / stride, width / stride);
    let mut out = Vec::with_capacity(h * w);
    for r in 0..h {
        for c in 0..w {
            out.push(mask[(stride * r + stride / 2) * width + stride * c + stride / 2]);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn embedding_is_bounded_and_starts_at_zero() {
        let pe = sinusoidal_pos_embed(5, 7, 16).unwrap();
        assert!(pe.tokens.data().iter().all(|v| v.abs() <= 1.0));
        assert_eq!(pe.token(0, 0)[0], 0.0);
        assert_eq!(pe.token(0, 0)[1], 1.0);
        assert!(sinusoidal_pos_embed(2, 2, 6).is_err());
    }

    #[test]
    fn labels_sampled_at_cell_centres() {
        let mask: Vec<u8> = (0..64).map(|p| (p % 8 + p / 8) as u8).collect();
        // cell (0,0) samples pixel (2,2), cell (1,1) samples (6,6)
        assert_eq!(downscale_labels(&mask, 8, 8, 4).unwrap(), vec![4, 8, 8, 12]);
    }
}
