use bvos_tensor::Tensor;

use crate::error::{extent, Result};

/// An `H×W×C` feature map viewed as `HW` tokens of dimension `C`, stored as
/// a row-major `[HW×C]` tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenGrid {
    pub height: usize,
    pub width: usize,
    pub tokens: Tensor,
}

impl TokenGrid {
    pub fn new(height: usize, width: usize, tokens: Tensor) -> Result<Self> {
        if tokens.ndim() != 2 || tokens.shape()[0] != height * width {
            return Err(extent(
                "TokenGrid",
                format!("{:?} is not {height}×{width} tokens", tokens.shape()),
            ));
        }
        Ok(Self { height, width, tokens })
    }

    /// From a `C×H×W` feature map.
    pub fn from_feature_map(map: &Tensor) -> Result<Self> {
        if map.ndim() != 3 {
            return Err(extent("TokenGrid", format!("expected C×H×W, got {:?}", map.shape())));
        }
        let (c, h, w) = (map.shape()[0], map.shape()[1], map.shape()[2]);
        let src = map.data();
        let mut data = vec![0.0; c * h * w];
        for ch in 0..c {
            for p in 0..h * w {
                data[p * c + ch] = src[ch * h * w + p];
            }
        }
        Self::new(h, w, Tensor::new(&[h * w, c], data)?)
    }

    /// Back to a `C×H×W` feature map.
    pub fn to_feature_map(&self) -> Tensor {
        let c = self.channels();
        let n = self.len();
        let mut data = vec![0.0; c * n];
        for p in 0..n {
            for ch in 0..c {
                data[ch * n + p] = self.tokens.data()[p * c + ch];
            }
        }
        Tensor::new(&[c, self.height, self.width], data).expect("consistent extents")
    }

    pub fn channels(&self) -> usize {
        self.tokens.shape()[1]
    }

    pub fn len(&self) -> usize {
        self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn token(&self, row: usize, col: usize) -> &[f64] {
        let c = self.channels();
        let p = row * self.width + col;
        &self.tokens.data()[p * c..(p + 1) * c]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn feature_map_round_trip() {
        let map = Tensor::from_fn(&[3, 2, 4], |i| i as f64);
        let g = TokenGrid::from_feature_map(&map).unwrap();
        assert_eq!(g.token(1, 2), &[6.0, 14.0, 22.0]);
        assert_eq!(g.to_feature_map(), map);
    }
}
