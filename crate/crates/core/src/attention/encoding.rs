use bvos_tensor::{kernels, Tensor};

use crate::error::{extent, Result};
use crate::grid::TokenGrid;

/// One scalar bilateral coordinate per query token, `[HW×1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct BilateralEncoding {
    pub height: usize,
    pub width: usize,
    pub values: Tensor,
}

impl BilateralEncoding {
    pub fn new(height: usize, width: usize, values: Tensor) -> Result<Self> {
        if values.shape() != [height * width, 1] {
            return Err(extent(
                "BilateralEncoding",
                format!("{:?} is not one value per token of a {height}×{width} grid", values.shape()),
            ));
        }
        Ok(Self { height, width, values })
    }

    pub fn from_values(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        let n = values.len();
        Self::new(height, width, Tensor::new(&[n, 1], values)?)
    }

    pub fn len(&self) -> usize {
        self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values.data()[row * self.width + col]
    }

    pub fn as_slice(&self) -> &[f64] {
        self.values.data()
    }
}

/// Concatenates query features and flow encoding along channels and projects
/// to one channel with a 1×1 convolution (`proj: 1×(C+C_f)×1×1`, optional
/// scalar `bias`).
pub fn encode_bilateral_space(
    query_feat: &TokenGrid,
    flow_encoding: &TokenGrid,
    proj: &Tensor,
    bias: Option<&Tensor>,
) -> Result<BilateralEncoding> {
    if (query_feat.height, query_feat.width) != (flow_encoding.height, flow_encoding.width) {
        return Err(extent(
            "encode_bilateral_space",
            format!(
                "query grid {}×{} vs flow grid {}×{}",
                query_feat.height, query_feat.width, flow_encoding.height, flow_encoding.width
            ),
        ));
    }
    let q = query_feat.to_feature_map();
    let f = flow_encoding.to_feature_map();
    let mut stacked = q.data().to_vec();
    stacked.extend_from_slice(f.data());
    let channels = query_feat.channels() + flow_encoding.channels();
    let x = Tensor::new(&[channels, query_feat.height, query_feat.width], stacked)?;
    let e = kernels::conv2d(&x, proj, bias, 1, 0)?;
    if e.shape()[0] != 1 {
        return Err(extent(
            "encode_bilateral_space",
            format!("projection must have one output channel, has {}", e.shape()[0]),
        ));
    }
    let n = query_feat.len();
    BilateralEncoding::new(query_feat.height, query_feat.width, e.reshape(&[n, 1])?)
}
