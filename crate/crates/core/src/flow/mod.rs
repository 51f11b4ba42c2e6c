//! Per-pixel displacement fields, the mask-guided calibration network and
//! the flow metrics.

mod calib;
mod io;

use bvos_tensor::{Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{extent, CoreError, Result};

pub use calib::{calibrate_flow, CalibConfig, CalibNet};
pub use io::{flow_to_rgb, read_flo, write_flo, write_flow_ppm, FLOW_MAGIC};

/// Displacement in pixels per frame, stored as a `2×H×W` tensor (`u` then `v`).
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField {
    data: Tensor,
}

impl FlowField {
    pub fn new(data: Tensor) -> Result<Self> {
        if data.ndim() != 3 || data.shape()[0] != 2 {
            return Err(extent("FlowField", format!("expected 2×H×W, got {:?}", data.shape())));
        }
        if !data.all_finite() {
            return Err(CoreError::Invalid("flow contains non-finite values".into()));
        }
        Ok(Self { data })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            data: Tensor::zeros(&[2, height, width]),
        }
    }

    pub fn from_components(height: usize, width: usize, u: Vec<f64>, v: Vec<f64>) -> Result<Self> {
        let mut data = u;
        data.extend(v);
        Self::new(Tensor::new(&[2, height, width], data)?)
    }

    /// Constant displacement everywhere.
    pub fn uniform(height: usize, width: usize, u: f64, v: f64) -> Self {
        let n = height * width;
        Self {
            data: Tensor::from_fn(&[2, height, width], |i| if i < n { u } else { v }),
        }
    }

    pub fn height(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn u(&self) -> &[f64] {
        &self.data.data()[..self.height() * self.width()]
    }

    pub fn v(&self) -> &[f64] {
        &self.data.data()[self.height() * self.width()..]
    }

    pub fn at(&self, row: usize, col: usize) -> (f64, f64) {
        let p = row * self.width() + col;
        (self.u()[p], self.v()[p])
    }

    pub fn tensor(&self) -> &Tensor {
        &self.data
    }

    pub fn into_tensor(self) -> Tensor {
        self.data
    }

    /// Adds i.i.d. Gaussian noise of standard deviation `sigma` to both
    /// components.
    pub fn with_noise<R: Rng + ?Sized>(&self, sigma: f64, rng: &mut R) -> Self {
        if sigma <= 0.0 {
            return self.clone();
        }
        let normal = Normal::new(0.0, sigma).expect("positive sigma");
        let noisy = self.data.data().iter().map(|x| x + normal.sample(rng)).collect();
        Self {
            data: Tensor::new(self.data.shape(), noisy).expect("same shape"),
        }
    }

    fn check_same_grid(&self, other: &Self, op: &'static str) -> Result<()> {
        if self.data.shape() != other.data.shape() {
            return Err(extent(op, format!("{:?} vs {:?}", self.data.shape(), other.data.shape())));
        }
        Ok(())
    }
}

/// Mean over pixels and both components of the squared difference.
pub fn flow_mse(a: &FlowField, b: &FlowField) -> Result<f64> {
    a.check_same_grid(b, "flow_mse")?;
    let d = a.data.data().iter().zip(b.data.data());
    Ok(d.map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.data.len() as f64)
}

/// [`flow_mse`] recorded on a tape.
pub fn flow_mse_var<'t>(a: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
    Ok(a.sub(b)?.square().mean())
}

/// Total variation of a flow field restricted to pixel pairs that are both
/// inside, or both outside, a binary mask.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MaskedTv {
    pub inside: f64,
    pub outside: f64,
}

/// For each side of the mask: the mean of `|Δu| + |Δv|` over horizontal
/// neighbour pairs plus the same mean over vertical pairs. A direction with
/// no qualifying pair contributes zero. `mask` is `H×W`; nonzero is inside.
pub fn masked_total_variation(flow: &FlowField, mask: &[f64]) -> Result<MaskedTv> {
    let (h, w) = (flow.height(), flow.width());
    if mask.len() != h * w {
        return Err(extent("masked_total_variation", format!("{} mask pixels for {h}×{w} flow", mask.len())));
    }
    let (u, v) = (flow.u(), flow.v());
    // [side][direction] = (sum, count)
    let mut acc = [[(0.0, 0usize); 2]; 2];
    let mut visit = |a: usize, b: usize, dir: usize| {
        let (ia, ib) = (mask[a] != 0.0, mask[b] != 0.0);
        if ia == ib {
            let slot = &mut acc[usize::from(!ia)][dir];
            slot.0 += (u[a] - u[b]).abs() + (v[a] - v[b]).abs();
            slot.1 += 1;
        }
    };
    for r in 0..h {
        for c in 0..w {
            let p = r * w + c;
            if c + 1 < w {
                visit(p, p + 1, 0);
            }
            if r + 1 < h {
                visit(p, p + w, 1);
            }
        }
    }
    let side = |s: [(f64, usize); 2]| s.iter().map(|&(sum, n)| if n == 0 { 0.0 } else { sum / n as f64 }).sum();
    Ok(MaskedTv {
        inside: side(acc[0]),
        outside: side(acc[1]),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mse_of_identical_and_offset_flows() {
        let a = FlowField::uniform(3, 4, 1.5, -2.0);
        assert_eq!(flow_mse(&a, &a).unwrap(), 0.0);
        let b = FlowField::new(a.tensor().map(|x| x + 1.0)).unwrap();
        assert_eq!(flow_mse(&a, &b).unwrap(), 1.0);
        assert!(flow_mse(&a, &FlowField::zeros(4, 3)).is_err());
    }

    #[test]
    fn tv_of_constant_flow_and_unit_ramp() {
        let c = FlowField::uniform(4, 5, 3.0, 1.0);
        let full = vec![1.0; 20];
        assert_eq!(masked_total_variation(&c, &full).unwrap(), MaskedTv { inside: 0.0, outside: 0.0 });
        let ramp = FlowField::from_components(4, 5, (0..20).map(|i| (i % 5) as f64).collect(), vec![0.0; 20]).unwrap();
        let tv = masked_total_variation(&ramp, &full).unwrap();
        assert_eq!(tv.inside, 1.0);
        assert_eq!(tv.outside, 0.0);
    }

    #[test]
    fn noise_has_requested_spread() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let f = FlowField::zeros(100, 100).with_noise(1.5, &mut rng);
        let var = f.tensor().data().iter().map(|x| x * x).sum::<f64>() / 20000.0;
        assert!((var.sqrt() - 1.5).abs() < 0.05);
        assert!(FlowField::new(Tensor::full(&[2, 1, 1], f64::NAN)).is_err());
    }
}
