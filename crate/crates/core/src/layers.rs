//! Parameterised layers addressed by [`ParamId`]s in a shared [`Params`].

use bvos_tensor::kernels::LAYER_NORM_EPS;
use bvos_tensor::{Tensor, Var};
use rand::Rng;

use crate::error::{extent, Result};
use crate::params::{conv_init, linear_init, Bound, ParamId, Params};

#[derive(Clone, Copy, Debug)]
pub(crate) struct Conv {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub padding: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        p: &mut Params,
        name: &str,
        c_out: usize,
        c_in: usize,
        kernel: usize,
        stride: usize,
        zero: bool,
        rng: &mut R,
    ) -> Self {
        let w = if zero {
            Tensor::zeros(&[c_out, c_in, kernel, kernel])
        } else {
            conv_init(c_out, c_in, kernel, rng)
        };
        Self {
            w: p.add(format!("{name}.w"), w),
            b: p.add(format!("{name}.b"), Tensor::zeros(&[c_out])),
            stride,
            padding: kernel / 2,
        }
    }

    pub fn apply<'t>(&self, b: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        Ok(x.conv2d(b.get(self.w), Some(b.get(self.b)), self.stride, self.padding)?)
    }
}

/// `x·W + b` on token rows, `W: in×out`.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(p: &mut Params, name: &str, fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        Self {
            w: p.add(format!("{name}.w"), linear_init(fan_in, fan_out, rng)),
            b: p.add(format!("{name}.b"), Tensor::zeros(&[fan_out])),
        }
    }

    pub fn apply<'t>(&self, b: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        Ok(x.linear(b.get(self.w), Some(b.get(self.b)))?)
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Norm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl Norm {
    pub fn new(p: &mut Params, name: &str, c: usize) -> Self {
        Self {
            gain: p.add(format!("{name}.gain"), Tensor::ones(&[c])),
            bias: p.add(format!("{name}.bias"), Tensor::zeros(&[c])),
        }
    }

    pub fn apply<'t>(&self, b: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        Ok(x.layer_norm(b.get(self.gain), b.get(self.bias), LAYER_NORM_EPS)?)
    }
}

/// Rows `table[index[i]]`, `table: S×C` → `N×C`; the backward pass
/// scatter-adds into the table.
pub(crate) fn gather_rows<'t>(table: Var<'t>, index: &[usize]) -> Result<Var<'t>> {
    let t = table.value();
    let (s, c) = (t.shape()[0], t.shape()[1]);
    if let Some(&bad) = index.iter().find(|&&i| i >= s) {
        return Err(extent("gather_rows", format!("row {bad} of a {s}-row table")));
    }
    let mut out = Vec::with_capacity(index.len() * c);
    for &i in index {
        out.extend_from_slice(&t.data()[i * c..(i + 1) * c]);
    }
    let out = Tensor::new(&[index.len(), c], out)?;
    let index = index.to_vec();
    Ok(table.tape().custom("gather_rows", &[table], out, move |g, _| {
        let mut dt = vec![0.0; s * c];
        for (r, &i) in index.iter().enumerate() {
            for (d, &x) in dt[i * c..(i + 1) * c].iter_mut().zip(&g.data()[r * c..(r + 1) * c]) {
                *d += x;
            }
        }
        vec![Some(Tensor::new(&[s, c], dt).expect("table shape"))]
    }))
}
