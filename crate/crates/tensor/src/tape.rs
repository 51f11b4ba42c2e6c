//! Reverse-mode gradients over a linear record of executed kernels.
//!
//! A [`Tape`] lives for one forward/backward pass. Every kernel applied to a
//! [`Var`] appends a node holding its output and, when any input needs a
//! gradient, a closure that maps the output gradient to input gradients.
//! [`Tape::backward`] replays those closures in reverse order.

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{invalid, Result, TensorError};
use crate::kernels;
use crate::tensor::Tensor;

/// Maps the gradient of a node's output to gradients of its parents.
/// `needs[i]` is false for parents that do not require a gradient; those
/// entries may be returned as `None`.
pub type BackwardFn = Box<dyn Fn(&Tensor, &[bool]) -> Vec<Option<Tensor>>>;

struct Node {
    kernel: &'static str,
    value: Rc<Tensor>,
    parents: Vec<usize>,
    requires_grad: bool,
    backward: Option<BackwardFn>,
}

pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    recording: bool,
}

/// Handle to a value recorded on a tape.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    /// A tape that records backward rules.
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            recording: true,
        }
    }

    /// A tape that only evaluates; no backward rules are kept.
    pub fn inference() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            recording: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Kernel names in execution order.
    pub fn kernels(&self) -> Vec<&'static str> {
        self.nodes.borrow().iter().map(|n| n.kernel).collect()
    }

    fn push(&self, node: Node) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Records a leaf; it receives a gradient iff `t.requires_grad()`.
    pub fn leaf(&self, t: Tensor) -> Var<'_> {
        let requires_grad = t.requires_grad();
        self.push(Node {
            kernel: "leaf",
            value: Rc::new(t),
            parents: Vec::new(),
            requires_grad,
            backward: None,
        })
    }

    pub fn param(&self, t: Tensor) -> Var<'_> {
        self.leaf(t.with_requires_grad(true))
    }

    pub fn constant(&self, t: Tensor) -> Var<'_> {
        self.leaf(t.with_requires_grad(false))
    }

    /// Records the output of a custom kernel. `backward` is dropped when no
    /// parent needs a gradient or the tape is not recording.
    pub fn custom<'t>(
        &'t self,
        kernel: &'static str,
        parents: &[Var<'t>],
        value: Tensor,
        backward: impl Fn(&Tensor, &[bool]) -> Vec<Option<Tensor>> + 'static,
    ) -> Var<'t> {
        let ids: Vec<usize> = parents
            .iter()
            .map(|p| {
                debug_assert!(std::ptr::eq(p.tape, self), "var from another tape");
                p.id
            })
            .collect();
        let requires_grad = self.recording && {
            let nodes = self.nodes.borrow();
            ids.iter().any(|&i| nodes[i].requires_grad)
        };
        self.push(Node {
            kernel,
            value: Rc::new(value),
            parents: ids,
            requires_grad,
            backward: if requires_grad {
                Some(Box::new(backward))
            } else {
                None
            },
        })
    }

    /// Runs the backward pass from a scalar output.
    pub fn backward(&self, output: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let out = &nodes[output.id];
        if out.value.len() != 1 {
            return Err(invalid(
                "backward",
                format!("output must be a scalar, got shape {:?}", out.value.shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; output.id + 1];
        grads[output.id] = Some(Tensor::ones(out.value.shape()));
        for id in (0..=output.id).rev() {
            let node = &nodes[id];
            let Some(backward) = &node.backward else {
                continue;
            };
            let Some(g) = grads[id].take() else {
                continue;
            };
            let needs: Vec<bool> = node.parents.iter().map(|&p| nodes[p].requires_grad).collect();
            let parent_grads = backward(&g, &needs);
            for ((&p, pg), &need) in node.parents.iter().zip(parent_grads).zip(&needs) {
                let (Some(pg), true) = (pg, need) else {
                    continue;
                };
                if pg.shape() != nodes[p].value.shape() {
                    return Err(TensorError::ShapeMismatch {
                        op: node.kernel,
                        left: pg.shape().to_vec(),
                        right: nodes[p].value.shape().to_vec(),
                    });
                }
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&pg)?,
                    slot => *slot = Some(pg),
                }
            }
        }
        Ok(Gradients { grads })
    }
}

/// Gradients produced by [`Tape::backward`], indexed by variable. Only
/// leaves (parameters and inputs) keep theirs.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var<'_>) -> Option<&Tensor> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros of its shape when it does not affect the output.
    pub fn take_or_zeros(&mut self, v: Var<'_>) -> Tensor {
        self.grads
            .get_mut(v.id)
            .and_then(|g| g.take())
            .unwrap_or_else(|| Tensor::zeros(v.value().shape()))
    }
}

fn some(t: Tensor) -> Option<Tensor> {
    Some(t)
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        let out = kernels::matmul(&a, &b)?;
        Ok(self.tape.custom("matmul", &[self, other], out, move |g, needs| {
            vec![
                needs[0].then(|| kernels::matmul_bt(g, &b).expect("matmul backward")),
                needs[1].then(|| kernels::matmul_at(&a, g).expect("matmul backward")),
            ]
        }))
    }

    /// `self · otherᵀ`.
    pub fn matmul_bt(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        let out = kernels::matmul_bt(&a, &b)?;
        Ok(self.tape.custom("matmul_bt", &[self, other], out, move |g, needs| {
            vec![
                needs[0].then(|| kernels::matmul(g, &b).expect("matmul_bt backward")),
                needs[1].then(|| kernels::matmul_at(g, &a).expect("matmul_bt backward")),
            ]
        }))
    }

    pub fn transpose(self) -> Result<Var<'t>> {
        let out = kernels::transpose(&self.value())?;
        Ok(self.tape.custom("transpose", &[self], out, |g, _| {
            vec![some(kernels::transpose(g).expect("transpose backward"))]
        }))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let from = self.shape();
        let out = self.value().reshape(shape)?;
        Ok(self.tape.custom("reshape", &[self], out, move |g, _| {
            vec![some(g.reshape(&from).expect("reshape backward"))]
        }))
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        let out = self.value().add(&other.value())?;
        Ok(self
            .tape
            .custom("add", &[self, other], out, |g, _| vec![some(g.clone()), some(g.clone())]))
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        let out = self.value().sub(&other.value())?;
        Ok(self
            .tape
            .custom("sub", &[self, other], out, |g, _| vec![some(g.clone()), some(g.scale(-1.0))]))
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        let out = a.mul(&b)?;
        Ok(self.tape.custom("mul", &[self, other], out, move |g, needs| {
            vec![
                needs[0].then(|| g.mul(&b).expect("mul backward")),
                needs[1].then(|| g.mul(&a).expect("mul backward")),
            ]
        }))
    }

    pub fn scale(self, s: f64) -> Var<'t> {
        let out = self.value().scale(s);
        self.tape.custom("scale", &[self], out, move |g, _| vec![some(g.scale(s))])
    }

    pub fn add_row_bias(self, bias: Var<'t>) -> Result<Var<'t>> {
        let out = kernels::add_row_bias(&self.value(), &bias.value())?;
        Ok(self.tape.custom("add_row_bias", &[self, bias], out, |g, needs| {
            vec![
                some(g.clone()),
                needs[1].then(|| kernels::sum_rows(g).expect("add_row_bias backward")),
            ]
        }))
    }

    /// `x·W + b` for token rows.
    pub fn linear(self, weight: Var<'t>, bias: Option<Var<'t>>) -> Result<Var<'t>> {
        let y = self.matmul(weight)?;
        match bias {
            Some(b) => y.add_row_bias(b),
            None => Ok(y),
        }
    }

    pub fn sum(self) -> Var<'t> {
        let v = self.value();
        let shape = v.shape().to_vec();
        self.tape.custom("sum", &[self], Tensor::scalar(v.sum()), move |g, _| {
            vec![some(Tensor::full(&shape, g.item()))]
        })
    }

    pub fn mean(self) -> Var<'t> {
        let n = self.value().len().max(1) as f64;
        self.sum().scale(1.0 / n)
    }

    pub fn square(self) -> Var<'t> {
        let x = self.value();
        let out = x.map(|v| v * v);
        self.tape.custom("square", &[self], out, move |g, _| {
            vec![some(g.mul(&x.scale(2.0)).expect("square backward"))]
        })
    }

    pub fn softmax_rows(self) -> Result<Var<'t>> {
        let y = Rc::new(kernels::softmax_rows(&self.value())?);
        let saved = y.clone();
        Ok(self.tape.custom("softmax_rows", &[self], (*y).clone(), move |g, _| {
            vec![some(kernels::softmax_rows_backward(&saved, g).expect("softmax backward"))]
        }))
    }

    pub fn masked_softmax_rows(self, admit: Rc<Vec<bool>>) -> Result<Var<'t>> {
        let y = Rc::new(kernels::masked_softmax_rows(&self.value(), &admit)?);
        let saved = y.clone();
        Ok(self
            .tape
            .custom("masked_softmax_rows", &[self], (*y).clone(), move |g, _| {
                // excluded entries have y = 0, so the shared rule zeroes them
                vec![some(kernels::softmax_rows_backward(&saved, g).expect("softmax backward"))]
            }))
    }

    pub fn layer_norm(self, gain: Var<'t>, bias: Var<'t>, eps: f64) -> Result<Var<'t>> {
        let g = gain.value();
        let (out, cache) = kernels::layer_norm(&self.value(), &g, &bias.value(), eps)?;
        Ok(self
            .tape
            .custom("layer_norm", &[self, gain, bias], out, move |dy, _| {
                let (dx, dg, db) = kernels::layer_norm_backward(&cache, &g, dy);
                vec![some(dx), some(dg), some(db)]
            }))
    }

    pub fn conv2d(self, weight: Var<'t>, bias: Option<Var<'t>>, stride: usize, padding: usize) -> Result<Var<'t>> {
        let (x, w) = (self.value(), weight.value());
        let b = bias.map(|b| b.value());
        let (out, cols) = kernels::conv2d_unfolded(&x, &w, b.as_deref(), stride, padding)?;
        let mut parents = vec![self, weight];
        parents.extend(bias);
        Ok(self.tape.custom("conv2d", &parents, out, move |g, needs| {
            let (dx, dw, db) = kernels::conv2d_backward_unfolded(&x, cols.as_deref(), &w, g, stride, padding, needs[0])
                .expect("conv2d backward");
            let mut grads = vec![dx, needs[1].then_some(dw)];
            if needs.len() > 2 {
                grads.push(Some(db));
            }
            grads
        }))
    }

    pub fn bilinear_resize(self, out_h: usize, out_w: usize) -> Result<Var<'t>> {
        let shape = self.shape();
        let out = kernels::bilinear_resize(&self.value(), out_h, out_w)?;
        Ok(self.tape.custom("bilinear_resize", &[self], out, move |g, _| {
            vec![some(kernels::bilinear_resize_backward(&shape, g).expect("resize backward"))]
        }))
    }

    pub fn upsample_nearest(self, factor: usize) -> Result<Var<'t>> {
        let shape = self.shape();
        let out = kernels::upsample_nearest(&self.value(), factor)?;
        Ok(self.tape.custom("upsample_nearest", &[self], out, move |g, _| {
            vec![some(kernels::upsample_nearest_backward(&shape, g, factor))]
        }))
    }

    fn pointwise(self, kernel: &'static str, f: fn(f64) -> f64, df: fn(f64) -> f64) -> Var<'t> {
        let x = self.value();
        let out = x.map(f);
        self.tape.custom(kernel, &[self], out, move |g, _| {
            vec![some(g.zip_map(&x, kernel, |gi, xi| gi * df(xi)).expect("pointwise backward"))]
        })
    }

    pub fn silu(self) -> Var<'t> {
        self.pointwise("silu", kernels::silu, kernels::silu_grad)
    }

    pub fn gelu(self) -> Var<'t> {
        self.pointwise("gelu", kernels::gelu, kernels::gelu_grad)
    }

    /// `[C×H×W]` feature map → `[HW×C]` token rows.
    pub fn to_tokens(self) -> Result<Var<'t>> {
        let s = self.shape();
        if s.len() != 3 {
            return Err(invalid("to_tokens", format!("expected C×H×W, got {s:?}")));
        }
        self.reshape(&[s[0], s[1] * s[2]])?.transpose()
    }

    /// `[HW×C]` token rows → `[C×H×W]` feature map.
    pub fn to_feature_map(self, h: usize, w: usize) -> Result<Var<'t>> {
        let s = self.shape();
        if s.len() != 2 || s[0] != h * w {
            return Err(invalid("to_feature_map", format!("{s:?} is not {h}·{w} tokens")));
        }
        self.transpose()?.reshape(&[s[1], h, w])
    }
}

/// Concatenates tensors along axis 0 (channels for `C×H×W`, rows for tokens).
pub fn concat0<'t>(parts: &[Var<'t>]) -> Result<Var<'t>> {
    let first = parts.first().ok_or_else(|| invalid("concat0", "nothing to concatenate"))?;
    let tail = first.shape()[1..].to_vec();
    let mut lens = Vec::with_capacity(parts.len());
    let mut data = Vec::new();
    let mut lead = 0;
    for p in parts {
        let v = p.value();
        if v.shape().is_empty() || v.shape()[1..] != tail[..] {
            return Err(TensorError::ShapeMismatch {
                op: "concat0",
                left: first.shape(),
                right: v.shape().to_vec(),
            });
        }
        lead += v.shape()[0];
        lens.push(v.len());
        data.extend_from_slice(v.data());
    }
    let mut shape = vec![lead];
    shape.extend(&tail);
    let out = Tensor::new(&shape, data)?;
    Ok(first.tape.custom("concat0", parts, out, move |g, needs| {
        let mut offset = 0;
        lens.iter()
            .zip(needs)
            .map(|(&n, &need)| {
                let slice = &g.data()[offset..offset + n];
                offset += n;
                need.then(|| {
                    let mut s = g.shape().to_vec();
                    s[0] = n / tail.iter().product::<usize>().max(1);
                    Tensor::new(&s, slice.to_vec()).expect("concat0 backward")
                })
            })
            .collect()
    }))
}

/// Concatenates `[N×C_i]` token tensors along the channel axis.
pub fn concat_cols<'t>(parts: &[Var<'t>]) -> Result<Var<'t>> {
    let transposed = parts.iter().map(|p| p.transpose()).collect::<Result<Vec<_>>>()?;
    concat0(&transposed)?.transpose()
}
