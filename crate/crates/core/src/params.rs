//! Named parameter tensors, their binding onto a tape, and checkpoint I/O.
//!
//! A checkpoint directory holds `weights.btsr` (the tensors concatenated in
//! registration order) and `manifest.txt` (one `name d0xd1x…` line per
//! tensor, same order).

use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use bvos_tensor::snapshot::{self, Dtype};
use bvos_tensor::{Gradients, Tape, Tensor, Var};
use rand::Rng;

use crate::error::{CoreError, Result};

pub const WEIGHTS_FILE: &str = "weights.btsr";
pub const MANIFEST_FILE: &str = "manifest.txt";

/// Index of a tensor in a [`Params`] store.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Params {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(t.with_requires_grad(false));
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn set(&mut self, id: ParamId, t: Tensor) -> Result<()> {
        if t.shape() != self.tensors[id.0].shape() {
            return Err(CoreError::Invalid(format!(
                "parameter {} has shape {:?}, got {:?}",
                self.names[id.0],
                self.tensors[id.0].shape(),
                t.shape()
            )));
        }
        self.tensors[id.0] = t.with_requires_grad(false);
        Ok(())
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.len()).map(ParamId)
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Records every tensor on `tape`, as trainable leaves when `trainable`.
    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> Bound<'t> {
        let vars = self
            .tensors
            .iter()
            .map(|t| {
                if trainable {
                    tape.param(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect();
        Bound { vars }
    }

    /// Writes `weights.btsr` and `manifest.txt` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut w = BufWriter::new(fs::File::create(dir.join(WEIGHTS_FILE))?);
        snapshot::write_all(&mut w, &self.tensors, Dtype::F64)?;
        w.flush()?;
        fs::write(dir.join(MANIFEST_FILE), self.manifest())?;
        Ok(())
    }

    pub fn manifest(&self) -> String {
        self.names
            .iter()
            .zip(&self.tensors)
            .map(|(n, t)| {
                let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
                format!("{n} {}\n", dims.join("x"))
            })
            .collect()
    }

    /// Loads tensors saved by [`Params::save`] into a store with the same
    /// layout (names and shapes must match).
    pub fn load_into(&mut self, dir: &Path) -> Result<()> {
        let manifest = fs::read_to_string(dir.join(MANIFEST_FILE))?;
        if manifest != self.manifest() {
            return Err(CoreError::Format(format!(
                "checkpoint manifest in {} does not match the model layout",
                dir.display()
            )));
        }
        let mut r = BufReader::new(fs::File::open(dir.join(WEIGHTS_FILE))?);
        let tensors = snapshot::read_all(&mut r)?;
        if tensors.len() != self.len() {
            return Err(CoreError::Format(format!("{} tensors for {} parameters", tensors.len(), self.len())));
        }
        for (id, t) in tensors.into_iter().enumerate() {
            self.set(ParamId(id), t)?;
        }
        Ok(())
    }
}

/// Parameters recorded on one tape, addressable by [`ParamId`].
pub struct Bound<'t> {
    vars: Vec<Var<'t>>,
}

impl<'t> Bound<'t> {
    /// Wraps vars already on a tape, one per parameter in [`Params`] order.
    pub fn from_vars(params: &Params, vars: Vec<Var<'t>>) -> Result<Self> {
        if vars.len() != params.len() {
            return Err(CoreError::Invalid(format!("{} vars for {} parameters", vars.len(), params.len())));
        }
        for (i, (v, t)) in vars.iter().zip(&params.tensors).enumerate() {
            if v.shape() != t.shape() {
                return Err(CoreError::Invalid(format!(
                    "var {i} has shape {:?}, parameter {} is {:?}",
                    v.shape(),
                    params.names[i],
                    t.shape()
                )));
            }
        }
        Ok(Self { vars })
    }

    pub fn get(&self, id: ParamId) -> Var<'t> {
        self.vars[id.0]
    }

    /// One gradient per parameter, zeros where the loss does not depend on it.
    pub fn gradients(&self, grads: &mut Gradients) -> Vec<Tensor> {
        self.vars.iter().map(|&v| grads.take_or_zeros(v)).collect()
    }
}

/// He-normal initialisation for a `C_out×C_in×k×k` convolution.
pub fn conv_init<R: Rng + ?Sized>(c_out: usize, c_in: usize, k: usize, rng: &mut R) -> Tensor {
    let fan_in = (c_in * k * k) as f64;
    Tensor::randn(&[c_out, c_in, k, k], (2.0 / fan_in).sqrt(), rng)
}

/// Xavier-normal initialisation for a `fan_in×fan_out` matrix.
pub fn linear_init<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor {
    Tensor::randn(&[fan_in, fan_out], (2.0 / (fan_in + fan_out) as f64).sqrt(), rng)
}
