//! U-shaped calibration network: `(u, v, mask) → Δ`, calibrated = init + Δ.
//!
//! With `channels = [c_1, …, c_D]` the network has `D` stride-2 3×3
//! downsampling convolutions (`c_i` channels each), `D` upsampling stages
//! (nearest ×2, concatenate the skip from the matching resolution, 3×3
//! convolution) and a 3×3 head to two channels. The head starts at zero so
//! an untrained network is the identity on flow.

use bvos_tensor::{concat0, Tape, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::FlowField;
use crate::error::{extent, CoreError, Result};
use crate::layers::Conv;
use crate::params::{Bound, Params};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibConfig {
    pub channels: Vec<usize>,
}

impl CalibConfig {
    /// Three levels, 16/32/64 channels.
    pub fn toy() -> Self {
        Self {
            channels: vec![16, 32, 64],
        }
    }

    /// Five levels, 32…512 channels: 5 down, 5 up and the head make 11
    /// convolutions.
    pub fn full() -> Self {
        Self {
            channels: vec![32, 64, 128, 256, 512],
        }
    }

    pub fn depth(&self) -> usize {
        self.channels.len()
    }

    /// Input extents must be divisible by this.
    pub fn stride(&self) -> usize {
        1 << self.depth()
    }

    pub fn num_convs(&self) -> usize {
        2 * self.depth() + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.channels.contains(&0) {
            return Err(CoreError::Config("calibration channels must be nonempty and positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct CalibNet {
    cfg: CalibConfig,
    down: Vec<Conv>,
    up: Vec<Conv>,
    head: Conv,
}

/// Input channels: `u`, `v`, mask.
const IN_CHANNELS: usize = 3;

impl CalibNet {
    pub fn new<R: Rng + ?Sized>(params: &mut Params, prefix: &str, cfg: &CalibConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let ch = &cfg.channels;
        let mut down = Vec::new();
        let mut prev = IN_CHANNELS;
        for (i, &c) in ch.iter().enumerate() {
            down.push(Conv::new(params, &format!("{prefix}.down{i}"), c, prev, 3, 2, false, rng));
            prev = c;
        }
        // up[i] restores the resolution of level i (level 0 = input)
        let mut up = Vec::new();
        for i in (0..ch.len()).rev() {
            let skip = if i == 0 { IN_CHANNELS } else { ch[i - 1] };
            let out = if i == 0 { ch[0] } else { ch[i - 1] };
            up.push(Conv::new(params, &format!("{prefix}.up{i}"), out, prev + skip, 3, 1, false, rng));
            prev = out;
        }
        let head = Conv::new(params, &format!("{prefix}.head"), 2, prev, 3, 1, true, rng);
        Ok(Self {
            cfg: cfg.clone(),
            down,
            up,
            head,
        })
    }

    pub fn config(&self) -> &CalibConfig {
        &self.cfg
    }

    /// `init: 2×H×W`, `mask: 1×H×W` → calibrated `2×H×W`.
    pub fn forward<'t>(&self, b: &Bound<'t>, init: Var<'t>, mask: Var<'t>) -> Result<Var<'t>> {
        let (fs, ms) = (init.shape(), mask.shape());
        if fs.len() != 3 || fs[0] != 2 || ms != [1, fs[1], fs[2]] {
            return Err(extent("calibrate_flow", format!("flow {fs:?} with mask {ms:?}")));
        }
        let s = self.cfg.stride();
        if fs[1] % s != 0 || fs[2] % s != 0 {
            return Err(extent("calibrate_flow", format!("{}×{} not divisible by {s}", fs[1], fs[2])));
        }
        let x = concat0(&[init, mask])?;
        let mut skips = vec![x];
        let mut h = x;
        for conv in &self.down {
            h = conv.apply(b, h)?.silu();
            skips.push(h);
        }
        skips.pop();
        for conv in &self.up {
            let skip = skips.pop().expect("one skip per level");
            h = conv.apply(b, concat0(&[h.upsample_nearest(2)?, skip])?)?.silu();
        }
        let delta = self.head.apply(b, h)?;
        Ok(init.add(delta)?)
    }
}

/// Calibrates `init` given the previous frame's mask (`H×W`, values in
/// `[0, 1]`).
pub fn calibrate_flow(init: &FlowField, prev_mask: &[f64], net: &CalibNet, params: &Params) -> Result<FlowField> {
    let (h, w) = (init.height(), init.width());
    if prev_mask.len() != h * w {
        return Err(extent("calibrate_flow", format!("{} mask pixels for {h}×{w} flow", prev_mask.len())));
    }
    let tape = Tape::inference();
    let b = params.bind(&tape, false);
    let mask = tape.constant(Tensor::new(&[1, h, w], prev_mask.to_vec())?);
    let out = net.forward(&b, tape.constant(init.tensor().clone()), mask)?;
    FlowField::new(out.value().as_ref().clone())
}
