use std::sync::Arc;

use bvos_tensor::{concat0, concat_cols, kernels, Tensor, Var};

use super::block::BlockContext;
use super::embed::{downscale_labels, sinusoidal_pos_embed};
use super::Model;
use crate::attention::{build_bilateral_mask, encode_bilateral_space, BilateralEncoding, BilateralMask};
use crate::error::{extent, CoreError, Result};
use crate::flow::FlowField;
use crate::grid::TokenGrid;
use crate::layers::gather_rows;
use crate::params::Bound;

const PIXEL_MEAN: f64 = 0.5;
const PIXEL_STD: f64 = 0.25;

/// Encoder activations of one frame.
pub(crate) struct Encoded<'t> {
    /// Image followed by every stride-2 stage output, finest first.
    pub skips: Vec<Var<'t>>,
    /// `[N×C]` tokens at the coarsest stage.
    pub tokens: Var<'t>,
}

/// Everything [`Model::forward_frame`] records for one query frame.
pub struct FrameOutput<'t> {
    /// `[(K+1)×H×W]` per-slot logits.
    pub logits: Var<'t>,
    /// `[N×C]` encoder tokens of the query frame.
    pub tokens: Var<'t>,
    pub init_flow: Var<'t>,
    /// Calibrated flow (the observed flow when calibration is off).
    pub flow: Var<'t>,
    /// `[N×1]` bilateral encoding.
    pub encoding: Var<'t>,
    pub mask: Arc<BilateralMask>,
}

impl Model {
    pub(crate) fn check_image(&self, h: usize, w: usize) -> Result<()> {
        let d = self.cfg.required_divisor();
        if h == 0 || w == 0 || !h.is_multiple_of(d) || !w.is_multiple_of(d) {
            return Err(extent("model", format!("{h}×{w} image is not a multiple of {d}")));
        }
        Ok(())
    }

    pub(crate) fn encode<'t>(&self, b: &Bound<'t>, image: Var<'t>) -> Result<Encoded<'t>> {
        let s = image.shape();
        if s.len() != 3 || s[0] != 3 {
            return Err(extent("encode", format!("expected 3×H×W image, got {s:?}")));
        }
        self.check_image(s[1], s[2])?;
        let x = image.add(image.tape().constant(Tensor::full(&s, -PIXEL_MEAN)))?.scale(1.0 / PIXEL_STD);
        let mut skips = vec![x];
        let mut x = x;
        for conv in &self.encoder {
            x = conv.apply(b, x)?.silu();
            skips.push(x);
        }
        let tokens = self.token_proj.apply(b, x)?.to_tokens()?;
        Ok(Encoded { skips, tokens })
    }

    /// Memory values: tokens plus the identity embedding of the label at
    /// each token's cell centre.
    pub(crate) fn memory_values<'t>(&self, b: &Bound<'t>, tokens: Var<'t>, mask: &[u8], w: usize, h: usize) -> Result<Var<'t>> {
        let slots = self.cfg.slots();
        if let Some(&label) = mask.iter().find(|&&l| l as usize >= slots) {
            return Err(CoreError::Label { label, slots });
        }
        let labels = downscale_labels(mask, w, h, self.cfg.stride())?;
        let index: Vec<usize> = labels.iter().map(|&l| l as usize).collect();
        Ok(tokens.add(gather_rows(b.get(self.id_embed), &index)?)?)
    }

    /// Keys and values of one memory frame, `[N×C]` each, recorded on the
    /// tape of `b`.
    pub fn memory_on_tape<'t>(&self, b: &Bound<'t>, image: Var<'t>, mask: &[u8]) -> Result<(Var<'t>, Var<'t>)> {
        let s = image.shape();
        let enc = self.encode(b, image)?;
        let values = self.memory_values(b, enc.tokens, mask, s[2], s[1])?;
        Ok((enc.tokens, values))
    }

    pub(crate) fn flow_tokens<'t>(&self, b: &Bound<'t>, flow: Var<'t>) -> Result<Var<'t>> {
        self.flow_encoder.apply(b, flow)?.to_tokens().map_err(Into::into)
    }

    pub(crate) fn encoding<'t>(&self, b: &Bound<'t>, tokens: Var<'t>, flow_tokens: Var<'t>) -> Result<Var<'t>> {
        self.encoding_proj.apply(b, concat_cols(&[tokens, flow_tokens])?)
    }

    pub(crate) fn decode<'t>(&self, b: &Bound<'t>, tokens: Var<'t>, enc: &Encoded<'t>) -> Result<Var<'t>> {
        let stages = self.encoder.len();
        let coarse = enc.skips[stages].shape();
        let mut y = self.decoder_in.apply(b, tokens.to_feature_map(coarse[1], coarse[2])?)?;
        for (i, conv) in self.decoder.iter().enumerate() {
            let skip = enc.skips[stages - 1 - i];
            let s = skip.shape();
            let up = y.bilinear_resize(s[1], s[2])?;
            y = conv.apply(b, concat0(&[up, skip])?)?.silu();
        }
        self.head.apply(b, y)
    }

    /// One query frame against memory `(keys, values)` pairs, each `[N×C]`.
    /// `init_flow: 2×H×W` is the observed flow from the previous frame and
    /// `prev_mask: 1×H×W` that frame's foreground indicator.
    pub fn forward_frame<'t>(
        &self,
        b: &Bound<'t>,
        image: Var<'t>,
        memory: &[(Var<'t>, Var<'t>)],
        init_flow: Var<'t>,
        prev_mask: Var<'t>,
    ) -> Result<FrameOutput<'t>> {
        self.forward_frame_masked(b, image, memory, init_flow, prev_mask, None)
    }

    /// [`Model::forward_frame`] with an optional fixed attention mask in
    /// place of the one built from the bilateral encoding.
    pub fn forward_frame_masked<'t>(
        &self,
        b: &Bound<'t>,
        image: Var<'t>,
        memory: &[(Var<'t>, Var<'t>)],
        init_flow: Var<'t>,
        prev_mask: Var<'t>,
        fixed_mask: Option<Arc<BilateralMask>>,
    ) -> Result<FrameOutput<'t>> {
        if memory.is_empty() {
            return Err(CoreError::Invalid("forward_frame needs at least one memory frame".into()));
        }
        let enc = self.encode(b, image)?;
        let flow = if self.cfg.calibrate {
            self.calib.forward(b, init_flow, prev_mask)?
        } else {
            init_flow
        };
        let coarse = enc.skips[self.encoder.len()].shape();
        let (gh, gw) = (coarse[1], coarse[2]);
        let ft = self.flow_tokens(b, flow)?;
        if ft.shape()[0] != gh * gw {
            return Err(extent("forward_frame", format!("flow grid {:?} vs {gh}×{gw} tokens", ft.shape())));
        }
        let encoding = self.encoding(b, enc.tokens, ft)?;
        let mask = match fixed_mask {
            Some(m) if m.height() == gh && m.width() == gw => m,
            Some(m) => {
                return Err(extent("forward_frame", format!("fixed mask {}×{} for {gh}×{gw} tokens", m.height(), m.width())))
            }
            None => {
                let e = BilateralEncoding::new(gh, gw, encoding.value().as_ref().clone())?;
                Arc::new(build_bilateral_mask(&e, &self.cfg.attention)?)
            }
        };

        let tape = image.tape();
        let pos = sinusoidal_pos_embed(gh, gw, self.cfg.channels)?.tokens;
        let repeated: Vec<f64> = pos.data().iter().copied().cycle().take(pos.len() * memory.len()).collect();
        let ctx = BlockContext {
            pos: tape.constant(pos.clone()),
            mem_pos: tape.constant(Tensor::new(&[gh * gw * memory.len(), self.cfg.channels], repeated)?),
            mem_keys: concat0(&memory.iter().map(|m| m.0).collect::<Vec<_>>())?,
            mem_values: concat0(&memory.iter().map(|m| m.1).collect::<Vec<_>>())?,
            mask: mask.clone(),
            encoding,
            heads: self.cfg.attention.num_heads,
        };
        let mut x = enc.tokens;
        for blk in &self.blocks {
            x = blk.forward(b, x, &ctx)?;
        }
        let logits = self.decode(b, x, &enc)?;
        Ok(FrameOutput {
            logits,
            tokens: enc.tokens,
            init_flow,
            flow,
            encoding,
            mask,
        })
    }

    /// Bilateral encoding from stored query tokens and a (calibrated) flow,
    /// evaluated with plain kernels.
    pub fn bilateral_encoding(&self, query: &TokenGrid, flow: &FlowField) -> Result<BilateralEncoding> {
        let p = &self.params;
        let fe = &self.flow_encoder;
        let f = kernels::conv2d(flow.tensor(), p.get(fe.w), Some(p.get(fe.b)), fe.stride, fe.padding)?;
        let flow_grid = TokenGrid::from_feature_map(&f)?;
        let w = p.get(self.encoding_proj.w);
        let proj = w.reshape(&[1, w.shape()[0], 1, 1])?;
        encode_bilateral_space(query, &flow_grid, &proj, Some(p.get(self.encoding_proj.b)))
    }
}
