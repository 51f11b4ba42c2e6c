use std::collections::VecDeque;

use bvos_tensor::{Tape, Tensor};
use serde::{Deserialize, Serialize};

use super::Model;
use crate::attention::BilateralEncoding;
use crate::error::{extent, CoreError, Result};
use crate::flow::FlowField;
use crate::grid::TokenGrid;

/// First frame plus the most recent one.
pub const DEFAULT_MEMORY_CAPACITY: usize = 2;

/// Keys and values of one memory frame, `[N×C]` each.
#[derive(Clone, Debug, PartialEq)]
pub struct MemoryEntry {
    pub frame: usize,
    pub keys: Tensor,
    pub values: Tensor,
}

/// Bounded memory that always keeps the first frame and otherwise the
/// latest `capacity − 1` frames.
#[derive(Clone, Debug)]
pub struct FrameMemory {
    capacity: usize,
    first: Option<MemoryEntry>,
    recent: VecDeque<MemoryEntry>,
}

impl FrameMemory {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity: capacity.max(1),
            first: None,
            recent: VecDeque::new(),
        }
    }

    pub fn push(&mut self, entry: MemoryEntry) {
        if self.first.is_none() {
            self.first = Some(entry);
            return;
        }
        self.recent.push_back(entry);
        while self.recent.len() > self.capacity - 1 {
            self.recent.pop_front();
        }
    }

    pub fn entries(&self) -> Vec<&MemoryEntry> {
        self.first.iter().chain(self.recent.iter()).collect()
    }

    pub fn len(&self) -> usize {
        self.first.iter().count() + self.recent.len()
    }

    pub fn is_empty(&self) -> bool {
        self.first.is_none()
    }

    pub fn frames(&self) -> Vec<usize> {
        self.entries().iter().map(|e| e.frame).collect()
    }
}

/// Per-frame inference output.
#[derive(Clone, Debug)]
pub struct FrameInference {
    /// `[(K+1)×H×W]`.
    pub logits: Tensor,
    pub tokens: TokenGrid,
    pub encoding: BilateralEncoding,
    pub flow: FlowField,
    pub mean_candidates: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameDiagnostics {
    pub frame: usize,
    /// Mean admitted keys per query.
    pub mean_candidates: f64,
    pub encoding_std: f64,
    /// Mean absolute change the calibration made to the flow.
    pub flow_correction: f64,
}

#[derive(Clone, Debug)]
pub struct Segmentation {
    /// One label mask per frame; frame 0 is the given mask.
    pub masks: Vec<Vec<u8>>,
    pub diagnostics: Vec<FrameDiagnostics>,
}

/// Per-pixel argmax over `allowed` slots; ties go to the lowest slot.
pub fn argmax_labels(logits: &Tensor, allowed: &[u8]) -> Result<Vec<u8>> {
    let s = logits.shape();
    if s.len() != 3 || allowed.iter().any(|&l| l as usize >= s[0]) || allowed.is_empty() {
        return Err(extent("argmax_labels", format!("logits {s:?} with slots {allowed:?}")));
    }
    let n = s[1] * s[2];
    let mut allowed = allowed.to_vec();
    allowed.sort_unstable();
    let d = logits.data();
    Ok((0..n)
        .map(|p| {
            let mut best = allowed[0];
            for &l in &allowed[1..] {
                if d[l as usize * n + p] > d[best as usize * n + p] {
                    best = l;
                }
            }
            best
        })
        .collect())
}

fn foreground(mask: &[u8]) -> Vec<f64> {
    mask.iter().map(|&l| if l > 0 { 1.0 } else { 0.0 }).collect()
}

impl Model {
    /// Encoder tokens of one `3×H×W` image.
    pub fn encode_frame(&self, image: &Tensor) -> Result<TokenGrid> {
        let tape = Tape::inference();
        let b = self.params.bind(&tape, false);
        let enc = self.encode(&b, tape.constant(image.clone()))?;
        let s = enc.skips[self.encoder.len()].shape();
        TokenGrid::new(s[1], s[2], enc.tokens.value().as_ref().clone())
    }

    /// Memory entry from precomputed tokens and the frame's label mask.
    pub fn memory_from_tokens(&self, frame: usize, tokens: &TokenGrid, mask: &[u8], w: usize, h: usize) -> Result<MemoryEntry> {
        let tape = Tape::inference();
        let b = self.params.bind(&tape, false);
        let values = self.memory_values(&b, tape.constant(tokens.tokens.clone()), mask, w, h)?;
        Ok(MemoryEntry {
            frame,
            keys: tokens.tokens.clone(),
            values: values.value().as_ref().clone(),
        })
    }

    pub fn memory_entry(&self, frame: usize, image: &Tensor, mask: &[u8]) -> Result<MemoryEntry> {
        let s = image.shape();
        if s.len() != 3 {
            return Err(extent("memory_entry", format!("expected 3×H×W image, got {s:?}")));
        }
        let tokens = self.encode_frame(image)?;
        self.memory_from_tokens(frame, &tokens, mask, s[2], s[1])
    }

    /// Forward pass for one query frame on an inference tape.
    pub fn infer_frame(&self, image: &Tensor, memory: &FrameMemory, init_flow: &FlowField, prev_mask: &[f64]) -> Result<FrameInference> {
        let (h, w) = (init_flow.height(), init_flow.width());
        if prev_mask.len() != h * w {
            return Err(extent("infer_frame", format!("{} mask pixels for {h}×{w}", prev_mask.len())));
        }
        let tape = Tape::inference();
        let b = self.params.bind(&tape, false);
        let mem: Vec<_> = memory
            .entries()
            .iter()
            .map(|e| (tape.constant(e.keys.clone()), tape.constant(e.values.clone())))
            .collect();
        let out = self.forward_frame(
            &b,
            tape.constant(image.clone()),
            &mem,
            tape.constant(init_flow.tensor().clone()),
            tape.constant(Tensor::new(&[1, h, w], prev_mask.to_vec())?),
        )?;
        let (gh, gw) = (out.mask.height(), out.mask.width());
        Ok(FrameInference {
            logits: out.logits.value().as_ref().clone(),
            tokens: TokenGrid::new(gh, gw, out.tokens.value().as_ref().clone())?,
            encoding: BilateralEncoding::new(gh, gw, out.encoding.value().as_ref().clone())?,
            flow: FlowField::new(out.flow.value().as_ref().clone())?,
            mean_candidates: out.mask.mean_candidates(),
        })
    }
}

/// Propagates `first_mask` through `frames` (`3×H×W` each). `flows[t−1]` is
/// the observed flow from frame `t−1` to `t`. Predicted labels are limited
/// to the labels of the first mask.
pub fn segment_sequence(model: &Model, frames: &[Tensor], first_mask: &[u8], flows: &[FlowField]) -> Result<Segmentation> {
    let first = frames.first().ok_or_else(|| CoreError::Invalid("empty sequence".into()))?;
    let s = first.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(extent("segment_sequence", format!("frame shape {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    if flows.len() + 1 < frames.len() {
        return Err(extent("segment_sequence", format!("{} flows for {} frames", flows.len(), frames.len())));
    }
    let mut allowed: Vec<u8> = first_mask.to_vec();
    allowed.push(0);
    allowed.sort_unstable();
    allowed.dedup();

    let mut memory = FrameMemory::new(model.config().memory_capacity);
    memory.push(model.memory_entry(0, first, first_mask)?);
    let mut masks = vec![first_mask.to_vec()];
    let mut diagnostics = Vec::new();
    for t in 1..frames.len() {
        let flow = &flows[t - 1];
        if (flow.height(), flow.width()) != (h, w) {
            return Err(extent("segment_sequence", format!("flow {t} is {}×{}", flow.height(), flow.width())));
        }
        let prev = foreground(&masks[t - 1]);
        let out = model.infer_frame(&frames[t], &memory, flow, &prev)?;
        let labels = argmax_labels(&out.logits, &allowed)?;
        let ev = out.encoding.as_slice();
        let mean = ev.iter().sum::<f64>() / ev.len() as f64;
        let var = ev.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / ev.len() as f64;
        let correction = out
            .flow
            .tensor()
            .data()
            .iter()
            .zip(flow.tensor().data())
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / flow.tensor().len() as f64;
        diagnostics.push(FrameDiagnostics {
            frame: t,
            mean_candidates: out.mean_candidates,
            encoding_std: var.sqrt(),
            flow_correction: correction,
        });
        memory.push(model.memory_from_tokens(t, &out.tokens, &labels, w, h)?);
        masks.push(labels);
    }
    Ok(Segmentation { masks, diagnostics })
}
