//! The toy segmentation network: a strided convolutional encoder shared by
//! query and memory frames, identity embeddings for object slots, a flow
//! encoder feeding the bilateral encoding, a stack of bilateral transformer
//! blocks, and a skip-connected upsampling decoder.

mod block;
mod embed;
mod network;
mod sequence;

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::AttentionConfig;
use crate::error::{CoreError, Result};
use crate::flow::{CalibConfig, CalibNet};
use crate::layers::{Conv, Linear};
use crate::params::{ParamId, Params};

use block::Block;

pub use embed::{downscale_labels, sinusoidal_pos_embed};
pub use network::FrameOutput;
pub use sequence::{
    argmax_labels, segment_sequence, FrameDiagnostics, FrameInference, FrameMemory, MemoryEntry, Segmentation,
    DEFAULT_MEMORY_CAPACITY,
};

pub const CONFIG_FILE: &str = "config.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Token channels `C`.
    pub channels: usize,
    pub num_blocks: usize,
    pub attention: AttentionConfig,
    /// Output channels of the stride-2 encoder stages; the token grid is
    /// `2^len` times smaller than the image.
    pub encoder_channels: Vec<usize>,
    /// Channels of the flow encoding `C_f`.
    pub flow_channels: usize,
    /// Decoder stage widths, coarse to fine; same length as the encoder.
    pub decoder_channels: Vec<usize>,
    pub mlp_hidden: usize,
    /// Object slots besides background.
    pub max_objects: usize,
    pub calibration: CalibConfig,
    /// Refine the observed flow with the calibration network.
    pub calibrate: bool,
    pub memory_capacity: usize,
}

impl ModelConfig {
    /// Desk-scale default: 64×64 images, 16×16 tokens, `C = 64`, two blocks,
    /// four heads.
    pub fn toy() -> Self {
        Self {
            channels: 64,
            num_blocks: 2,
            attention: AttentionConfig::toy(64, 4),
            encoder_channels: vec![16, 32],
            flow_channels: 16,
            decoder_channels: vec![32, 16],
            mlp_hidden: 128,
            max_objects: 3,
            calibration: CalibConfig::toy(),
            calibrate: true,
            memory_capacity: DEFAULT_MEMORY_CAPACITY,
        }
    }

    /// Twelve blocks, `C = 256`, eight heads, `W_d = 7`, `W_b = 84`, the
    /// eleven-layer calibration network. Not trained here.
    pub fn full_scale() -> Self {
        Self {
            channels: 256,
            num_blocks: 12,
            attention: AttentionConfig::full_scale(256),
            encoder_channels: vec![64, 128],
            flow_channels: 64,
            decoder_channels: vec![128, 64],
            mlp_hidden: 1024,
            max_objects: 10,
            calibration: CalibConfig::full(),
            calibrate: true,
            memory_capacity: DEFAULT_MEMORY_CAPACITY,
        }
    }

    /// Smallest useful network, for gradient checks on 8×8 images.
    pub fn tiny() -> Self {
        Self {
            channels: 8,
            num_blocks: 1,
            attention: AttentionConfig::toy(8, 1),
            encoder_channels: vec![4, 8],
            flow_channels: 4,
            decoder_channels: vec![8, 4],
            mlp_hidden: 16,
            max_objects: 2,
            calibration: CalibConfig { channels: vec![4, 4, 4] },
            calibrate: true,
            memory_capacity: DEFAULT_MEMORY_CAPACITY,
        }
    }

    pub fn stride(&self) -> usize {
        1 << self.encoder_channels.len()
    }

    /// Logit channels: background plus object slots.
    pub fn slots(&self) -> usize {
        self.max_objects + 1
    }

    /// Image extents must be multiples of this.
    pub fn required_divisor(&self) -> usize {
        let calib = if self.calibrate { self.calibration.stride() } else { 1 };
        self.stride().max(calib)
    }

    pub fn validate(&self) -> Result<()> {
        self.attention.validate()?;
        if self.attention.channels != self.channels {
            return Err(CoreError::Config(format!(
                "attention channels {} != model channels {}",
                self.attention.channels, self.channels
            )));
        }
        if self.num_blocks == 0 || self.max_objects == 0 || self.memory_capacity == 0 {
            return Err(CoreError::Config("num_blocks, max_objects and memory_capacity must be ≥ 1".into()));
        }
        if self.max_objects > 254 {
            return Err(CoreError::Config("at most 254 object slots".into()));
        }
        if self.encoder_channels.is_empty() || self.encoder_channels.len() != self.decoder_channels.len() {
            return Err(CoreError::Config("encoder and decoder need the same nonzero number of stages".into()));
        }
        if !self.channels.is_multiple_of(4) {
            return Err(CoreError::Config(format!("channels {} must be divisible by 4", self.channels)));
        }
        let widths = self.encoder_channels.iter().chain(&self.decoder_channels);
        if widths.chain([&self.flow_channels, &self.mlp_hidden]).any(|&c| c == 0) {
            return Err(CoreError::Config("layer widths must be positive".into()));
        }
        self.calibration.validate()
    }
}

/// Same configuration with the bilateral rank window maximal, so every mask
/// is the fixed spatial window.
pub fn spatial_local_variant(cfg: &ModelConfig) -> ModelConfig {
    ModelConfig {
        attention: cfg.attention.spatial_local(),
        ..cfg.clone()
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    cfg: ModelConfig,
    params: Params,
    encoder: Vec<Conv>,
    token_proj: Conv,
    id_embed: ParamId,
    flow_encoder: Conv,
    encoding_proj: Linear,
    calib: CalibNet,
    blocks: Vec<Block>,
    decoder_in: Conv,
    decoder: Vec<Conv>,
    head: Conv,
}

impl Model {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Params::new();
        let c = cfg.channels;
        let mut encoder = Vec::new();
        let mut prev = 3;
        for (i, &ch) in cfg.encoder_channels.iter().enumerate() {
            encoder.push(Conv::new(&mut p, &format!("encoder.{i}"), ch, prev, 3, 2, false, &mut rng));
            prev = ch;
        }
        let token_proj = Conv::new(&mut p, "encoder.proj", c, prev, 1, 1, false, &mut rng);
        let id_embed = p.add(
            "id_embed",
            bvos_tensor::Tensor::randn(&[cfg.slots(), c], 0.5, &mut rng),
        );
        let stride = cfg.stride();
        let flow_encoder = Conv::new(&mut p, "flow_encoder", cfg.flow_channels, 2, stride + 1, stride, false, &mut rng);
        let encoding_proj = Linear::new(&mut p, "encoding_proj", c + cfg.flow_channels, 1, &mut rng);
        let calib = CalibNet::new(&mut p, "calib", &cfg.calibration, &mut rng)?;
        let blocks = (0..cfg.num_blocks)
            .map(|i| Block::new(&mut p, &format!("block{i}"), c, cfg.mlp_hidden, &mut rng))
            .collect();
        let decoder_in = Conv::new(&mut p, "decoder.in", cfg.decoder_channels[0], c, 1, 1, false, &mut rng);
        let mut decoder = Vec::new();
        let mut prev = cfg.decoder_channels[0];
        let skips: Vec<usize> = std::iter::once(3)
            .chain(cfg.encoder_channels.iter().copied())
            .collect();
        for (i, &ch) in cfg.decoder_channels.iter().enumerate() {
            let skip = skips[skips.len() - 2 - i];
            decoder.push(Conv::new(&mut p, &format!("decoder.{i}"), ch, prev + skip, 3, 1, false, &mut rng));
            prev = ch;
        }
        let head = Conv::new(&mut p, "decoder.head", cfg.slots(), prev, 3, 1, true, &mut rng);
        Ok(Self {
            cfg,
            params: p,
            encoder,
            token_proj,
            id_embed,
            flow_encoder,
            encoding_proj,
            calib,
            blocks,
            decoder_in,
            decoder,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }

    pub fn calibration_net(&self) -> &CalibNet {
        &self.calib
    }

    /// Same weights under a different configuration with an identical
    /// parameter layout (for example [`spatial_local_variant`]).
    pub fn with_config(&self, cfg: ModelConfig) -> Result<Self> {
        let fresh = Model::new(cfg, 0)?;
        if fresh.params.manifest() != self.params.manifest() {
            return Err(CoreError::Config("configuration changes the parameter layout".into()));
        }
        Ok(Self {
            params: self.params.clone(),
            ..fresh
        })
    }

    /// Writes weights, manifest and `config.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        self.params.save(dir)?;
        fs::write(dir.join(CONFIG_FILE), serde_json::to_string_pretty(&self.cfg)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let cfg: ModelConfig = serde_json::from_str(&fs::read_to_string(dir.join(CONFIG_FILE))?)?;
        let mut model = Model::new(cfg, 0)?;
        model.params.load_into(dir)?;
        Ok(model)
    }

    /// Parameters used only by the bilateral attention branches.
    pub fn bilateral_branch_params(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for blk in &self.blocks {
            for l in [blk.bilateral.q, blk.bilateral.k, blk.bilateral.v, blk.bilateral.o] {
                ids.extend([l.w, l.b]);
            }
        }
        ids
    }

    /// Output projections of every residual branch (self, cross, bilateral,
    /// MLP) of block `i`.
    pub fn residual_output_params(&self, i: usize) -> Vec<ParamId> {
        let blk = &self.blocks[i];
        let mut ids = Vec::new();
        for l in [blk.self_attn.o, blk.cross.o, blk.bilateral.o, blk.mlp_out] {
            ids.extend([l.w, l.b]);
        }
        ids
    }
}
