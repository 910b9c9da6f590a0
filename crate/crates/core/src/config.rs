//! Run configuration. Serialized as JSON; every field has a desk-scale
//! default so partial files are accepted.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

/// How the mask head brings decoder-resolution logits to image resolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskUpsample {
    /// The conv emits `stride²` channels that are rearranged into a
    /// `stride × stride` block per decoder cell.
    PixelShuffle,
    /// The conv emits one channel, repeated over each `stride × stride` block.
    Nearest,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Shared model width `C` (text features, neck, decoder).
    pub width: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    /// Calibration decoder depth `N`.
    pub decoder_layers: usize,
    /// Number of language queries `N_q`.
    pub num_queries: usize,
    /// Output channels of the four vision stages.
    pub stage_channels: [usize; 4],
    /// Transformer blocks in the text encoder.
    pub text_layers: usize,
    pub vocab_size: usize,
    /// Token sequence length including the global slot.
    pub max_len: usize,
    pub cdec_enabled: bool,
    pub share_qgm_params: bool,
    pub mask_upsample: MaskUpsample,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            width: 64,
            heads: 4,
            ffn_dim: 128,
            decoder_layers: 3,
            num_queries: 8,
            stage_channels: [16, 32, 64, 128],
            text_layers: 2,
            vocab_size: crate::data::VOCAB_SIZE,
            max_len: 20,
            cdec_enabled: true,
            share_qgm_params: false,
            mask_upsample: MaskUpsample::PixelShuffle,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub seg_weight: f64,
    pub recon_weight: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            seg_weight: 1.0,
            recon_weight: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Scene generation parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSpec {
    pub image_size: usize,
    /// Cells per side; objects occupy one cell each.
    pub grid: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Blank border inside each cell, in pixels.
    pub cell_margin: usize,
    pub max_len: usize,
}

impl Default for DataSpec {
    fn default() -> Self {
        Self {
            image_size: 64,
            grid: 4,
            min_objects: 2,
            max_objects: 4,
            cell_margin: 1,
            max_len: 20,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub train_size: usize,
    pub val_size: usize,
    /// Seed of the training split; the validation split uses `data_seed + 1`.
    pub data_seed: u64,
    pub init_seed: u64,
    /// Evaluate on the splits every this many epochs (and after the last).
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 300,
            batch_size: 8,
            train_size: 32,
            val_size: 0,
            data_seed: 1,
            init_seed: 7,
            eval_every: 50,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub schema_version: u32,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub optim: OptimConfig,
    pub data: DataSpec,
    pub train: TrainConfig,
    pub precision: Precision,
    /// Random generator identity; only the value in [`crate::rng::ALGORITHM`]
    /// is supported.
    pub rng: String,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            optim: OptimConfig::default(),
            data: DataSpec::default(),
            train: TrainConfig::default(),
            precision: Precision::F32,
            rng: crate::rng::ALGORITHM.to_string(),
        }
    }
}

impl Config {
    /// Tiny 64-bit setup used for whole-model gradient verification.
    pub fn gradcheck() -> Self {
        let mut c = Self::default();
        c.model.width = 16;
        c.model.heads = 4;
        c.model.ffn_dim = 32;
        c.model.decoder_layers = 2;
        c.model.num_queries = 4;
        c.model.stage_channels = [4, 8, 8, 16];
        c.model.text_layers = 1;
        c.model.max_len = 6;
        c.data.image_size = 32;
        c.data.max_len = 6;
        c.data.max_objects = 2;
        c.precision = Precision::F64;
        c
    }

    /// Full-scale hyperparameters (480² images, C = 512, 8 heads,
    /// feed-forward 2048, N = 3, N_q = 24, lr = 0.005, 40 epochs, batch 64).
    /// Far beyond a single CPU; kept for reference.
    pub fn paper_scale() -> Self {
        let mut c = Self::default();
        c.model.width = 512;
        c.model.heads = 8;
        c.model.ffn_dim = 2048;
        c.model.decoder_layers = 3;
        c.model.num_queries = 24;
        c.model.stage_channels = [128, 256, 512, 1024];
        c.optim.lr = 0.005;
        c.data.image_size = 480;
        c.train.epochs = 40;
        c.train.batch_size = 64;
        c
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: Config = serde_json::from_str(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Total downsampling from image to decoder grid.
    pub fn decoder_stride(&self) -> usize {
        8
    }

    pub fn decoder_grid(&self) -> (usize, usize) {
        let s = self.data.image_size / self.decoder_stride();
        (s, s)
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        let bad = |msg: String| Err(Error::Config(msg));
        if self.schema_version != SCHEMA_VERSION {
            return bad(format!(
                "schema version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            ));
        }
        if self.rng != crate::rng::ALGORITHM {
            return bad(format!("unsupported rng {:?}", self.rng));
        }
        let extents = [
            ("width", m.width),
            ("heads", m.heads),
            ("ffn_dim", m.ffn_dim),
            ("num_queries", m.num_queries),
            ("text_layers", m.text_layers),
            ("vocab_size", m.vocab_size),
            ("max_len", m.max_len),
            ("image_size", self.data.image_size),
            ("grid", self.data.grid),
            ("epochs", self.train.epochs),
            ("batch_size", self.train.batch_size),
            ("train_size", self.train.train_size),
            ("eval_every", self.train.eval_every),
        ];
        for (name, v) in extents {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if m.decoder_layers == 0 {
            return bad("decoder_layers must be at least 1".into());
        }
        if m.stage_channels.contains(&0) {
            return bad("stage channels must be positive".into());
        }
        if !m.width.is_multiple_of(m.heads) {
            return bad(format!("width {} not divisible by {} heads", m.width, m.heads));
        }
        if !m.width.is_multiple_of(4) {
            return bad(format!("width {} must be divisible by 4 for grid position codes", m.width));
        }
        if !self.data.image_size.is_multiple_of(16) {
            return bad(format!("image size {} must be divisible by 16", self.data.image_size));
        }
        if self.data.max_len != m.max_len {
            return bad(format!(
                "data max_len {} differs from model max_len {}",
                self.data.max_len, m.max_len
            ));
        }
        if m.vocab_size < crate::data::VOCAB_SIZE {
            return bad(format!(
                "vocab_size {} is smaller than the token vocabulary ({})",
                m.vocab_size,
                crate::data::VOCAB_SIZE
            ));
        }
        if self.loss.seg_weight < 0.0 || self.loss.recon_weight < 0.0 {
            return bad("loss weights must be non-negative".into());
        }
        if self.optim.lr.is_nan() || self.optim.lr <= 0.0 {
            return bad("learning rate must be positive".into());
        }
        crate::data::validate_spec(&self.data)
    }
}

/// Input of the `gen-data` command: a scene spec plus how many samples to
/// draw and from which split seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenDataSpec {
    pub data: DataSpec,
    pub count: usize,
    pub seed: u64,
}

impl Default for GenDataSpec {
    fn default() -> Self {
        Self {
            data: DataSpec::default(),
            count: 64,
            seed: 1,
        }
    }
}

impl GenDataSpec {
    pub fn load(path: &Path) -> Result<Self> {
        let spec: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        crate::data::validate_spec(&spec.data)?;
        Ok(spec)
    }
}
