//! Runtime configuration shared by every workflow.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attention::AttentionMode;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Token width of the embedding stack.
    pub d_k: usize,
    /// Width of an identity's global feature.
    pub d_gf: usize,
    /// Width of each local feature cell.
    pub d_lf: usize,
    /// Side of the local feature grid; a face block has `L^2 + 1` tokens.
    pub local_grid: usize,
    pub heads: usize,
    pub d_head: usize,
    /// Channel width inside the denoiser stages.
    pub width: usize,
    /// Width of the sinusoidal timestep embedding.
    pub time_dim: usize,
    /// Text tokens per caption.
    pub text_len: usize,
    pub attention_mode: AttentionMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_k: 16,
            d_gf: 8,
            d_lf: 4,
            local_grid: 2,
            heads: 4,
            d_head: 4,
            width: 16,
            time_dim: 8,
            text_len: 4,
            attention_mode: AttentionMode::Multiplicative,
        }
    }
}

impl ModelConfig {
    pub fn block_len(&self) -> usize {
        self.local_grid * self.local_grid + 1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleConfig {
    pub t_max: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            t_max: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub learning_rate: f64,
    /// Global gradient-norm clip; `0` disables clipping.
    pub grad_clip: f64,
    pub seed: u64,
    /// Replace every face mask with ones (mask-ablated control run).
    pub ablate_mask: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch: 4,
            learning_rate: 0.02,
            grad_clip: 1.0,
            seed: 0,
            ablate_mask: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub records: usize,
    pub identities: usize,
    pub min_faces: usize,
    pub max_faces: usize,
    pub min_face_size: usize,
    pub max_face_size: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            records: 64,
            identities: 2,
            min_faces: 1,
            max_faces: 6,
            min_face_size: 3,
            max_face_size: 5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Config {
    pub model: ModelConfig,
    /// Side of the square image grid.
    pub image_size: usize,
    pub channels: usize,
    /// Attention stage resolutions, finest first, each half the previous.
    pub stages: Vec<usize>,
    pub schedule: ScheduleConfig,
    pub train: TrainConfig,
    pub synthetic: SyntheticConfig,
    /// Stacking capacity N.
    pub capacity: usize,
    /// Total fractional growth of each face box before rasterizing.
    pub mask_margin: f64,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            image_size: 16,
            channels: 4,
            stages: vec![16, 8, 4, 2],
            schedule: ScheduleConfig::default(),
            train: TrainConfig::default(),
            synthetic: SyntheticConfig::default(),
            capacity: 4,
            mask_margin: 0.25,
        }
    }
}

impl Config {
    /// The smallest configuration used by the gradient suite: `d_K = 16`,
    /// `L = 2`, an 8x8 grid with two stages.
    pub fn tiny() -> Self {
        Self {
            model: ModelConfig {
                d_k: 16,
                d_gf: 4,
                d_lf: 3,
                local_grid: 2,
                heads: 2,
                d_head: 3,
                width: 6,
                time_dim: 4,
                text_len: 3,
                attention_mode: AttentionMode::Multiplicative,
            },
            image_size: 8,
            channels: 2,
            stages: vec![8, 4],
            capacity: 2,
            ..Self::default()
        }
    }

    /// Feature sizes of a common face-recognition backbone and a 77-token
    /// text encoder. Useful for shape arithmetic; far too large to train here.
    pub fn reference_scale() -> Self {
        let mut c = Self::default();
        c.model.d_k = 768;
        c.model.d_gf = 512;
        c.model.d_lf = 256;
        c.model.local_grid = 7;
        c.model.text_len = 77;
        c.image_size = 512;
        c.stages = vec![64, 32, 16, 8];
        c
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if self.capacity < 1 {
            return bad("capacity N must be at least 1".into());
        }
        if self.mask_margin.is_nan() || self.mask_margin < 0.0 {
            return bad(format!("mask margin must be >= 0, got {}", self.mask_margin));
        }
        if self.stages.is_empty() {
            return bad("at least one stage resolution is required".into());
        }
        for &s in &self.stages {
            if s == 0 || !self.image_size.is_multiple_of(s) {
                return bad(format!("stage {s} does not divide image size {}", self.image_size));
            }
        }
        for pair in self.stages.windows(2) {
            if pair[0] != 2 * pair[1] {
                return bad(format!("stages must halve: {:?}", self.stages));
            }
        }
        let m = &self.model;
        for (name, v) in [
            ("d_k", m.d_k),
            ("d_gf", m.d_gf),
            ("d_lf", m.d_lf),
            ("local_grid", m.local_grid),
            ("heads", m.heads),
            ("d_head", m.d_head),
            ("width", m.width),
            ("time_dim", m.time_dim),
            ("text_len", m.text_len),
            ("channels", self.channels),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if !m.time_dim.is_multiple_of(2) {
            return bad("time_dim must be even".into());
        }
        let s = &self.schedule;
        if s.t_max == 0 || !(s.beta_start > 0.0 && s.beta_end < 1.0 && s.beta_start <= s.beta_end) {
            return bad(format!("invalid schedule {s:?}"));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: Config = serde_json::from_str(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }
}
