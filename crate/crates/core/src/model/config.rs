use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Number of pyramid stages.
pub const STAGES: usize = 4;
/// Spatial stride of each pyramid stage relative to the input frame.
pub const STRIDES: [usize; STAGES] = [4, 8, 16, 32];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMode {
    Stochastic,
    TopK,
}

/// How many past frames the memory selector keeps. `x` counts global
/// (older) frames and `y` counts local (recent) ones.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectionConfig {
    pub z: usize,
    pub x: usize,
    pub y: usize,
    pub local_window: usize,
    pub mode: SelectionMode,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self {
            z: 6,
            x: 3,
            y: 3,
            local_window: 6,
            mode: SelectionMode::TopK,
        }
    }
}

impl SelectionConfig {
    /// The plain "most recent frames" baseline: no global frames, `z` local.
    pub fn recent_only(z: usize) -> Self {
        Self {
            z,
            x: 0,
            y: z,
            local_window: z,
            mode: SelectionMode::TopK,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.x + self.y != self.z {
            return Err(Error::Config(format!(
                "selection counts x={} and y={} must add up to z={}",
                self.x, self.y, self.z
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Channel width of each pyramid stage.
    pub channels: [usize; STAGES],
    /// Frames consumed by the temporal branch per step.
    pub window: usize,
    pub c_mem: usize,
    /// Decoder token width.
    pub d: usize,
    pub heads: usize,
    pub memory_blocks: usize,
    pub decoder_blocks: usize,
    /// Memory prompt tokens; zero disables the generator.
    pub memory_tokens: usize,
    pub masked_cross_attention: bool,
    /// Adds projected stage 1-3 integrated features to the decoder's
    /// upsampling path.
    pub high_res_features: bool,
    pub selection: SelectionConfig,
    /// Capacity of the rolling memory.
    pub p_cap: usize,
    pub rope_theta: f64,
    pub mask_threshold: f64,
    /// Seed for parameter initialisation.
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            channels: [32, 64, 128, 256],
            window: 4,
            c_mem: 64,
            d: 128,
            heads: 4,
            memory_blocks: 4,
            decoder_blocks: 2,
            memory_tokens: 3,
            masked_cross_attention: true,
            high_res_features: false,
            selection: SelectionConfig::default(),
            p_cap: 20,
            rope_theta: 100.0,
            mask_threshold: 0.5,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    /// Narrow variant sized for CPU training runs. At 64x64 the last stage
    /// is a 2x2 grid, so it decodes with the high-resolution path.
    pub fn desk() -> Self {
        Self {
            channels: [8, 16, 32, 64],
            c_mem: 16,
            d: 32,
            heads: 2,
            high_res_features: true,
            ..Self::default()
        }
    }

    pub fn c_last(&self) -> usize {
        self.channels[STAGES - 1]
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.channels.windows(2).any(|w| w[0] >= w[1]) || self.channels[0] == 0 {
            return bad(format!("stage channels {:?} must be positive and strictly increasing", self.channels));
        }
        if self.window == 0 {
            return bad("temporal window must be at least 1".into());
        }
        let c_last = self.c_last();
        if self.c_mem == 0 || !c_last.is_multiple_of(self.c_mem) {
            return bad(format!("c_mem={} must divide the last stage width {c_last}", self.c_mem));
        }
        if self.heads == 0 || !c_last.is_multiple_of(self.heads) || !(c_last / self.heads).is_multiple_of(4) {
            return bad(format!(
                "last stage width {c_last} must split into {} heads of a multiple of 4",
                self.heads
            ));
        }
        if !self.d.is_multiple_of(8) || !self.d.is_multiple_of(self.heads) || !(self.d / 2).is_multiple_of(self.heads) {
            return bad(format!("decoder width {} must be a multiple of 8 and of 2x{} heads", self.d, self.heads));
        }
        if self.p_cap == 0 {
            return bad("memory capacity must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.mask_threshold) {
            return bad(format!("mask threshold {} outside [0, 1)", self.mask_threshold));
        }
        self.selection.validate()
    }
}
