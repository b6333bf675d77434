use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Scale knobs for the Inception-ResNet-v2 builder.
///
/// `ModelConfig::canonical()` is the full-size network; `ModelConfig::desk()`
/// is the reduced variant used for fast end-to-end runs on a laptop CPU.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Square input extent in pixels.
    pub input_size: usize,
    pub input_channels: usize,
    pub num_classes: usize,
    /// Multiplies every filter count (rounded up, at least 1).
    pub width_multiplier: f64,
    /// Repetitions of the Inception-ResNet-A, -B and -C blocks.
    pub block_counts: [usize; 3],
    pub residual_scale: f64,
    pub dropout_rate: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::canonical()
    }
}

impl ModelConfig {
    /// Full-size network with the binary Normal/Pneumonia head.
    pub fn canonical() -> Self {
        Self {
            input_size: 299,
            input_channels: 3,
            num_classes: 2,
            width_multiplier: 1.0,
            block_counts: [5, 10, 5],
            residual_scale: 0.2,
            dropout_rate: 0.2,
            seed: 0,
        }
    }

    /// 75×75 input, 1/8 width, one A, two B and one C block.
    pub fn desk() -> Self {
        Self {
            input_size: 75,
            width_multiplier: 0.125,
            block_counts: [1, 2, 1],
            ..Self::canonical()
        }
    }

    /// Filter count after width scaling.
    pub fn filters(&self, base: usize) -> usize {
        ((base as f64 * self.width_multiplier).ceil() as usize).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.input_size == 0 || self.input_channels == 0 {
            return fail("input_size and input_channels must be >= 1".into());
        }
        if self.num_classes < 2 {
            return fail(format!("num_classes must be >= 2, got {}", self.num_classes));
        }
        if !(self.width_multiplier > 0.0 && self.width_multiplier <= 1.0) {
            return fail(format!(
                "width_multiplier must lie in (0, 1], got {}",
                self.width_multiplier
            ));
        }
        if !(self.residual_scale > 0.0 && self.residual_scale <= 1.0) {
            return fail(format!(
                "residual_scale must lie in (0, 1], got {}",
                self.residual_scale
            ));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return fail(format!("dropout_rate must lie in [0, 1), got {}", self.dropout_rate));
        }
        Ok(())
    }
}
