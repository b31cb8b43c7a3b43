use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dilation rates of the four bottleneck branches.
pub const DILATION_RATES: [usize; 4] = [1, 2, 4, 8];

/// Number of encoder (and decoder) levels.
pub const LEVELS: usize = 4;

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub num_classes: usize,
    /// Filters of the two convolutions in each encoder level, shallow to deep.
    pub base_filters: Vec<usize>,
    pub bottleneck_filters: usize,
    pub dilation_rates: Vec<usize>,
    /// Square input extent; must survive four 2x poolings.
    pub input_size: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    /// CPU-friendly preset on 96 x 96 slices.
    pub fn desk() -> Self {
        Self {
            in_channels: 1,
            num_classes: 4,
            base_filters: vec![16, 32, 64, 128],
            bottleneck_filters: 256,
            dilation_rates: DILATION_RATES.to_vec(),
            input_size: 96,
        }
    }

    /// Wider preset on 224 x 224 slices.
    pub fn paper() -> Self {
        Self {
            base_filters: vec![32, 64, 128, 256],
            bottleneck_filters: 512,
            input_size: 224,
            ..Self::desk()
        }
    }

    pub fn with_input_size(mut self, size: usize) -> Self {
        self.input_size = size;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_filters.len() != LEVELS {
            return Err(Error::config(format!(
                "the network has exactly {LEVELS} encoder levels, got {} filter counts",
                self.base_filters.len()
            )));
        }
        if self.dilation_rates != DILATION_RATES {
            return Err(Error::config(format!(
                "bottleneck dilation rates must be {DILATION_RATES:?}, got {:?}",
                self.dilation_rates
            )));
        }
        if self.in_channels == 0 || self.bottleneck_filters == 0 || self.base_filters.contains(&0) {
            return Err(Error::config("channel and filter counts must be positive"));
        }
        if self.num_classes < 2 {
            return Err(Error::config(format!(
                "need at least 2 classes, got {}",
                self.num_classes
            )));
        }
        if self.input_size == 0 || !self.input_size.is_multiple_of(16) {
            return Err(Error::config(format!(
                "input size must be a positive multiple of 16, got {}",
                self.input_size
            )));
        }
        Ok(())
    }

    /// Channels entering encoder level `level` (0-based).
    pub fn encoder_in_channels(&self, level: usize) -> usize {
        (0..level).fold(self.in_channels, |c, l| c + self.base_filters[l])
    }

    /// Channels of the skip features of encoder level `level`: input ++ block output.
    pub fn skip_channels(&self, level: usize) -> usize {
        self.encoder_in_channels(level) + self.base_filters[level]
    }

    /// Channels arriving from below at decoder level `level`, before upsampling.
    pub fn decoder_up_channels(&self, level: usize) -> usize {
        if level + 1 == LEVELS {
            self.bottleneck_filters
        } else {
            self.base_filters[level + 1]
        }
    }

    /// Canonical `key = value` text of this configuration.
    pub fn to_canonical_text(&self) -> String {
        toml::to_string(self).expect("model config serializes")
    }

    pub fn from_canonical_text(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}
