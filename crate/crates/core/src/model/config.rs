use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shape of the layered encoder. Layer indices are 1-based throughout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub n_layers: usize,
    pub hidden_dim: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    /// Embeddings plus this many bottom layers are never updated.
    pub n_frozen: usize,
    pub vocab_size: usize,
    pub max_positions: usize,
    pub dropout: f64,
    pub init_std: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            n_layers: 4,
            hidden_dim: 64,
            n_heads: 4,
            ffn_dim: 128,
            n_frozen: 1,
            vocab_size: 0,
            max_positions: 128,
            dropout: 0.1,
            init_std: 0.02,
        }
    }
}

impl EncoderConfig {
    /// Shape of a 12-layer multilingual encoder with three frozen layers.
    pub fn full_scale(vocab_size: usize) -> Self {
        EncoderConfig {
            n_layers: 12,
            hidden_dim: 768,
            n_heads: 12,
            ffn_dim: 3072,
            n_frozen: 3,
            vocab_size,
            max_positions: 512,
            dropout: 0.1,
            init_std: 0.02,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.n_layers == 0 {
            return fail("encoder needs at least one layer".into());
        }
        if self.n_frozen >= self.n_layers {
            return fail(format!(
                "n_frozen ({}) must be smaller than n_layers ({})",
                self.n_frozen, self.n_layers
            ));
        }
        if self.n_heads == 0 || !self.hidden_dim.is_multiple_of(self.n_heads) {
            return fail(format!(
                "hidden_dim {} not divisible by n_heads {}",
                self.hidden_dim, self.n_heads
            ));
        }
        if self.vocab_size == 0 || self.ffn_dim == 0 || self.max_positions < 3 {
            return fail("vocab_size, ffn_dim and max_positions must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout must be in [0, 1), got {}", self.dropout));
        }
        if !(self.init_std.is_finite() && self.init_std > 0.0) {
            return fail(format!("init_std must be positive, got {}", self.init_std));
        }
        Ok(())
    }

    /// Layers carrying a channel terminal: `n_frozen + 1 ..= n_layers`.
    pub fn active_channels(&self) -> Vec<usize> {
        (self.n_frozen + 1..=self.n_layers).collect()
    }

    /// Active channels except the main (top) one.
    pub fn aux_channels(&self) -> Vec<usize> {
        (self.n_frozen + 1..self.n_layers).collect()
    }

    pub fn main_channel(&self) -> usize {
        self.n_layers
    }
}
