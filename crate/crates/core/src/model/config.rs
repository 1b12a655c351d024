use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn d_model() -> usize {
    64
}
fn n_layers() -> usize {
    2
}
fn n_heads() -> usize {
    4
}
fn d_ff() -> usize {
    128
}
fn dropout() -> f64 {
    0.2
}
fn conv_layers() -> usize {
    2
}
fn conv_channels() -> usize {
    16
}
fn frame_dim() -> usize {
    16
}
fn vocab_size() -> usize {
    20
}
fn max_len() -> usize {
    64
}

/// Architecture of the encoder-decoder. Defaults are desk scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default = "d_model")]
    pub d_model: usize,
    #[serde(default = "n_layers")]
    pub n_enc: usize,
    #[serde(default = "n_layers")]
    pub n_dec: usize,
    #[serde(default = "n_heads")]
    pub n_heads: usize,
    #[serde(default = "d_ff")]
    pub d_ff: usize,
    /// Applied to each sublayer output before the residual add.
    #[serde(default = "dropout")]
    pub dropout: f64,
    /// Stride-2 convolutions in the frame compression stack.
    #[serde(default = "conv_layers")]
    pub conv_layers: usize,
    #[serde(default = "conv_channels")]
    pub conv_channels: usize,
    /// ReLU after each convolution.
    #[serde(default = "yes")]
    pub conv_relu: bool,
    #[serde(default = "frame_dim")]
    pub frame_dim: usize,
    #[serde(default = "vocab_size")]
    pub vocab_size: usize,
    /// Longest target (including EOS) and longest post-compression source.
    #[serde(default = "max_len")]
    pub max_len: usize,
    /// Share the decoder embedding with the output projection.
    #[serde(default)]
    pub tie_embeddings: bool,
}

fn yes() -> bool {
    true
}

impl Default for ModelConfig {
    fn default() -> Self {
        toml::from_str("").expect("all fields have defaults")
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |f: &str, m: String| Err(Error::config(format!("model.{f}"), m));
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return bad("n_heads", format!("d_model {} must be a positive multiple of n_heads {}", self.d_model, self.n_heads));
        }
        if self.d_ff == 0 {
            return bad("d_ff", "must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout", "must be in [0, 1)".into());
        }
        if self.conv_layers > 0 && self.conv_channels == 0 {
            return bad("conv_channels", "must be at least 1".into());
        }
        if self.frame_dim == 0 {
            return bad("frame_dim", "must be at least 1".into());
        }
        if self.vocab_size <= crate::vocab::NUM_SPECIALS {
            return bad("vocab_size", "must exceed the 4 special tokens".into());
        }
        if self.max_len == 0 {
            return bad("max_len", "must be at least 1".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Frequency extent after the compression stack.
    pub fn compressed_freq(&self) -> usize {
        (0..self.conv_layers).fold(self.frame_dim, |f, _| f.div_ceil(2))
    }

    /// Time extent after the compression stack.
    pub fn compressed_len(&self, frames: usize) -> usize {
        (0..self.conv_layers).fold(frames, |t, _| t.div_ceil(2))
    }

    /// Channel count feeding the projection into the encoder.
    pub fn compressed_channels(&self) -> usize {
        if self.conv_layers == 0 {
            1
        } else {
            self.conv_channels
        }
    }
}
