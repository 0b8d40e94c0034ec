//! Decoder model configuration shared by every backend.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ConfigError {
    #[error("{0} must be at least 1")]
    ZeroDimension(&'static str),
    #[error("model dim {d_model} is not divisible by {heads} heads")]
    HeadsDontDivide { d_model: usize, heads: usize },
}

/// Dimensions of a decoder backend and its input layout.
///
/// The input sequence is the image-token block of length `image_tokens`
/// followed by `prompt_len` text tokens; generation appends up to
/// `max_new` tokens.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Transformer layer count `L` (layers are 1-based everywhere).
    pub layers: usize,
    /// Attention head count `H`.
    pub heads: usize,
    /// Model width.
    pub d_model: usize,
    /// Closed vocabulary size.
    pub vocab_size: usize,
    /// Image-token count `N` (contiguous prefix of the input).
    pub image_tokens: usize,
    /// Text prompt length `M`.
    pub prompt_len: usize,
    /// Generation budget `G`.
    pub max_new: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        for (name, v) in [
            ("layers", self.layers),
            ("heads", self.heads),
            ("d_model", self.d_model),
            ("vocab_size", self.vocab_size),
            ("image_tokens", self.image_tokens),
            ("max_new", self.max_new.max(1)),
        ] {
            if v == 0 {
                return Err(ConfigError::ZeroDimension(name));
            }
        }
        if self.d_model % self.heads != 0 {
            return Err(ConfigError::HeadsDontDivide {
                d_model: self.d_model,
                heads: self.heads,
            });
        }
        Ok(())
    }

    /// Per-head width `d_h = d_model / heads`.
    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    /// Longest supported sequence: image block + prompt + generation budget.
    pub fn max_seq(&self) -> usize {
        self.image_tokens + self.prompt_len + self.max_new
    }

    pub fn input_len(&self) -> usize {
        self.image_tokens + self.prompt_len
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base() -> ModelConfig {
        ModelConfig {
            layers: 4,
            heads: 2,
            d_model: 32,
            vocab_size: 64,
            image_tokens: 16,
            prompt_len: 6,
            max_new: 24,
        }
    }

    #[test]
    fn valid_config_passes() {
        assert!(base().validate().is_ok());
        assert_eq!(base().head_dim(), 16);
        assert_eq!(base().max_seq(), 46);
    }

    #[test]
    fn heads_must_divide() {
        let mut c = base();
        c.heads = 3;
        assert_eq!(
            c.validate(),
            Err(ConfigError::HeadsDontDivide {
                d_model: 32,
                heads: 3
            })
        );
    }

    #[test]
    fn zero_dims_rejected() {
        let mut c = base();
        c.layers = 0;
        assert!(c.validate().is_err());
    }
}
