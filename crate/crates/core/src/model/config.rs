use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shape of the decoder-only transformer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TransformerConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    /// MLP intermediate width.
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
}

impl TransformerConfig {
    pub fn desk(vocab_size: usize) -> Self {
        TransformerConfig {
            n_layers: 4,
            d_model: 64,
            n_heads: 4,
            d_ff: 128,
            vocab_size,
            max_seq_len: 128,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
        ];
        for (name, v) in fields {
            if v == 0 {
                return Err(Error::Config {
                    field: format!("model.{name}"),
                    reason: "must be positive".into(),
                });
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config {
                field: "model.n_heads".into(),
                reason: format!("d_model {} not divisible by {} heads", self.d_model, self.n_heads),
            });
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Output units of all MLP down-projections.
    pub fn total_mlp_neurons(&self) -> usize {
        self.n_layers * self.d_model
    }
}
