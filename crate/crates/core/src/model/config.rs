use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shape of the decoder-only transformer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub context_len: usize,
    pub seed: u64,
}

impl ModelConfig {
    /// Reference model: 8 layers, width 64, 4 heads.
    pub fn reference(vocab_size: usize, context_len: usize, seed: u64) -> Self {
        ModelConfig {
            vocab_size,
            d_model: 64,
            n_layers: 8,
            n_heads: 4,
            d_ff: 128,
            context_len,
            seed,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("context_len", self.context_len),
        ];
        for (name, value) in positive {
            if value == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !self.head_dim().is_multiple_of(2) {
            return Err(Error::Config(format!(
                "head dimension {} must be even for rotary embeddings",
                self.head_dim()
            )));
        }
        if self.vocab_size > u16::MAX as usize + 1 {
            return Err(Error::Config("vocab_size must fit in 16 bits".into()));
        }
        if self.n_layers > u8::MAX as usize + 1 {
            return Err(Error::Config("n_layers must fit in 8 bits".into()));
        }
        Ok(())
    }
}

/// Optimizer and schedule settings for [`crate::model::train`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub warmup_steps: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 3e-3,
            batch_size: 32,
            steps: 1500,
            warmup_steps: 100,
            beta1: 0.9,
            beta2: 0.98,
            weight_decay: 0.01,
            grad_clip: 1.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate > 0.0
            && self.batch_size > 0
            && self.beta1 > 0.0
            && self.beta1 < 1.0
            && self.beta2 > 0.0
            && self.beta2 < 1.0
            && self.weight_decay >= 0.0
            && self.grad_clip > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid training config: {self:?}")))
        }
    }
}
