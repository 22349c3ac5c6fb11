use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture hyperparameters of the decoder-only model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_head: usize,
    pub d_mlp: usize,
    pub vocab: usize,
    pub ctx: usize,
    pub eps: f32,
    pub rope_base: f32,
}

impl ModelConfig {
    /// The desk-scale default: 8 layers of 4 heads over a 64-wide residual.
    pub fn toy(vocab: usize) -> Self {
        Self {
            n_layers: 8,
            n_heads: 4,
            d_model: 64,
            d_head: 16,
            d_mlp: 256,
            vocab,
            ctx: 64,
            eps: 1e-5,
            rope_base: 10_000.0,
        }
    }

    /// Tiny configuration used for finite-difference gradient checks.
    pub fn micro(vocab: usize) -> Self {
        Self {
            n_layers: 2,
            n_heads: 2,
            d_model: 8,
            d_head: 4,
            d_mlp: 16,
            vocab,
            ctx: 16,
            eps: 1e-5,
            rope_base: 10_000.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let extents = [
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_model", self.d_model),
            ("d_head", self.d_head),
            ("d_mlp", self.d_mlp),
            ("vocab", self.vocab),
            ("ctx", self.ctx),
        ];
        if let Some((name, _)) = extents.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        if self.d_model != self.n_heads * self.d_head {
            return Err(Error::Config(format!(
                "d_model {} != n_heads {} * d_head {}",
                self.d_model, self.n_heads, self.d_head
            )));
        }
        if !self.d_head.is_multiple_of(2) {
            return Err(Error::Config("rotary encoding needs an even d_head".into()));
        }
        if !(self.eps >= 0.0 && self.eps.is_finite()) {
            return Err(Error::Config("eps must be finite and non-negative".into()));
        }
        if !(self.rope_base > 1.0 && self.rope_base.is_finite()) {
            return Err(Error::Config("rope_base must exceed 1".into()));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        let d = self.d_model;
        let per_layer = 2 * d + 4 * d * d + 3 * d * self.d_mlp;
        2 * self.vocab * d + d + self.n_layers * per_layer
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_is_valid() {
        let c = ModelConfig::toy(512);
        c.validate().unwrap();
        assert_eq!(c.d_model, c.n_heads * c.d_head);
    }

    #[test]
    fn head_width_mismatch() {
        let mut c = ModelConfig::toy(10);
        c.d_head = 15;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }
}
