//! Decoder-only transformer: weights, forward pass, traces and decoding.

mod config;
pub mod forward;
mod generate;
mod trace;
mod weights;

pub use config::ModelConfig;
pub use forward::{
    decode_scaled, embed_tokens, forward_cache, validate_tokens, forward_embedded, forward_resume, AttentionKnockout, Component,
    ForwardCache, Intervention, Patch,
};
pub use generate::generate_greedy;
pub use trace::{
    forward, forward_with, head_mix, per_head_output, project_concat, project_head, ActivationTrace, CaptureSpec,
};
pub use weights::{ArrayKind, GradientSet, LayerWeights, WeightSet, FORMAT_VERSION, WEIGHT_MAGIC};
pub(crate) use weights::{push_f32s, read_header, write_header, ByteReader};

#[cfg(test)]
pub(crate) mod test_support {
    use super::*;
    use crate::numerics::RngState;

    /// Micro model with larger-than-default init plus an 8-token input.
    pub fn random_model(seed: u64, std: f64) -> (WeightSet<f32>, Vec<u32>) {
        let cfg = ModelConfig::micro(17);
        let w = WeightSet::init(&cfg, seed, std).unwrap();
        let mut rng = RngState::new(seed ^ 0xABCD);
        let tokens = (0..8).map(|_| rng.below(cfg.vocab) as u32).collect();
        (w, tokens)
    }
}
