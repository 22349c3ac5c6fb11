use crate::error::{Error, Result};
use crate::model::forward::{forward_cache, Intervention};
use crate::model::WeightSet;
use crate::numerics::{argmax, Real};

/// Greedy decoding: appends the argmax token (lowest id on ties) until a stop
/// token or `max_new` tokens. The stop token itself is not returned.
///
/// Running out of context before finishing yields [`Error::ContextOverflow`]
/// carrying the tokens generated so far.
pub fn generate_greedy<F: Real>(
    weights: &WeightSet<F>,
    prompt: &[u32],
    max_new: usize,
    stop: &[u32],
) -> Result<Vec<u32>> {
    let ctx = weights.config.ctx;
    let vocab = weights.config.vocab;
    let mut seq = prompt.to_vec();
    let mut out = Vec::new();
    for _ in 0..max_new {
        if seq.len() > ctx {
            return Err(Error::ContextOverflow { partial: out });
        }
        let cache = forward_cache(weights, &seq, &Intervention::none())?;
        let next = argmax(cache.last_logits(vocab)) as u32;
        if stop.contains(&next) {
            break;
        }
        seq.push(next);
        out.push(next);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, WeightSet};

    /// Layers contribute nothing (zero W_o and down projection); embeddings are
    /// one-hot, so logits at the last position are `sqrt(d) · U[:, last]`.
    fn successor_model(next: &[(u32, u32)], vocab: usize) -> WeightSet<f32> {
        let mut cfg = ModelConfig::micro(vocab);
        cfg.d_model = 16;
        cfg.d_head = 8;
        cfg.eps = 0.0;
        cfg.ctx = 8;
        let mut w = WeightSet::<f32>::init(&cfg, 1, 0.3).unwrap();
        for l in &mut w.layers {
            l.wo.data_mut().fill(0.0);
            l.w_down.data_mut().fill(0.0);
        }
        w.embed.data_mut().fill(0.0);
        w.unembed.data_mut().fill(0.0);
        w.final_norm.data_mut().fill(1.0);
        for t in 0..vocab {
            w.embed.row_mut(t)[t] = 1.0;
        }
        for &(from, to) in next {
            w.unembed.row_mut(to as usize)[from as usize] = 1.0;
        }
        w
    }

    #[test]
    fn follows_constructed_chain() {
        let w = successor_model(&[(1, 7), (7, 3), (3, 15)], 16);
        assert_eq!(generate_greedy(&w, &[1], 6, &[15]).unwrap(), vec![7, 3]);
    }

    #[test]
    fn tie_goes_to_lowest_id() {
        let w = successor_model(&[(2, 4), (2, 9)], 16);
        assert_eq!(generate_greedy(&w, &[2], 1, &[]).unwrap(), vec![4]);
    }

    #[test]
    fn zero_budget() {
        let w = successor_model(&[(1, 7)], 16);
        assert!(generate_greedy(&w, &[1], 0, &[]).unwrap().is_empty());
    }

    #[test]
    fn overflow_keeps_partial() {
        // 1 -> 2 -> 1 -> ... never stops; ctx is 8.
        let w = successor_model(&[(1, 2), (2, 1)], 16);
        match generate_greedy(&w, &[1, 2, 1, 2, 1, 2], 10, &[15]) {
            Err(Error::ContextOverflow { partial }) => assert_eq!(partial, vec![1, 2, 1]),
            other => panic!("unexpected {other:?}"),
        }
    }
}
