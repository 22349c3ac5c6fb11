use crate::error::{Error, Result};
use crate::model::forward::{forward_cache, ForwardCache, Intervention};
use crate::model::{ModelConfig, WeightSet};
use crate::numerics::{axpy, linear, Real};

/// What to keep from a forward pass beyond the residual contributions.
#[derive(Clone, Debug, PartialEq)]
pub struct CaptureSpec {
    /// Query positions whose attention rows are kept; `None` means the last position.
    pub queries: Option<Vec<usize>>,
    pub values: bool,
}

impl Default for CaptureSpec {
    fn default() -> Self {
        Self { queries: None, values: true }
    }
}

impl CaptureSpec {
    pub fn last_only() -> Self {
        Self::default()
    }

    pub fn all_positions(seq_len: usize) -> Self {
        Self { queries: Some((0..seq_len).collect()), values: true }
    }
}

/// Per-layer, per-position record of one forward pass.
///
/// `attn_out[l]` and `mlp_out[l]` are the additive contributions `a^(l)` and
/// `m^(l)` of layer `l` to the residual stream; all per-position arrays are
/// row-major `[seq_len × d_model]`.
#[derive(Clone, Debug)]
pub struct ActivationTrace<F = f32> {
    pub config: ModelConfig,
    pub tokens: Vec<u32>,
    pub resid_pre: Vec<Vec<F>>,
    pub attn_out: Vec<Vec<F>>,
    pub mlp_out: Vec<Vec<F>>,
    pub final_resid: Vec<F>,
    /// Logits at the last position.
    pub logits: Vec<F>,
    /// Query positions with captured attention rows.
    pub queries: Vec<usize>,
    /// `[n_layers × n_heads × queries × seq_len]`
    attn_rows: Vec<F>,
    /// Per layer `[seq_len × n_heads·d_head]`, present when captured.
    values: Option<Vec<Vec<F>>>,
}

impl<F: Real> ActivationTrace<F> {
    pub fn from_cache(cache: &ForwardCache<F>, config: &ModelConfig, capture: &CaptureSpec) -> Result<Self> {
        let t = cache.seq_len;
        let queries = capture.queries.clone().unwrap_or_else(|| vec![t - 1]);
        if let Some(&q) = queries.iter().find(|&&q| q >= t) {
            return Err(Error::SpanOutOfRange { index: q, len: t });
        }
        let nh = config.n_heads;
        let mut attn_rows = Vec::with_capacity(config.n_layers * nh * queries.len() * t);
        for lc in &cache.layers {
            for h in 0..nh {
                for &q in &queries {
                    let base = (h * t + q) * t;
                    attn_rows.extend_from_slice(&lc.probs[base..base + t]);
                }
            }
        }
        Ok(Self {
            config: config.clone(),
            tokens: cache.tokens.clone(),
            resid_pre: cache.layers.iter().map(|l| l.x_in.clone()).collect(),
            attn_out: cache.layers.iter().map(|l| l.attn_out.clone()).collect(),
            mlp_out: cache.layers.iter().map(|l| l.mlp_out.clone()).collect(),
            final_resid: cache.x_final.clone(),
            logits: cache.last_logits(config.vocab).to_vec(),
            queries,
            attn_rows,
            values: capture.values.then(|| cache.layers.iter().map(|l| l.v.clone()).collect()),
        })
    }

    pub fn seq_len(&self) -> usize {
        self.tokens.len()
    }

    pub fn last(&self) -> usize {
        self.tokens.len() - 1
    }

    fn d(&self) -> usize {
        self.config.d_model
    }

    fn row(xs: &[F], pos: usize, d: usize) -> &[F] {
        &xs[pos * d..(pos + 1) * d]
    }

    pub fn attn_out_at(&self, layer: usize, pos: usize) -> &[F] {
        Self::row(&self.attn_out[layer], pos, self.d())
    }

    pub fn mlp_out_at(&self, layer: usize, pos: usize) -> &[F] {
        Self::row(&self.mlp_out[layer], pos, self.d())
    }

    pub fn resid_pre_at(&self, layer: usize, pos: usize) -> &[F] {
        Self::row(&self.resid_pre[layer], pos, self.d())
    }

    pub fn final_resid_at(&self, pos: usize) -> &[F] {
        Self::row(&self.final_resid, pos, self.d())
    }

    /// Embedding row entering layer 0.
    pub fn embedded_at(&self, pos: usize) -> &[F] {
        self.resid_pre_at(0, pos)
    }

    /// Residual after layer `layer` at `pos`.
    pub fn resid_post_at(&self, layer: usize, pos: usize) -> &[F] {
        if layer + 1 < self.config.n_layers {
            self.resid_pre_at(layer + 1, pos)
        } else {
            self.final_resid_at(pos)
        }
    }

    /// Attention weights from query `query` over all key positions.
    pub fn attn_row(&self, layer: usize, head: usize, query: usize) -> Result<&[F]> {
        let qi = self
            .queries
            .iter()
            .position(|&q| q == query)
            .ok_or_else(|| Error::CaptureMiss(format!("attention row for query {query}")))?;
        if layer >= self.config.n_layers || head >= self.config.n_heads {
            return Err(Error::CaptureMiss(format!("layer {layer} head {head}")));
        }
        let t = self.seq_len();
        let base = ((layer * self.config.n_heads + head) * self.queries.len() + qi) * t;
        Ok(&self.attn_rows[base..base + t])
    }

    /// Value vector of `head` at key position `pos`.
    pub fn value(&self, layer: usize, head: usize, pos: usize) -> Result<&[F]> {
        let values = self.values.as_ref().ok_or_else(|| Error::CaptureMiss("value vectors".into()))?;
        let dh = self.config.d_head;
        let d = self.d();
        let lv = values.get(layer).ok_or_else(|| Error::CaptureMiss(format!("layer {layer}")))?;
        if pos >= self.seq_len() {
            return Err(Error::SpanOutOfRange { index: pos, len: self.seq_len() });
        }
        Ok(&lv[pos * d + head * dh..pos * d + (head + 1) * dh])
    }

    pub fn has_values(&self) -> bool {
        self.values.is_some()
    }

    /// Test hook: overwrite one captured attention row.
    #[doc(hidden)]
    pub fn set_attn_row(&mut self, layer: usize, head: usize, query: usize, row: &[F]) -> Result<()> {
        let qi = self
            .queries
            .iter()
            .position(|&q| q == query)
            .ok_or_else(|| Error::CaptureMiss(format!("attention row for query {query}")))?;
        let t = self.seq_len();
        let base = ((layer * self.config.n_heads + head) * self.queries.len() + qi) * t;
        self.attn_rows[base..base + t].copy_from_slice(row);
        Ok(())
    }
}

/// Runs the model and returns the last-position logits with a trace.
pub fn forward<F: Real>(
    weights: &WeightSet<F>,
    tokens: &[u32],
    capture: &CaptureSpec,
) -> Result<(Vec<F>, ActivationTrace<F>)> {
    forward_with(weights, tokens, capture, &Intervention::none())
}

pub fn forward_with<F: Real>(
    weights: &WeightSet<F>,
    tokens: &[u32],
    capture: &CaptureSpec,
    intervention: &Intervention<F>,
) -> Result<(Vec<F>, ActivationTrace<F>)> {
    let cache = forward_cache(weights, tokens, intervention)?;
    let trace = ActivationTrace::from_cache(&cache, &weights.config, capture)?;
    Ok((trace.logits.clone(), trace))
}

/// Weighted value sum of one head at query `position`, before the output projection.
pub fn head_mix<F: Real>(trace: &ActivationTrace<F>, layer: usize, head: usize, position: usize) -> Result<Vec<F>> {
    let row = trace.attn_row(layer, head, position)?;
    let mut out = vec![F::zero(); trace.config.d_head];
    for (j, &p) in row.iter().enumerate().take(position + 1) {
        axpy(p, trace.value(layer, head, j)?, &mut out);
    }
    Ok(out)
}

/// Applies head `head`'s column block of `W_o^(layer)` to a `d_head` vector.
pub fn project_head<F: Real>(weights: &WeightSet<F>, layer: usize, head: usize, mix: &[F]) -> Vec<F> {
    let cfg = &weights.config;
    let (d, dh) = (cfg.d_model, cfg.d_head);
    let width = cfg.n_heads * dh;
    let wo = weights.layers[layer].wo.data();
    (0..d)
        .map(|o| {
            let block = &wo[o * width + head * dh..o * width + (head + 1) * dh];
            crate::numerics::dot(block, mix)
        })
        .collect()
}

/// Head `head`'s contribution to `a^(layer)` at `position`. Summing over heads
/// reproduces the layer's attention output because there is no bias.
pub fn per_head_output<F: Real>(
    trace: &ActivationTrace<F>,
    weights: &WeightSet<F>,
    layer: usize,
    head: usize,
    position: usize,
) -> Result<Vec<F>> {
    let mix = head_mix(trace, layer, head, position)?;
    Ok(project_head(weights, layer, head, &mix))
}

/// `W_o^(layer) · concat(mixes)`
pub fn project_concat<F: Real>(weights: &WeightSet<F>, layer: usize, concat: &[F]) -> Vec<F> {
    let cfg = &weights.config;
    linear(concat, weights.layers[layer].wo.data(), cfg.d_model, cfg.n_heads * cfg.d_head)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::test_support::random_model;

    #[test]
    fn single_token_attends_to_itself() {
        let (w, _) = random_model(1, 0.4);
        let (_, trace) = forward(&w, &[3], &CaptureSpec::default()).unwrap();
        for l in 0..w.config.n_layers {
            for h in 0..w.config.n_heads {
                assert_eq!(trace.attn_row(l, h, 0).unwrap(), &[1.0]);
            }
        }
    }

    #[test]
    fn capture_miss() {
        let (w, tokens) = random_model(2, 0.4);
        let (_, trace) = forward(&w, &tokens, &CaptureSpec { queries: None, values: false }).unwrap();
        assert!(matches!(per_head_output(&trace, &w, 0, 0, trace.last()), Err(Error::CaptureMiss(_))));
        let (_, trace) = forward(&w, &tokens, &CaptureSpec::default()).unwrap();
        assert!(matches!(per_head_output(&trace, &w, 0, 0, 0), Err(Error::CaptureMiss(_))));
    }

    #[test]
    fn zeroed_head_block_gives_zero() {
        let (mut w, tokens) = random_model(3, 0.4);
        let cfg = w.config.clone();
        let width = cfg.n_heads * cfg.d_head;
        let wo = w.layers[1].wo.data_mut();
        for o in 0..cfg.d_model {
            for c in cfg.d_head..2 * cfg.d_head {
                wo[o * width + c] = 0.0;
            }
        }
        let (_, trace) = forward(&w, &tokens, &CaptureSpec::default()).unwrap();
        let out = per_head_output(&trace, &w, 1, 1, trace.last()).unwrap();
        assert!(out.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn single_head_equals_layer_output() {
        let mut cfg = ModelConfig::micro(13);
        cfg.n_heads = 1;
        cfg.d_head = cfg.d_model;
        let w = WeightSet::<f32>::init(&cfg, 5, 0.4).unwrap();
        let tokens = [1, 4, 7, 2, 9];
        let (_, trace) = forward(&w, &tokens, &CaptureSpec::default()).unwrap();
        for l in 0..cfg.n_layers {
            let out = per_head_output(&trace, &w, l, 0, 4).unwrap();
            assert_eq!(out.as_slice(), trace.attn_out_at(l, 4));
        }
    }
}
