//! Attention knockout and causal tracing.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lens::{early_decode, LayerLogitSeries, TokenSpanSet, TrackedToken, ValueKind};
use crate::model::{
    embed_tokens, forward_embedded, forward_resume, forward_with, validate_tokens,
    ActivationTrace, AttentionKnockout, CaptureSpec, Component, ForwardCache, Intervention, Patch, WeightSet,
};
use crate::numerics::{gaussian_draw, softmax, RngState};

/// Keys whose post-softmax attention weight from `query` is zeroed.
#[derive(Clone, Debug, PartialEq)]
pub struct KnockoutSpec {
    pub span: TokenSpanSet,
    /// `None` means every layer.
    pub layers: Option<Vec<usize>>,
    /// `None` means the last position.
    pub query: Option<usize>,
    pub renormalize: bool,
}

impl KnockoutSpec {
    pub fn new(span: TokenSpanSet) -> Self {
        Self { span, layers: None, query: None, renormalize: false }
    }

    fn resolve(&self, n_layers: usize, seq_len: usize) -> Result<AttentionKnockout> {
        self.span.check(seq_len)?;
        let query = self.query.unwrap_or(seq_len - 1);
        if query >= seq_len {
            return Err(Error::SpanOutOfRange { index: query, len: seq_len });
        }
        let layers = self.layers.clone().unwrap_or_else(|| (0..n_layers).collect());
        if let Some(&l) = layers.iter().find(|&&l| l >= n_layers) {
            return Err(Error::Shape(format!("knockout layer {l} beyond {n_layers} layers")));
        }
        Ok(AttentionKnockout {
            keys: self.span.indices().to_vec(),
            layers,
            query,
            renormalize: self.renormalize,
        })
    }
}

pub fn knockout_forward(
    weights: &WeightSet<f32>,
    tokens: &[u32],
    spec: &KnockoutSpec,
    capture: &CaptureSpec,
) -> Result<ActivationTrace> {
    if tokens.is_empty() {
        return Err(Error::Shape("empty token sequence".into()));
    }
    let knockout = spec.resolve(weights.config.n_layers, tokens.len())?;
    let iv = Intervention { knockout: Some(knockout), patches: Vec::new() };
    Ok(forward_with(weights, tokens, capture, &iv)?.1)
}

/// Per-layer `early_decode(m) − early_decode(m′)` at the last position, where
/// each MLP output is scaled by its own run's final residual.
pub fn mlp_logit_diff(
    clean: &ActivationTrace,
    knocked: &ActivationTrace,
    weights: &WeightSet<f32>,
    tracked: &[TrackedToken],
) -> Result<LayerLogitSeries> {
    if clean.tokens != knocked.tokens {
        return Err(Error::Incompatible("traces were run on different tokens".into()));
    }
    if clean.config != knocked.config || clean.config != weights.config {
        return Err(Error::Incompatible("traces come from different model configs".into()));
    }
    if let Some(t) = tracked.iter().find(|t| t.id as usize >= weights.config.vocab) {
        return Err(Error::TokenOutOfRange { id: t.id, vocab: weights.config.vocab });
    }
    let last = clean.last();
    let (fc, fk) = (clean.final_resid_at(last), knocked.final_resid_at(last));
    let n_layers = weights.config.n_layers;
    let mut values = Vec::with_capacity(n_layers * tracked.len());
    for l in 0..n_layers {
        let a = early_decode(clean.mlp_out_at(l, last), fc, weights)?;
        let b = early_decode(knocked.mlp_out_at(l, last), fk, weights)?;
        values.extend(tracked.iter().map(|t| (a[t.id as usize] - b[t.id as usize]) as f64));
    }
    LayerLogitSeries::new(ValueKind::LogitDiff, tracked.to_vec(), n_layers, values)
}

/// Embedding noise `N(0, ν²)` on the rows in `span`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorruptionSpec {
    pub span: TokenSpanSet,
    pub noise: f64,
    pub seed: u64,
}

impl CorruptionSpec {
    pub fn new(span: TokenSpanSet, noise: f64, seed: u64) -> Result<Self> {
        if !(noise >= 0.0 && noise.is_finite()) {
            return Err(Error::Config(format!("noise scale {noise} must be finite and non-negative")));
        }
        Ok(Self { span, noise, seed })
    }

    /// Three times the standard deviation of all embedding entries.
    pub fn default_noise(weights: &WeightSet<f32>) -> f64 {
        3.0 * weights.embedding_std()
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }
}

/// Clean embeddings with seeded Gaussian noise added to the span rows, drawn
/// row by row in span order.
pub fn corrupt_embeddings(weights: &WeightSet<f32>, tokens: &[u32], spec: &CorruptionSpec) -> Result<Vec<f32>> {
    validate_tokens(weights, tokens)?;
    spec.span.check(tokens.len())?;
    let d = weights.config.d_model;
    let mut x = embed_tokens(weights, tokens);
    let mut rng = RngState::new(spec.seed);
    for &p in spec.span.indices() {
        let noise: Vec<f64> = gaussian_draw(&mut rng, d, 0.0, spec.noise);
        for (xi, n) in x[p * d..(p + 1) * d].iter_mut().zip(noise) {
            *xi += n as f32;
        }
    }
    Ok(x)
}

/// Where a clean activation is written back during a corrupted run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SiteKind {
    /// The embedding row entering layer 0.
    Embedding,
    Attention,
    Mlp,
}

impl From<Component> for SiteKind {
    fn from(c: Component) -> Self {
        match c {
            Component::Attention => SiteKind::Attention,
            Component::Mlp => SiteKind::Mlp,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RestorationSite {
    pub layer: usize,
    pub position: usize,
    pub kind: SiteKind,
}

impl RestorationSite {
    pub fn new(layer: usize, position: usize, component: Component) -> Self {
        Self { layer, position, kind: component.into() }
    }

    pub fn embedding(position: usize) -> Self {
        Self { layer: 0, position, kind: SiteKind::Embedding }
    }

    /// Sites for a window of `width` consecutive layers starting at `layer`,
    /// clipped at the last layer.
    pub fn window(layer: usize, position: usize, component: Component, width: usize, n_layers: usize) -> Vec<Self> {
        (layer..(layer + width.max(1)).min(n_layers)).map(|l| Self::new(l, position, component)).collect()
    }
}

fn target_probability(logits: &[f32], target: u32) -> f64 {
    let wide: Vec<f64> = logits.iter().map(|&x| x as f64).collect();
    softmax(&wide)[target as usize]
}

fn check_clean(clean: &ActivationTrace, weights: &WeightSet<f32>, tokens: &[u32], target: u32) -> Result<()> {
    if clean.tokens != tokens || clean.config != weights.config {
        return Err(Error::Incompatible("clean trace does not match the traced tokens or model".into()));
    }
    if target as usize >= weights.config.vocab {
        return Err(Error::TokenOutOfRange { id: target, vocab: weights.config.vocab });
    }
    Ok(())
}

fn clean_patches(clean: &ActivationTrace, sites: &[RestorationSite], n_layers: usize) -> Result<Vec<Patch<f32>>> {
    sites
        .iter()
        .filter(|s| s.kind != SiteKind::Embedding)
        .map(|s| {
            if s.layer >= n_layers || s.position >= clean.seq_len() {
                return Err(Error::CaptureMiss(format!(
                    "no clean activation at layer {} position {}",
                    s.layer, s.position
                )));
            }
            let (component, value) = match s.kind {
                SiteKind::Attention => (Component::Attention, clean.attn_out_at(s.layer, s.position)),
                _ => (Component::Mlp, clean.mlp_out_at(s.layer, s.position)),
            };
            Ok(Patch { layer: s.layer, position: s.position, component, value: value.to_vec() })
        })
        .collect()
}

/// Probability of `target` at the last position of a corrupted run in which
/// every site in `restore` is overwritten with its clean value.
pub fn traced_probability(
    weights: &WeightSet<f32>,
    tokens: &[u32],
    corruption: &CorruptionSpec,
    restore: &[RestorationSite],
    clean: &ActivationTrace,
    target: u32,
) -> Result<f64> {
    check_clean(clean, weights, tokens, target)?;
    let d = weights.config.d_model;
    let mut x = corrupt_embeddings(weights, tokens, corruption)?;
    for s in restore.iter().filter(|s| s.kind == SiteKind::Embedding) {
        if s.position >= tokens.len() {
            return Err(Error::CaptureMiss(format!("no clean embedding at position {}", s.position)));
        }
        x[s.position * d..(s.position + 1) * d].copy_from_slice(clean.embedded_at(s.position));
    }
    let patches = clean_patches(clean, restore, weights.config.n_layers)?;
    let cache = forward_embedded(weights, tokens, x, &Intervention { knockout: None, patches })?;
    Ok(target_probability(cache.last_logits(weights.config.vocab), target))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceOptions {
    pub seeds: usize,
    pub window: usize,
}

impl Default for TraceOptions {
    fn default() -> Self {
        Self { seeds: 3, window: 1 }
    }
}

/// `[n_layers × positions]` restoration effects for one component.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TracingGrid {
    pub component: Component,
    pub target: u32,
    pub n_layers: usize,
    pub positions: usize,
    pub values: Vec<f64>,
    pub seeds: Vec<u64>,
    pub clean_probability: f64,
    /// Corrupted probability without restoration, averaged over seeds.
    pub corrupted_probability: f64,
}

impl TracingGrid {
    pub fn get(&self, layer: usize, position: usize) -> f64 {
        self.values[layer * self.positions + position]
    }

    /// Location and value of the largest entry; ties keep the first in row-major order.
    pub fn argmax(&self) -> (usize, usize, f64) {
        let (i, v) = self
            .values
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best });
        (i / self.positions, i % self.positions, v)
    }
}

/// Averages `traced_probability(restore (l, p)) − traced_probability(none)`
/// over seeds `corruption.seed + k` for `k < options.seeds`.
pub fn causal_trace_grid(
    weights: &WeightSet<f32>,
    tokens: &[u32],
    corruption: &CorruptionSpec,
    component: Component,
    target: u32,
    clean: &ActivationTrace,
    options: &TraceOptions,
) -> Result<TracingGrid> {
    check_clean(clean, weights, tokens, target)?;
    if options.seeds == 0 {
        return Err(Error::Config("causal tracing needs at least one seed".into()));
    }
    let n_layers = weights.config.n_layers;
    let vocab = weights.config.vocab;
    let positions = tokens.len();
    let seeds: Vec<u64> = (0..options.seeds as u64).map(|k| corruption.seed.wrapping_add(k)).collect();
    let mut values = vec![0.0; n_layers * positions];
    let mut corrupted = 0.0;
    let cells: Vec<(usize, usize)> = (0..n_layers).flat_map(|l| (0..positions).map(move |p| (l, p))).collect();
    for &seed in &seeds {
        let x = corrupt_embeddings(weights, tokens, &corruption.with_seed(seed))?;
        let base: ForwardCache<f32> = forward_embedded(weights, tokens, x, &Intervention::none())?;
        let p_none = target_probability(base.last_logits(vocab), target);
        corrupted += p_none / seeds.len() as f64;
        let diffs: Vec<f64> = cells
            .par_iter()
            .map(|&(l, p)| {
                let sites = RestorationSite::window(l, p, component, options.window, n_layers);
                let patches = clean_patches(clean, &sites, n_layers)?;
                let cache = forward_resume(weights, &base, l, p, &Intervention { knockout: None, patches })?;
                Ok(target_probability(cache.last_logits(vocab), target) - p_none)
            })
            .collect::<Result<_>>()?;
        for (v, d) in values.iter_mut().zip(diffs) {
            *v += d / seeds.len() as f64;
        }
    }
    Ok(TracingGrid {
        component,
        target,
        n_layers,
        positions,
        values,
        seeds,
        clean_probability: target_probability(&clean.logits, target),
        corrupted_probability: corrupted,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lens::{token_lens_layer, SpanRole};
    use crate::model::{forward, ModelConfig};

    fn model(seed: u64) -> (WeightSet<f32>, Vec<u32>) {
        let cfg = ModelConfig::micro(17);
        let w = WeightSet::init(&cfg, seed, 0.5).unwrap();
        let mut rng = RngState::new(seed + 100);
        let tokens = (0..8).map(|_| rng.below(17) as u32).collect();
        (w, tokens)
    }

    fn span(ix: &[usize]) -> TokenSpanSet {
        TokenSpanSet::new(SpanRole::Custom("s".into()), ix.to_vec()).unwrap()
    }

    fn clean(w: &WeightSet<f32>, tokens: &[u32]) -> ActivationTrace {
        forward(w, tokens, &CaptureSpec::default()).unwrap().1
    }

    #[test]
    fn empty_knockout_is_clean_forward() {
        let (w, t) = model(1);
        let c = clean(&w, &t);
        let k = knockout_forward(&w, &t, &KnockoutSpec::new(TokenSpanSet::empty()), &CaptureSpec::default()).unwrap();
        assert_eq!(c.logits, k.logits);
        assert_eq!(c.mlp_out, k.mlp_out);
        let toks = [TrackedToken::new("x", 3), TrackedToken::new("y", 9)];
        assert!(mlp_logit_diff(&c, &k, &w, &toks).unwrap().values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn full_knockout_zeroes_attention_at_query() {
        let (w, t) = model(2);
        let k = knockout_forward(&w, &t, &KnockoutSpec::new(TokenSpanSet::all(8)), &CaptureSpec::default()).unwrap();
        for l in 0..2 {
            assert!(k.attn_out_at(l, 7).iter().all(|&x| x == 0.0));
            assert!(k.attn_out_at(l, 6).iter().any(|&x| x != 0.0));
        }
    }

    #[test]
    fn knocked_span_has_zero_lens_and_earlier_rows_are_untouched() {
        let (w, t) = model(3);
        let c = clean(&w, &t);
        let s = span(&[1, 4]);
        let k = knockout_forward(&w, &t, &KnockoutSpec::new(s.clone()), &CaptureSpec::default()).unwrap();
        for l in 0..2 {
            assert!(token_lens_layer(&k, &w, l, &s).unwrap().iter().all(|&x| x == 0.0));
            for p in 0..7 {
                assert_eq!(c.attn_out_at(l, p), k.attn_out_at(l, p));
                assert_eq!(c.mlp_out_at(l, p), k.mlp_out_at(l, p));
            }
        }
    }

    #[test]
    fn renormalized_knockout_differs() {
        let (w, t) = model(4);
        let mut spec = KnockoutSpec::new(span(&[0, 2]));
        let plain = knockout_forward(&w, &t, &spec, &CaptureSpec::default()).unwrap();
        spec.renormalize = true;
        let renorm = knockout_forward(&w, &t, &spec, &CaptureSpec::default()).unwrap();
        let row = renorm.attn_row(0, 0, 7).unwrap();
        assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-5);
        assert_ne!(plain.logits, renorm.logits);
    }

    #[test]
    fn incompatible_traces() {
        let (w, t) = model(5);
        let c = clean(&w, &t);
        let other = clean(&w, &t[..6]);
        assert!(matches!(mlp_logit_diff(&c, &other, &w, &[]), Err(Error::Incompatible(_))));
    }

    #[test]
    fn corruption_basics() {
        let (w, t) = model(6);
        let clean_x = embed_tokens(&w, &t);
        assert_eq!(corrupt_embeddings(&w, &t, &CorruptionSpec::new(span(&[1, 2]), 0.0, 9).unwrap()).unwrap(), clean_x);
        assert_eq!(
            corrupt_embeddings(&w, &t, &CorruptionSpec::new(TokenSpanSet::empty(), 2.0, 9).unwrap()).unwrap(),
            clean_x
        );
        let spec = CorruptionSpec::new(span(&[1, 2]), 1.0, 9).unwrap();
        let a = corrupt_embeddings(&w, &t, &spec).unwrap();
        assert_eq!(a, corrupt_embeddings(&w, &t, &spec).unwrap());
        let d = w.config.d_model;
        assert_eq!(a[..d], clean_x[..d]);
        assert_ne!(a[d..2 * d], clean_x[d..2 * d]);
        assert_eq!(a[3 * d..], clean_x[3 * d..]);
        assert!(CorruptionSpec::new(span(&[1]), -1.0, 0).is_err());
    }

    #[test]
    fn zero_noise_tracing_is_clean() {
        let (w, t) = model(7);
        let c = clean(&w, &t);
        let spec = CorruptionSpec::new(span(&[0, 1]), 0.0, 1).unwrap();
        let p_clean = target_probability(&c.logits, 5);
        let p = traced_probability(&w, &t, &spec, &[RestorationSite::new(1, 3, Component::Mlp)], &c, 5).unwrap();
        assert!((p - p_clean).abs() < 1e-7);
        let grid = causal_trace_grid(&w, &t, &spec, Component::Mlp, 5, &c, &TraceOptions::default()).unwrap();
        assert!(grid.values.iter().all(|&v| v.abs() < 1e-7));
    }

    #[test]
    fn restoring_all_embeddings_recovers_clean() {
        let (w, t) = model(8);
        let c = clean(&w, &t);
        let spec = CorruptionSpec::new(span(&[0, 2, 3]), 3.0, 4).unwrap();
        let sites: Vec<_> = [0, 2, 3].iter().map(|&p| RestorationSite::embedding(p)).collect();
        let p = traced_probability(&w, &t, &spec, &sites, &c, 11).unwrap();
        assert!((p - target_probability(&c.logits, 11)).abs() <= 1e-5);
        let bad = [RestorationSite::new(0, 30, Component::Attention)];
        assert!(matches!(traced_probability(&w, &t, &spec, &bad, &c, 11), Err(Error::CaptureMiss(_))));
    }

    #[test]
    fn grid_matches_direct_runs_and_is_deterministic() {
        let (w, t) = model(9);
        let c = clean(&w, &t);
        let spec = CorruptionSpec::new(span(&[1, 2]), 2.0, 40).unwrap();
        let opts = TraceOptions { seeds: 2, window: 1 };
        let grid = causal_trace_grid(&w, &t, &spec, Component::Attention, 6, &c, &opts).unwrap();
        assert_eq!(grid, causal_trace_grid(&w, &t, &spec, Component::Attention, 6, &c, &opts).unwrap());
        assert!(grid.values.iter().all(|v| (-1.0..=1.0).contains(v)));
        for (l, p) in [(0, 1), (1, 5), (0, 7)] {
            let mut expect = 0.0;
            for seed in [40, 41] {
                let s = spec.with_seed(seed);
                let with = traced_probability(&w, &t, &s, &[RestorationSite::new(l, p, Component::Attention)], &c, 6);
                expect += (with.unwrap() - traced_probability(&w, &t, &s, &[], &c, 6).unwrap()) / 2.0;
            }
            assert!((grid.get(l, p) - expect).abs() < 1e-6, "({l},{p}) {} vs {expect}", grid.get(l, p));
        }
    }

    #[test]
    fn window_clips_at_last_layer() {
        let sites = RestorationSite::window(1, 3, Component::Mlp, 3, 2);
        assert_eq!(sites, vec![RestorationSite::new(1, 3, Component::Mlp)]);
    }
}
