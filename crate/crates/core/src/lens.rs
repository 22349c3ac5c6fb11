//! Early decoding of residual contributions and Token Lens attribution.
//!
//! Every decoded vector goes through the final RMSNorm gain and the
//! unembedding, but the normalization scale is always taken from the
//! final-layer residual at the same position, never from the decoded vector
//! itself. Decoding is therefore linear in the vector and independent of the
//! layer it came from.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{decode_scaled, head_mix, project_concat, ActivationTrace, Component, WeightSet};
use crate::numerics::{axpy, inv_rms, Real};

/// What a token span stands for in the prompt.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpanRole {
    Subject,
    /// Answer `i` (1-based).
    Answer(usize),
    /// Every answer generated before the current step.
    PreviousAnswers,
    LastToken,
    Custom(String),
}

impl SpanRole {
    pub fn label(&self) -> String {
        match self {
            SpanRole::Subject => "subject".into(),
            SpanRole::Answer(i) => format!("answer_{i}"),
            SpanRole::PreviousAnswers => "previous_answers".into(),
            SpanRole::LastToken => "last_token".into(),
            SpanRole::Custom(s) => s.clone(),
        }
    }
}

/// Strictly increasing key positions `t = {t_1..t_k}`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSpanSet {
    pub role: SpanRole,
    indices: Vec<usize>,
}

impl TokenSpanSet {
    pub fn new(role: SpanRole, indices: Vec<usize>) -> Result<Self> {
        if indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Shape(format!("span indices {indices:?} are not strictly increasing")));
        }
        Ok(Self { role, indices })
    }

    /// The empty probe set.
    pub fn empty() -> Self {
        Self { role: SpanRole::Custom("empty".into()), indices: Vec::new() }
    }

    pub fn all(seq_len: usize) -> Self {
        Self { role: SpanRole::Custom("all".into()), indices: (0..seq_len).collect() }
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn check(&self, seq_len: usize) -> Result<()> {
        match self.indices.last() {
            Some(&i) if i >= seq_len => Err(Error::SpanOutOfRange { index: i, len: seq_len }),
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValueKind {
    Logit,
    LogitDiff,
    ProbDiff,
}

impl ValueKind {
    pub fn label(self) -> &'static str {
        match self {
            ValueKind::Logit => "logit",
            ValueKind::LogitDiff => "logit_diff",
            ValueKind::ProbDiff => "prob_diff",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrackedToken {
    pub label: String,
    pub id: u32,
}

impl TrackedToken {
    pub fn new(label: impl Into<String>, id: u32) -> Self {
        Self { label: label.into(), id }
    }
}

/// `[n_layers × tracked]` grid of decoded values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerLogitSeries {
    pub kind: ValueKind,
    pub tracked: Vec<TrackedToken>,
    pub n_layers: usize,
    /// Row-major, row = layer.
    pub values: Vec<f64>,
    pub instance: Option<usize>,
    pub step: Option<usize>,
    /// Number of per-instance series folded into this one.
    pub cohort: usize,
    pub aggregation: String,
}

impl LayerLogitSeries {
    pub fn new(kind: ValueKind, tracked: Vec<TrackedToken>, n_layers: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != n_layers * tracked.len() {
            return Err(Error::Shape(format!(
                "series of {} values for {n_layers} layers × {} tokens",
                values.len(),
                tracked.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericDomain("non-finite series entry".into()));
        }
        Ok(Self {
            kind,
            tracked,
            n_layers,
            values,
            instance: None,
            step: None,
            cohort: 1,
            aggregation: "instance".into(),
        })
    }

    pub fn get(&self, layer: usize, token: usize) -> f64 {
        self.values[layer * self.tracked.len() + token]
    }

    /// Values of tracked token `token` across layers.
    pub fn column(&self, token: usize) -> Vec<f64> {
        (0..self.n_layers).map(|l| self.get(l, token)).collect()
    }

    pub fn token_index(&self, label: &str) -> Option<usize> {
        self.tracked.iter().position(|t| t.label == label)
    }

    pub fn with_meta(mut self, instance: Option<usize>, step: Option<usize>) -> Self {
        self.instance = instance;
        self.step = step;
        self
    }
}

/// Decodes `z` through the final norm gain and unembedding, scaling by the RMS
/// of `final_hidden` (the last-layer residual at the same position).
pub fn early_decode<F: Real>(z: &[F], final_hidden: &[F], weights: &WeightSet<F>) -> Result<Vec<F>> {
    let d = weights.config.d_model;
    if z.len() != d || final_hidden.len() != d {
        return Err(Error::Shape(format!("early_decode wants {d}-vectors")));
    }
    let scale = inv_rms(final_hidden, weights.eps());
    if !scale.is_finite() {
        return Err(Error::NumericDomain("final hidden state has zero RMS and eps = 0".into()));
    }
    Ok(decode_scaled(weights, z, scale))
}

fn check_tracked<F: Real>(weights: &WeightSet<F>, tracked: &[TrackedToken]) -> Result<()> {
    match tracked.iter().find(|t| t.id as usize >= weights.config.vocab) {
        Some(t) => Err(Error::TokenOutOfRange { id: t.id, vocab: weights.config.vocab }),
        None => Ok(()),
    }
}

/// Builds a `logit` series by decoding one vector per layer at the last position.
fn decoded_series<F: Real>(
    trace: &ActivationTrace<F>,
    weights: &WeightSet<F>,
    tracked: &[TrackedToken],
    mut vector: impl FnMut(usize) -> Result<Vec<F>>,
) -> Result<LayerLogitSeries> {
    check_tracked(weights, tracked)?;
    let final_hidden = trace.final_resid_at(trace.last());
    let n_layers = weights.config.n_layers;
    let mut values = Vec::with_capacity(n_layers * tracked.len());
    for l in 0..n_layers {
        let logits = early_decode(&vector(l)?, final_hidden, weights)?;
        values.extend(tracked.iter().map(|t| logits[t.id as usize].as_f64()));
    }
    LayerLogitSeries::new(ValueKind::Logit, tracked.to_vec(), n_layers, values)
}

/// Early-decoded attention or MLP output of every layer at the last position.
pub fn component_logit_series<F: Real>(
    trace: &ActivationTrace<F>,
    weights: &WeightSet<F>,
    component: Component,
    tracked: &[TrackedToken],
) -> Result<LayerLogitSeries> {
    let last = trace.last();
    decoded_series(trace, weights, tracked, |l| {
        Ok(match component {
            Component::Attention => trace.attn_out_at(l, last).to_vec(),
            Component::Mlp => trace.mlp_out_at(l, last).to_vec(),
        })
    })
}

/// `Σ_j p_{t_j} · v_{t_j}` for one head, with the query at the last position.
pub fn token_lens_head<F: Real>(
    trace: &ActivationTrace<F>,
    layer: usize,
    head: usize,
    span: &TokenSpanSet,
) -> Result<Vec<F>> {
    span.check(trace.seq_len())?;
    let row = trace.attn_row(layer, head, trace.last())?;
    let mut out = vec![F::zero(); trace.config.d_head];
    for &j in span.indices() {
        axpy(row[j], trace.value(layer, head, j)?, &mut out);
    }
    Ok(out)
}

/// `W_o^(layer) · concat_i(token_lens_head(i))`: the part of the layer's
/// attention output at the last position that comes from `span`.
pub fn token_lens_layer<F: Real>(
    trace: &ActivationTrace<F>,
    weights: &WeightSet<F>,
    layer: usize,
    span: &TokenSpanSet,
) -> Result<Vec<F>> {
    let cfg = &weights.config;
    let mut concat = Vec::with_capacity(cfg.n_heads * cfg.d_head);
    for head in 0..cfg.n_heads {
        concat.extend(token_lens_head(trace, layer, head, span)?);
    }
    Ok(project_concat(weights, layer, &concat))
}

pub fn token_lens_series<F: Real>(
    trace: &ActivationTrace<F>,
    weights: &WeightSet<F>,
    span: &TokenSpanSet,
    tracked: &[TrackedToken],
) -> Result<LayerLogitSeries> {
    decoded_series(trace, weights, tracked, |l| token_lens_layer(trace, weights, l, span))
}

/// Full pre-projection output of a head at the last position.
pub fn head_output_unprojected<F: Real>(trace: &ActivationTrace<F>, layer: usize, head: usize) -> Result<Vec<F>> {
    head_mix(trace, layer, head, trace.last())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::test_support::random_model;
    use crate::model::{forward, CaptureSpec, ModelConfig};

    fn traced(seed: u64) -> (WeightSet<f32>, ActivationTrace<f32>) {
        let (w, tokens) = random_model(seed, 0.5);
        let (_, tr) = forward(&w, &tokens, &CaptureSpec::default()).unwrap();
        (w, tr)
    }

    fn tracked() -> Vec<TrackedToken> {
        vec![TrackedToken::new("a", 1), TrackedToken::new("b", 5), TrackedToken::new("c", 16)]
    }

    #[test]
    fn decode_of_final_residual_is_model_logits() {
        let (w, tr) = traced(1);
        let last = tr.final_resid_at(tr.last());
        let logits = early_decode(last, last, &w).unwrap();
        assert_eq!(logits, tr.logits);
    }

    #[test]
    fn decode_zero_and_linearity() {
        let (w, tr) = traced(2);
        let fh = tr.final_resid_at(tr.last());
        let zero = early_decode(&[0.0; 8], fh, &w).unwrap();
        assert!(zero.iter().all(|&x| x == 0.0));
        let z1 = tr.attn_out_at(0, tr.last()).to_vec();
        let z2 = tr.mlp_out_at(1, tr.last()).to_vec();
        let sum: Vec<f32> = z1.iter().zip(&z2).map(|(a, b)| a + b).collect();
        let a = early_decode(&z1, fh, &w).unwrap();
        let b = early_decode(&z2, fh, &w).unwrap();
        let c = early_decode(&sum, fh, &w).unwrap();
        for i in 0..c.len() {
            assert!((a[i] + b[i] - c[i]).abs() < 1e-4);
        }
    }

    #[test]
    fn zero_final_hidden_with_zero_eps() {
        let (mut w, _) = traced(3);
        w.config.eps = 0.0;
        assert!(matches!(early_decode(&[1.0; 8], &[0.0; 8], &w), Err(Error::NumericDomain(_))));
    }

    #[test]
    fn mlp_series_is_a_slice_of_early_decode() {
        let (w, tr) = traced(4);
        let s = component_logit_series(&tr, &w, Component::Mlp, &tracked()).unwrap();
        assert_eq!((s.n_layers, s.tracked.len()), (2, 3));
        let direct = early_decode(tr.mlp_out_at(1, tr.last()), tr.final_resid_at(tr.last()), &w).unwrap();
        assert_eq!(s.get(1, 1), direct[5] as f64);
    }

    #[test]
    fn series_telescope_to_logits() {
        let (w, tr) = traced(5);
        let toks = tracked();
        let a = component_logit_series(&tr, &w, Component::Attention, &toks).unwrap();
        let m = component_logit_series(&tr, &w, Component::Mlp, &toks).unwrap();
        let last = tr.last();
        let emb = early_decode(tr.embedded_at(last), tr.final_resid_at(last), &w).unwrap();
        for (k, t) in toks.iter().enumerate() {
            let total: f64 = (0..2).map(|l| a.get(l, k) + m.get(l, k)).sum();
            let expect = tr.logits[t.id as usize] as f64 - emb[t.id as usize] as f64;
            assert!((total - expect).abs() < 1e-4, "{total} vs {expect}");
        }
    }

    #[test]
    fn tracked_out_of_range() {
        let (w, tr) = traced(6);
        let bad = vec![TrackedToken::new("x", 999)];
        assert!(matches!(
            component_logit_series(&tr, &w, Component::Mlp, &bad),
            Err(Error::TokenOutOfRange { id: 999, .. })
        ));
    }

    #[test]
    fn lens_full_span_and_empty_span() {
        let (w, tr) = traced(7);
        let all = TokenSpanSet::all(tr.seq_len());
        for l in 0..2 {
            for h in 0..2 {
                let lens = token_lens_head(&tr, l, h, &all).unwrap();
                assert_eq!(lens, head_output_unprojected(&tr, l, h).unwrap());
                assert!(token_lens_head(&tr, l, h, &TokenSpanSet::empty()).unwrap().iter().all(|&x| x == 0.0));
            }
            let full = token_lens_layer(&tr, &w, l, &all).unwrap();
            for (x, y) in full.iter().zip(tr.attn_out_at(l, tr.last())) {
                assert!((x - y).abs() <= 1e-4);
            }
        }
        let bad = TokenSpanSet::new(SpanRole::Subject, vec![0, 40]).unwrap();
        assert!(matches!(token_lens_head(&tr, 0, 0, &bad), Err(Error::SpanOutOfRange { index: 40, .. })));
        assert!(TokenSpanSet::new(SpanRole::Subject, vec![3, 3]).is_err());
    }

    #[test]
    fn lens_zero_weight_key() {
        let (_, mut tr) = traced(8);
        let t = tr.seq_len();
        let mut row = vec![1.0 / (t - 1) as f32; t];
        row[2] = 0.0;
        tr.set_attn_row(0, 1, tr.last(), &row).unwrap();
        let span = TokenSpanSet::new(SpanRole::Custom("k".into()), vec![2]).unwrap();
        assert!(token_lens_head(&tr, 0, 1, &span).unwrap().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn lens_additive_over_disjoint_spans() {
        let (w, tr) = traced(9);
        let a = TokenSpanSet::new(SpanRole::Custom("a".into()), vec![0, 3, 4]).unwrap();
        let b = TokenSpanSet::new(SpanRole::Custom("b".into()), vec![1, 6]).unwrap();
        let ab = TokenSpanSet::new(SpanRole::Custom("ab".into()), vec![0, 1, 3, 4, 6]).unwrap();
        for l in 0..2 {
            let la = token_lens_layer(&tr, &w, l, &a).unwrap();
            let lb = token_lens_layer(&tr, &w, l, &b).unwrap();
            let lab = token_lens_layer(&tr, &w, l, &ab).unwrap();
            for i in 0..lab.len() {
                assert!((la[i] + lb[i] - lab[i]).abs() <= 1e-5);
            }
        }
    }

    #[test]
    fn uniform_attention_over_identical_tokens() {
        // Zero queries give uniform attention; identical tokens give identical
        // layer-0 values, so the last key carries 1/T of the full output.
        let cfg = ModelConfig::micro(9);
        let mut w = WeightSet::<f32>::init(&cfg, 12, 0.5).unwrap();
        w.layers[0].wq.data_mut().fill(0.0);
        let tokens = [4u32; 6];
        let (_, tr) = forward(&w, &tokens, &CaptureSpec::default()).unwrap();
        let last = TokenSpanSet::new(SpanRole::LastToken, vec![5]).unwrap();
        let lens = token_lens_layer(&tr, &w, 0, &last).unwrap();
        for (x, full) in lens.iter().zip(tr.attn_out_at(0, 5)) {
            assert!((x - full / 6.0).abs() < 1e-6);
        }
    }

    #[test]
    fn full_span_series_matches_attention_series() {
        let (w, tr) = traced(10);
        let toks = tracked();
        let lens = token_lens_series(&tr, &w, &TokenSpanSet::all(tr.seq_len()), &toks).unwrap();
        let attn = component_logit_series(&tr, &w, Component::Attention, &toks).unwrap();
        for (x, y) in lens.values.iter().zip(&attn.values) {
            assert!((x - y).abs() <= 1e-4);
        }
        let empty = token_lens_series(&tr, &w, &TokenSpanSet::empty(), &toks).unwrap();
        assert!(empty.values.iter().all(|&v| v == 0.0));
    }
}
