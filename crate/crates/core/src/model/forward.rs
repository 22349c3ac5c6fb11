//! Pre-norm decoder forward pass with rotary attention and a gated MLP.
//!
//! Each layer computes `x ← x + Attn(RMSNorm(x))` then `x ← x + MLP(RMSNorm(x))`.
//! The pass keeps every intermediate in a [`ForwardCache`]; the trainer reads
//! it for backpropagation and the analysis code turns it into an
//! [`ActivationTrace`](crate::model::ActivationTrace).
//!
//! Interventions (attention knockout and activation patching) are applied
//! inside the pass so downstream activations are recomputed.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{LayerWeights, WeightSet};
use crate::numerics::{axpy, causal_softmax_inplace, dot, inv_rms, linear, scale_by, sigmoid, Real};

/// Residual-stream contribution that can be patched.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    Attention,
    Mlp,
}

impl Component {
    pub fn label(self) -> &'static str {
        match self {
            Component::Attention => "attn",
            Component::Mlp => "mlp",
        }
    }
}

/// Zero post-softmax attention from `query` to `keys` at `layers` (all heads).
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionKnockout {
    pub keys: Vec<usize>,
    pub layers: Vec<usize>,
    pub query: usize,
    /// Rescale the surviving weights to sum to one. Off by default.
    pub renormalize: bool,
}

/// Replace one component output at (layer, position) before it enters the residual.
#[derive(Clone, Debug, PartialEq)]
pub struct Patch<F> {
    pub layer: usize,
    pub position: usize,
    pub component: Component,
    pub value: Vec<F>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Intervention<F> {
    pub knockout: Option<AttentionKnockout>,
    pub patches: Vec<Patch<F>>,
}

impl<F> Intervention<F> {
    pub fn none() -> Self {
        Self { knockout: None, patches: Vec::new() }
    }

    pub fn is_empty(&self) -> bool {
        self.knockout.is_none() && self.patches.is_empty()
    }
}

#[derive(Clone, Debug)]
pub struct LayerCache<F> {
    pub x_in: Vec<F>,
    pub inv_attn: Vec<F>,
    pub h_attn: Vec<F>,
    /// Queries and keys after rotary encoding.
    pub q: Vec<F>,
    pub k: Vec<F>,
    pub v: Vec<F>,
    /// `[n_heads × T × T]`, row `q` zero beyond column `q`.
    pub probs: Vec<F>,
    /// Concatenated per-head weighted value sums `[T × n_heads·d_head]`.
    pub heads: Vec<F>,
    pub attn_out: Vec<F>,
    pub x_mid: Vec<F>,
    pub inv_mlp: Vec<F>,
    pub h_mlp: Vec<F>,
    pub gate: Vec<F>,
    pub up: Vec<F>,
    pub act: Vec<F>,
    pub mlp_out: Vec<F>,
}

#[derive(Clone, Debug)]
pub struct ForwardCache<F> {
    pub tokens: Vec<u32>,
    pub seq_len: usize,
    pub embedded: Vec<F>,
    pub layers: Vec<LayerCache<F>>,
    pub x_final: Vec<F>,
    pub inv_final: Vec<F>,
    pub h_final: Vec<F>,
    /// `[T × vocab]`
    pub logits: Vec<F>,
}

impl<F: Real> ForwardCache<F> {
    pub fn logits_at(&self, position: usize, vocab: usize) -> &[F] {
        &self.logits[position * vocab..(position + 1) * vocab]
    }

    pub fn last_logits(&self, vocab: usize) -> &[F] {
        self.logits_at(self.seq_len - 1, vocab)
    }

    /// Residual stream after `layer` (or the embeddings for `None`).
    pub fn resid_after(&self, layer: usize) -> Vec<F> {
        match self.layers.get(layer + 1) {
            Some(next) => next.x_in.clone(),
            None => self.x_final.clone(),
        }
    }
}

pub fn validate_tokens<F: Real>(weights: &WeightSet<F>, tokens: &[u32]) -> Result<()> {
    let cfg = &weights.config;
    if tokens.is_empty() || tokens.len() > cfg.ctx {
        return Err(Error::OverLength { len: tokens.len(), ctx: cfg.ctx });
    }
    if let Some(&id) = tokens.iter().find(|&&t| t as usize >= cfg.vocab) {
        return Err(Error::TokenOutOfRange { id, vocab: cfg.vocab });
    }
    Ok(())
}

pub fn embed_tokens<F: Real>(weights: &WeightSet<F>, tokens: &[u32]) -> Vec<F> {
    let mut out = Vec::with_capacity(tokens.len() * weights.config.d_model);
    for &t in tokens {
        out.extend_from_slice(weights.embed.row(t as usize));
    }
    out
}

/// Cosine and sine tables `[T × d_head/2]`.
pub(crate) struct Rope<F> {
    cos: Vec<F>,
    sin: Vec<F>,
    half: usize,
}

impl<F: Real> Rope<F> {
    pub(crate) fn new(seq_len: usize, d_head: usize, base: f32) -> Self {
        let half = d_head / 2;
        let mut cos = Vec::with_capacity(seq_len * half);
        let mut sin = Vec::with_capacity(seq_len * half);
        for pos in 0..seq_len {
            for i in 0..half {
                let freq = (base as f64).powf(-(2.0 * i as f64) / d_head as f64);
                let angle = pos as f64 * freq;
                cos.push(F::lit(angle.cos()));
                sin.push(F::lit(angle.sin()));
            }
        }
        Self { cos, sin, half }
    }

    /// Rotates every head block of `row` (position `pos`); `inverse` applies the transpose.
    pub(crate) fn rotate(&self, row: &mut [F], pos: usize, d_head: usize, inverse: bool) {
        let c = &self.cos[pos * self.half..(pos + 1) * self.half];
        let s = &self.sin[pos * self.half..(pos + 1) * self.half];
        for head in row.chunks_exact_mut(d_head) {
            for i in 0..self.half {
                let (a, b) = (head[2 * i], head[2 * i + 1]);
                let sn = if inverse { -s[i] } else { s[i] };
                head[2 * i] = a * c[i] - b * sn;
                head[2 * i + 1] = a * sn + b * c[i];
            }
        }
    }
}

pub fn silu<F: Real>(x: F) -> F {
    x * sigmoid(x)
}

/// `U · (gain_final ⊙ z · scale)`, the shared tail of the model and of early decoding.
pub fn decode_scaled<F: Real>(weights: &WeightSet<F>, z: &[F], scale: F) -> Vec<F> {
    let h = scale_by(z, weights.final_norm.data(), scale);
    linear(&h, weights.unembed.data(), weights.config.vocab, weights.config.d_model)
}

/// Full forward pass from token ids.
pub fn forward_cache<F: Real>(
    weights: &WeightSet<F>,
    tokens: &[u32],
    intervention: &Intervention<F>,
) -> Result<ForwardCache<F>> {
    validate_tokens(weights, tokens)?;
    let x0 = embed_tokens(weights, tokens);
    run(weights, tokens, x0, None, intervention)
}

/// Forward pass from caller-supplied embedding rows (e.g. noised embeddings).
pub fn forward_embedded<F: Real>(
    weights: &WeightSet<F>,
    tokens: &[u32],
    embedded: Vec<F>,
    intervention: &Intervention<F>,
) -> Result<ForwardCache<F>> {
    validate_tokens(weights, tokens)?;
    if embedded.len() != tokens.len() * weights.config.d_model {
        return Err(Error::Shape(format!(
            "embedded input has {} values for {} tokens",
            embedded.len(),
            tokens.len()
        )));
    }
    run(weights, tokens, embedded, None, intervention)
}

/// Re-runs `base` from `start_layer`, recomputing only positions `>= start_pos`.
///
/// Valid when every patch in `intervention` sits at a layer `>= start_layer` and a
/// position `>= start_pos`, and the knockout query (if any) is `>= start_pos`:
/// causal attention then leaves all earlier rows unchanged.
pub fn forward_resume<F: Real>(
    weights: &WeightSet<F>,
    base: &ForwardCache<F>,
    start_layer: usize,
    start_pos: usize,
    intervention: &Intervention<F>,
) -> Result<ForwardCache<F>> {
    let cfg = &weights.config;
    if start_layer >= cfg.n_layers || start_pos >= base.seq_len {
        return Err(Error::Shape(format!("resume point ({start_layer}, {start_pos}) out of range")));
    }
    let early = intervention
        .patches
        .iter()
        .any(|p| p.layer < start_layer || p.position < start_pos)
        || intervention.knockout.as_ref().is_some_and(|k| {
            k.query < start_pos || k.layers.iter().any(|&l| l < start_layer)
        });
    if early {
        return Err(Error::Shape("intervention precedes the resume point".into()));
    }
    let x0 = base.layers[start_layer].x_in.clone();
    run(weights, &base.tokens, x0, Some((base, start_layer, start_pos)), intervention)
}

fn run<F: Real>(
    weights: &WeightSet<F>,
    tokens: &[u32],
    x0: Vec<F>,
    resume: Option<(&ForwardCache<F>, usize, usize)>,
    iv: &Intervention<F>,
) -> Result<ForwardCache<F>> {
    let cfg = &weights.config;
    let t_len = tokens.len();
    let d = cfg.d_model;
    let rope = Rope::new(t_len, cfg.d_head, cfg.rope_base);
    let eps = weights.eps();

    if let Some(p) = iv.patches.iter().find(|p| {
        p.layer >= cfg.n_layers || p.position >= t_len || p.value.len() != d
    }) {
        return Err(Error::Shape(format!(
            "patch at layer {} position {} with {} values does not fit",
            p.layer,
            p.position,
            p.value.len()
        )));
    }
    let (start_layer, p0) = resume.map_or((0, 0), |(_, l, p)| (l, p));
    let mut layers = Vec::with_capacity(cfg.n_layers);
    if let Some((base, _, _)) = resume {
        layers.extend(base.layers[..start_layer].iter().cloned());
    }
    let mut x = x0;
    for (li, lw) in weights.layers.iter().enumerate().skip(start_layer) {
        let mut lc = match resume {
            Some((base, _, _)) => base.layers[li].clone(),
            None => LayerCache::empty(cfg, t_len),
        };
        lc.x_in[p0 * d..].copy_from_slice(&x[p0 * d..]);
        run_layer(weights, lw, li, &mut lc, p0, &rope, eps, iv);
        x = lc.x_mid.clone();
        for (xi, mi) in x.iter_mut().zip(&lc.mlp_out) {
            *xi += *mi;
        }
        layers.push(lc);
    }

    let vocab = cfg.vocab;
    let (mut inv_final, mut h_final, mut logits) = match resume {
        Some((base, _, _)) => (base.inv_final.clone(), base.h_final.clone(), base.logits.clone()),
        None => (vec![F::zero(); t_len], vec![F::zero(); t_len * d], vec![F::zero(); t_len * vocab]),
    };
    let gain = weights.final_norm.data();
    for t in p0..t_len {
        let row = &x[t * d..(t + 1) * d];
        let s = inv_rms(row, eps);
        inv_final[t] = s;
        h_final[t * d..(t + 1) * d].copy_from_slice(&scale_by(row, gain, s));
        logits[t * vocab..(t + 1) * vocab].copy_from_slice(&decode_scaled(weights, row, s));
    }
    if logits[p0 * vocab..].iter().any(|v| !v.is_finite()) {
        return Err(Error::NumericDomain("non-finite logits".into()));
    }
    let embedded = match resume {
        Some((base, _, _)) => base.embedded.clone(),
        None => layers.first().map(|l: &LayerCache<F>| l.x_in.clone()).unwrap_or_else(|| x.clone()),
    };
    Ok(ForwardCache {
        tokens: tokens.to_vec(),
        seq_len: t_len,
        embedded,
        layers,
        x_final: x,
        inv_final,
        h_final,
        logits,
    })
}

impl<F: Real> LayerCache<F> {
    fn empty(cfg: &crate::model::ModelConfig, t: usize) -> Self {
        let d = cfg.d_model;
        let z = |n: usize| vec![F::zero(); n];
        Self {
            x_in: z(t * d),
            inv_attn: z(t),
            h_attn: z(t * d),
            q: z(t * d),
            k: z(t * d),
            v: z(t * d),
            probs: z(cfg.n_heads * t * t),
            heads: z(t * d),
            attn_out: z(t * d),
            x_mid: z(t * d),
            inv_mlp: z(t),
            h_mlp: z(t * d),
            gate: z(t * cfg.d_mlp),
            up: z(t * cfg.d_mlp),
            act: z(t * cfg.d_mlp),
            mlp_out: z(t * d),
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn run_layer<F: Real>(
    weights: &WeightSet<F>,
    lw: &LayerWeights<F>,
    layer: usize,
    lc: &mut LayerCache<F>,
    p0: usize,
    rope: &Rope<F>,
    eps: F,
    iv: &Intervention<F>,
) {
    let cfg = &weights.config;
    let (d, dh, nh, dm) = (cfg.d_model, cfg.d_head, cfg.n_heads, cfg.d_mlp);
    let t_len = lc.inv_attn.len();
    let rows = p0 * d..t_len * d;

    for t in p0..t_len {
        let row = &lc.x_in[t * d..(t + 1) * d];
        let s = inv_rms(row, eps);
        lc.inv_attn[t] = s;
        let h = scale_by(row, lw.attn_norm.data(), s);
        lc.h_attn[t * d..(t + 1) * d].copy_from_slice(&h);
    }
    let h = &lc.h_attn[rows.clone()];
    let mut q = linear(h, lw.wq.data(), d, d);
    let mut k = linear(h, lw.wk.data(), d, d);
    let v = linear(h, lw.wv.data(), d, d);
    for (i, t) in (p0..t_len).enumerate() {
        rope.rotate(&mut q[i * d..(i + 1) * d], t, dh, false);
        rope.rotate(&mut k[i * d..(i + 1) * d], t, dh, false);
    }
    lc.q[rows.clone()].copy_from_slice(&q);
    lc.k[rows.clone()].copy_from_slice(&k);
    lc.v[rows.clone()].copy_from_slice(&v);

    let scale = F::one() / F::lit(dh as f64).sqrt();
    let knock = iv.knockout.as_ref().filter(|ko| ko.layers.contains(&layer));
    for head in 0..nh {
        let off = head * dh;
        for qi in p0..t_len {
            let qrow = &lc.q[qi * d + off..qi * d + off + dh];
            let base = (head * t_len + qi) * t_len;
            let prow = &mut lc.probs[base..base + t_len];
            for (j, p) in prow.iter_mut().enumerate().take(qi + 1) {
                *p = dot(qrow, &lc.k[j * d + off..j * d + off + dh]) * scale;
            }
            causal_softmax_inplace(prow, qi);
            if let Some(ko) = knock.filter(|ko| ko.query == qi) {
                for &j in &ko.keys {
                    if j < t_len {
                        prow[j] = F::zero();
                    }
                }
                if ko.renormalize {
                    let total: F = prow.iter().copied().sum();
                    if total > F::zero() {
                        for p in prow.iter_mut() {
                            *p /= total;
                        }
                    }
                }
            }
            let out = &mut lc.heads[qi * d + off..qi * d + off + dh];
            out.iter_mut().for_each(|o| *o = F::zero());
            for (j, &p) in prow.iter().enumerate().take(qi + 1) {
                if p != F::zero() {
                    axpy(p, &lc.v[j * d + off..j * d + off + dh], out);
                }
            }
        }
    }
    let attn = linear(&lc.heads[rows.clone()], lw.wo.data(), d, nh * dh);
    lc.attn_out[rows.clone()].copy_from_slice(&attn);
    apply_patches(&mut lc.attn_out, layer, Component::Attention, d, iv);
    for t in p0..t_len {
        for i in 0..d {
            lc.x_mid[t * d + i] = lc.x_in[t * d + i] + lc.attn_out[t * d + i];
        }
    }

    for t in p0..t_len {
        let row = &lc.x_mid[t * d..(t + 1) * d];
        let s = inv_rms(row, eps);
        lc.inv_mlp[t] = s;
        let h = scale_by(row, lw.mlp_norm.data(), s);
        lc.h_mlp[t * d..(t + 1) * d].copy_from_slice(&h);
    }
    let h = &lc.h_mlp[rows.clone()];
    let gate = linear(h, lw.w_gate.data(), dm, d);
    let up = linear(h, lw.w_up.data(), dm, d);
    let act: Vec<F> = gate.iter().zip(&up).map(|(&g, &u)| silu(g) * u).collect();
    let mlp = linear(&act, lw.w_down.data(), d, dm);
    lc.gate[p0 * dm..].copy_from_slice(&gate);
    lc.up[p0 * dm..].copy_from_slice(&up);
    lc.act[p0 * dm..].copy_from_slice(&act);
    lc.mlp_out[rows].copy_from_slice(&mlp);
    apply_patches(&mut lc.mlp_out, layer, Component::Mlp, d, iv);
}

fn apply_patches<F: Real>(out: &mut [F], layer: usize, component: Component, d: usize, iv: &Intervention<F>) {
    for p in iv.patches.iter().filter(|p| p.layer == layer && p.component == component) {
        out[p.position * d..(p.position + 1) * d].copy_from_slice(&p.value);
    }
}
