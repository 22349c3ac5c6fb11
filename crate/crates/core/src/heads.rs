//! Promotion/suppression taxonomy of attention heads.
//!
//! Each head's output at the last position is early-decoded, and its logit
//! for a tracked token is compared against the mean and population standard
//! deviation of the same logit across all heads of that layer.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lens::{early_decode, TrackedToken};
use crate::model::{per_head_output, ActivationTrace, WeightSet};
use crate::numerics::{mean_std, Real};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum HeadBehavior {
    Promotion,
    Suppression,
    None,
}

/// How the per-layer baseline is formed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StatsMode {
    /// One `(μ, σ)` per layer and tracked token.
    #[default]
    PerToken,
    /// One `(μ, σ)` per layer over every head and tracked token.
    Pooled,
}

impl StatsMode {
    pub fn label(self) -> &'static str {
        match self {
            StatsMode::PerToken => "per_token",
            StatsMode::Pooled => "pooled",
        }
    }
}

pub fn head_token_logit<F: Real>(
    trace: &ActivationTrace<F>,
    weights: &WeightSet<F>,
    layer: usize,
    head: usize,
    token: u32,
) -> Result<F> {
    Ok(head_logits(trace, weights, layer, head)?[check_token(weights, token)?])
}

fn check_token<F: Real>(weights: &WeightSet<F>, token: u32) -> Result<usize> {
    if token as usize >= weights.config.vocab {
        return Err(Error::TokenOutOfRange { id: token, vocab: weights.config.vocab });
    }
    Ok(token as usize)
}

fn head_logits<F: Real>(trace: &ActivationTrace<F>, weights: &WeightSet<F>, layer: usize, head: usize) -> Result<Vec<F>> {
    let last = trace.last();
    let out = per_head_output(trace, weights, layer, head, last)?;
    early_decode(&out, trace.final_resid_at(last), weights)
}

/// Mean and population standard deviation.
pub fn layer_stats(logits: &[f64]) -> (f64, f64) {
    mean_std(logits)
}

/// Relative width of the band around `mu ± sigma` treated as a tie.
const TIE_RTOL: f64 = 1e-12;

/// Strict comparison against `mu ± sigma`. Values within rounding error of a
/// threshold count as ties (`None`), so the result does not depend on how the
/// inputs were scaled.
pub fn classify(logit: f64, mu: f64, sigma: f64) -> HeadBehavior {
    let slack = TIE_RTOL * (logit.abs() + mu.abs() + sigma);
    let dev = logit - mu;
    if dev > sigma + slack {
        HeadBehavior::Promotion
    } else if dev < -sigma - slack {
        HeadBehavior::Suppression
    } else {
        HeadBehavior::None
    }
}

/// `(promotes any tracked token, suppresses any tracked token)`.
pub fn head_function(behaviors: &[HeadBehavior]) -> (bool, bool) {
    (
        behaviors.contains(&HeadBehavior::Promotion),
        behaviors.contains(&HeadBehavior::Suppression),
    )
}

/// Head functions of one instance, row-major `[layer × head]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceHeads {
    pub n_layers: usize,
    pub n_heads: usize,
    /// `[layer × head × tracked]`
    pub logits: Vec<f64>,
    pub behaviors: Vec<HeadBehavior>,
    pub functions: Vec<(bool, bool)>,
}

/// Runs the full classification for one traced instance.
pub fn classify_instance(
    trace: &ActivationTrace,
    weights: &WeightSet<f32>,
    tracked: &[TrackedToken],
    mode: StatsMode,
) -> Result<InstanceHeads> {
    if tracked.is_empty() {
        return Err(Error::Config("head classification needs at least one tracked token".into()));
    }
    let ids = tracked.iter().map(|t| check_token(weights, t.id)).collect::<Result<Vec<_>>>()?;
    let (nl, nh, nt) = (weights.config.n_layers, weights.config.n_heads, tracked.len());
    let mut logits = Vec::with_capacity(nl * nh * nt);
    for l in 0..nl {
        for h in 0..nh {
            let all = head_logits(trace, weights, l, h)?;
            logits.extend(ids.iter().map(|&i| all[i] as f64));
        }
    }
    let at = |l: usize, h: usize, k: usize| logits[(l * nh + h) * nt + k];
    let mut behaviors = vec![HeadBehavior::None; nl * nh * nt];
    for l in 0..nl {
        let pooled = layer_stats(&logits[l * nh * nt..(l + 1) * nh * nt]);
        for k in 0..nt {
            let (mu, sigma) = match mode {
                StatsMode::Pooled => pooled,
                StatsMode::PerToken => layer_stats(&(0..nh).map(|h| at(l, h, k)).collect::<Vec<_>>()),
            };
            for h in 0..nh {
                behaviors[(l * nh + h) * nt + k] = classify(at(l, h, k), mu, sigma);
            }
        }
    }
    let functions = behaviors.chunks(nt).map(head_function).collect();
    Ok(InstanceHeads { n_layers: nl, n_heads: nh, logits, behaviors, functions })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadRateTable {
    pub n_layers: usize,
    pub n_heads: usize,
    pub promotion: Vec<f64>,
    pub suppression: Vec<f64>,
    pub n_instances: usize,
}

impl HeadRateTable {
    pub fn promotion_rate(&self, layer: usize, head: usize) -> f64 {
        self.promotion[layer * self.n_heads + head]
    }

    pub fn suppression_rate(&self, layer: usize, head: usize) -> f64 {
        self.suppression[layer * self.n_heads + head]
    }
}

/// Per-head mean of the promotion and suppression indicators across instances.
pub fn aggregate_rates(instances: &[InstanceHeads]) -> Result<HeadRateTable> {
    let first = instances.first().ok_or_else(|| Error::Config("no instances to aggregate".into()))?;
    let (nl, nh) = (first.n_layers, first.n_heads);
    if instances.iter().any(|i| i.n_layers != nl || i.n_heads != nh) {
        return Err(Error::Incompatible("instances disagree on head layout".into()));
    }
    let n = instances.len() as f64;
    let rate = |pick: fn(&(bool, bool)) -> bool| -> Vec<f64> {
        (0..nl * nh).map(|i| instances.iter().filter(|x| pick(&x.functions[i])).count() as f64 / n).collect()
    };
    Ok(HeadRateTable {
        n_layers: nl,
        n_heads: nh,
        promotion: rate(|f| f.0),
        suppression: rate(|f| f.1),
        n_instances: instances.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lens::component_logit_series;
    use crate::model::{forward, CaptureSpec, Component, ModelConfig};
    use proptest::prelude::*;

    #[test]
    fn two_head_layers_sit_on_the_boundary() {
        for (a, b) in [(0.1, 0.7), (-3.3, 2.9), (1e-3, 7.77), (5.0, 5.0)] {
            for alpha in [1.0, 0.3, 7.1, 1e3] {
                let xs = [a * alpha, b * alpha];
                let (mu, sigma) = layer_stats(&xs);
                for x in xs {
                    assert_eq!(classify(x, mu, sigma), HeadBehavior::None, "{xs:?}");
                }
            }
        }
    }

    #[test]
    fn hand_example() {
        let (mu, sigma) = layer_stats(&[1.0, 2.0, 3.0, 10.0]);
        assert_eq!(mu, 4.0);
        assert!((sigma - 12.5f64.sqrt()).abs() < 1e-12);
        assert_eq!(classify(10.0, mu, sigma), HeadBehavior::Promotion);
        assert_eq!(classify(mu, mu, sigma), HeadBehavior::None);
        assert_eq!(classify(mu - 2.0 * sigma, mu, sigma), HeadBehavior::Suppression);
        assert_eq!(layer_stats(&[2.5; 4]).1, 0.0);
        assert_eq!(layer_stats(&[7.0]), (7.0, 0.0));
    }

    #[test]
    fn functions() {
        use HeadBehavior::*;
        assert_eq!(head_function(&[Promotion, None, Suppression, None]), (true, true));
        assert_eq!(head_function(&[None, None]), (false, false));
        assert_eq!(head_function(&[Promotion, Promotion]), (true, false));
    }

    fn instance(functions: Vec<(bool, bool)>) -> InstanceHeads {
        InstanceHeads { n_layers: 1, n_heads: functions.len(), logits: vec![], behaviors: vec![], functions }
    }

    #[test]
    fn rates() {
        let mut xs = vec![
            instance(vec![(true, false), (false, false)]),
            instance(vec![(true, true), (false, false)]),
            instance(vec![(false, false), (false, true)]),
            instance(vec![(true, false), (false, false)]),
        ];
        let t = aggregate_rates(&xs).unwrap();
        assert_eq!(t.promotion_rate(0, 0), 0.75);
        assert_eq!(t.suppression_rate(0, 1), 0.25);
        xs.reverse();
        assert_eq!(aggregate_rates(&xs).unwrap(), t);
        let one = aggregate_rates(&xs[..1]).unwrap();
        assert!(one.promotion.iter().chain(&one.suppression).all(|&r| r == 0.0 || r == 1.0));
        assert!(aggregate_rates(&[]).is_err());
    }

    #[test]
    fn head_logits_sum_to_attention_series() {
        let cfg = ModelConfig::micro(17);
        let w = WeightSet::<f32>::init(&cfg, 5, 0.5).unwrap();
        let (_, tr) = forward(&w, &[1, 4, 2, 9, 9, 3], &CaptureSpec::default()).unwrap();
        let toks = [TrackedToken::new("a", 2), TrackedToken::new("b", 16)];
        let series = component_logit_series(&tr, &w, Component::Attention, &toks).unwrap();
        for l in 0..2 {
            for (k, t) in toks.iter().enumerate() {
                let sum: f32 = (0..2).map(|h| head_token_logit(&tr, &w, l, h, t.id).unwrap()).sum();
                assert!((sum as f64 - series.get(l, k)).abs() <= 1e-4);
            }
        }
    }

    #[test]
    fn zeroed_head_has_zero_logits() {
        let cfg = ModelConfig::micro(17);
        let mut w = WeightSet::<f32>::init(&cfg, 6, 0.5).unwrap();
        let width = cfg.n_heads * cfg.d_head;
        for row in w.layers[1].wo.data_mut().chunks_mut(width) {
            row[..cfg.d_head].fill(0.0);
        }
        let (_, tr) = forward(&w, &[1, 4, 2], &CaptureSpec::default()).unwrap();
        for t in 0..17 {
            assert_eq!(head_token_logit(&tr, &w, 1, 0, t).unwrap(), 0.0);
        }
    }

    #[test]
    fn pooled_mode_uses_one_baseline() {
        let cfg = ModelConfig::micro(17);
        let w = WeightSet::<f32>::init(&cfg, 7, 0.5).unwrap();
        let (_, tr) = forward(&w, &[3, 1, 4, 1, 5], &CaptureSpec::default()).unwrap();
        let toks = [TrackedToken::new("a", 2), TrackedToken::new("b", 6), TrackedToken::new("c", 9)];
        let pooled = classify_instance(&tr, &w, &toks, StatsMode::Pooled).unwrap();
        for l in 0..2 {
            let (mu, sigma) = layer_stats(&pooled.logits[l * 6..(l + 1) * 6]);
            for i in 0..6 {
                assert_eq!(pooled.behaviors[l * 6 + i], classify(pooled.logits[l * 6 + i], mu, sigma));
            }
        }
        let per = classify_instance(&tr, &w, &toks, StatsMode::PerToken).unwrap();
        assert_eq!(per.logits, pooled.logits);
    }

    proptest! {
        #[test]
        fn exclusive_and_scale_covariant(xs in prop::collection::vec(-50.0f64..50.0, 1..12), alpha in 0.01f64..100.0) {
            let (mu, sigma) = layer_stats(&xs);
            let scaled: Vec<f64> = xs.iter().map(|x| x * alpha).collect();
            let (mu2, sigma2) = layer_stats(&scaled);
            for (x, y) in xs.iter().zip(&scaled) {
                let a = classify(*x, mu, sigma);
                let b = classify(*y, mu2, sigma2);
                let z = if sigma > 0.0 { (x - mu) / sigma } else { 0.0 };
                // Points sitting exactly on a threshold may flip under rounding.
                if (z.abs() - 1.0).abs() > 1e-9 {
                    prop_assert_eq!(a, b);
                }
            }
        }
    }
}
