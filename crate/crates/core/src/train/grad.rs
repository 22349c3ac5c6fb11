//! Reverse-mode gradients of the next-token cross-entropy, derived by hand
//! for every component of the forward pass.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::forward::{forward_cache, ForwardCache, Intervention, Rope};
use crate::model::{GradientSet, WeightSet};
use crate::numerics::{axpy, dot, linear_backward, log_sum_exp, sigmoid, Real};

fn rms_backward<F: Real>(x: &[F], gain: &[F], inv: F, dy: &[F], dx: &mut [F], dgain: &mut [F]) {
    let mut s = F::zero();
    for i in 0..x.len() {
        dgain[i] += dy[i] * x[i] * inv;
        s += gain[i] * dy[i] * x[i];
    }
    let c = inv * inv * inv * s / F::lit(x.len() as f64);
    for i in 0..x.len() {
        dx[i] += inv * gain[i] * dy[i] - c * x[i];
    }
}

/// Backpropagates `dlogits` (`[T × vocab]`) through a clean forward pass.
pub fn backward<F: Real>(weights: &WeightSet<F>, cache: &ForwardCache<F>, dlogits: &[F]) -> GradientSet<F> {
    let cfg = &weights.config;
    let (d, dh, nh, dm, vocab) = (cfg.d_model, cfg.d_head, cfg.n_heads, cfg.d_mlp, cfg.vocab);
    let t_len = cache.seq_len;
    let mut g = WeightSet::zeros(cfg).expect("validated config");

    let mut dh_final = vec![F::zero(); t_len * d];
    linear_backward(
        dlogits,
        &cache.h_final,
        weights.unembed.data(),
        vocab,
        d,
        Some(&mut dh_final),
        g.unembed.data_mut(),
    );
    let mut dx = vec![F::zero(); t_len * d];
    for t in 0..t_len {
        let r = t * d..(t + 1) * d;
        rms_backward(
            &cache.x_final[r.clone()],
            weights.final_norm.data(),
            cache.inv_final[t],
            &dh_final[r.clone()],
            &mut dx[r],
            g.final_norm.data_mut(),
        );
    }

    let rope = Rope::<F>::new(t_len, dh, cfg.rope_base);
    let scale = F::one() / F::lit(dh as f64).sqrt();
    for l in (0..cfg.n_layers).rev() {
        let lc = &cache.layers[l];
        let lw = &weights.layers[l];
        let gl = &mut g.layers[l];

        // MLP block; dx is the gradient w.r.t. x_mid + mlp_out.
        let mut dact = vec![F::zero(); t_len * dm];
        linear_backward(&dx, &lc.act, lw.w_down.data(), d, dm, Some(&mut dact), gl.w_down.data_mut());
        let mut dgate = vec![F::zero(); t_len * dm];
        let mut dup = vec![F::zero(); t_len * dm];
        for i in 0..t_len * dm {
            let (gv, uv) = (lc.gate[i], lc.up[i]);
            let sg = sigmoid(gv);
            let silu = gv * sg;
            dup[i] = dact[i] * silu;
            dgate[i] = dact[i] * uv * sg * (F::one() + gv * (F::one() - sg));
        }
        let mut dh2 = vec![F::zero(); t_len * d];
        linear_backward(&dgate, &lc.h_mlp, lw.w_gate.data(), dm, d, Some(&mut dh2), gl.w_gate.data_mut());
        linear_backward(&dup, &lc.h_mlp, lw.w_up.data(), dm, d, Some(&mut dh2), gl.w_up.data_mut());
        let mut dx_mid = dx.clone();
        for t in 0..t_len {
            let r = t * d..(t + 1) * d;
            rms_backward(
                &lc.x_mid[r.clone()],
                lw.mlp_norm.data(),
                lc.inv_mlp[t],
                &dh2[r.clone()],
                &mut dx_mid[r],
                gl.mlp_norm.data_mut(),
            );
        }

        // Attention block; dx_mid is the gradient w.r.t. x_in + attn_out.
        let mut dheads = vec![F::zero(); t_len * d];
        linear_backward(&dx_mid, &lc.heads, lw.wo.data(), d, nh * dh, Some(&mut dheads), gl.wo.data_mut());
        let mut dq = vec![F::zero(); t_len * d];
        let mut dk = vec![F::zero(); t_len * d];
        let mut dv = vec![F::zero(); t_len * d];
        let mut dp = vec![F::zero(); t_len];
        for h in 0..nh {
            let off = h * dh;
            for qi in 0..t_len {
                let base = (h * t_len + qi) * t_len;
                let prow = &lc.probs[base..base + t_len];
                let dout = &dheads[qi * d + off..qi * d + off + dh];
                let mut weighted = F::zero();
                for j in 0..=qi {
                    dp[j] = dot(dout, &lc.v[j * d + off..j * d + off + dh]);
                    axpy(prow[j], dout, &mut dv[j * d + off..j * d + off + dh]);
                    weighted += prow[j] * dp[j];
                }
                for j in 0..=qi {
                    let ds = prow[j] * (dp[j] - weighted) * scale;
                    if ds != F::zero() {
                        axpy(ds, &lc.k[j * d + off..j * d + off + dh], &mut dq[qi * d + off..qi * d + off + dh]);
                        axpy(ds, &lc.q[qi * d + off..qi * d + off + dh], &mut dk[j * d + off..j * d + off + dh]);
                    }
                }
            }
        }
        for t in 0..t_len {
            rope.rotate(&mut dq[t * d..(t + 1) * d], t, dh, true);
            rope.rotate(&mut dk[t * d..(t + 1) * d], t, dh, true);
        }
        let mut dh1 = vec![F::zero(); t_len * d];
        linear_backward(&dq, &lc.h_attn, lw.wq.data(), d, d, Some(&mut dh1), gl.wq.data_mut());
        linear_backward(&dk, &lc.h_attn, lw.wk.data(), d, d, Some(&mut dh1), gl.wk.data_mut());
        linear_backward(&dv, &lc.h_attn, lw.wv.data(), d, d, Some(&mut dh1), gl.wv.data_mut());
        let mut dx_in = dx_mid;
        for t in 0..t_len {
            let r = t * d..(t + 1) * d;
            rms_backward(
                &lc.x_in[r.clone()],
                lw.attn_norm.data(),
                lc.inv_attn[t],
                &dh1[r.clone()],
                &mut dx_in[r],
                gl.attn_norm.data_mut(),
            );
        }
        dx = dx_in;
    }

    for (t, &tok) in cache.tokens.iter().enumerate() {
        axpy(F::one(), &dx[t * d..(t + 1) * d], g.embed.row_mut(tok as usize));
    }
    g
}

/// Summed cross-entropy of a document and the matching `dlogits`, scaled by `weight`.
fn doc_loss<F: Real>(cache: &ForwardCache<F>, vocab: usize, weight: F) -> (f64, Vec<F>) {
    let t_len = cache.seq_len;
    let mut dlogits = vec![F::zero(); t_len * vocab];
    let mut loss = 0.0;
    for t in 0..t_len.saturating_sub(1) {
        let target = cache.tokens[t + 1] as usize;
        let row = cache.logits_at(t, vocab);
        let lse = log_sum_exp(row);
        loss += (lse - row[target]).as_f64();
        let drow = &mut dlogits[t * vocab..(t + 1) * vocab];
        for (dz, &z) in drow.iter_mut().zip(row) {
            *dz = (z - lse).exp() * weight;
        }
        drow[target] -= weight;
    }
    (loss, dlogits)
}

fn predicted_positions(batch: &[Vec<u32>]) -> usize {
    batch.iter().map(|d| d.len().saturating_sub(1)).sum()
}

pub fn add_into<F: Real>(acc: &mut GradientSet<F>, other: &GradientSet<F>) {
    for ((_, a), (_, b)) in acc.arrays_mut().into_iter().zip(other.arrays()) {
        for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
            *x += *y;
        }
    }
}

/// Mean next-token cross-entropy over every predicted position in the batch,
/// and its gradient.
///
/// Documents are processed in parallel; partial gradients are summed in batch
/// order so the result does not depend on the worker count.
pub fn loss_and_grads<F: Real>(weights: &WeightSet<F>, batch: &[Vec<u32>]) -> Result<(f64, GradientSet<F>)> {
    let n = predicted_positions(batch);
    if n == 0 {
        return Err(Error::Shape("batch has no predicted positions".into()));
    }
    let weight = F::one() / F::lit(n as f64);
    let vocab = weights.config.vocab;
    let parts: Vec<Result<(f64, GradientSet<F>)>> = batch
        .par_iter()
        .map(|doc| {
            let cache = forward_cache(weights, doc, &Intervention::none())?;
            let (loss, dlogits) = doc_loss(&cache, vocab, weight);
            Ok((loss, backward(weights, &cache, &dlogits)))
        })
        .collect();
    let mut total = 0.0;
    let mut grads: Option<GradientSet<F>> = None;
    for part in parts {
        let (loss, g) = part?;
        total += loss;
        match grads.as_mut() {
            Some(acc) => add_into(acc, &g),
            None => grads = Some(g),
        }
    }
    let loss = total / n as f64;
    if !loss.is_finite() {
        return Err(Error::NumericDomain(format!("non-finite loss {loss}")));
    }
    Ok((loss, grads.expect("non-empty batch")))
}

/// Forward-only mean cross-entropy, used by finite-difference checks.
pub fn batch_loss<F: Real>(weights: &WeightSet<F>, batch: &[Vec<u32>]) -> Result<f64> {
    let n = predicted_positions(batch);
    if n == 0 {
        return Err(Error::Shape("batch has no predicted positions".into()));
    }
    let vocab = weights.config.vocab;
    let mut total = 0.0;
    for doc in batch {
        let cache = forward_cache(weights, doc, &Intervention::none())?;
        for t in 0..doc.len().saturating_sub(1) {
            let row = cache.logits_at(t, vocab);
            total += (log_sum_exp(row) - row[doc[t + 1] as usize]).as_f64();
        }
    }
    Ok(total / n as f64)
}
