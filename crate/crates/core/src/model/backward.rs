//! Hand-written reverse pass for the next-token cross-entropy loss.

use super::forward::{forward_batch, gelu_grad, Capture, ForwardOptions, Rope, StateLink};
use super::params::{Layout, ModelParams};
use crate::error::{Error, Result};
use crate::numeric::{col_sum_acc, gemm, matmul_nt, matmul_tn_acc, Scalar, View, ViewMut};

/// Mean next-token cross-entropy over every position that has a successor,
/// together with its gradient with respect to all parameters.
pub fn loss_and_grad<S: Scalar, T: AsRef<[u32]>>(params: &ModelParams<S>, seqs: &[T]) -> Result<(f64, Vec<S>)> {
    loss_and_grad_linked(params, seqs, &[])
}

/// [`loss_and_grad`] with state links active during the forward pass.
pub fn loss_and_grad_linked<S: Scalar, T: AsRef<[u32]>>(
    params: &ModelParams<S>,
    seqs: &[T],
    links: &[StateLink],
) -> Result<(f64, Vec<S>)> {
    let pass = forward_batch(
        params,
        seqs,
        ForwardOptions {
            interventions: &[],
            capture: Capture::Off,
            links,
            keep_cache: true,
        },
    )?;
    let cfg = &params.config;
    let (d, v, f, nh) = (cfg.d_model, cfg.vocab_size, cfg.d_ff, cfg.n_heads);
    let dh = cfg.head_dim();
    let max_len = pass.offsets.windows(2).map(|w| w[1] - w[0]).max().unwrap_or(0);
    let rope = Rope::<S>::new(dh, max_len);
    let rows = *pass.offsets.last().unwrap();
    let count: usize = seqs.iter().map(|s| s.as_ref().len() - 1).sum();
    if count == 0 {
        return Err(Error::Argument("no next-token targets in batch".into()));
    }
    let inv_count = S::from_f64(1.0 / count as f64);

    let mut loss = 0.0f64;
    let mut dlogits = vec![S::zero(); rows * v];
    for (s, seq) in seqs.iter().enumerate() {
        let seq = seq.as_ref();
        for pos in 0..seq.len() - 1 {
            let r = pass.offsets[s] + pos;
            let target = seq[pos + 1] as usize;
            let row = pass.row_logits(r);
            let max = row.iter().copied().fold(S::neg_infinity(), S::max);
            let mut sum = S::zero();
            let drow = &mut dlogits[r * v..(r + 1) * v];
            for (o, x) in drow.iter_mut().zip(row) {
                *o = (*x - max).exp();
                sum = sum + *o;
            }
            loss -= (drow[target] / sum).as_f64().ln();
            for o in drow.iter_mut() {
                *o = *o / sum * inv_count;
            }
            drow[target] = drow[target] - inv_count;
        }
    }
    loss /= count as f64;

    let cache = pass.cache.as_ref().expect("cache requested");
    let layout = Layout::new(cfg);
    let p = &params.data;
    let mut grad = vec![S::zero(); layout.total];

    matmul_tn_acc(&cache.xnf, &dlogits, &mut grad[layout.w_out..][..d * v], rows, d, v);
    let mut dxnf = vec![S::zero(); rows * d];
    matmul_nt(&dlogits, &p[layout.w_out..][..d * v], &mut dxnf, rows, v, d, false);
    let mut dx = vec![S::zero(); rows * d];
    ln_backward(
        &cache.x_final,
        &p[layout.lnf_g..][..d],
        &cache.rstdf,
        &dxnf,
        &mut grad,
        layout.lnf_g,
        layout.lnf_b,
        &mut dx,
    );

    let scale = S::from_f64(1.0 / (dh as f64).sqrt());
    for (l, lc) in cache.layers.iter().enumerate().rev() {
        let bl = &layout.blocks[l];
        for link in links.iter().filter(|k| k.layer == l) {
            let src = pass.offsets[link.source.0] + link.source.1;
            let dst = pass.offsets[link.target.0] + link.target.1;
            let alpha = S::from_f64(link.alpha as f64);
            for i in 0..d {
                dx[src * d + i] = dx[src * d + i] + alpha * dx[dst * d + i];
            }
        }

        // MLP branch: x2 = x1 + proj(gelu(fc(ln2(x1))))
        matmul_tn_acc(&lc.hact, &dx, &mut grad[bl.w_proj..][..f * d], rows, f, d);
        col_sum_acc(&dx, &mut grad[bl.b_proj..][..d]);
        let mut dh_act = vec![S::zero(); rows * f];
        matmul_nt(&dx, &p[bl.w_proj..][..f * d], &mut dh_act, rows, d, f, false);
        for (g, pre) in dh_act.iter_mut().zip(&lc.hpre) {
            *g = *g * S::from_f64(gelu_grad(pre.as_f64()));
        }
        matmul_tn_acc(&lc.xn2, &dh_act, &mut grad[bl.w_fc..][..d * f], rows, d, f);
        col_sum_acc(&dh_act, &mut grad[bl.b_fc..][..f]);
        let mut dxn2 = vec![S::zero(); rows * d];
        matmul_nt(&dh_act, &p[bl.w_fc..][..d * f], &mut dxn2, rows, f, d, false);
        let mut dx1 = dx.clone();
        ln_backward(
            &lc.x1,
            &p[bl.ln2_g..][..d],
            &lc.rstd2,
            &dxn2,
            &mut grad,
            bl.ln2_g,
            bl.ln2_b,
            &mut dx1,
        );

        // Attention branch: x1 = x + o(attn(ln1(x)))
        matmul_tn_acc(&lc.att, &dx1, &mut grad[bl.w_o..][..d * d], rows, d, d);
        col_sum_acc(&dx1, &mut grad[bl.b_o..][..d]);
        let mut datt = vec![S::zero(); rows * d];
        matmul_nt(&dx1, &p[bl.w_o..][..d * d], &mut datt, rows, d, d, false);

        let mut dqkv = vec![S::zero(); rows * 3 * d];
        let mut poff = 0;
        for s in 0..pass.n_seqs() {
            let r0 = pass.offsets[s];
            let t = pass.offsets[s + 1] - r0;
            let mut ds = vec![S::zero(); t * t];
            for h in 0..nh {
                let probs = &lc.probs[poff + h * t * t..poff + (h + 1) * t * t];
                let d_out = View::strided(&datt, r0 * d + h * dh, t, dh, d, 1);
                let q = View::strided(&lc.qkv, r0 * 3 * d + h * dh, t, dh, 3 * d, 1);
                let k = View::strided(&lc.qkv, r0 * 3 * d + d + h * dh, t, dh, 3 * d, 1);
                let vv = View::strided(&lc.qkv, r0 * 3 * d + 2 * d + h * dh, t, dh, 3 * d, 1);

                gemm(S::one(), d_out, vv.t(), S::zero(), ViewMut::dense(&mut ds, t, t));
                gemm(
                    S::one(),
                    View::dense(probs, t, t).t(),
                    d_out,
                    S::zero(),
                    ViewMut::strided(&mut dqkv, r0 * 3 * d + 2 * d + h * dh, t, dh, 3 * d, 1),
                );
                for i in 0..t {
                    let prow = &probs[i * t..(i + 1) * t];
                    let drow = &mut ds[i * t..(i + 1) * t];
                    let dotp: S = prow.iter().zip(drow.iter()).map(|(a, b)| *a * *b).sum();
                    for (dv, pv) in drow.iter_mut().zip(prow) {
                        *dv = *pv * (*dv - dotp);
                    }
                }
                gemm(
                    scale,
                    View::dense(&ds, t, t),
                    k,
                    S::zero(),
                    ViewMut::strided(&mut dqkv, r0 * 3 * d + h * dh, t, dh, 3 * d, 1),
                );
                gemm(
                    scale,
                    View::dense(&ds, t, t).t(),
                    q,
                    S::zero(),
                    ViewMut::strided(&mut dqkv, r0 * 3 * d + d + h * dh, t, dh, 3 * d, 1),
                );
            }
            poff += nh * t * t;
        }

        rope.rotate(&mut dqkv, &pass.offsets, d, nh, true);
        matmul_tn_acc(&lc.xn1, &dqkv, &mut grad[bl.w_qkv..][..d * 3 * d], rows, d, 3 * d);
        col_sum_acc(&dqkv, &mut grad[bl.b_qkv..][..3 * d]);
        let mut dxn1 = vec![S::zero(); rows * d];
        matmul_nt(&dqkv, &p[bl.w_qkv..][..d * 3 * d], &mut dxn1, rows, 3 * d, d, false);
        let mut dx_in = dx1;
        ln_backward(
            &lc.x_in,
            &p[bl.ln1_g..][..d],
            &lc.rstd1,
            &dxn1,
            &mut grad,
            bl.ln1_g,
            bl.ln1_b,
            &mut dx_in,
        );
        dx = dx_in;
    }

    for s in 0..pass.n_seqs() {
        let r0 = pass.offsets[s];
        for r in r0..pass.offsets[s + 1] {
            let tok = cache.tokens[r] as usize;
            let row = &mut grad[layout.tok_emb + tok * d..][..d];
            for (g, s) in row.iter_mut().zip(&dx[r * d..(r + 1) * d]) {
                *g = *g + *s;
            }
        }
    }

    Ok((loss, grad))
}

/// Accumulates the layer-norm input gradient into `dx` and the gain/bias
/// gradients into `grad` at the given offsets.
#[allow(clippy::too_many_arguments)]
fn ln_backward<S: Scalar>(
    x: &[S],
    gain: &[S],
    rstd: &[S],
    dy: &[S],
    grad: &mut [S],
    g_off: usize,
    b_off: usize,
    dx: &mut [S],
) {
    let d = gain.len();
    let inv_d = S::from_f64(1.0 / d as f64);
    let mut xhat = vec![S::zero(); d];
    let mut dxhat = vec![S::zero(); d];
    for (r, (xrow, dyrow)) in x.chunks_exact(d).zip(dy.chunks_exact(d)).enumerate() {
        let mean = xrow.iter().copied().sum::<S>() * inv_d;
        let rs = rstd[r];
        for i in 0..d {
            xhat[i] = (xrow[i] - mean) * rs;
            grad[g_off + i] = grad[g_off + i] + dyrow[i] * xhat[i];
            grad[b_off + i] = grad[b_off + i] + dyrow[i];
            dxhat[i] = dyrow[i] * gain[i];
        }
        let m1 = dxhat.iter().copied().sum::<S>() * inv_d;
        let m2 = dxhat.iter().zip(&xhat).map(|(a, b)| *a * *b).sum::<S>() * inv_d;
        let out = &mut dx[r * d..(r + 1) * d];
        for i in 0..d {
            out[i] = out[i] + rs * (dxhat[i] - m1 - xhat[i] * m2);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::config::ModelConfig;

    fn small() -> ModelConfig {
        ModelConfig {
            vocab_size: 11,
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            d_ff: 16,
            context_len: 9,
            seed: 5,
        }
    }

    fn check_gradient(links: &[StateLink]) -> f64 {
        let mut params = ModelParams::<f64>::init(&small());
        // Larger weights than the default init make every path contribute.
        for (i, v) in params.data.iter_mut().enumerate() {
            *v += 0.05 * ((i as f64 * 0.7).sin());
        }
        let seqs = vec![vec![1u32, 4, 2, 9, 3, 3, 0], vec![7u32, 5, 10, 1]];
        let (_, grad) = loss_and_grad_linked(&params, &seqs, links).unwrap();
        let eps = 1e-5;
        let stride = params.data.len() / 150;
        let mut checked = 0;
        let mut worst: f64 = 0.0;
        for i in (0..params.data.len()).step_by(stride.max(1)) {
            let orig = params.data[i];
            params.data[i] = orig + eps;
            let (lp, _) = loss_and_grad_linked(&params, &seqs, links).unwrap();
            params.data[i] = orig - eps;
            let (lm, _) = loss_and_grad_linked(&params, &seqs, links).unwrap();
            params.data[i] = orig;
            let numeric = (lp - lm) / (2.0 * eps);
            let rel = (numeric - grad[i]).abs() / (numeric.abs() + grad[i].abs()).max(1e-8);
            // Below ~1e-6 the difference quotient is dominated by rounding.
            if numeric.abs() + grad[i].abs() > 1e-6 {
                worst = worst.max(rel);
            }
            checked += 1;
        }
        assert!(checked >= 100);
        worst
    }

    #[test]
    fn analytic_gradient_matches_central_differences() {
        let worst = check_gradient(&[]);
        assert!(worst < 1e-4, "worst relative error {worst}");
    }

    #[test]
    fn linked_gradient_matches_central_differences() {
        let link = StateLink {
            layer: 0,
            alpha: 2.0,
            source: (0, 4),
            target: (1, 2),
        };
        let worst = check_gradient(&[link]);
        assert!(worst < 1e-4, "worst relative error {worst}");
    }
}
