//! Packed-batch forward pass with last-token capture and intervention.
//!
//! Sequences of different lengths are concatenated row-wise so the dense
//! projections run as single matrix products; attention is computed per
//! sequence with a causal mask.

use super::intervention::{InterventionMode, InterventionSpec};
use super::params::{Layout, ModelParams};
use crate::error::{Error, Result};
use crate::numeric::{add_bias, gemm, matmul, softmax_in_place, Scalar, View, ViewMut};

pub(crate) const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_K: f64 = 0.044_715;
const ROPE_BASE: f64 = 10_000.0;

/// What to record about each sequence's last token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Capture {
    #[default]
    Off,
    /// Residual state after every block.
    States,
    /// States plus the attention and MLP contributions of every block.
    Debug,
}

/// Per-block attention and MLP outputs for the last token.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualContributions {
    /// Residual state entering block 0 (the token embedding).
    pub input: Vec<f32>,
    /// `L x d`, row `l` is the attention output of block `l`.
    pub attn: Vec<f32>,
    /// `L x d`, row `l` is the MLP output of block `l`.
    pub mlp: Vec<f32>,
}

/// Last-token residual states, one row per block.
///
/// Row `l` is the state produced by block `l` before any intervention at
/// that layer and before the final layer norm.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenTrace {
    pub n_layers: usize,
    pub d_model: usize,
    pub states: Vec<f32>,
    pub contributions: Option<ResidualContributions>,
}

impl HiddenTrace {
    pub fn state(&self, layer: usize) -> &[f32] {
        &self.states[layer * self.d_model..(layer + 1) * self.d_model]
    }

    /// Largest relative error of `h_l = h_{l-1} + a_l + m_l` over all layers.
    ///
    /// Returns `None` when contributions were not captured.
    pub fn recurrence_error(&self) -> Option<f64> {
        let c = self.contributions.as_ref()?;
        let d = self.d_model;
        let mut worst = 0.0f64;
        for l in 0..self.n_layers {
            let prev = if l == 0 { &c.input[..] } else { self.state(l - 1) };
            let h = self.state(l);
            let mut diff = 0.0f64;
            let mut norm = 0.0f64;
            for i in 0..d {
                let rebuilt = prev[i] as f64 + c.attn[l * d + i] as f64 + c.mlp[l * d + i] as f64;
                diff += (rebuilt - h[i] as f64).powi(2);
                norm += (h[i] as f64).powi(2);
            }
            worst = worst.max(diff.sqrt() / norm.sqrt().max(1e-12));
        }
        Some(worst)
    }
}

#[derive(Debug, Clone, Default)]
pub(crate) struct LayerCache<S> {
    pub x_in: Vec<S>,
    pub xn1: Vec<S>,
    pub rstd1: Vec<S>,
    pub qkv: Vec<S>,
    pub probs: Vec<S>,
    pub att: Vec<S>,
    pub x1: Vec<S>,
    pub xn2: Vec<S>,
    pub rstd2: Vec<S>,
    pub hpre: Vec<S>,
    pub hact: Vec<S>,
}

#[derive(Debug, Clone, Default)]
pub(crate) struct Cache<S> {
    pub tokens: Vec<u32>,
    pub layers: Vec<LayerCache<S>>,
    pub x_final: Vec<S>,
    pub xnf: Vec<S>,
    pub rstdf: Vec<S>,
}

/// Output of a packed forward pass.
#[derive(Debug, Clone)]
pub struct ForwardPass<S> {
    /// `rows x vocab` logits for every position of every sequence.
    pub logits: Vec<S>,
    /// Row offset of each sequence; has one extra trailing entry.
    pub offsets: Vec<usize>,
    pub vocab_size: usize,
    /// One trace per sequence when capture was requested, else empty.
    pub traces: Vec<HiddenTrace>,
    pub(crate) cache: Option<Cache<S>>,
}

impl<S: Scalar> ForwardPass<S> {
    pub fn n_seqs(&self) -> usize {
        self.offsets.len() - 1
    }

    /// Next-token logits at the last position of sequence `s`.
    pub fn last_logits(&self, s: usize) -> &[S] {
        let r = self.offsets[s + 1] - 1;
        &self.logits[r * self.vocab_size..(r + 1) * self.vocab_size]
    }

    pub fn row_logits(&self, row: usize) -> &[S] {
        &self.logits[row * self.vocab_size..(row + 1) * self.vocab_size]
    }
}

/// Adds `alpha` times the state of one batch position to another after
/// block `layer`, with gradients flowing into both. Used to train with
/// task-vector prompting; positions are `(sequence, token)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StateLink {
    pub layer: usize,
    pub alpha: f32,
    pub source: (usize, usize),
    pub target: (usize, usize),
}

/// Knobs for [`forward_batch`].
#[derive(Debug, Clone, Copy, Default)]
pub struct ForwardOptions<'a> {
    /// Either empty (no interventions) or one entry per sequence.
    pub interventions: &'a [Option<&'a InterventionSpec>],
    pub capture: Capture,
    pub links: &'a [StateLink],
    /// Keep activations for a backward pass.
    pub keep_cache: bool,
}

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

/// Rotary position tables: pair `(2i, 2i+1)` of every query and key head
/// is rotated by `pos * 10000^(-2i/dh)`.
pub(crate) struct Rope<S> {
    half: usize,
    cos: Vec<S>,
    sin: Vec<S>,
}

impl<S: Scalar> Rope<S> {
    pub(crate) fn new(dh: usize, max_len: usize) -> Self {
        let half = dh / 2;
        let mut cos = Vec::with_capacity(max_len * half);
        let mut sin = Vec::with_capacity(max_len * half);
        for pos in 0..max_len {
            for i in 0..half {
                let angle = pos as f64 * ROPE_BASE.powf(-2.0 * i as f64 / dh as f64);
                cos.push(S::from_f64(angle.cos()));
                sin.push(S::from_f64(angle.sin()));
            }
        }
        Rope { half, cos, sin }
    }

    /// Rotates the query and key parts of packed `qkv` rows in place;
    /// `inverse` applies the transpose, which maps gradients back.
    pub(crate) fn rotate(&self, qkv: &mut [S], offsets: &[usize], d: usize, nh: usize, inverse: bool) {
        let dh = 2 * self.half;
        for w in offsets.windows(2) {
            for (pos, r) in (w[0]..w[1]).enumerate() {
                let row = &mut qkv[r * 3 * d..r * 3 * d + 2 * d];
                let cs = &self.cos[pos * self.half..(pos + 1) * self.half];
                let sn = &self.sin[pos * self.half..(pos + 1) * self.half];
                for head in row.chunks_exact_mut(dh).take(2 * nh) {
                    for i in 0..self.half {
                        let (a, b) = (head[2 * i], head[2 * i + 1]);
                        let s = if inverse { S::zero() - sn[i] } else { sn[i] };
                        head[2 * i] = a * cs[i] - b * s;
                        head[2 * i + 1] = a * s + b * cs[i];
                    }
                }
            }
        }
    }
}

/// Row-wise layer norm; writes normalized-and-scaled rows and `1/std` per row.
pub(crate) fn layer_norm<S: Scalar>(x: &[S], gain: &[S], bias: &[S], out: &mut [S], rstd: &mut [S]) {
    let d = gain.len();
    let eps = S::from_f64(LN_EPS);
    let inv_d = S::from_f64(1.0 / d as f64);
    for (r, (row, orow)) in x.chunks_exact(d).zip(out.chunks_exact_mut(d)).enumerate() {
        let mean = row.iter().copied().sum::<S>() * inv_d;
        let var = row.iter().map(|v| (*v - mean) * (*v - mean)).sum::<S>() * inv_d;
        let rs = (var + eps).sqrt().recip();
        rstd[r] = rs;
        for i in 0..d {
            orow[i] = (row[i] - mean) * rs * gain[i] + bias[i];
        }
    }
}

fn validate_tokens<S: Scalar, T: AsRef<[u32]>>(params: &ModelParams<S>, seqs: &[T]) -> Result<()> {
    let cfg = &params.config;
    if seqs.is_empty() {
        return Err(Error::Argument("empty batch".into()));
    }
    for seq in seqs {
        let seq = seq.as_ref();
        if seq.is_empty() {
            return Err(Error::EmptySequence);
        }
        if seq.len() > cfg.context_len {
            return Err(Error::SequenceTooLong {
                len: seq.len(),
                max: cfg.context_len,
            });
        }
        if let Some(&t) = seq.iter().find(|&&t| t as usize >= cfg.vocab_size) {
            return Err(Error::Argument(format!(
                "token {t} outside vocabulary of {}",
                cfg.vocab_size
            )));
        }
    }
    Ok(())
}

/// Runs the transformer over a packed batch of sequences.
pub fn forward_batch<S: Scalar, T: AsRef<[u32]>>(
    params: &ModelParams<S>,
    seqs: &[T],
    opts: ForwardOptions<'_>,
) -> Result<ForwardPass<S>> {
    validate_tokens(params, seqs)?;
    let cfg = &params.config;
    if !opts.interventions.is_empty() && opts.interventions.len() != seqs.len() {
        return Err(Error::Argument(format!(
            "{} interventions for {} sequences",
            opts.interventions.len(),
            seqs.len()
        )));
    }
    for spec in opts.interventions.iter().flatten() {
        spec.validate(cfg.n_layers, cfg.d_model)?;
    }
    for link in opts.links {
        let in_range = |(s, pos): (usize, usize)| s < seqs.len() && pos < seqs[s].as_ref().len();
        if link.layer >= cfg.n_layers || !in_range(link.source) || !in_range(link.target) {
            return Err(Error::Argument(format!("state link {link:?} out of range")));
        }
        if opts
            .links
            .iter()
            .any(|o| o.layer == link.layer && o.target == link.source)
        {
            return Err(Error::Argument(format!("state link {link:?} reads a linked target")));
        }
    }

    let layout = Layout::new(cfg);
    let p = &params.data;
    let (d, v, f, nh) = (cfg.d_model, cfg.vocab_size, cfg.d_ff, cfg.n_heads);
    let dh = cfg.head_dim();
    let scale = S::from_f64(1.0 / (dh as f64).sqrt());

    let rope = Rope::<S>::new(dh, seqs.iter().map(|s| s.as_ref().len()).max().unwrap_or(0));
    let mut offsets = Vec::with_capacity(seqs.len() + 1);
    offsets.push(0);
    for seq in seqs {
        offsets.push(offsets.last().unwrap() + seq.as_ref().len());
    }
    let rows = *offsets.last().unwrap();
    let prob_len: usize = seqs.iter().map(|s| nh * s.as_ref().len().pow(2)).sum();

    let mut tokens = Vec::with_capacity(rows);
    let mut x = vec![S::zero(); rows * d];
    for (s, seq) in seqs.iter().enumerate() {
        for (pos, &tok) in seq.as_ref().iter().enumerate() {
            let r = offsets[s] + pos;
            tokens.push(tok);
            x[r * d..(r + 1) * d].copy_from_slice(&p[layout.tok_emb + tok as usize * d..][..d]);
        }
    }

    let capture = opts.capture;
    let n_layers = cfg.n_layers;
    let mut traces: Vec<HiddenTrace> = if capture == Capture::Off {
        Vec::new()
    } else {
        (0..seqs.len())
            .map(|s| {
                let r = offsets[s + 1] - 1;
                HiddenTrace {
                    n_layers,
                    d_model: d,
                    states: vec![0.0; n_layers * d],
                    contributions: (capture == Capture::Debug).then(|| ResidualContributions {
                        input: x[r * d..(r + 1) * d].iter().map(|v| v.as_f64() as f32).collect(),
                        attn: vec![0.0; n_layers * d],
                        mlp: vec![0.0; n_layers * d],
                    }),
                }
            })
            .collect()
    };

    let mut layer_caches = Vec::with_capacity(if opts.keep_cache { n_layers } else { 0 });
    for (l, bl) in layout.blocks.iter().enumerate() {
        let mut xn1 = vec![S::zero(); rows * d];
        let mut rstd1 = vec![S::zero(); rows];
        layer_norm(&x, &p[bl.ln1_g..][..d], &p[bl.ln1_b..][..d], &mut xn1, &mut rstd1);

        let mut qkv = vec![S::zero(); rows * 3 * d];
        matmul(&xn1, &p[bl.w_qkv..][..d * 3 * d], &mut qkv, rows, d, 3 * d, false);
        add_bias(&mut qkv, &p[bl.b_qkv..][..3 * d]);
        rope.rotate(&mut qkv, &offsets, d, nh, false);

        let mut probs = vec![S::zero(); prob_len];
        let mut att = vec![S::zero(); rows * d];
        let mut poff = 0;
        for s in 0..seqs.len() {
            let r0 = offsets[s];
            let t = offsets[s + 1] - r0;
            for h in 0..nh {
                let pslice = &mut probs[poff + h * t * t..poff + (h + 1) * t * t];
                let q = View::strided(&qkv, r0 * 3 * d + h * dh, t, dh, 3 * d, 1);
                let k = View::strided(&qkv, r0 * 3 * d + d + h * dh, t, dh, 3 * d, 1);
                gemm(scale, q, k.t(), S::zero(), ViewMut::dense(pslice, t, t));
                for i in 0..t {
                    let row = &mut pslice[i * t..(i + 1) * t];
                    softmax_in_place(&mut row[..=i]);
                    row[i + 1..].fill(S::zero());
                }
                let vv = View::strided(&qkv, r0 * 3 * d + 2 * d + h * dh, t, dh, 3 * d, 1);
                gemm(
                    S::one(),
                    View::dense(pslice, t, t),
                    vv,
                    S::zero(),
                    ViewMut::strided(&mut att, r0 * d + h * dh, t, dh, d, 1),
                );
            }
            poff += nh * t * t;
        }

        let mut a = vec![S::zero(); rows * d];
        matmul(&att, &p[bl.w_o..][..d * d], &mut a, rows, d, d, false);
        add_bias(&mut a, &p[bl.b_o..][..d]);
        let x1: Vec<S> = x.iter().zip(&a).map(|(u, w)| *u + *w).collect();

        let mut xn2 = vec![S::zero(); rows * d];
        let mut rstd2 = vec![S::zero(); rows];
        layer_norm(&x1, &p[bl.ln2_g..][..d], &p[bl.ln2_b..][..d], &mut xn2, &mut rstd2);
        let mut hpre = vec![S::zero(); rows * f];
        matmul(&xn2, &p[bl.w_fc..][..d * f], &mut hpre, rows, d, f, false);
        add_bias(&mut hpre, &p[bl.b_fc..][..f]);
        let hact: Vec<S> = hpre.iter().map(|u| S::from_f64(gelu(u.as_f64()))).collect();
        let mut m = vec![S::zero(); rows * d];
        matmul(&hact, &p[bl.w_proj..][..f * d], &mut m, rows, f, d, false);
        add_bias(&mut m, &p[bl.b_proj..][..d]);
        let mut x2: Vec<S> = x1.iter().zip(&m).map(|(u, w)| *u + *w).collect();

        for (s, trace) in traces.iter_mut().enumerate() {
            let r = offsets[s + 1] - 1;
            let dst = &mut trace.states[l * d..(l + 1) * d];
            for (o, val) in dst.iter_mut().zip(&x2[r * d..(r + 1) * d]) {
                *o = val.as_f64() as f32;
            }
            if let Some(c) = trace.contributions.as_mut() {
                for i in 0..d {
                    c.attn[l * d + i] = a[r * d + i].as_f64() as f32;
                    c.mlp[l * d + i] = m[r * d + i].as_f64() as f32;
                }
            }
        }

        for (s, spec) in opts.interventions.iter().enumerate() {
            let Some(spec) = spec else { continue };
            if spec.layer != l {
                continue;
            }
            let r = offsets[s + 1] - 1;
            let row = &mut x2[r * d..(r + 1) * d];
            match spec.mode {
                InterventionMode::Add => {
                    let alpha = S::from_f64(spec.alpha as f64);
                    for (h, t) in row.iter_mut().zip(&spec.vector) {
                        *h = *h + alpha * S::from_f64(*t as f64);
                    }
                }
                InterventionMode::Replace => {
                    for (h, t) in row.iter_mut().zip(&spec.vector) {
                        *h = S::from_f64(*t as f64);
                    }
                }
            }
        }

        for link in opts.links.iter().filter(|k| k.layer == l) {
            let src = offsets[link.source.0] + link.source.1;
            let dst = offsets[link.target.0] + link.target.1;
            let alpha = S::from_f64(link.alpha as f64);
            for i in 0..d {
                let v = x2[src * d + i];
                x2[dst * d + i] = x2[dst * d + i] + alpha * v;
            }
        }

        if x2.iter().any(|u| !u.is_finite()) {
            return Err(Error::NonFinite { layer: l });
        }

        let x_in = std::mem::replace(&mut x, x2);
        if opts.keep_cache {
            layer_caches.push(LayerCache {
                x_in,
                xn1,
                rstd1,
                qkv,
                probs,
                att,
                x1,
                xn2,
                rstd2,
                hpre,
                hact,
            });
        }
    }

    let mut xnf = vec![S::zero(); rows * d];
    let mut rstdf = vec![S::zero(); rows];
    layer_norm(
        &x,
        &p[layout.lnf_g..][..d],
        &p[layout.lnf_b..][..d],
        &mut xnf,
        &mut rstdf,
    );
    let mut logits = vec![S::zero(); rows * v];
    matmul(&xnf, &p[layout.w_out..][..d * v], &mut logits, rows, d, v, false);
    if logits.iter().any(|u| !u.is_finite()) {
        return Err(Error::NonFinite { layer: n_layers });
    }

    let cache = opts.keep_cache.then_some(Cache {
        tokens,
        layers: layer_caches,
        x_final: x,
        xnf,
        rstdf,
    });
    Ok(ForwardPass {
        logits,
        offsets,
        vocab_size: v,
        traces,
        cache,
    })
}

/// Single-sequence forward: last-position logits and, optionally, the trace.
pub fn forward(
    params: &ModelParams<f32>,
    tokens: &[u32],
    intervention: Option<&InterventionSpec>,
    capture: Capture,
) -> Result<(Vec<f32>, Option<HiddenTrace>)> {
    let interventions = [intervention];
    let pass = forward_batch(
        params,
        &[tokens],
        ForwardOptions {
            interventions: if intervention.is_some() { &interventions } else { &[] },
            capture,
            links: &[],
            keep_cache: false,
        },
    )?;
    let logits = pass.last_logits(0).to_vec();
    Ok((logits, pass.traces.into_iter().next()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn model() -> ModelParams<f32> {
        ModelParams::init(&ModelConfig {
            vocab_size: 20,
            d_model: 16,
            n_layers: 4,
            n_heads: 4,
            d_ff: 32,
            context_len: 16,
            seed: 0,
        })
    }

    #[test]
    fn rejects_bad_input() {
        let m = model();
        assert!(matches!(
            forward(&m, &[], None, Capture::Off),
            Err(Error::EmptySequence)
        ));
        let long = vec![1u32; 17];
        assert!(matches!(
            forward(&m, &long, None, Capture::Off),
            Err(Error::SequenceTooLong { len: 17, max: 16 })
        ));
        assert!(forward(&m, &[25], None, Capture::Off).is_err());
        let bad = InterventionSpec::add(4, 1.0, vec![0.0; 16]);
        assert!(forward(&m, &[1, 2], Some(&bad), Capture::Off).is_err());
    }

    #[test]
    fn packed_batch_matches_single_sequences() {
        let m = model();
        let a = vec![1u32, 5, 7, 3];
        let b = vec![2u32, 9];
        let pass = forward_batch(&m, &[a.clone(), b.clone()], ForwardOptions::default()).unwrap();
        let (la, _) = forward(&m, &a, None, Capture::Off).unwrap();
        let (lb, _) = forward(&m, &b, None, Capture::Off).unwrap();
        for (x, y) in pass.last_logits(0).iter().zip(&la) {
            assert!((x - y).abs() < 1e-5);
        }
        for (x, y) in pass.last_logits(1).iter().zip(&lb) {
            assert!((x - y).abs() < 1e-5);
        }
    }

    #[test]
    fn causal_mask_hides_future_tokens() {
        let m = model();
        let pass_a = forward_batch(&m, &[vec![1u32, 2, 3, 4]], ForwardOptions::default()).unwrap();
        let pass_b = forward_batch(&m, &[vec![1u32, 2, 3, 9]], ForwardOptions::default()).unwrap();
        for row in 0..3 {
            assert_eq!(pass_a.row_logits(row), pass_b.row_logits(row));
        }
        assert_ne!(pass_a.row_logits(3), pass_b.row_logits(3));
    }

    #[test]
    fn capture_does_not_change_logits() {
        let m = model();
        let toks = [3u32, 1, 4, 1, 5];
        let (plain, none) = forward(&m, &toks, None, Capture::Off).unwrap();
        let (captured, trace) = forward(&m, &toks, None, Capture::Debug).unwrap();
        assert!(none.is_none());
        assert_eq!(plain, captured);
        let trace = trace.unwrap();
        assert_eq!(trace.states.len(), 4 * 16);
        assert!(trace.recurrence_error().unwrap() < 1e-5);
    }

    #[test]
    fn gelu_grad_matches_difference() {
        for &x in &[-3.0, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }
}
