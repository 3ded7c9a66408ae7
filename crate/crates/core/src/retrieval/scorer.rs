//! Pair classifier: bag-of-features encoder plus a two-layer head.
//!
//! A sequence is encoded as the mean embedding of its unigrams and its
//! skip-bigrams `(t[i], t[i+2])`. The skip-bigrams let the encoder see
//! input/answer pairs inside demonstrations. Two encodings `u`, `v` are
//! combined as `[u, v, u*v, |u-v|]` and fed to `Linear -> ReLU -> Dropout ->
//! Linear -> sigmoid`.

use std::path::Path;

use log::info;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::pairs::PairExample;
use crate::container::{read_file, Reader, Writer};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"ERTR";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScorerConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub hidden: usize,
    pub dropout: f64,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for ScorerConfig {
    fn default() -> Self {
        ScorerConfig {
            vocab_size: crate::tasks::VOCAB_SIZE,
            embed_dim: 32,
            hidden: 64,
            dropout: 0.2,
            epochs: 15,
            learning_rate: 2e-3,
            batch_size: 32,
            weight_decay: 0.0,
            seed: 0,
        }
    }
}

impl ScorerConfig {
    pub fn n_features(&self) -> usize {
        self.vocab_size + self.vocab_size * self.vocab_size
    }

    fn offsets(&self) -> Offsets {
        let (f, e, h) = (self.n_features(), self.embed_dim, self.hidden);
        let emb = 0;
        let w1 = emb + f * e;
        let b1 = w1 + 4 * e * h;
        let w2 = b1 + h;
        let b2 = w2 + h;
        Offsets {
            emb,
            w1,
            b1,
            w2,
            b2,
            total: b2 + 1,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Offsets {
    emb: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    total: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairScorer {
    pub config: ScorerConfig,
    pub params: Vec<f64>,
}

/// Encoded sequence: mean embedding plus the features that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoding {
    pub vector: Vec<f64>,
    features: Vec<usize>,
}

struct HeadCache {
    z: Vec<f64>,
    a: Vec<f64>,
    mask: Vec<f64>,
    logit: f64,
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl PairScorer {
    pub fn init(config: &ScorerConfig) -> Self {
        let off = config.offsets();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = vec![0.0; off.total];
        let emb = Normal::new(0.0, 0.1).expect("valid std");
        for p in &mut params[off.emb..off.w1] {
            *p = emb.sample(&mut rng);
        }
        let w1 = Normal::new(0.0, (2.0 / (4 * config.embed_dim) as f64).sqrt()).expect("valid std");
        for p in &mut params[off.w1..off.b1] {
            *p = w1.sample(&mut rng);
        }
        let w2 = Normal::new(0.0, (1.0 / config.hidden as f64).sqrt()).expect("valid std");
        for p in &mut params[off.w2..off.b2] {
            *p = w2.sample(&mut rng);
        }
        PairScorer {
            config: config.clone(),
            params,
        }
    }

    pub fn features(&self, tokens: &[u32]) -> Vec<usize> {
        let v = self.config.vocab_size;
        let mut out: Vec<usize> = tokens.iter().map(|&t| (t as usize).min(v - 1)).collect();
        for w in tokens.windows(3) {
            let (a, b) = ((w[0] as usize).min(v - 1), (w[2] as usize).min(v - 1));
            out.push(v + a * v + b);
        }
        out
    }

    pub fn encode(&self, tokens: &[u32]) -> Encoding {
        let e = self.config.embed_dim;
        let features = self.features(tokens);
        let mut vector = vec![0.0; e];
        if !features.is_empty() {
            let inv = 1.0 / features.len() as f64;
            for &f in &features {
                let row = &self.params[f * e..(f + 1) * e];
                for (o, x) in vector.iter_mut().zip(row) {
                    *o += x * inv;
                }
            }
        }
        Encoding { vector, features }
    }

    fn head(&self, u: &[f64], v: &[f64], dropout: Option<&mut ChaCha8Rng>) -> HeadCache {
        let (e, h) = (self.config.embed_dim, self.config.hidden);
        let off = self.config.offsets();
        let mut z = Vec::with_capacity(4 * e);
        z.extend_from_slice(u);
        z.extend_from_slice(v);
        z.extend(u.iter().zip(v).map(|(a, b)| a * b));
        z.extend(u.iter().zip(v).map(|(a, b)| (a - b).abs()));
        let mut a = self.params[off.b1..off.b1 + h].to_vec();
        let w1 = &self.params[off.w1..off.b1];
        for (i, zi) in z.iter().enumerate() {
            if *zi != 0.0 {
                for (aj, w) in a.iter_mut().zip(&w1[i * h..(i + 1) * h]) {
                    *aj += zi * w;
                }
            }
        }
        let mask: Vec<f64> = match dropout {
            Some(rng) => {
                let p = self.config.dropout;
                (0..h)
                    .map(|_| if rng.random::<f64>() < p { 0.0 } else { 1.0 / (1.0 - p) })
                    .collect()
            }
            None => vec![1.0; h],
        };
        let w2 = &self.params[off.w2..off.b2];
        let mut logit = self.params[off.b2];
        for j in 0..h {
            logit += a[j].max(0.0) * mask[j] * w2[j];
        }
        HeadCache { z, a, mask, logit }
    }

    /// Raw logit of the pair; larger means more likely the same task.
    pub fn logit_encoded(&self, q: &Encoding, p: &Encoding) -> f64 {
        self.head(&q.vector, &p.vector, None).logit
    }

    /// Probability in `[0, 1]` that `query` and `prompt` share a task.
    pub fn score(&self, query: &[u32], prompt: &[u32]) -> f64 {
        sigmoid(self.logit_encoded(&self.encode(query), &self.encode(prompt)))
    }

    pub fn score_encoded(&self, q: &Encoding, p: &Encoding) -> f64 {
        sigmoid(self.logit_encoded(q, p))
    }

    /// Binary cross-entropy of one pair and its gradient, accumulated into `grad`.
    fn accumulate(&self, ex: &PairExample, grad: &mut [f64], rng: Option<&mut ChaCha8Rng>) -> f64 {
        let (e, h) = (self.config.embed_dim, self.config.hidden);
        let off = self.config.offsets();
        let q = self.encode(&ex.query);
        let p = self.encode(&ex.prompt);
        let c = self.head(&q.vector, &p.vector, rng);
        let y = if ex.label { 1.0 } else { 0.0 };
        let prob = sigmoid(c.logit);
        // log(1 + exp(-|x|)) form keeps the loss finite for large logits.
        let loss = c.logit.max(0.0) - c.logit * y + (-c.logit.abs()).exp().ln_1p();
        let dlogit = prob - y;

        grad[off.b2] += dlogit;
        let w2 = &self.params[off.w2..off.b2];
        let mut da = vec![0.0; h];
        for j in 0..h {
            let r = c.a[j].max(0.0) * c.mask[j];
            grad[off.w2 + j] += r * dlogit;
            if c.a[j] > 0.0 {
                da[j] = dlogit * w2[j] * c.mask[j];
            }
        }
        let w1 = &self.params[off.w1..off.b1];
        let mut dz = vec![0.0; 4 * e];
        for (i, zi) in c.z.iter().enumerate() {
            let row = &w1[i * h..(i + 1) * h];
            let mut acc = 0.0;
            for j in 0..h {
                grad[off.w1 + i * h + j] += zi * da[j];
                acc += row[j] * da[j];
            }
            dz[i] = acc;
        }
        for j in 0..h {
            grad[off.b1 + j] += da[j];
        }
        let (u, v) = (&q.vector, &p.vector);
        let mut du = vec![0.0; e];
        let mut dv = vec![0.0; e];
        for i in 0..e {
            let s = (u[i] - v[i]).signum() * ((u[i] != v[i]) as u8 as f64);
            du[i] = dz[i] + dz[2 * e + i] * v[i] + dz[3 * e + i] * s;
            dv[i] = dz[e + i] + dz[2 * e + i] * u[i] - dz[3 * e + i] * s;
        }
        for (enc, d) in [(&q, &du), (&p, &dv)] {
            if enc.features.is_empty() {
                continue;
            }
            let inv = 1.0 / enc.features.len() as f64;
            for &f in &enc.features {
                for i in 0..e {
                    grad[off.emb + f * e + i] += d[i] * inv;
                }
            }
        }
        loss
    }

    /// Mean loss and gradient over a batch without dropout.
    pub fn loss_and_grad(&self, batch: &[PairExample]) -> (f64, Vec<f64>) {
        let mut grad = vec![0.0; self.params.len()];
        let mut loss = 0.0;
        for ex in batch {
            loss += self.accumulate(ex, &mut grad, None);
        }
        let inv = 1.0 / batch.len().max(1) as f64;
        grad.iter_mut().for_each(|g| *g *= inv);
        (loss * inv, grad)
    }
}

/// Per-epoch mean training loss.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ScorerLog {
    pub epoch_losses: Vec<f64>,
}

/// Adam on binary cross-entropy with dropout active.
pub fn train_scorer(pairs: &[PairExample], config: &ScorerConfig) -> Result<(PairScorer, ScorerLog)> {
    if pairs.is_empty() {
        return Err(Error::Config("no training pairs".into()));
    }
    if !(0.0..1.0).contains(&config.dropout) || config.learning_rate <= 0.0 || config.batch_size == 0 {
        return Err(Error::Config(format!("invalid scorer config: {config:?}")));
    }
    let mut scorer = PairScorer::init(config);
    let n = scorer.params.len();
    let (mut m, mut v) = (vec![0.0; n], vec![0.0; n]);
    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut log = ScorerLog::default();
    let mut t = 0;
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let mut grad = vec![0.0; n];
            let mut loss = 0.0;
            for &i in chunk {
                loss += scorer.accumulate(&pairs[i], &mut grad, Some(&mut rng));
            }
            if !loss.is_finite() {
                return Err(Error::Diverged { step: t, loss });
            }
            total += loss;
            let inv = 1.0 / chunk.len() as f64;
            t += 1;
            let c1 = 1.0 - b1.powi(t as i32);
            let c2 = 1.0 - b2.powi(t as i32);
            for i in 0..n {
                let g = grad[i] * inv;
                m[i] = b1 * m[i] + (1.0 - b1) * g;
                v[i] = b2 * v[i] + (1.0 - b2) * g * g;
                scorer.params[i] -= config.learning_rate
                    * ((m[i] / c1) / ((v[i] / c2).sqrt() + eps) + config.weight_decay * scorer.params[i]);
            }
        }
        let mean = total / pairs.len() as f64;
        info!("scorer epoch {epoch:2} loss {mean:.4}");
        log.epoch_losses.push(mean);
    }
    Ok((scorer, log))
}

pub fn scorer_bytes(s: &PairScorer) -> Vec<u8> {
    let c = &s.config;
    let mut w = Writer::new(MAGIC, VERSION);
    for v in [c.vocab_size, c.embed_dim, c.hidden] {
        w.u32(v as u32);
    }
    // Training settings ride along so a loaded scorer equals the saved one.
    w.f64s(&[c.dropout, c.learning_rate, c.weight_decay]);
    w.u32(c.epochs as u32);
    w.u32(c.batch_size as u32);
    w.u64(c.seed);
    w.u64(s.params.len() as u64);
    w.f64s(&s.params);
    w.finish()
}

pub fn save_scorer(s: &PairScorer, path: &Path) -> Result<()> {
    crate::io::write_atomic(path, &scorer_bytes(s))
}

pub fn parse_scorer(bytes: &[u8], path: &Path) -> Result<PairScorer> {
    let (mut r, version) = Reader::open(bytes, MAGIC, path)?;
    if version != VERSION {
        return Err(r.corrupt(format!("unsupported scorer version {version}")));
    }
    let (vocab_size, embed_dim, hidden) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
    let rates = r.f64s(3)?;
    let config = ScorerConfig {
        vocab_size,
        embed_dim,
        hidden,
        dropout: rates[0],
        learning_rate: rates[1],
        weight_decay: rates[2],
        epochs: r.u32()? as usize,
        batch_size: r.u32()? as usize,
        seed: r.u64()?,
    };
    if config.vocab_size == 0 || config.embed_dim == 0 || config.hidden == 0 {
        return Err(r.corrupt("zero-sized scorer dimension"));
    }
    let n = r.u64()? as usize;
    if n != config.offsets().total {
        return Err(r.corrupt(format!(
            "{n} scorer parameters, header implies {}",
            config.offsets().total
        )));
    }
    let params = r.f64s(n)?;
    r.expect_end()?;
    Ok(PairScorer { config, params })
}

pub fn load_scorer(path: &Path) -> Result<PairScorer> {
    parse_scorer(&read_file(path)?, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ScorerConfig {
        ScorerConfig {
            vocab_size: 6,
            embed_dim: 3,
            hidden: 5,
            ..ScorerConfig::default()
        }
    }

    fn pairs() -> Vec<PairExample> {
        vec![
            PairExample {
                query: vec![0, 1, 2],
                prompt: vec![3, 4, 3, 4],
                label: true,
                query_task: 0,
                prompt_task: 0,
            },
            PairExample {
                query: vec![5, 1],
                prompt: vec![2, 2, 0, 1, 1],
                label: false,
                query_task: 1,
                prompt_task: 0,
            },
        ]
    }

    #[test]
    fn gradient_matches_differences() {
        let s = PairScorer::init(&tiny());
        let batch = pairs();
        let (_, grad) = s.loss_and_grad(&batch);
        let mut worst: f64 = 0.0;
        for i in (0..s.params.len()).step_by(3) {
            let mut p = s.clone();
            p.params[i] += 1e-6;
            let (lp, _) = p.loss_and_grad(&batch);
            p.params[i] -= 2e-6;
            let (lm, _) = p.loss_and_grad(&batch);
            let num = (lp - lm) / 2e-6;
            let denom = (num.abs() + grad[i].abs()).max(1e-9);
            if denom > 1e-7 {
                worst = worst.max((num - grad[i]).abs() / denom);
            }
        }
        assert!(worst < 1e-5, "{worst}");
    }

    #[test]
    fn scores_are_probabilities_and_deterministic() {
        let s = PairScorer::init(&tiny());
        let a = s.score(&[0, 1, 2], &[3, 4, 5]);
        assert!((0.0..=1.0).contains(&a));
        assert_eq!(a, s.score(&[0, 1, 2], &[3, 4, 5]));
        assert_eq!(sigmoid(1000.0), 1.0);
        assert_eq!(sigmoid(-1000.0), 0.0);
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let (s, _) = train_scorer(&pairs(), &ScorerConfig { epochs: 2, ..tiny() }).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.ertr");
        save_scorer(&s, &path).unwrap();
        let back = load_scorer(&path).unwrap();
        assert_eq!(back.config, s.config);
        assert_eq!(back.params.len(), s.params.len());
        assert!(back
            .params
            .iter()
            .zip(&s.params)
            .all(|(a, b)| a.to_bits() == b.to_bits()));
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[30] ^= 4;
        assert!(matches!(parse_scorer(&bytes, &path), Err(Error::Corrupt { .. })));
    }

    #[test]
    fn training_separates_a_trivial_pattern() {
        // Same task iff the query's first token equals the prompt's first token.
        let mut data = Vec::new();
        for a in 0..3u32 {
            for b in 0..3u32 {
                for r in 0..4u32 {
                    data.push(PairExample {
                        query: vec![a, 5, (r % 2) + 3],
                        prompt: vec![b, 4, 4, r % 3],
                        label: a == b,
                        query_task: a as usize,
                        prompt_task: b as usize,
                    });
                }
            }
        }
        let cfg = ScorerConfig {
            epochs: 60,
            learning_rate: 1e-2,
            dropout: 0.0,
            batch_size: 8,
            ..tiny()
        };
        let (s, log) = train_scorer(&data, &cfg).unwrap();
        assert!(log.epoch_losses.last().unwrap() < &log.epoch_losses[0]);
        let pos = s.score(&[1, 5, 3], &[1, 4, 4, 0]);
        let neg = s.score(&[1, 5, 3], &[2, 4, 4, 0]);
        assert!(pos > neg, "{pos} vs {neg}");
    }
}
