use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::ModelConfig;
use crate::numeric::Scalar;

/// Offsets of one block's tensors inside the flat parameter vector.
#[derive(Debug, Clone, Copy)]
pub struct BlockLayout {
    pub ln1_g: usize,
    pub ln1_b: usize,
    pub w_qkv: usize,
    pub b_qkv: usize,
    pub w_o: usize,
    pub b_o: usize,
    pub ln2_g: usize,
    pub ln2_b: usize,
    pub w_fc: usize,
    pub b_fc: usize,
    pub w_proj: usize,
    pub b_proj: usize,
}

#[derive(Debug, Clone)]
pub struct TensorInfo {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl TensorInfo {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_matrix(&self) -> bool {
        self.shape.len() == 2
    }
}

/// Where every tensor lives in the flat parameter vector, in declaration order.
#[derive(Debug, Clone)]
pub struct Layout {
    pub tok_emb: usize,
    pub blocks: Vec<BlockLayout>,
    pub lnf_g: usize,
    pub lnf_b: usize,
    pub w_out: usize,
    pub total: usize,
    pub tensors: Vec<TensorInfo>,
}

impl Layout {
    pub fn new(cfg: &ModelConfig) -> Self {
        let (v, d, f) = (cfg.vocab_size, cfg.d_model, cfg.d_ff);
        let mut tensors = Vec::new();
        let mut offset = 0;
        let mut push = |name: String, shape: Vec<usize>| {
            let at = offset;
            offset += shape.iter().product::<usize>();
            tensors.push(TensorInfo {
                name,
                shape,
                offset: at,
            });
            at
        };
        let tok_emb = push("tok_emb".into(), vec![v, d]);
        let mut blocks = Vec::with_capacity(cfg.n_layers);
        for l in 0..cfg.n_layers {
            blocks.push(BlockLayout {
                ln1_g: push(format!("blocks.{l}.ln1.gain"), vec![d]),
                ln1_b: push(format!("blocks.{l}.ln1.bias"), vec![d]),
                w_qkv: push(format!("blocks.{l}.attn.w_qkv"), vec![d, 3 * d]),
                b_qkv: push(format!("blocks.{l}.attn.b_qkv"), vec![3 * d]),
                w_o: push(format!("blocks.{l}.attn.w_o"), vec![d, d]),
                b_o: push(format!("blocks.{l}.attn.b_o"), vec![d]),
                ln2_g: push(format!("blocks.{l}.ln2.gain"), vec![d]),
                ln2_b: push(format!("blocks.{l}.ln2.bias"), vec![d]),
                w_fc: push(format!("blocks.{l}.mlp.w_fc"), vec![d, f]),
                b_fc: push(format!("blocks.{l}.mlp.b_fc"), vec![f]),
                w_proj: push(format!("blocks.{l}.mlp.w_proj"), vec![f, d]),
                b_proj: push(format!("blocks.{l}.mlp.b_proj"), vec![d]),
            });
        }
        let lnf_g = push("ln_f.gain".into(), vec![d]);
        let lnf_b = push("ln_f.bias".into(), vec![d]);
        let w_out = push("w_out".into(), vec![d, v]);
        Layout {
            tok_emb,
            blocks,
            lnf_g,
            lnf_b,
            w_out,
            total: offset,
            tensors,
        }
    }

    /// Mask of parameters that receive weight decay (matrices except embeddings).
    pub fn decay_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.total];
        for t in &self.tensors {
            if t.is_matrix() && !t.name.ends_with("_emb") {
                mask[t.offset..t.offset + t.len()].fill(true);
            }
        }
        mask
    }
}

/// Model parameters stored as one flat vector with a fixed layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<S = f32> {
    pub config: ModelConfig,
    pub data: Vec<S>,
}

impl<S: Scalar> ModelParams<S> {
    /// GPT-2 style initialization: N(0, 0.02) weights, residual projections
    /// scaled by `1/sqrt(2L)`, unit layer-norm gains, zero biases.
    pub fn init(config: &ModelConfig) -> Self {
        let layout = Layout::new(config);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let std = 0.02;
        let normal = Normal::new(0.0, std).expect("valid std");
        let resid = Normal::new(0.0, std / (2.0 * config.n_layers as f64).sqrt()).expect("valid std");
        let mut data = vec![S::zero(); layout.total];
        for t in &layout.tensors {
            let slot = &mut data[t.offset..t.offset + t.len()];
            if t.name.ends_with(".gain") {
                slot.fill(S::one());
            } else if t.is_matrix() {
                let dist = if t.name.ends_with("w_o") || t.name.ends_with("w_proj") {
                    &resid
                } else {
                    &normal
                };
                for v in slot.iter_mut() {
                    *v = S::from_f64(dist.sample(&mut rng));
                }
            }
        }
        ModelParams {
            config: config.clone(),
            data,
        }
    }

    pub fn layout(&self) -> Layout {
        Layout::new(&self.config)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<T: Scalar>(&self) -> ModelParams<T> {
        ModelParams {
            config: self.config.clone(),
            data: self.data.iter().map(|v| T::from_f64(v.as_f64())).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            vocab_size: 10,
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            d_ff: 16,
            context_len: 12,
            seed: 3,
        }
    }

    #[test]
    fn layout_is_contiguous_and_ordered() {
        let layout = Layout::new(&tiny());
        let mut next = 0;
        for t in &layout.tensors {
            assert_eq!(t.offset, next, "{}", t.name);
            next += t.len();
        }
        assert_eq!(next, layout.total);
        assert_eq!(layout.tensors.first().unwrap().name, "tok_emb");
        assert_eq!(layout.tensors.last().unwrap().name, "w_out");
    }

    #[test]
    fn init_is_seeded() {
        let a = ModelParams::<f32>::init(&tiny());
        let b = ModelParams::<f32>::init(&tiny());
        assert_eq!(a, b);
        let mut other = tiny();
        other.seed = 4;
        assert_ne!(a.data, ModelParams::<f32>::init(&other).data);
        assert!(a.is_finite());
    }
}
