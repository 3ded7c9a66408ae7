use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::container::fnv64;
use crate::error::{Error, Result};
use crate::model::{InterventionMode, ModelConfig, TrainConfig, DEFAULT_ALPHA};
use crate::retrieval::{Aggregate, ScorerConfig};
use crate::tasks::{SuiteConfig, DEFAULT_CONTEXT, VOCAB_SIZE};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SuiteSection {
    pub n_library: usize,
    pub n_unseen: usize,
    pub val_inputs: usize,
    pub test_inputs: usize,
}

impl Default for SuiteSection {
    fn default() -> Self {
        let s = SuiteConfig::default();
        SuiteSection {
            n_library: s.n_library,
            n_unseen: s.n_unseen,
            val_inputs: s.val_inputs,
            test_inputs: s.test_inputs,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub context_len: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        let r = ModelConfig::reference(VOCAB_SIZE, DEFAULT_CONTEXT, 0);
        ModelSection {
            d_model: r.d_model,
            n_layers: r.n_layers,
            n_heads: r.n_heads,
            d_ff: r.d_ff,
            context_len: r.context_len,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub warmup_steps: usize,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub max_demos: usize,
    /// Share of training draws that link an ICL prompt's last-token state
    /// into a zero-shot query of the same task; 0 trains on plain
    /// sequences only.
    pub prompting_fraction: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            steps: 6000,
            batch_size: 32,
            learning_rate: 3e-3,
            warmup_steps: 400,
            weight_decay: 0.01,
            grad_clip: 1.0,
            max_demos: 16,
            prompting_fraction: 0.25,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LibrarySection {
    pub k: usize,
    pub n_demos: usize,
    pub alpha: f32,
    pub mode: InterventionMode,
}

impl Default for LibrarySection {
    fn default() -> Self {
        LibrarySection {
            k: 10,
            n_demos: 16,
            alpha: DEFAULT_ALPHA,
            mode: InterventionMode::Add,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrieverSection {
    pub pairs: usize,
    /// Validation inputs per task held out from scorer training; their
    /// queries evaluate the scorer and calibrate the threshold.
    pub held_inputs: usize,
    pub embed_dim: usize,
    pub hidden: usize,
    pub dropout: f64,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub target_recall: f64,
    pub top_n: usize,
    pub aggregate: Aggregate,
}

impl Default for RetrieverSection {
    fn default() -> Self {
        let s = ScorerConfig::default();
        RetrieverSection {
            pairs: 2000,
            held_inputs: 2,
            embed_dim: s.embed_dim,
            hidden: s.hidden,
            dropout: s.dropout,
            epochs: s.epochs,
            learning_rate: s.learning_rate,
            batch_size: s.batch_size,
            target_recall: 0.8,
            top_n: 10,
            aggregate: Aggregate::MeanOfWinners,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub icl_demos: usize,
    pub bm25_demos: usize,
    /// Demonstrations each library task contributes to the BM25 pool.
    pub bm25_pool_per_task: usize,
    pub lm_corpus: usize,
    pub alpha_grid: Vec<f32>,
    /// Library entries per task used in the strength sweep.
    pub sweep_entries: usize,
    pub top_n_grid: Vec<usize>,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            icl_demos: 16,
            bm25_demos: 16,
            bm25_pool_per_task: 20,
            lm_corpus: 256,
            alpha_grid: vec![0.0, 0.5, 1.0, 2.0, 3.0, 5.0],
            sweep_entries: 2,
            top_n_grid: vec![1, 5, 10, 15],
        }
    }
}

/// Everything a run needs; every field has a reference default.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub suite: SuiteSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub library: LibrarySection,
    pub retriever: RetrieverSection,
    pub eval: EvalSection,
}

impl PipelineConfig {
    /// Reads TOML, or JSON when the file ends in `.json`.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingArtifact(path.display().to_string()),
            _ => Error::Io(e),
        })?;
        let cfg: PipelineConfig = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        } else {
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config().validate()?;
        self.train_config().validate()?;
        if self.model.n_layers < 4 {
            return Err(Error::Config(format!(
                "pipeline models need at least 4 layers, got {}",
                self.model.n_layers
            )));
        }
        if self.train.max_demos > 16 || self.library.n_demos == 0 || self.library.k == 0 {
            return Err(Error::Config("demonstration counts out of range".into()));
        }
        if !(0.0..=1.0).contains(&self.retriever.target_recall) || self.retriever.top_n == 0 {
            return Err(Error::Config("retriever target recall or top-n out of range".into()));
        }
        if !(0.0..=1.0).contains(&self.train.prompting_fraction) {
            return Err(Error::Config("prompting fraction must lie in [0, 1]".into()));
        }
        if !self.eval.alpha_grid.contains(&0.0) {
            return Err(Error::Config("alpha grid must include 0".into()));
        }
        if !self.library.alpha.is_finite() {
            return Err(Error::Config("alpha must be finite".into()));
        }
        Ok(())
    }

    pub fn suite_config(&self) -> SuiteConfig {
        SuiteConfig {
            n_library: self.suite.n_library,
            n_unseen: self.suite.n_unseen,
            seed: self.seed,
            val_inputs: self.suite.val_inputs,
            test_inputs: self.suite.test_inputs,
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            vocab_size: VOCAB_SIZE,
            d_model: self.model.d_model,
            n_layers: self.model.n_layers,
            n_heads: self.model.n_heads,
            d_ff: self.model.d_ff,
            context_len: self.model.context_len,
            seed: self.seed,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.train.learning_rate,
            batch_size: self.train.batch_size,
            steps: self.train.steps,
            warmup_steps: self.train.warmup_steps,
            weight_decay: self.train.weight_decay,
            grad_clip: self.train.grad_clip,
            seed: self.seed.wrapping_add(1),
            ..TrainConfig::default()
        }
    }

    pub fn scorer_config(&self) -> ScorerConfig {
        ScorerConfig {
            vocab_size: VOCAB_SIZE,
            embed_dim: self.retriever.embed_dim,
            hidden: self.retriever.hidden,
            dropout: self.retriever.dropout,
            epochs: self.retriever.epochs,
            learning_rate: self.retriever.learning_rate,
            batch_size: self.retriever.batch_size,
            weight_decay: 0.0,
            seed: self.seed.wrapping_add(3),
        }
    }

    /// Hex digest of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        format!("{:016x}", fnv64(json.as_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_overrides_and_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, "seed = 4\n[train]\nsteps = 10\n").unwrap();
        let cfg = PipelineConfig::load(&path).unwrap();
        assert_eq!(cfg.seed, 4);
        assert_eq!(cfg.train.steps, 10);
        assert_eq!(cfg.library.k, 10);
        assert_ne!(cfg.hash(), PipelineConfig::default().hash());

        std::fs::write(&path, "[train]\nstepz = 10\n").unwrap();
        assert!(matches!(PipelineConfig::load(&path), Err(Error::Config(_))));
        assert!(matches!(
            PipelineConfig::load(&dir.path().join("nope.toml")),
            Err(Error::MissingArtifact(_))
        ));
    }

    #[test]
    fn reference_defaults() {
        let cfg = PipelineConfig::default();
        cfg.validate().unwrap();
        assert_eq!((cfg.model.n_layers, cfg.model.d_model, cfg.model.n_heads), (8, 64, 4));
        assert_eq!(cfg.library.alpha, 2.0);
        assert_eq!(cfg.retriever.epochs, 15);
        assert_eq!(cfg.retriever.target_recall, 0.8);
        assert_eq!(cfg.retriever.top_n, 10);
        let json = serde_json::to_string(&cfg).unwrap();
        assert_eq!(serde_json::from_str::<PipelineConfig>(&json).unwrap(), cfg);
    }
}
