//! Task-vector extraction, per-vector layer selection and the library file.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::container::{read_file, Reader, Writer};
use crate::error::{Error, Result};
use crate::inference::predict_batch;
use crate::model::{fingerprint, forward, Capture, InterventionMode, InterventionSpec, ModelParams};
use crate::tasks::{build_icl_prompt_from, PromptSpec, QuerySpec, TaskSpec, TaskSuite, Template};

const MAGIC: &[u8; 4] = b"ELIB";
const VERSION: u32 = 1;

/// One library item.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskVectorEntry {
    pub entry_id: usize,
    pub task_id: usize,
    /// Tokens of the ICL prompt the vector was read from.
    pub prompt: Vec<u32>,
    /// `L x d` row-major, row `l` is the prompt's last-token state after block `l`.
    pub theta: Vec<f32>,
    pub best_layer: usize,
    pub val_accuracy: f32,
}

impl TaskVectorEntry {
    pub fn layer(&self, l: usize, d_model: usize) -> &[f32] {
        &self.theta[l * d_model..(l + 1) * d_model]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CapabilityLibrary {
    /// Checksum of the model checkpoint the vectors came from.
    pub fingerprint: u64,
    pub k: usize,
    pub n_tasks: usize,
    pub n_layers: usize,
    pub d_model: usize,
    pub alpha: f32,
    pub mode: InterventionMode,
    pub entries: Vec<TaskVectorEntry>,
}

impl CapabilityLibrary {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn theta(&self, entry: usize, layer: usize) -> &[f32] {
        self.entries[entry].layer(layer, self.d_model)
    }

    /// Keeps only entries whose task satisfies `keep`, renumbering ids.
    pub fn restrict(&self, keep: impl Fn(usize) -> bool) -> CapabilityLibrary {
        let entries: Vec<TaskVectorEntry> = self
            .entries
            .iter()
            .filter(|e| keep(e.task_id))
            .cloned()
            .enumerate()
            .map(|(i, mut e)| {
                e.entry_id = i;
                e
            })
            .collect();
        let mut tasks: Vec<usize> = entries.iter().map(|e| e.task_id).collect();
        tasks.dedup();
        CapabilityLibrary {
            n_tasks: tasks.len(),
            entries,
            ..self.clone()
        }
    }

    /// Fraction of tasks whose entries do not all share one optimal layer.
    pub fn layer_disagreement(&self) -> f64 {
        let mut tasks: Vec<usize> = self.entries.iter().map(|e| e.task_id).collect();
        tasks.sort();
        tasks.dedup();
        if tasks.is_empty() {
            return 0.0;
        }
        let split = tasks
            .iter()
            .filter(|t| {
                let mut layers = self.entries.iter().filter(|e| e.task_id == **t).map(|e| e.best_layer);
                let first = layers.next();
                layers.any(|l| Some(l) != first)
            })
            .count();
        split as f64 / tasks.len() as f64
    }

    /// Exact byte size of the serialized library.
    pub fn encoded_len(&self) -> usize {
        let header = 4 + 4 + 8 + 4 + 4 + 4 + 4 + 4 + 1 + 4;
        let per_entry: usize = self
            .entries
            .iter()
            .map(|e| 2 + 2 + 2 * e.prompt.len() + 1 + 4 + 4 * e.theta.len())
            .sum();
        header + per_entry + 8
    }
}

/// Full last-token trace of an ICL prompt.
pub fn extract_task_vector(params: &ModelParams, prompt: &PromptSpec) -> Result<Vec<f32>> {
    if prompt.n_demos() == 0 {
        return Err(Error::Argument("task vectors need at least one demonstration".into()));
    }
    let (_, trace) = forward(params, &prompt.tokens, None, Capture::States)?;
    Ok(trace.expect("capture requested").states)
}

/// Accuracy of every layer's intervention on `queries` and the best layer,
/// ties going to the smallest index.
pub fn select_best_layer(
    params: &ModelParams,
    theta: &[f32],
    task: &TaskSpec,
    queries: &[QuerySpec],
    alpha: f32,
    mode: InterventionMode,
) -> Result<(usize, Vec<f32>)> {
    select_best_layer_in_order(params, theta, task, queries, alpha, mode, false)
}

/// As [`select_best_layer`], optionally evaluating layers from the top down.
/// The result does not depend on the order.
pub fn select_best_layer_in_order(
    params: &ModelParams,
    theta: &[f32],
    task: &TaskSpec,
    queries: &[QuerySpec],
    alpha: f32,
    mode: InterventionMode,
    reverse: bool,
) -> Result<(usize, Vec<f32>)> {
    if queries.is_empty() {
        return Err(Error::Argument(format!("no validation queries for task {}", task.id)));
    }
    let (nl, d) = (params.config.n_layers, params.config.d_model);
    let prompts: Vec<Vec<u32>> = queries.iter().map(|q| q.prompt(task).tokens).collect();
    let answers: Vec<u32> = queries.iter().map(|q| q.answer(task)).collect();
    let alphabet = task.answer_alphabet();
    let mut acc = vec![0f32; nl];
    let order: Vec<usize> = if reverse {
        (0..nl).rev().collect()
    } else {
        (0..nl).collect()
    };
    for l in order {
        let row = theta[l * d..(l + 1) * d].to_vec();
        let spec = match mode {
            InterventionMode::Add => InterventionSpec::add(l, alpha, row),
            InterventionMode::Replace => InterventionSpec::replace(l, row),
        };
        let slots = vec![Some(&spec); prompts.len()];
        let preds = predict_batch(params, &prompts, &slots, &alphabet)?;
        let hits = preds.iter().zip(&answers).filter(|(p, a)| p == a).count();
        acc[l] = hits as f32 / queries.len() as f32;
    }
    Ok((best_index(&acc), acc))
}

/// First index of the maximum.
pub fn best_index(acc: &[f32]) -> usize {
    let mut best = 0;
    for (i, a) in acc.iter().enumerate() {
        if *a > acc[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub struct LibraryConfig {
    pub k: usize,
    pub n_demos: usize,
    pub alpha: f32,
    pub mode: InterventionMode,
    pub seed: u64,
}

impl Default for LibraryConfig {
    fn default() -> Self {
        LibraryConfig {
            k: 10,
            n_demos: 16,
            alpha: crate::model::DEFAULT_ALPHA,
            mode: InterventionMode::Add,
            seed: 0,
        }
    }
}

/// Per-entry layer sweeps produced while building, for reporting.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerSweep {
    pub entry_id: usize,
    pub accuracy: Vec<f32>,
}

/// `k` vectors per library task, each with its own best layer.
pub fn build_library(
    params: &ModelParams,
    suite: &TaskSuite,
    tasks: &[&TaskSpec],
    cfg: &LibraryConfig,
) -> Result<(CapabilityLibrary, Vec<LayerSweep>)> {
    if cfg.k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    if tasks.is_empty() {
        return Err(Error::Config("no tasks for the library".into()));
    }
    let jobs: Vec<(usize, &TaskSpec, usize)> = tasks
        .iter()
        .enumerate()
        .flat_map(|(ti, t)| (0..cfg.k).map(move |i| (ti * cfg.k + i, *t, i)))
        .collect();
    let built: Vec<Result<(TaskVectorEntry, LayerSweep)>> = jobs
        .par_iter()
        .map(|&(entry_id, task, i)| {
            let split = suite.splits.for_task(task.id);
            let seed = cfg.seed ^ ((task.id as u64) << 32) ^ (i as u64).wrapping_mul(0x9e37_79b9);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let prompt =
                build_icl_prompt_from(task, &split.library_pool, cfg.n_demos, Template::Arrow, None, &mut rng)?;
            let theta = extract_task_vector(params, &prompt)?;
            let (best, acc) = select_best_layer(params, &theta, task, &split.validation, cfg.alpha, cfg.mode)?;
            Ok((
                TaskVectorEntry {
                    entry_id,
                    task_id: task.id,
                    prompt: prompt.tokens,
                    theta,
                    best_layer: best,
                    val_accuracy: acc[best],
                },
                LayerSweep {
                    entry_id,
                    accuracy: acc,
                },
            ))
        })
        .collect();
    let mut entries = Vec::with_capacity(built.len());
    let mut sweeps = Vec::with_capacity(built.len());
    for (r, (entry_id, task, i)) in built.into_iter().zip(&jobs) {
        let (e, s) = r.map_err(|e| e.context(format!("library entry {entry_id} (task {}, prompt {i})", task.id)))?;
        entries.push(e);
        sweeps.push(s);
    }
    Ok((
        CapabilityLibrary {
            fingerprint: fingerprint(params),
            k: cfg.k,
            n_tasks: tasks.len(),
            n_layers: params.config.n_layers,
            d_model: params.config.d_model,
            alpha: cfg.alpha,
            mode: cfg.mode,
            entries,
        },
        sweeps,
    ))
}

pub fn library_bytes(lib: &CapabilityLibrary) -> Result<Vec<u8>> {
    let mut w = Writer::new(MAGIC, VERSION);
    w.u64(lib.fingerprint);
    for v in [lib.k, lib.n_tasks, lib.n_layers, lib.d_model] {
        w.u32(v as u32);
    }
    w.f32(lib.alpha);
    w.u8(lib.mode.code());
    w.u32(lib.entries.len() as u32);
    for e in &lib.entries {
        let too_big =
            e.task_id > u16::MAX as usize || e.prompt.len() > u16::MAX as usize || e.best_layer > u8::MAX as usize;
        if too_big || e.theta.len() != lib.n_layers * lib.d_model {
            return Err(Error::Argument(format!(
                "entry {} does not fit the library format",
                e.entry_id
            )));
        }
        w.u16(e.task_id as u16);
        w.u16(e.prompt.len() as u16);
        for t in &e.prompt {
            w.u16(u16::try_from(*t).map_err(|_| Error::Argument(format!("token {t} exceeds 16 bits")))?);
        }
        w.u8(e.best_layer as u8);
        w.f32(e.val_accuracy);
        w.f32s(&e.theta);
    }
    Ok(w.finish())
}

/// Writes atomically: a temporary sibling file is renamed into place.
pub fn save_library(lib: &CapabilityLibrary, path: &Path) -> Result<()> {
    crate::io::write_atomic(path, &library_bytes(lib)?)
}

pub fn parse_library(bytes: &[u8], path: &Path) -> Result<CapabilityLibrary> {
    let (mut r, version) = Reader::open(bytes, MAGIC, path)?;
    if version != VERSION {
        return Err(r.corrupt(format!("unsupported library version {version}")));
    }
    let fingerprint = r.u64()?;
    let k = r.u32()? as usize;
    let n_tasks = r.u32()? as usize;
    let n_layers = r.u32()? as usize;
    let d_model = r.u32()? as usize;
    let alpha = r.f32()?;
    let mode = InterventionMode::from_code(r.u8()?).ok_or_else(|| r.corrupt("unknown intervention mode"))?;
    let n = r.u32()? as usize;
    if n != k * n_tasks {
        return Err(r.corrupt(format!("{n} entries, header implies {}", k * n_tasks)));
    }
    let mut entries = Vec::with_capacity(n);
    for entry_id in 0..n {
        let task_id = r.u16()? as usize;
        let len = r.u16()? as usize;
        let mut prompt = Vec::with_capacity(len);
        for _ in 0..len {
            prompt.push(r.u16()? as u32);
        }
        let best_layer = r.u8()? as usize;
        if best_layer >= n_layers {
            return Err(r.corrupt(format!("entry {entry_id} layer {best_layer} out of range")));
        }
        let val_accuracy = r.f32()?;
        let theta = r.f32s(n_layers * d_model)?;
        entries.push(TaskVectorEntry {
            entry_id,
            task_id,
            prompt,
            theta,
            best_layer,
            val_accuracy,
        });
    }
    r.expect_end()?;
    Ok(CapabilityLibrary {
        fingerprint,
        k,
        n_tasks,
        n_layers,
        d_model,
        alpha,
        mode,
        entries,
    })
}

pub fn load_library(path: &Path) -> Result<CapabilityLibrary> {
    parse_library(&read_file(path)?, path)
}

/// Message for the caller when the library was built from a different model.
pub fn compatibility_warning(lib: &CapabilityLibrary, params: &ModelParams) -> Option<String> {
    let model = fingerprint(params);
    if model != lib.fingerprint {
        return Some(format!(
            "library fingerprint {:016x} does not match model {:016x}",
            lib.fingerprint, model
        ));
    }
    if lib.n_layers != params.config.n_layers || lib.d_model != params.config.d_model {
        return Some("library vector shape does not match model".into());
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lib() -> CapabilityLibrary {
        let entries = (0..4)
            .map(|i| TaskVectorEntry {
                entry_id: i,
                task_id: i / 2,
                prompt: vec![32, i as u32, 33],
                theta: (0..6).map(|j| (i * 10 + j) as f32 * 0.5).collect(),
                best_layer: i % 3,
                val_accuracy: 0.25 * i as f32,
            })
            .collect();
        CapabilityLibrary {
            fingerprint: 0xdead_beef,
            k: 2,
            n_tasks: 2,
            n_layers: 3,
            d_model: 2,
            alpha: 2.0,
            mode: InterventionMode::Add,
            entries,
        }
    }

    #[test]
    fn best_index_prefers_smallest() {
        assert_eq!(best_index(&[0.2, 0.2, 0.9, 0.9, 0.4]), 2);
        assert_eq!(best_index(&[0.5; 8]), 0);
    }

    #[test]
    fn file_round_trip_and_size() {
        let l = lib();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("lib.elib");
        save_library(&l, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(bytes.len(), l.encoded_len());
        assert_eq!(load_library(&path).unwrap(), l);
        for cut in [0, 20, bytes.len() - 1] {
            assert!(matches!(
                parse_library(&bytes[..cut], &path),
                Err(Error::Corrupt { .. })
            ));
        }
    }

    #[test]
    fn restrict_and_disagreement() {
        let l = lib();
        assert_eq!(l.layer_disagreement(), 1.0);
        let only = l.restrict(|t| t == 1);
        assert_eq!(only.len(), 2);
        assert_eq!(only.n_tasks, 1);
        assert_eq!(only.entries[0].entry_id, 0);
        assert_eq!(only.entries[0].task_id, 1);
    }
}
