//! Strength sweep, selective activation, unseen tasks and the top-n ablation.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::EvalSection;
use super::eval::{gap_recovery, mean, run_eval, Components, EvalReport, Method};
use crate::error::{Error, Result};
use crate::inference::predict_batch;
use crate::library::CapabilityLibrary;
use crate::model::{probe_loss, InterventionSpec, ModelParams};
use crate::retrieval::RetrievalConfig;
use crate::tasks::{Domain, QuerySpec, TaskSuite, ALPHABET};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub layer: usize,
    pub alpha: f32,
    pub accuracy: f64,
    pub ce_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepGrid {
    pub schema_version: u32,
    pub baseline_ce: f64,
    pub zero_shot_accuracy: f64,
    pub entries_used: Vec<usize>,
    pub cells: Vec<SweepCell>,
}

impl SweepGrid {
    pub fn cell(&self, layer: usize, alpha: f32) -> Option<&SweepCell> {
        self.cells.iter().find(|c| c.layer == layer && c.alpha == alpha)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer,alpha,accuracy,ce_loss\n");
        for c in &self.cells {
            let _ = writeln!(s, "{},{},{},{}", c.layer, c.alpha, c.accuracy, c.ce_loss);
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, self.to_csv().as_bytes())
    }
}

/// Accuracy and held-out LM loss for every `(layer, alpha)` pair, averaged
/// over the first `entries_per_task` library entries of each task.
pub fn sweep_alpha(
    params: &ModelParams,
    suite: &TaskSuite,
    library: &CapabilityLibrary,
    alphas: &[f32],
    layers: &[usize],
    entries_per_task: usize,
    corpus: &[Vec<u32>],
) -> Result<SweepGrid> {
    if !alphas.contains(&0.0) {
        return Err(Error::Argument("alpha grid must include 0".into()));
    }
    let mut used = Vec::new();
    let mut task_ids: Vec<usize> = library.entries.iter().map(|e| e.task_id).collect();
    task_ids.dedup();
    for t in &task_ids {
        used.extend(
            library
                .entries
                .iter()
                .filter(|e| e.task_id == *t)
                .take(entries_per_task)
                .map(|e| e.entry_id),
        );
    }
    if used.is_empty() {
        return Err(Error::Argument("empty library".into()));
    }
    let alphabet: Vec<u32> = (0..ALPHABET).collect();
    let queries = |task_id: usize| -> (Vec<Vec<u32>>, Vec<u32>) {
        let task = suite.task(task_id);
        let qs = &suite.splits.for_task(task_id).validation;
        (
            qs.iter().map(|q| q.prompt(task).tokens).collect(),
            qs.iter().map(|q| q.answer(task)).collect(),
        )
    };
    let accuracy = |prompts: &[Vec<u32>], answers: &[u32], spec: Option<&InterventionSpec>| -> Result<f64> {
        let slots = vec![spec; prompts.len()];
        let preds = predict_batch(params, prompts, if spec.is_some() { &slots } else { &[] }, &alphabet)?;
        Ok(preds.iter().zip(answers).filter(|(p, a)| p == a).count() as f64 / answers.len() as f64)
    };

    let baseline_ce = probe_loss(params, corpus, None)?;
    let mut zs = Vec::new();
    for t in &task_ids {
        let (p, a) = queries(*t);
        zs.push(accuracy(&p, &a, None)?);
    }
    let mut cells = Vec::new();
    for &layer in layers {
        for &alpha in alphas {
            let mut accs = Vec::new();
            let mut ces = Vec::new();
            for id in &used {
                let e = &library.entries[*id];
                let spec = InterventionSpec::add(layer, alpha, e.layer(layer, library.d_model).to_vec());
                let (p, a) = queries(e.task_id);
                accs.push(accuracy(&p, &a, Some(&spec))?);
                ces.push(probe_loss(params, corpus, Some(&spec))?);
            }
            cells.push(SweepCell {
                layer,
                alpha,
                accuracy: mean(accs.into_iter()),
                ce_loss: mean(ces.into_iter()),
            });
        }
    }
    Ok(SweepGrid {
        schema_version: super::eval::REPORT_SCHEMA,
        baseline_ce,
        zero_shot_accuracy: mean(zs.into_iter()),
        entries_used: used,
        cells,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainDelta {
    pub domain: Domain,
    pub zero_shot: f64,
    pub elicit: f64,
    pub delta: f64,
    pub intervention_rate: f64,
    pub in_library: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectiveReport {
    pub schema_version: u32,
    pub library_domain: Domain,
    pub library_entries: usize,
    pub per_domain: Vec<DomainDelta>,
    pub zero_shot: EvalReport,
    pub elicit: EvalReport,
}

/// ELICIT with a library restricted to one domain, evaluated on every domain.
#[allow(clippy::too_many_arguments)]
pub fn run_selective(
    params: &ModelParams,
    suite: &TaskSuite,
    library: &CapabilityLibrary,
    domain: Domain,
    scorer: &crate::retrieval::PairScorer,
    retrieval: &RetrievalConfig,
    queries: &[QuerySpec],
    eval: &EvalSection,
    seed: u64,
    config_hash: &str,
) -> Result<SelectiveReport> {
    let restricted = library.restrict(|t| suite.task(t).domain == domain);
    let comps = Components {
        params,
        library: Some(&restricted),
        scorer: Some(scorer),
        retrieval: Some(retrieval),
    };
    let zero_shot = run_eval(Method::ZeroShot, suite, queries, comps, eval, seed, config_hash)?;
    let elicit = if restricted.is_empty() {
        // Nothing to retrieve: ELICIT is zero-shot.
        EvalReport {
            method: Method::Elicit,
            ..zero_shot.clone()
        }
    } else {
        run_eval(Method::Elicit, suite, queries, comps, eval, seed, config_hash)?
    };
    let per_domain = zero_shot
        .per_domain
        .iter()
        .map(|z| {
            let e = elicit.domain(z.domain).expect("same queries");
            DomainDelta {
                domain: z.domain,
                zero_shot: z.accuracy,
                elicit: e.accuracy,
                delta: e.accuracy - z.accuracy,
                intervention_rate: e.intervention_rate,
                in_library: z.domain == domain,
            }
        })
        .collect();
    Ok(SelectiveReport {
        schema_version: super::eval::REPORT_SCHEMA,
        library_domain: domain,
        library_entries: restricted.len(),
        per_domain,
        zero_shot,
        elicit,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnseenTask {
    pub task_id: usize,
    pub name: String,
    pub zero_shot: f64,
    pub elicit: f64,
    pub intervention_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnseenReport {
    pub schema_version: u32,
    pub tasks: Vec<UnseenTask>,
    pub zero_shot_accuracy: f64,
    pub elicit_accuracy: f64,
    pub intervention_rate: f64,
    pub zero_shot: EvalReport,
    pub elicit: EvalReport,
}

pub fn run_unseen(
    comps: Components<'_>,
    suite: &TaskSuite,
    eval: &EvalSection,
    seed: u64,
    config_hash: &str,
) -> Result<UnseenReport> {
    let queries = suite.test_queries(suite.unseen_tasks());
    let zero_shot = run_eval(Method::ZeroShot, suite, &queries, comps, eval, seed, config_hash)?;
    let elicit = run_eval(Method::Elicit, suite, &queries, comps, eval, seed, config_hash)?;
    let tasks = zero_shot
        .per_task
        .iter()
        .map(|z| {
            let e = elicit.task(z.task_id).expect("same queries");
            UnseenTask {
                task_id: z.task_id,
                name: z.name.clone(),
                zero_shot: z.accuracy,
                elicit: e.accuracy,
                intervention_rate: e.intervention_rate,
            }
        })
        .collect();
    Ok(UnseenReport {
        schema_version: super::eval::REPORT_SCHEMA,
        tasks,
        zero_shot_accuracy: zero_shot.mean_accuracy_tasks,
        elicit_accuracy: elicit.mean_accuracy_tasks,
        intervention_rate: elicit.intervention_rate,
        zero_shot,
        elicit,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopNRow {
    pub top_n: usize,
    pub accuracy: f64,
    pub gap_recovery: f64,
    pub intervention_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopNAblation {
    pub schema_version: u32,
    pub zero_shot_accuracy: f64,
    pub icl_accuracy: f64,
    pub rows: Vec<TopNRow>,
}

impl TopNAblation {
    pub fn row(&self, n: usize) -> Option<&TopNRow> {
        self.rows.iter().find(|r| r.top_n == n)
    }
}

/// ELICIT on `queries` for each top-n, next to zero-shot and ICL.
pub fn top_n_ablation(
    comps: Components<'_>,
    suite: &TaskSuite,
    queries: &[QuerySpec],
    grid: &[usize],
    eval: &EvalSection,
    seed: u64,
    config_hash: &str,
) -> Result<TopNAblation> {
    let base = comps
        .retrieval
        .ok_or_else(|| Error::Config("top-n ablation needs a calibrated threshold".into()))?;
    let zs = run_eval(Method::ZeroShot, suite, queries, comps, eval, seed, config_hash)?;
    let icl = run_eval(Method::Icl16, suite, queries, comps, eval, seed, config_hash)?;
    let mut rows = Vec::new();
    for &n in grid {
        let cfg = RetrievalConfig {
            top_n: n,
            ..base.clone()
        };
        let e = run_eval(
            Method::Elicit,
            suite,
            queries,
            Components {
                retrieval: Some(&cfg),
                ..comps
            },
            eval,
            seed,
            config_hash,
        )?;
        rows.push(TopNRow {
            top_n: n,
            accuracy: e.mean_accuracy_tasks,
            gap_recovery: gap_recovery(&zs, &icl, &e).mean,
            intervention_rate: e.intervention_rate,
        });
    }
    Ok(TopNAblation {
        schema_version: super::eval::REPORT_SCHEMA,
        zero_shot_accuracy: zs.mean_accuracy_tasks,
        icl_accuracy: icl.mean_accuracy_tasks,
        rows,
    })
}
