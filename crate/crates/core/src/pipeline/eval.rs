//! The five evaluation methods and their reports.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::EvalSection;
use crate::bm25::Bm25Index;
use crate::error::{Error, Result};
use crate::inference::predict_batch;
use crate::library::CapabilityLibrary;
use crate::model::{InterventionSpec, ModelParams};
use crate::retrieval::{select_intervention, Decision, PairScorer, RankIndex, RetrievalConfig};
use crate::tasks::{icl_prompt_for_query, Domain, PromptSpec, QuerySpec, TaskInput, TaskSuite, Template, ALPHABET};

pub const REPORT_SCHEMA: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "zero_shot")]
    ZeroShot,
    #[serde(rename = "icl_16")]
    Icl16,
    #[serde(rename = "bm25_16")]
    Bm25,
    #[serde(rename = "elicit")]
    Elicit,
    #[serde(rename = "bm25_plus_elicit")]
    Bm25PlusElicit,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::ZeroShot,
        Method::Icl16,
        Method::Bm25,
        Method::Elicit,
        Method::Bm25PlusElicit,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::ZeroShot => "zero_shot",
            Method::Icl16 => "icl_16",
            Method::Bm25 => "bm25_16",
            Method::Elicit => "elicit",
            Method::Bm25PlusElicit => "bm25_plus_elicit",
        }
    }

    pub fn uses_retrieval(self) -> bool {
        matches!(self, Method::Elicit | Method::Bm25PlusElicit)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Argument(format!("unknown method {s:?}")))
    }
}

/// Trained artifacts available to an evaluation.
#[derive(Clone, Copy)]
pub struct Components<'a> {
    pub params: &'a ModelParams,
    pub library: Option<&'a CapabilityLibrary>,
    pub scorer: Option<&'a PairScorer>,
    pub retrieval: Option<&'a RetrievalConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub task_id: usize,
    pub input: Vec<u32>,
    pub template: Template,
    pub verb: u8,
    pub answer: u32,
    pub predicted: u32,
    pub tokens: usize,
    pub zero_shot_tokens: usize,
    pub intervened: bool,
    pub layer: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskResult {
    pub task_id: usize,
    pub name: String,
    pub domain: Domain,
    pub library: bool,
    pub n_queries: usize,
    pub accuracy: f64,
    pub mean_tokens: f64,
    pub intervention_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainResult {
    pub domain: Domain,
    pub n_tasks: usize,
    pub accuracy: f64,
    pub intervention_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub method: Method,
    pub seed: u64,
    pub config_hash: String,
    pub per_task: Vec<TaskResult>,
    pub per_domain: Vec<DomainResult>,
    /// Unweighted mean over tasks.
    pub mean_accuracy_tasks: f64,
    /// Unweighted mean over domains.
    pub mean_accuracy_domains: f64,
    pub mean_tokens: f64,
    pub intervention_rate: f64,
    pub queries: Vec<QueryRecord>,
}

impl EvalReport {
    pub fn task(&self, id: usize) -> Option<&TaskResult> {
        self.per_task.iter().find(|t| t.task_id == id)
    }

    pub fn domain(&self, d: Domain) -> Option<&DomainResult> {
        self.per_domain.iter().find(|r| r.domain == d)
    }
}

/// Demonstrations BM25 may retrieve: an equal-sized seeded sample of every
/// library task's pool, each rendered in the library format.
pub struct DemoPool {
    pub demos: Vec<(usize, TaskInput, u32)>,
    index: Bm25Index,
}

impl DemoPool {
    pub fn new(suite: &TaskSuite, per_task: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xb325);
        let mut demos = Vec::new();
        for t in suite.library_tasks() {
            let mut pool = suite.splits.for_task(t.id).library_pool.clone();
            pool.shuffle(&mut rng);
            for x in pool.into_iter().take(per_task) {
                demos.push((t.id, x, t.answer(&x)));
            }
        }
        let docs: Vec<Vec<u32>> = demos
            .iter()
            .map(|(_, x, y)| {
                let mut d = Vec::new();
                Template::Arrow.push_demo(x, *y, &mut d);
                d
            })
            .collect();
        DemoPool {
            index: Bm25Index::new(&docs),
            demos,
        }
    }

    pub fn retrieve(&self, query: &[u32], n: usize) -> Vec<(TaskInput, u32)> {
        self.index
            .top_k(query, n)
            .into_iter()
            .map(|i| (self.demos[i].1, self.demos[i].2))
            .collect()
    }
}

fn query_seed(seed: u64, i: usize) -> u64 {
    seed.wrapping_mul(0x2545_f491_4f6c_dd1d) ^ (i as u64).wrapping_add(0x51ed)
}

/// Prompt the method shows the model for query `i`.
pub fn method_prompt(
    method: Method,
    suite: &TaskSuite,
    q: &QuerySpec,
    i: usize,
    eval: &EvalSection,
    pool: Option<&DemoPool>,
    seed: u64,
) -> Result<PromptSpec> {
    let task = suite.task(q.task_id);
    match method {
        Method::ZeroShot | Method::Elicit => Ok(q.prompt(task)),
        Method::Icl16 => {
            let mut rng = ChaCha8Rng::seed_from_u64(query_seed(seed, i));
            let split = suite.splits.for_task(task.id);
            icl_prompt_for_query(task, &split.library_pool, q, eval.icl_demos, &mut rng)
        }
        Method::Bm25 | Method::Bm25PlusElicit => {
            let pool = pool.expect("pool built for BM25 methods");
            let zs = q.prompt(task);
            let demos = pool.retrieve(&zs.tokens, eval.bm25_demos);
            Ok(PromptSpec::render(
                task.id,
                demos,
                q.input,
                q.template,
                Some(task.instruction(q.verb as usize)),
            ))
        }
    }
}

/// Runs `method` on `queries` and scores exact-match accuracy.
pub fn run_eval(
    method: Method,
    suite: &TaskSuite,
    queries: &[QuerySpec],
    comps: Components<'_>,
    eval: &EvalSection,
    seed: u64,
    config_hash: &str,
) -> Result<EvalReport> {
    let needs = |what: &str| Error::Config(format!("method {method} needs {what}"));
    let retrieval = if method.uses_retrieval() {
        let lib = comps.library.ok_or_else(|| needs("a library"))?;
        let scorer = comps.scorer.ok_or_else(|| needs("a scorer"))?;
        let cfg = comps.retrieval.ok_or_else(|| needs("a calibrated threshold"))?;
        if !cfg.tau.is_finite() {
            return Err(needs("a calibrated threshold"));
        }
        Some((lib, scorer, cfg))
    } else {
        None
    };
    let pool = matches!(method, Method::Bm25 | Method::Bm25PlusElicit)
        .then(|| DemoPool::new(suite, eval.bm25_pool_per_task, seed));

    let mut prompts = Vec::with_capacity(queries.len());
    for (i, q) in queries.iter().enumerate() {
        prompts.push(method_prompt(method, suite, q, i, eval, pool.as_ref(), seed)?);
    }
    let decisions: Vec<Option<Decision>> = match retrieval {
        Some((lib, scorer, cfg)) => {
            let index = RankIndex::new(scorer, lib);
            queries
                .iter()
                .map(|q| {
                    let zs = q.prompt(suite.task(q.task_id));
                    select_intervention(&index.rank(&zs.tokens), lib, cfg)
                })
                .collect()
        }
        None => vec![None; queries.len()],
    };
    let slots: Vec<Option<&InterventionSpec>> = decisions.iter().map(|d| d.as_ref().map(|d| &d.spec)).collect();
    let tokens: Vec<&[u32]> = prompts.iter().map(|p| p.tokens.as_slice()).collect();
    let alphabet: Vec<u32> = (0..ALPHABET).collect();
    let preds = predict_batch(
        comps.params,
        &tokens,
        if slots.iter().any(Option::is_some) { &slots } else { &[] },
        &alphabet,
    )?;

    let records: Vec<QueryRecord> = queries
        .iter()
        .zip(&prompts)
        .zip(&preds)
        .zip(&decisions)
        .map(|(((q, p), pred), d)| {
            let task = suite.task(q.task_id);
            QueryRecord {
                task_id: q.task_id,
                input: q.input.as_slice().to_vec(),
                template: q.template,
                verb: q.verb,
                answer: q.answer(task),
                predicted: *pred,
                tokens: token_count(p),
                zero_shot_tokens: token_count(&q.prompt(task)),
                intervened: d.is_some(),
                layer: d.as_ref().map(|d| d.spec.layer),
            }
        })
        .collect();
    Ok(summarize(method, suite, records, seed, config_hash))
}

/// Length of the rendered prompt; interventions add nothing.
pub fn token_count(prompt: &PromptSpec) -> usize {
    prompt.tokens.len()
}

pub fn summarize(
    method: Method,
    suite: &TaskSuite,
    records: Vec<QueryRecord>,
    seed: u64,
    config_hash: &str,
) -> EvalReport {
    let mut by_task: BTreeMap<usize, Vec<&QueryRecord>> = BTreeMap::new();
    for r in &records {
        by_task.entry(r.task_id).or_default().push(r);
    }
    let per_task: Vec<TaskResult> = by_task
        .iter()
        .map(|(id, rs)| {
            let t = suite.task(*id);
            let n = rs.len() as f64;
            TaskResult {
                task_id: *id,
                name: t.name.clone(),
                domain: t.domain,
                library: t.library,
                n_queries: rs.len(),
                accuracy: rs.iter().filter(|r| r.predicted == r.answer).count() as f64 / n,
                mean_tokens: rs.iter().map(|r| r.tokens as f64).sum::<f64>() / n,
                intervention_rate: rs.iter().filter(|r| r.intervened).count() as f64 / n,
            }
        })
        .collect();
    let per_domain: Vec<DomainResult> = Domain::ALL
        .iter()
        .filter_map(|d| {
            let ts: Vec<&TaskResult> = per_task.iter().filter(|t| t.domain == *d).collect();
            (!ts.is_empty()).then(|| DomainResult {
                domain: *d,
                n_tasks: ts.len(),
                accuracy: mean(ts.iter().map(|t| t.accuracy)),
                intervention_rate: mean(ts.iter().map(|t| t.intervention_rate)),
            })
        })
        .collect();
    let n = records.len().max(1) as f64;
    EvalReport {
        schema_version: REPORT_SCHEMA,
        method,
        seed,
        config_hash: config_hash.to_string(),
        mean_accuracy_tasks: mean(per_task.iter().map(|t| t.accuracy)),
        mean_accuracy_domains: mean(per_domain.iter().map(|d| d.accuracy)),
        mean_tokens: records.iter().map(|r| r.tokens as f64).sum::<f64>() / n,
        intervention_rate: records.iter().filter(|r| r.intervened).count() as f64 / n,
        per_task,
        per_domain,
        queries: records,
    }
}

pub fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapRecovery {
    /// `(task_id, (elicit - zero_shot) / (icl - zero_shot))` for tasks with a
    /// positive gap.
    pub per_task: Vec<(usize, f64)>,
    /// Tasks where ICL did not beat zero-shot; left out of the mean.
    pub excluded: Vec<usize>,
    pub mean: f64,
}

pub fn gap_recovery(zero_shot: &EvalReport, icl: &EvalReport, elicit: &EvalReport) -> GapRecovery {
    let mut per_task = Vec::new();
    let mut excluded = Vec::new();
    for z in &zero_shot.per_task {
        let (Some(i), Some(e)) = (icl.task(z.task_id), elicit.task(z.task_id)) else {
            continue;
        };
        if i.accuracy > z.accuracy {
            per_task.push((z.task_id, (e.accuracy - z.accuracy) / (i.accuracy - z.accuracy)));
        } else {
            excluded.push(z.task_id);
        }
    }
    GapRecovery {
        mean: mean(per_task.iter().map(|p| p.1)),
        per_task,
        excluded,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
            assert_eq!(serde_json::to_string(&m).unwrap(), format!("\"{}\"", m.name()));
        }
        assert!("icl".parse::<Method>().is_err());
    }
}
