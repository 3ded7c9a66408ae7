//! Query/prompt pairs for training and evaluating the pair scorer.

use std::collections::BTreeMap;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tasks::{build_icl_prompt_from, QuerySpec, TaskSpec, TaskSuite, Template};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairExample {
    /// Zero-shot templated query tokens.
    pub query: Vec<u32>,
    /// ICL prompt tokens in the library format.
    pub prompt: Vec<u32>,
    pub label: bool,
    pub query_task: usize,
    pub prompt_task: usize,
}

/// Splits each task's validation queries by input: the last `held_inputs`
/// distinct inputs go to the held-out side.
pub fn split_validation(
    suite: &TaskSuite,
    tasks: &[&TaskSpec],
    held_inputs: usize,
) -> (Vec<QuerySpec>, Vec<QuerySpec>) {
    let mut train = Vec::new();
    let mut held = Vec::new();
    for t in tasks {
        let qs = &suite.splits.for_task(t.id).validation;
        let mut inputs: Vec<_> = qs.iter().map(|q| q.input).collect();
        inputs.dedup();
        let cut = inputs.len().saturating_sub(held_inputs);
        let held_set = &inputs[cut..];
        for q in qs {
            if held_set.contains(&q.input) {
                held.push(*q);
            } else {
                train.push(*q);
            }
        }
    }
    (train, held)
}

/// Balanced pairs: for every task, as many positives (query with a fresh ICL
/// prompt of its own task) as negatives (query with a prompt of a uniformly
/// chosen other task).
pub fn build_pair_dataset(
    suite: &TaskSuite,
    tasks: &[&TaskSpec],
    queries: &[QuerySpec],
    size: usize,
    n_demos: usize,
    seed: u64,
) -> Result<Vec<PairExample>> {
    if tasks.len() < 2 {
        return Err(Error::Config("pairs need at least two tasks".into()));
    }
    let mut by_task: BTreeMap<usize, Vec<QuerySpec>> = BTreeMap::new();
    for q in queries {
        by_task.entry(q.task_id).or_default().push(*q);
    }
    for t in tasks {
        let qs = by_task.get(&t.id).map(Vec::as_slice).unwrap_or(&[]);
        for template in Template::ALL {
            let n = qs.iter().filter(|q| q.template == template).count();
            if n < 2 {
                return Err(Error::Config(format!(
                    "task {} has {n} validation queries in template {template:?}, need 2",
                    t.id
                )));
            }
        }
    }
    let per_side = size / (2 * tasks.len());
    if per_side == 0 {
        return Err(Error::Config(format!(
            "pair dataset size {size} too small for {} tasks",
            tasks.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(per_side * 2 * tasks.len());
    for t in tasks {
        let qs = &by_task[&t.id];
        for i in 0..2 * per_side {
            let positive = i % 2 == 0;
            let q = qs.choose(&mut rng).expect("checked non-empty");
            let other = if positive {
                *t
            } else {
                let others: Vec<&&TaskSpec> = tasks.iter().filter(|o| o.id != t.id).collect();
                **others.choose(&mut rng).expect("at least two tasks")
            };
            let pool = &suite.splits.for_task(other.id).library_pool;
            let prompt = build_icl_prompt_from(other, pool, n_demos, Template::Arrow, None, &mut rng)?;
            out.push(PairExample {
                query: q.prompt(t).tokens,
                prompt: prompt.tokens,
                label: positive,
                query_task: t.id,
                prompt_task: other.id,
            });
        }
    }
    out.shuffle(&mut rng);
    Ok(out)
}
