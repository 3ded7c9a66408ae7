//! Single-token answer prediction, optionally under an intervention.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{forward_batch, Capture, ForwardOptions, HiddenTrace, InterventionSpec, ModelParams};
use crate::numeric::argmax_among;

const CHUNK: usize = 48;

/// Greedy answer restricted to `alphabet`.
pub fn generate_answer(
    params: &ModelParams,
    prompt: &[u32],
    intervention: Option<&InterventionSpec>,
    alphabet: &[u32],
) -> Result<u32> {
    Ok(predict_batch(params, &[prompt], &[intervention], alphabet)?[0])
}

/// Answers for many prompts. `interventions` is empty or has one slot per
/// prompt.
pub fn predict_batch<T: AsRef<[u32]> + Sync>(
    params: &ModelParams,
    prompts: &[T],
    interventions: &[Option<&InterventionSpec>],
    alphabet: &[u32],
) -> Result<Vec<u32>> {
    if alphabet.is_empty() {
        return Err(Error::Config("empty answer alphabet".into()));
    }
    if !interventions.is_empty() && interventions.len() != prompts.len() {
        return Err(Error::Argument("one intervention slot per prompt required".into()));
    }
    let chunks: Vec<Result<Vec<u32>>> = prompts
        .par_chunks(CHUNK)
        .enumerate()
        .map(|(c, chunk)| {
            let slots = if interventions.is_empty() {
                &[][..]
            } else {
                &interventions[c * CHUNK..c * CHUNK + chunk.len()]
            };
            let pass = forward_batch(
                params,
                chunk,
                ForwardOptions {
                    interventions: slots,
                    capture: Capture::Off,
                    links: &[],
                    keep_cache: false,
                },
            )?;
            Ok((0..chunk.len())
                .map(|s| argmax_among(pass.last_logits(s), alphabet).expect("alphabet is non-empty"))
                .collect())
        })
        .collect();
    let mut out = Vec::with_capacity(prompts.len());
    for c in chunks {
        out.extend(c?);
    }
    Ok(out)
}

/// Last-token hidden traces for many prompts.
pub fn trace_batch<T: AsRef<[u32]> + Sync>(params: &ModelParams, prompts: &[T]) -> Result<Vec<HiddenTrace>> {
    let chunks: Vec<Result<Vec<HiddenTrace>>> = prompts
        .par_chunks(CHUNK)
        .map(|chunk| {
            let pass = forward_batch(
                params,
                chunk,
                ForwardOptions {
                    interventions: &[],
                    capture: Capture::States,
                    links: &[],
                    keep_cache: false,
                },
            )?;
            Ok(pass.traces)
        })
        .collect();
    let mut out = Vec::with_capacity(prompts.len());
    for c in chunks {
        out.extend(c?);
    }
    Ok(out)
}
