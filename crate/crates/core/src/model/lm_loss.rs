//! Language-modelling probe: next-token loss on held-out sequences with an
//! optional last-token intervention.

use super::forward::{forward_batch, Capture, ForwardOptions};
use super::intervention::InterventionSpec;
use super::params::ModelParams;
use crate::error::{Error, Result};

/// Mean cross-entropy of the final token of each sequence given its prefix.
///
/// The intervention, when present, edits the state at the last prefix
/// position, which is the position that predicts the scored token.
pub fn probe_loss(params: &ModelParams, corpus: &[Vec<u32>], intervention: Option<&InterventionSpec>) -> Result<f64> {
    if corpus.iter().any(|s| s.len() < 2) {
        return Err(Error::Argument("probe sequences need at least two tokens".into()));
    }
    if corpus.is_empty() {
        return Err(Error::Argument("empty probe corpus".into()));
    }
    let mut total = 0.0;
    for chunk in corpus.chunks(64) {
        let prefixes: Vec<&[u32]> = chunk.iter().map(|s| &s[..s.len() - 1]).collect();
        let specs = vec![intervention; chunk.len()];
        let pass = forward_batch(
            params,
            &prefixes,
            ForwardOptions {
                interventions: if intervention.is_some() { &specs } else { &[] },
                capture: Capture::Off,
                links: &[],
                keep_cache: false,
            },
        )?;
        for (s, seq) in chunk.iter().enumerate() {
            let logits = pass.last_logits(s);
            let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
            let lse = max + logits.iter().map(|&x| (x as f64 - max).exp()).sum::<f64>().ln();
            total += lse - logits[*seq.last().unwrap() as usize] as f64;
        }
    }
    Ok(total / corpus.len() as f64)
}
