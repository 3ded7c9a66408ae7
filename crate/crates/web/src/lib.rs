//! Browser demo: intervention locality on a small random model, threshold
//! calibration on pasted scores, and the layer vote behind retrieval.

use serde_json::json;
use wasm_bindgen::prelude::*;

use elicit::model::{forward, Capture, InterventionSpec, ModelConfig, ModelParams};
use elicit::retrieval::calibrate::calibrate_threshold;
use elicit::retrieval::dtt::vote_layer;

const DEMO_LAYERS: usize = 6;
const DEMO_WIDTH: usize = 16;
const DEMO_VOCAB: usize = 24;

fn demo_model(seed: u64) -> ModelParams {
    ModelParams::init(&ModelConfig {
        vocab_size: DEMO_VOCAB,
        d_model: DEMO_WIDTH,
        n_layers: DEMO_LAYERS,
        n_heads: 4,
        d_ff: 32,
        context_len: 32,
        seed,
    })
}

fn parse_list<T: std::str::FromStr>(s: &str) -> Result<Vec<T>, String> {
    s.split(|c: char| c == ',' || c.is_whitespace())
        .filter(|t| !t.is_empty())
        .map(|t| t.parse::<T>().map_err(|_| format!("cannot parse {t:?}")))
        .collect()
}

/// Adds `alpha * v` at `layer` and reports, per block, how far the last-token
/// state moved. Blocks before `layer` must report zero.
pub fn intervention_locality(seed: u64, layer: usize, alpha: f32, tokens: &str) -> Result<String, String> {
    let params = demo_model(seed);
    let tokens: Vec<u32> = parse_list(tokens)?;
    if tokens.is_empty() {
        return Err("need at least one token".into());
    }
    if let Some(t) = tokens.iter().find(|t| **t as usize >= DEMO_VOCAB) {
        return Err(format!("token {t} outside vocabulary of {DEMO_VOCAB}"));
    }
    if layer >= DEMO_LAYERS {
        return Err(format!("layer {layer} outside 0..{DEMO_LAYERS}"));
    }
    let vector: Vec<f32> = (0..DEMO_WIDTH).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
    let spec = InterventionSpec::add(layer, alpha, vector);
    let (base_logits, base) = forward(&params, &tokens, None, Capture::States).map_err(|e| e.to_string())?;
    let (logits, steered) = forward(&params, &tokens, Some(&spec), Capture::States).map_err(|e| e.to_string())?;
    let (base, steered) = (base.expect("captured"), steered.expect("captured"));
    // Traces record block outputs before that block's own intervention, so
    // the shift shows up from the next block on.
    let shifts: Vec<f64> = (0..DEMO_LAYERS)
        .map(|l| {
            base.state(l)
                .iter()
                .zip(steered.state(l))
                .map(|(a, b)| ((a - b) as f64).powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .collect();
    let logit_shift = base_logits
        .iter()
        .zip(&logits)
        .map(|(a, b)| (a - b).abs() as f64)
        .fold(0.0, f64::max);
    Ok(json!({ "state_shift": shifts, "max_logit_shift": logit_shift }).to_string())
}

/// Largest threshold whose recall reaches `target`, with the PR curve.
pub fn calibrate(scores: &str, labels: &str, target: f64) -> Result<String, String> {
    let scores: Vec<f64> = parse_list(scores)?;
    let labels: Vec<u8> = parse_list(labels)?;
    if scores.len() != labels.len() {
        return Err(format!("{} scores but {} labels", scores.len(), labels.len()));
    }
    let labels: Vec<bool> = labels.iter().map(|l| *l != 0).collect();
    let (cal, curve) = calibrate_threshold(&scores, &labels, target).map_err(|e| e.to_string())?;
    let points: Vec<_> = curve
        .iter()
        .map(|p| json!({ "threshold": p.threshold, "precision": p.precision, "recall": p.recall }))
        .collect();
    Ok(json!({
        "tau": cal.tau,
        "recall": cal.achieved_recall,
        "precision": cal.achieved_precision,
        "average_precision": cal.auc,
        "curve": points,
    })
    .to_string())
}

/// Majority layer over best-first entries; ties go to the earliest.
pub fn vote(layers: &str) -> Result<String, String> {
    let layers: Vec<usize> = parse_list(layers)?;
    let winner = vote_layer(&layers).ok_or("no layers given")?;
    let voters: Vec<usize> = layers
        .iter()
        .enumerate()
        .filter(|(_, l)| **l == winner)
        .map(|(i, _)| i)
        .collect();
    Ok(json!({ "layer": winner, "voters": voters }).to_string())
}

#[wasm_bindgen(js_name = interventionLocality)]
pub fn intervention_locality_js(seed: u32, layer: usize, alpha: f32, tokens: &str) -> Result<String, JsError> {
    intervention_locality(seed as u64, layer, alpha, tokens).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = calibrate)]
pub fn calibrate_js(scores: &str, labels: &str, target: f64) -> Result<String, JsError> {
    calibrate(scores, labels, target).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = vote)]
pub fn vote_js(layers: &str) -> Result<String, JsError> {
    vote(layers).map_err(|e| JsError::new(&e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn earlier_blocks_are_untouched() {
        let out: serde_json::Value =
            serde_json::from_str(&intervention_locality(1, 3, 2.0, "1 2 3 4 5").unwrap()).unwrap();
        let shifts = out["state_shift"].as_array().unwrap();
        for s in &shifts[..=3] {
            assert_eq!(s.as_f64().unwrap(), 0.0);
        }
        assert!(shifts[4].as_f64().unwrap() > 0.0);
        assert!(out["max_logit_shift"].as_f64().unwrap() > 0.0);
    }

    #[test]
    fn calibration_reaches_target() {
        let out: serde_json::Value =
            serde_json::from_str(&calibrate("0.9 0.8 0.7 0.6 0.2", "1 1 0 1 0", 0.6).unwrap()).unwrap();
        assert_eq!(out["tau"].as_f64().unwrap(), 0.8);
        assert!(calibrate("0.5", "1 0", 0.8).is_err());
    }

    #[test]
    fn vote_breaks_ties_by_rank() {
        let out: serde_json::Value = serde_json::from_str(&vote("4,2,2,4").unwrap()).unwrap();
        assert_eq!(out["layer"], 4);
        assert_eq!(out["voters"], json!([0, 3]));
        assert!(vote("").is_err());
    }
}
