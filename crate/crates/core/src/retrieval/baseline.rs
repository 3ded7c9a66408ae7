//! Hidden-state similarity baselines for the retriever ablation.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Cosine,
    Euclidean,
}

/// Similarity in `[0, 1]`: `(1 + cos) / 2` or `1 / (1 + distance)`.
/// A zero vector under cosine scores 0.5.
pub fn baseline_similarity(a: &[f32], b: &[f32], metric: Metric) -> f64 {
    assert_eq!(a.len(), b.len(), "baseline vectors must match");
    match metric {
        Metric::Cosine => {
            let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
            for (x, y) in a.iter().zip(b) {
                let (x, y) = (*x as f64, *y as f64);
                dot += x * y;
                na += x * x;
                nb += y * y;
            }
            if na == 0.0 || nb == 0.0 {
                return 0.5;
            }
            let cos = (dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0);
            (1.0 + cos) / 2.0
        }
        Metric::Euclidean => {
            let d2: f64 = a.iter().zip(b).map(|(x, y)| (*x as f64 - *y as f64).powi(2)).sum();
            1.0 / (1.0 + d2.sqrt())
        }
    }
}
