//! Ranking, thresholding and layer voting over library entries.

use serde::{Deserialize, Serialize};

use super::scorer::{Encoding, PairScorer};
use crate::library::CapabilityLibrary;
use crate::model::{InterventionMode, InterventionSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregate {
    /// Mean of the winning layer's rows over the entries that voted for it.
    #[default]
    MeanOfWinners,
    /// The top-ranked entry's own vector at its own layer.
    TopOne,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalConfig {
    pub tau: f64,
    pub target_recall: f64,
    pub top_n: usize,
    pub aggregate: Aggregate,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        RetrievalConfig {
            tau: f64::NAN,
            target_recall: 0.8,
            top_n: 10,
            aggregate: Aggregate::MeanOfWinners,
        }
    }
}

/// `(entry_id, score)` for every library entry, best first.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityRanking {
    pub entries: Vec<(usize, f64)>,
}

impl SimilarityRanking {
    /// Sorts by descending score, breaking ties by ascending entry id.
    pub fn from_scores(mut entries: Vec<(usize, f64)>) -> Self {
        entries.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        SimilarityRanking { entries }
    }

    pub fn top_score(&self) -> Option<f64> {
        self.entries.first().map(|e| e.1)
    }
}

/// Library prompts encoded once for repeated ranking.
pub struct RankIndex<'a> {
    scorer: &'a PairScorer,
    ids: Vec<usize>,
    encodings: Vec<Encoding>,
}

impl<'a> RankIndex<'a> {
    pub fn new(scorer: &'a PairScorer, library: &CapabilityLibrary) -> Self {
        RankIndex {
            scorer,
            ids: library.entries.iter().map(|e| e.entry_id).collect(),
            encodings: library.entries.iter().map(|e| scorer.encode(&e.prompt)).collect(),
        }
    }

    pub fn rank(&self, query: &[u32]) -> SimilarityRanking {
        let q = self.scorer.encode(query);
        SimilarityRanking::from_scores(
            self.ids
                .iter()
                .zip(&self.encodings)
                .map(|(id, p)| (*id, self.scorer.score_encoded(&q, p)))
                .collect(),
        )
    }
}

pub fn rank_library(scorer: &PairScorer, query: &[u32], library: &CapabilityLibrary) -> SimilarityRanking {
    RankIndex::new(scorer, library).rank(query)
}

/// Chosen intervention plus the entries behind it.
#[derive(Debug, Clone, PartialEq)]
pub struct Decision {
    pub spec: InterventionSpec,
    pub voters: Vec<usize>,
}

/// Majority layer among `layers` (given best first); ties go to the layer of
/// the earliest tied entry.
pub fn vote_layer(layers: &[usize]) -> Option<usize> {
    let max = layers.iter().map(|l| layers.iter().filter(|x| *x == l).count()).max()?;
    layers
        .iter()
        .copied()
        .find(|l| layers.iter().filter(|x| *x == l).count() == max)
}

/// Thresholded top-n selection. `None` means answer zero-shot.
pub fn select_intervention(
    ranking: &SimilarityRanking,
    library: &CapabilityLibrary,
    cfg: &RetrievalConfig,
) -> Option<Decision> {
    let top = ranking.top_score()?;
    // Written this way so an uncalibrated (NaN) threshold never fires.
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    if !(top >= cfg.tau) {
        return None;
    }
    let by_id = |id: usize| {
        library
            .entries
            .iter()
            .find(|e| e.entry_id == id)
            .expect("ranked entry exists")
    };
    let top_n: Vec<usize> = ranking.entries.iter().take(cfg.top_n.max(1)).map(|e| e.0).collect();
    let layers: Vec<usize> = top_n.iter().map(|id| by_id(*id).best_layer).collect();
    let d = library.d_model;
    let (layer, voters, vector) = match cfg.aggregate {
        Aggregate::TopOne => {
            let e = by_id(top_n[0]);
            (e.best_layer, vec![e.entry_id], e.layer(e.best_layer, d).to_vec())
        }
        Aggregate::MeanOfWinners => {
            let layer = vote_layer(&layers).expect("non-empty");
            let voters: Vec<usize> = top_n
                .iter()
                .zip(&layers)
                .filter(|(_, l)| **l == layer)
                .map(|(id, _)| *id)
                .collect();
            let mut mean = vec![0f32; d];
            for id in &voters {
                for (m, x) in mean.iter_mut().zip(by_id(*id).layer(layer, d)) {
                    *m += x;
                }
            }
            let inv = 1.0 / voters.len() as f32;
            mean.iter_mut().for_each(|m| *m *= inv);
            (layer, voters, mean)
        }
    };
    let spec = match library.mode {
        InterventionMode::Add => InterventionSpec::add(layer, library.alpha, vector),
        InterventionMode::Replace => InterventionSpec::replace(layer, vector),
    };
    Some(Decision { spec, voters })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::library::TaskVectorEntry;

    fn library(layers: &[usize]) -> CapabilityLibrary {
        CapabilityLibrary {
            fingerprint: 0,
            k: layers.len(),
            n_tasks: 1,
            n_layers: 10,
            d_model: 1,
            alpha: 2.0,
            mode: InterventionMode::Add,
            entries: layers
                .iter()
                .enumerate()
                .map(|(i, l)| TaskVectorEntry {
                    entry_id: i,
                    task_id: 0,
                    prompt: vec![],
                    theta: (0..10).map(|j| (i * 100 + j) as f32).collect(),
                    best_layer: *l,
                    val_accuracy: 1.0,
                })
                .collect(),
        }
    }

    #[test]
    fn vote_counts_and_tie_break() {
        assert_eq!(vote_layer(&[5, 5, 5, 5, 5, 7, 7, 7, 9, 3]), Some(5));
        assert_eq!(vote_layer(&[7, 5, 5, 7]), Some(7));
        assert_eq!(vote_layer(&[]), None);
    }

    #[test]
    fn below_threshold_falls_back() {
        let lib = library(&[1, 1]);
        let r = SimilarityRanking::from_scores(vec![(0, 0.3), (1, 0.2)]);
        let cfg = RetrievalConfig {
            tau: 0.6,
            ..RetrievalConfig::default()
        };
        assert!(select_intervention(&r, &lib, &cfg).is_none());
        let uncalibrated = RetrievalConfig::default();
        assert!(select_intervention(&r, &lib, &uncalibrated).is_none());
    }

    #[test]
    fn mean_over_winning_voters() {
        let lib = library(&[2, 4, 2, 4, 4]);
        let r = SimilarityRanking::from_scores(vec![(0, 0.9), (1, 0.8), (2, 0.7), (3, 0.6), (4, 0.5)]);
        let cfg = RetrievalConfig {
            tau: 0.5,
            top_n: 3,
            ..RetrievalConfig::default()
        };
        let d = select_intervention(&r, &lib, &cfg).unwrap();
        assert_eq!(d.spec.layer, 2);
        assert_eq!(d.voters, vec![0, 2]);
        assert_eq!(d.spec.vector, vec![(2.0 + 202.0) / 2.0]);
        assert_eq!(d.spec.alpha, 2.0);

        let top1 = RetrievalConfig {
            aggregate: Aggregate::TopOne,
            ..cfg
        };
        let d = select_intervention(&r, &lib, &top1).unwrap();
        assert_eq!((d.spec.layer, d.spec.vector.clone()), (2, vec![2.0]));
    }

    #[test]
    fn ranking_ties_break_by_id() {
        let r = SimilarityRanking::from_scores(vec![(3, 0.5), (1, 0.5), (2, 0.9)]);
        assert_eq!(r.entries.iter().map(|e| e.0).collect::<Vec<_>>(), vec![2, 1, 3]);
    }
}
