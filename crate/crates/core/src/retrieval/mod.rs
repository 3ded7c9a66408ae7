//! Query-to-library retrieval: the pair scorer, threshold calibration and
//! thresholded top-n layer voting.

pub mod baseline;
pub mod calibrate;
pub mod dtt;
pub mod pairs;
pub mod scorer;

pub use baseline::{baseline_similarity, Metric};
pub use calibrate::{average_precision, calibrate_threshold, pr_curve, Calibration, PrPoint};
pub use dtt::{rank_library, select_intervention, Aggregate, Decision, RankIndex, RetrievalConfig, SimilarityRanking};
pub use pairs::{build_pair_dataset, split_validation, PairExample};
pub use scorer::{load_scorer, save_scorer, train_scorer, PairScorer, ScorerConfig};
