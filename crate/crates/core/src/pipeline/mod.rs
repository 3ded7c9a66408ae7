//! End-to-end stages. Each stage reads what it needs from an artifact
//! directory and writes its own outputs there.

pub mod config;
pub mod eval;
pub mod experiments;

use std::path::{Path, PathBuf};

use log::info;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{de::DeserializeOwned, Deserialize, Serialize};

pub use config::PipelineConfig;
pub use eval::{gap_recovery, run_eval, token_count, Components, EvalReport, GapRecovery, Method, REPORT_SCHEMA};
pub use experiments::{
    run_selective, run_unseen, sweep_alpha, top_n_ablation, SelectiveReport, SweepGrid, TopNAblation, UnseenReport,
};

use crate::error::{Error, Result};
use crate::inference::trace_batch;
use crate::library::{
    build_library, compatibility_warning, load_library, save_library, CapabilityLibrary, LibraryConfig,
};
use crate::model::{fingerprint, load_model, save_model, train, ModelParams, Sample, StateLink, TrainLog};
use crate::retrieval::{
    average_precision, baseline_similarity, build_pair_dataset, calibrate_threshold, load_scorer, save_scorer,
    split_validation, train_scorer, Calibration, Metric, PairExample, PairScorer, PrPoint, RankIndex, RetrievalConfig,
};
use crate::tasks::{Domain, QuerySpec, TaskSpec, TaskSuite};

pub const MODEL_FILE: &str = "model.elct";
pub const LIBRARY_FILE: &str = "library.elib";
pub const SCORER_FILE: &str = "scorer.ertr";
pub const CALIBRATION_FILE: &str = "calibration.json";
pub const PR_CURVE_FILE: &str = "pr_curve.csv";
pub const MANIFEST_FILE: &str = "suite.json";
pub const TRAIN_FILE: &str = "train.json";
pub const LIBRARY_SUMMARY_FILE: &str = "library.json";
pub const RETRIEVER_FILE: &str = "retriever.json";
pub const SWEEP_CSV: &str = "sweep_alpha.csv";
pub const SWEEP_JSON: &str = "sweep_alpha.json";
pub const SELECTIVE_FILE: &str = "selective.json";
pub const UNSEEN_FILE: &str = "unseen.json";
pub const ABLATION_FILE: &str = "dtt_ablation.json";
pub const REPORT_FILE: &str = "report.json";

// Independent streams derived from the run seed.
const LIBRARY_STREAM: u64 = 0x11b5;
const PAIR_STREAM: u64 = 0x9a15;
const HELD_PAIR_STREAM: u64 = 0x4e1d;
const CORPUS_STREAM: u64 = 0xc095;

pub fn eval_file(method: Method) -> String {
    format!("eval_{}.json", method.name())
}

/// Artifact locations: everything lives in `out_dir` unless a path is
/// given explicitly.
#[derive(Debug, Clone)]
pub struct Artifacts {
    pub out_dir: PathBuf,
    pub model: Option<PathBuf>,
    pub library: Option<PathBuf>,
    pub scorer: Option<PathBuf>,
}

impl Artifacts {
    pub fn new(out_dir: impl Into<PathBuf>) -> Self {
        Artifacts {
            out_dir: out_dir.into(),
            model: None,
            library: None,
            scorer: None,
        }
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }

    pub fn model_path(&self) -> PathBuf {
        self.model.clone().unwrap_or_else(|| self.path(MODEL_FILE))
    }

    pub fn library_path(&self) -> PathBuf {
        self.library.clone().unwrap_or_else(|| self.path(LIBRARY_FILE))
    }

    pub fn scorer_path(&self) -> PathBuf {
        self.scorer.clone().unwrap_or_else(|| self.path(SCORER_FILE))
    }

    pub fn ensure_dir(&self) -> Result<()> {
        std::fs::create_dir_all(&self.out_dir)
            .map_err(|e| Error::Io(e).context(format!("creating {}", self.out_dir.display())))
    }

    pub fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<()> {
        crate::io::write_json(&self.path(name), value)
    }

    pub fn read_json<T: DeserializeOwned>(&self, name: &str) -> Result<T> {
        read_json(&self.path(name))
    }

    pub fn load_model(&self) -> Result<ModelParams> {
        load_model(&self.model_path())
    }

    /// Loads the library and checks it was built from `params`.
    pub fn load_library(&self, params: &ModelParams) -> Result<CapabilityLibrary> {
        let lib = load_library(&self.library_path())?;
        match compatibility_warning(&lib, params) {
            Some(msg) => Err(Error::Incompatible(format!("{}: {msg}", self.library_path().display()))),
            None => Ok(lib),
        }
    }

    pub fn load_scorer(&self) -> Result<PairScorer> {
        load_scorer(&self.scorer_path())
    }

    pub fn load_calibration(&self) -> Result<Calibration> {
        self.read_json(CALIBRATION_FILE)
    }
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = crate::container::read_file(path)?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Corrupt {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

pub fn library_queries(suite: &TaskSuite) -> Vec<QuerySpec> {
    suite.test_queries(suite.library_tasks())
}

pub fn validation_queries(suite: &TaskSuite) -> Vec<QuerySpec> {
    suite.validation_queries(suite.library_tasks())
}

/// Training draws: plain ICL sequences, and with probability
/// `train.prompting_fraction` an ICL prompt linked to a zero-shot query of
/// the same task at a random layer.
pub fn training_sampler<'a>(cfg: &PipelineConfig, suite: &'a TaskSuite) -> impl FnMut(&mut ChaCha8Rng) -> Sample + 'a {
    let max_demos = cfg.train.max_demos;
    let fraction = cfg.train.prompting_fraction;
    let alpha = cfg.library.alpha;
    let n_layers = cfg.model.n_layers;
    move |rng| {
        if fraction > 0.0 && rng.random_bool(fraction) {
            let pair = suite.sample_prompting_pair(max_demos, rng);
            Sample {
                links: vec![StateLink {
                    layer: rng.random_range(0..n_layers),
                    alpha,
                    source: (0, pair.source_pos),
                    target: (1, pair.target_pos),
                }],
                seqs: vec![pair.source, pair.target],
            }
        } else {
            suite.sample_training_sequence(max_demos, rng).into()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskAccuracy {
    pub task_id: usize,
    pub name: String,
    pub icl: f64,
    pub zero_shot: f64,
}

/// Training outcome with validation ICL and zero-shot accuracy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub schema_version: u32,
    pub seed: u64,
    pub config_hash: String,
    pub fingerprint: String,
    pub steps: usize,
    /// Mean batch loss over the last 50 steps; absent for loaded models.
    pub final_loss: Option<f64>,
    pub per_task: Vec<TaskAccuracy>,
    pub icl_accuracy: f64,
    pub zero_shot_accuracy: f64,
}

pub fn train_model(cfg: &PipelineConfig, suite: &TaskSuite) -> Result<(ModelParams, TrainLog)> {
    let params = ModelParams::init(&cfg.model_config());
    info!("training {} steps, {} parameters", cfg.train.steps, params.data.len());
    train(params, &cfg.train_config(), training_sampler(cfg, suite))
}

pub fn summarize_model(
    cfg: &PipelineConfig,
    suite: &TaskSuite,
    params: &ModelParams,
    log: Option<&TrainLog>,
) -> Result<TrainSummary> {
    let comps = Components {
        params,
        library: None,
        scorer: None,
        retrieval: None,
    };
    let queries = validation_queries(suite);
    let hash = cfg.hash();
    let icl = run_eval(Method::Icl16, suite, &queries, comps, &cfg.eval, cfg.seed, &hash)?;
    let zs = run_eval(Method::ZeroShot, suite, &queries, comps, &cfg.eval, cfg.seed, &hash)?;
    let per_task = icl
        .per_task
        .iter()
        .map(|t| TaskAccuracy {
            task_id: t.task_id,
            name: t.name.clone(),
            icl: t.accuracy,
            zero_shot: zs.task(t.task_id).map_or(0.0, |z| z.accuracy),
        })
        .collect();
    Ok(TrainSummary {
        schema_version: REPORT_SCHEMA,
        seed: cfg.seed,
        config_hash: hash,
        fingerprint: format!("{:016x}", fingerprint(params)),
        steps: cfg.train.steps,
        final_loss: log.and_then(|l| l.tail_mean(50)),
        per_task,
        icl_accuracy: icl.mean_accuracy_tasks,
        zero_shot_accuracy: zs.mean_accuracy_tasks,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LibraryTaskSummary {
    pub task_id: usize,
    pub name: String,
    pub best_layers: Vec<usize>,
    pub mean_val_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LibrarySummary {
    pub schema_version: u32,
    pub fingerprint: String,
    pub entries: usize,
    pub alpha: f32,
    /// Fraction of entry pairs within a task whose best layers differ.
    pub layer_disagreement: f64,
    pub per_task: Vec<LibraryTaskSummary>,
}

pub fn library_config(cfg: &PipelineConfig) -> LibraryConfig {
    LibraryConfig {
        k: cfg.library.k,
        n_demos: cfg.library.n_demos,
        alpha: cfg.library.alpha,
        mode: cfg.library.mode,
        seed: cfg.seed ^ LIBRARY_STREAM,
    }
}

pub fn build_library_stage(
    cfg: &PipelineConfig,
    suite: &TaskSuite,
    params: &ModelParams,
) -> Result<(CapabilityLibrary, LibrarySummary)> {
    let tasks: Vec<&TaskSpec> = suite.library_tasks().collect();
    let (lib, _) = build_library(params, suite, &tasks, &library_config(cfg))?;
    let per_task = tasks
        .iter()
        .map(|t| {
            let es: Vec<_> = lib.entries.iter().filter(|e| e.task_id == t.id).collect();
            LibraryTaskSummary {
                task_id: t.id,
                name: t.name.clone(),
                best_layers: es.iter().map(|e| e.best_layer).collect(),
                mean_val_accuracy: eval::mean(es.iter().map(|e| e.val_accuracy as f64)),
            }
        })
        .collect();
    let summary = LibrarySummary {
        schema_version: REPORT_SCHEMA,
        fingerprint: format!("{:016x}", lib.fingerprint),
        entries: lib.len(),
        alpha: lib.alpha,
        layer_disagreement: lib.layer_disagreement(),
        per_task,
    };
    Ok((lib, summary))
}

/// Scorer training outcome and held-out retrieval quality.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrieverReport {
    pub schema_version: u32,
    pub seed: u64,
    pub train_pairs: usize,
    pub held_out_pairs: usize,
    pub epoch_losses: Vec<f64>,
    /// Average precision of the trained scorer on held-out pairs.
    pub pr_auc: f64,
    /// Same pairs scored by similarity of hidden-state traces.
    pub cosine_auc: f64,
    pub euclidean_auc: f64,
}

fn library_tasks(suite: &TaskSuite) -> Vec<&TaskSpec> {
    suite.library_tasks().collect()
}

/// Validation queries split into scorer-training and held-out halves.
pub fn retriever_split(cfg: &PipelineConfig, suite: &TaskSuite) -> (Vec<QuerySpec>, Vec<QuerySpec>) {
    split_validation(suite, &library_tasks(suite), cfg.retriever.held_inputs)
}

pub fn held_out_pairs(cfg: &PipelineConfig, suite: &TaskSuite) -> Result<Vec<PairExample>> {
    let (_, held) = retriever_split(cfg, suite);
    build_pair_dataset(
        suite,
        &library_tasks(suite),
        &held,
        (cfg.retriever.pairs / 4).max(2 * cfg.suite.n_library),
        cfg.library.n_demos,
        cfg.seed ^ HELD_PAIR_STREAM,
    )
}

pub fn train_retriever(
    cfg: &PipelineConfig,
    suite: &TaskSuite,
    params: &ModelParams,
) -> Result<(PairScorer, RetrieverReport)> {
    let tasks = library_tasks(suite);
    let (mut train_q, _) = retriever_split(cfg, suite);
    // Many distinct inputs teach the scorer to ignore the query symbol.
    train_q.extend(suite.pool_queries(tasks.iter().copied()));
    let pairs = build_pair_dataset(
        suite,
        &tasks,
        &train_q,
        cfg.retriever.pairs,
        cfg.library.n_demos,
        cfg.seed ^ PAIR_STREAM,
    )?;
    let held = held_out_pairs(cfg, suite)?;
    let (scorer, log) = train_scorer(&pairs, &cfg.scorer_config())?;

    let labels: Vec<bool> = held.iter().map(|p| p.label).collect();
    let scores: Vec<f64> = held.iter().map(|p| scorer.score(&p.query, &p.prompt)).collect();
    let [cosine_auc, euclidean_auc] = baseline_auc(params, &held)?;
    let report = RetrieverReport {
        schema_version: REPORT_SCHEMA,
        seed: cfg.seed,
        train_pairs: pairs.len(),
        held_out_pairs: held.len(),
        epoch_losses: log.epoch_losses,
        pr_auc: average_precision(&scores, &labels),
        cosine_auc,
        euclidean_auc,
    };
    info!(
        "retriever PR-AUC {:.3} (cosine {:.3}, euclidean {:.3})",
        report.pr_auc, report.cosine_auc, report.euclidean_auc
    );
    Ok((scorer, report))
}

/// PR-AUC of cosine and euclidean similarity between the flattened traces
/// of each pair's zero-shot query and its ICL prompt.
pub fn baseline_auc(params: &ModelParams, pairs: &[PairExample]) -> Result<[f64; 2]> {
    let queries = trace_batch(params, &pairs.iter().map(|p| p.query.as_slice()).collect::<Vec<_>>())?;
    let prompts = trace_batch(params, &pairs.iter().map(|p| p.prompt.as_slice()).collect::<Vec<_>>())?;
    let labels: Vec<bool> = pairs.iter().map(|p| p.label).collect();
    let auc = |metric| {
        let scores: Vec<f64> = queries
            .iter()
            .zip(&prompts)
            .map(|(q, p)| baseline_similarity(&q.states, &p.states, metric))
            .collect();
        average_precision(&scores, &labels)
    };
    Ok([auc(Metric::Cosine), auc(Metric::Euclidean)])
}

/// Top-1 score and correctness for each query.
pub fn top1_scores(
    suite: &TaskSuite,
    library: &CapabilityLibrary,
    scorer: &PairScorer,
    queries: &[QuerySpec],
) -> (Vec<f64>, Vec<bool>) {
    let index = RankIndex::new(scorer, library);
    queries
        .iter()
        .map(|q| {
            let ranking = index.rank(&q.prompt(suite.task(q.task_id)).tokens);
            let (id, score) = ranking.entries[0];
            let entry = library
                .entries
                .iter()
                .find(|e| e.entry_id == id)
                .expect("ranked entry exists");
            (score, entry.task_id == q.task_id)
        })
        .unzip()
}

/// Threshold at the target recall over held-out validation queries.
pub fn calibrate(
    cfg: &PipelineConfig,
    suite: &TaskSuite,
    library: &CapabilityLibrary,
    scorer: &PairScorer,
) -> Result<(Calibration, Vec<PrPoint>)> {
    if library.is_empty() {
        return Err(Error::Calibration("empty library".into()));
    }
    let (_, held) = retriever_split(cfg, suite);
    let (scores, labels) = top1_scores(suite, library, scorer, &held);
    let (cal, curve) = calibrate_threshold(&scores, &labels, cfg.retriever.target_recall)?;
    info!(
        "calibrated tau {:.4}: recall {:.3}, precision {:.3}",
        cal.tau, cal.achieved_recall, cal.achieved_precision
    );
    Ok((cal, curve))
}

pub fn retrieval_config(cfg: &PipelineConfig, cal: &Calibration) -> RetrievalConfig {
    RetrievalConfig {
        tau: cal.tau,
        target_recall: cal.target_recall,
        top_n: cfg.retriever.top_n,
        aggregate: cfg.retriever.aggregate,
    }
}

pub fn sweep(
    cfg: &PipelineConfig,
    suite: &TaskSuite,
    params: &ModelParams,
    library: &CapabilityLibrary,
) -> Result<SweepGrid> {
    let corpus = suite.lm_probe_corpus(cfg.eval.lm_corpus, cfg.seed ^ CORPUS_STREAM);
    let layers: Vec<usize> = (0..params.config.n_layers).collect();
    sweep_alpha(
        params,
        suite,
        library,
        &cfg.eval.alpha_grid,
        &layers,
        cfg.eval.sweep_entries,
        &corpus,
    )
}

pub fn selective(cfg: &PipelineConfig, suite: &TaskSuite, comps: Components<'_>) -> Result<SelectiveReport> {
    let (Some(library), Some(scorer), Some(retrieval)) = (comps.library, comps.scorer, comps.retrieval) else {
        return Err(Error::Config(
            "selective activation needs a library, scorer and threshold".into(),
        ));
    };
    run_selective(
        comps.params,
        suite,
        library,
        Domain::Arithmetic,
        scorer,
        retrieval,
        &library_queries(suite),
        &cfg.eval,
        cfg.seed,
        &cfg.hash(),
    )
}

/// One method's row in the summary table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: Method,
    pub per_domain: Vec<(Domain, f64)>,
    /// Unweighted mean over tasks.
    pub avg_tasks: f64,
    /// Unweighted mean over domains.
    pub avg_domains: f64,
    pub mean_tokens: f64,
    pub intervention_rate: f64,
}

/// Per-method results side by side, methods as rows and domains as columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub schema_version: u32,
    pub seed: u64,
    pub config_hash: String,
    pub rows: Vec<SummaryRow>,
    /// ELICIT against zero-shot and 16-shot ICL, when all three are present.
    pub gap_recovery: Option<GapRecovery>,
    /// Every ELICIT query used exactly as many tokens as its zero-shot form.
    pub token_parity: bool,
}

pub fn merge_reports(reports: &[EvalReport]) -> Result<Report> {
    let first = reports
        .first()
        .ok_or_else(|| Error::MissingArtifact("no eval_*.json reports to merge".into()))?;
    let mut sorted: Vec<&EvalReport> = reports.iter().collect();
    sorted.sort_by_key(|r| r.method);
    let rows = sorted
        .iter()
        .map(|r| SummaryRow {
            method: r.method,
            per_domain: r.per_domain.iter().map(|d| (d.domain, d.accuracy)).collect(),
            avg_tasks: r.mean_accuracy_tasks,
            avg_domains: r.mean_accuracy_domains,
            mean_tokens: r.mean_tokens,
            intervention_rate: r.intervention_rate,
        })
        .collect();
    let find = |m: Method| sorted.iter().copied().find(|r| r.method == m);
    let gap = match (find(Method::ZeroShot), find(Method::Icl16), find(Method::Elicit)) {
        (Some(z), Some(i), Some(e)) => Some(gap_recovery(z, i, e)),
        _ => None,
    };
    let token_parity = find(Method::Elicit)
        .map(|e| e.queries.iter().all(|q| q.tokens == q.zero_shot_tokens))
        .unwrap_or(true);
    Ok(Report {
        schema_version: REPORT_SCHEMA,
        seed: first.seed,
        config_hash: first.config_hash.clone(),
        rows,
        gap_recovery: gap,
        token_parity,
    })
}

/// Everything a full run produces, kept in memory for inspection.
#[derive(Debug, Clone)]
pub struct RunOutputs {
    pub params: ModelParams,
    pub train: TrainSummary,
    pub library: CapabilityLibrary,
    pub library_summary: LibrarySummary,
    pub scorer: PairScorer,
    pub retriever: RetrieverReport,
    pub calibration: Calibration,
    pub pr_curve: Vec<PrPoint>,
    pub evals: Vec<EvalReport>,
    pub sweep: SweepGrid,
    pub selective: SelectiveReport,
    pub unseen: UnseenReport,
    pub ablation: TopNAblation,
    pub report: Report,
}

impl RunOutputs {
    pub fn eval(&self, method: Method) -> &EvalReport {
        self.evals
            .iter()
            .find(|r| r.method == method)
            .expect("all methods evaluated")
    }
}

/// Runs every stage in order, writing all artifacts to `artifacts.out_dir`.
/// An existing checkpoint at the model path is reused instead of training.
pub fn run_all(cfg: &PipelineConfig, artifacts: &Artifacts) -> Result<RunOutputs> {
    cfg.validate()?;
    artifacts.ensure_dir()?;
    let suite = TaskSuite::new(cfg.suite_config())?;
    artifacts.write_json(MANIFEST_FILE, &suite.manifest())?;

    let model_path = artifacts.model_path();
    let (params, log) = if model_path.exists() {
        info!("reusing {}", model_path.display());
        let params = load_model(&model_path)?;
        if params.config != cfg.model_config() {
            return Err(Error::Incompatible(format!(
                "{} does not match the configured model",
                model_path.display()
            )));
        }
        (params, None)
    } else {
        let (params, log) = train_model(cfg, &suite)?;
        save_model(&params, &model_path)?;
        (params, Some(log))
    };
    let train = summarize_model(cfg, &suite, &params, log.as_ref())?;
    artifacts.write_json(TRAIN_FILE, &train)?;

    let (library, library_summary) = build_library_stage(cfg, &suite, &params)?;
    save_library(&library, &artifacts.library_path())?;
    artifacts.write_json(LIBRARY_SUMMARY_FILE, &library_summary)?;

    let (scorer, retriever) = train_retriever(cfg, &suite, &params)?;
    save_scorer(&scorer, &artifacts.scorer_path())?;
    artifacts.write_json(RETRIEVER_FILE, &retriever)?;

    let (calibration, pr_curve) = calibrate(cfg, &suite, &library, &scorer)?;
    artifacts.write_json(CALIBRATION_FILE, &calibration)?;
    crate::retrieval::calibrate::write_pr_csv(&artifacts.path(PR_CURVE_FILE), &pr_curve)?;

    let retrieval = retrieval_config(cfg, &calibration);
    let comps = Components {
        params: &params,
        library: Some(&library),
        scorer: Some(&scorer),
        retrieval: Some(&retrieval),
    };
    let hash = cfg.hash();
    let test = library_queries(&suite);
    let mut evals = Vec::new();
    for method in Method::ALL {
        let report = run_eval(method, &suite, &test, comps, &cfg.eval, cfg.seed, &hash)?;
        artifacts.write_json(&eval_file(method), &report)?;
        evals.push(report);
    }

    let sweep = sweep(cfg, &suite, &params, &library)?;
    sweep.write_csv(&artifacts.path(SWEEP_CSV))?;
    artifacts.write_json(SWEEP_JSON, &sweep)?;

    let selective = selective(cfg, &suite, comps)?;
    artifacts.write_json(SELECTIVE_FILE, &selective)?;

    let unseen = run_unseen(comps, &suite, &cfg.eval, cfg.seed, &hash)?;
    artifacts.write_json(UNSEEN_FILE, &unseen)?;

    let ablation = top_n_ablation(
        comps,
        &suite,
        &validation_queries(&suite),
        &cfg.eval.top_n_grid,
        &cfg.eval,
        cfg.seed,
        &hash,
    )?;
    artifacts.write_json(ABLATION_FILE, &ablation)?;

    let report = merge_reports(&evals)?;
    artifacts.write_json(REPORT_FILE, &report)?;

    Ok(RunOutputs {
        params,
        train,
        library,
        library_summary,
        scorer,
        retriever,
        calibration,
        pr_curve,
        evals,
        sweep,
        selective,
        unseen,
        ablation,
        report,
    })
}
