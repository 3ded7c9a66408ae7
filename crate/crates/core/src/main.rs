use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::info;

use elicit::library::save_library;
use elicit::model::save_model;
use elicit::pipeline::{self, Artifacts, Components, EvalReport, Method, PipelineConfig};
use elicit::retrieval::calibrate::write_pr_csv;
use elicit::retrieval::save_scorer;
use elicit::tasks::TaskSuite;
use elicit::{Error, Result};

#[derive(Parser, Debug)]
#[command(
    name = "elicit",
    version,
    about = "Task-vector library, retrieval and evaluation for a small in-context learner"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// TOML or JSON configuration; defaults are used for missing fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory for artifacts and reports.
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
    /// Evaluation method; every method when omitted.
    #[arg(long, global = true)]
    method: Option<String>,
    /// Intervention strength.
    #[arg(long, global = true)]
    alpha: Option<f32>,
    #[arg(long, global = true)]
    top_n: Option<usize>,
    #[arg(long, global = true)]
    target_recall: Option<f64>,
    #[arg(long, global = true)]
    library: Option<PathBuf>,
    #[arg(long, global = true)]
    model: Option<PathBuf>,
    #[arg(long, global = true)]
    scorer: Option<PathBuf>,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Train the transformer and record validation accuracy.
    TrainModel,
    /// Extract task vectors and pick each one's layer.
    BuildLibrary,
    /// Train the query/prompt pair scorer.
    TrainRetriever,
    /// Pick the retrieval threshold on held-out validation queries.
    Calibrate,
    /// Evaluate one or all methods on the library test split.
    Eval,
    /// Accuracy and LM loss over intervention strengths and layers.
    SweepAlpha,
    /// ELICIT with an arithmetic-only library on every domain.
    Selective,
    /// ELICIT on held-out tasks.
    Unseen,
    /// Top-n sweep of the retrieval vote on validation queries.
    AblateTopN,
    /// Merge the per-method evaluations into one table.
    Report,
    /// Every stage in order.
    RunAll,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(alpha) = cli.alpha {
        cfg.library.alpha = alpha;
    }
    if let Some(n) = cli.top_n {
        cfg.retriever.top_n = n;
    }
    if let Some(r) = cli.target_recall {
        cfg.retriever.target_recall = r;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli)?;
    let methods = match &cli.method {
        Some(m) => vec![m.parse::<Method>()?],
        None => Method::ALL.to_vec(),
    };
    let artifacts = Artifacts {
        model: cli.model.clone(),
        library: cli.library.clone(),
        scorer: cli.scorer.clone(),
        ..Artifacts::new(&cli.out_dir)
    };
    artifacts.ensure_dir()?;
    let suite = TaskSuite::new(cfg.suite_config())?;
    let hash = cfg.hash();

    match cli.command {
        Command::TrainModel => {
            artifacts.write_json(pipeline::MANIFEST_FILE, &suite.manifest())?;
            let (params, log) = pipeline::train_model(&cfg, &suite)?;
            save_model(&params, &artifacts.model_path())?;
            let summary = pipeline::summarize_model(&cfg, &suite, &params, Some(&log))?;
            info!(
                "validation: icl {:.3}, zero-shot {:.3}",
                summary.icl_accuracy, summary.zero_shot_accuracy
            );
            artifacts.write_json(pipeline::TRAIN_FILE, &summary)
        }
        Command::BuildLibrary => {
            let params = artifacts.load_model()?;
            let (lib, summary) = pipeline::build_library_stage(&cfg, &suite, &params)?;
            save_library(&lib, &artifacts.library_path())?;
            artifacts.write_json(pipeline::LIBRARY_SUMMARY_FILE, &summary)
        }
        Command::TrainRetriever => {
            let params = artifacts.load_model()?;
            let (scorer, report) = pipeline::train_retriever(&cfg, &suite, &params)?;
            save_scorer(&scorer, &artifacts.scorer_path())?;
            artifacts.write_json(pipeline::RETRIEVER_FILE, &report)
        }
        Command::Calibrate => {
            let params = artifacts.load_model()?;
            let lib = artifacts.load_library(&params)?;
            let scorer = artifacts.load_scorer()?;
            let (cal, curve) = pipeline::calibrate(&cfg, &suite, &lib, &scorer)?;
            write_pr_csv(&artifacts.path(pipeline::PR_CURVE_FILE), &curve)?;
            artifacts.write_json(pipeline::CALIBRATION_FILE, &cal)
        }
        Command::Eval => {
            let params = artifacts.load_model()?;
            let needs_retrieval = methods.iter().any(|m| m.uses_retrieval());
            let loaded = if needs_retrieval {
                Some(load_retrieval(cli, &cfg, &artifacts, &params)?)
            } else {
                None
            };
            let comps = components(&params, loaded.as_ref());
            let queries = pipeline::library_queries(&suite);
            for m in methods {
                let report = pipeline::run_eval(m, &suite, &queries, comps, &cfg.eval, cfg.seed, &hash)?;
                info!(
                    "{m}: accuracy {:.3}, tokens {:.1}",
                    report.mean_accuracy_tasks, report.mean_tokens
                );
                artifacts.write_json(&pipeline::eval_file(m), &report)?;
            }
            Ok(())
        }
        Command::SweepAlpha => {
            let params = artifacts.load_model()?;
            let lib = artifacts.load_library(&params)?;
            let grid = pipeline::sweep(&cfg, &suite, &params, &lib)?;
            grid.write_csv(&artifacts.path(pipeline::SWEEP_CSV))?;
            artifacts.write_json(pipeline::SWEEP_JSON, &grid)
        }
        Command::Selective => {
            let params = artifacts.load_model()?;
            let loaded = load_retrieval(cli, &cfg, &artifacts, &params)?;
            let report = pipeline::selective(&cfg, &suite, components(&params, Some(&loaded)))?;
            artifacts.write_json(pipeline::SELECTIVE_FILE, &report)
        }
        Command::Unseen => {
            let params = artifacts.load_model()?;
            let loaded = load_retrieval(cli, &cfg, &artifacts, &params)?;
            let report = pipeline::run_unseen(components(&params, Some(&loaded)), &suite, &cfg.eval, cfg.seed, &hash)?;
            artifacts.write_json(pipeline::UNSEEN_FILE, &report)
        }
        Command::AblateTopN => {
            let params = artifacts.load_model()?;
            let loaded = load_retrieval(cli, &cfg, &artifacts, &params)?;
            let report = pipeline::top_n_ablation(
                components(&params, Some(&loaded)),
                &suite,
                &pipeline::validation_queries(&suite),
                &cfg.eval.top_n_grid,
                &cfg.eval,
                cfg.seed,
                &hash,
            )?;
            artifacts.write_json(pipeline::ABLATION_FILE, &report)
        }
        Command::Report => {
            let mut reports: Vec<EvalReport> = Vec::new();
            for m in Method::ALL {
                let path = artifacts.path(&pipeline::eval_file(m));
                if path.exists() {
                    reports.push(pipeline::read_json(&path)?);
                }
            }
            let report = pipeline::merge_reports(&reports)?;
            artifacts.write_json(pipeline::REPORT_FILE, &report)
        }
        Command::RunAll => pipeline::run_all(&cfg, &artifacts).map(|_| ()),
    }
}

struct Loaded {
    library: elicit::library::CapabilityLibrary,
    scorer: elicit::retrieval::PairScorer,
    retrieval: elicit::retrieval::RetrievalConfig,
}

fn load_retrieval(
    cli: &Cli,
    cfg: &PipelineConfig,
    artifacts: &Artifacts,
    params: &elicit::model::ModelParams,
) -> Result<Loaded> {
    let mut library = artifacts.load_library(params)?;
    if let Some(alpha) = cli.alpha {
        library.alpha = alpha;
    }
    let scorer = artifacts.load_scorer()?;
    let cal = artifacts.load_calibration().map_err(|e| match e {
        Error::MissingArtifact(p) => Error::MissingArtifact(format!("{p} (run calibrate first)")),
        other => other,
    })?;
    Ok(Loaded {
        retrieval: pipeline::retrieval_config(cfg, &cal),
        library,
        scorer,
    })
}

fn components<'a>(params: &'a elicit::model::ModelParams, loaded: Option<&'a Loaded>) -> Components<'a> {
    Components {
        params,
        library: loaded.map(|l| &l.library),
        scorer: loaded.map(|l| &l.scorer),
        retrieval: loaded.map(|l| &l.retrieval),
    }
}
