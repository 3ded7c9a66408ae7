//! End-to-end acceptance run: trains the reference pipeline on three seeds
//! and checks each criterion against numbers recomputed here.
//!
//! Checkpoints are cached under the cargo tmp dir keyed by config hash, so
//! only the first run pays for training.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use elicit::library::{library_bytes, load_library, save_library};
use elicit::model::{forward, loss_and_grad, Capture, InterventionSpec, ModelConfig, ModelParams};
use elicit::pipeline::{self, run_all, Artifacts, EvalReport, Method, PipelineConfig, RunOutputs};
use elicit::retrieval::scorer::scorer_bytes;
use elicit::retrieval::{load_scorer, save_scorer};
use elicit::tasks::{TaskSuite, VOCAB_SIZE};

const SEEDS: [u64; 3] = [0, 1, 2];
const GAP_MARGIN: f64 = 0.5;
const NO_HARM: f64 = 0.02;

struct Outcome {
    id: u32,
    pass: bool,
    detail: String,
}

fn outcome(id: u32, pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        id,
        pass,
        detail: detail.into(),
    }
}

fn cache_root() -> PathBuf {
    Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance")
}

fn run_seed(seed: u64) -> RunOutputs {
    let cfg = PipelineConfig {
        seed,
        ..PipelineConfig::default()
    };
    let dir = cache_root().join(format!("seed{seed}-{}", cfg.hash()));
    let start = Instant::now();
    let out = run_all(&cfg, &Artifacts::new(&dir)).expect("pipeline runs");
    println!(
        "  seed {seed}: pipeline {:.0}s ({})",
        start.elapsed().as_secs_f64(),
        dir.display()
    );
    out
}

fn mean(xs: impl IntoIterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.into_iter().collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn accuracy_by_task(r: &EvalReport) -> BTreeMap<usize, f64> {
    let mut hits: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for q in &r.queries {
        let e = hits.entry(q.task_id).or_default();
        e.0 += (q.predicted == q.answer) as usize;
        e.1 += 1;
    }
    hits.into_iter().map(|(t, (h, n))| (t, h as f64 / n as f64)).collect()
}

/// Per-task (E - Z) / (I - Z) averaged over tasks with I > Z.
fn gap(run: &RunOutputs) -> f64 {
    let z = accuracy_by_task(run.eval(Method::ZeroShot));
    let i = accuracy_by_task(run.eval(Method::Icl16));
    let e = accuracy_by_task(run.eval(Method::Elicit));
    mean(z.keys().filter(|t| i[t] > z[t]).map(|t| (e[t] - z[t]) / (i[t] - z[t])))
}

fn gradient_check() -> Outcome {
    let start = Instant::now();
    let cfg = ModelConfig {
        vocab_size: 12,
        d_model: 8,
        n_layers: 2,
        n_heads: 2,
        d_ff: 16,
        context_len: 10,
        seed: 11,
    };
    let mut params = ModelParams::<f64>::init(&cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for v in params.data.iter_mut() {
        *v += rng.random_range(-0.1..0.1);
    }
    let seqs: Vec<Vec<u32>> = (0..3)
        .map(|_| (0..8).map(|_| rng.random_range(0..12)).collect())
        .collect();
    let (_, grad) = loss_and_grad(&params, &seqs).unwrap();
    let eps = 1e-5;
    let picks = sample(&mut rng, params.data.len(), 120);
    let mut worst = 0.0f64;
    for i in picks.iter() {
        let orig = params.data[i];
        params.data[i] = orig + eps;
        let lp = loss_and_grad(&params, &seqs).unwrap().0;
        params.data[i] = orig - eps;
        let lm = loss_and_grad(&params, &seqs).unwrap().0;
        params.data[i] = orig;
        let numeric = (lp - lm) / (2.0 * eps);
        // Difference quotients carry ~1e-11 of rounding, so tiny gradients
        // are compared on an absolute floor.
        let rel = (numeric - grad[i]).abs() / (numeric.abs() + grad[i].abs()).max(1e-6);
        worst = worst.max(rel);
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        1,
        worst < 1e-4 && secs < 60.0,
        format!("120 params, worst relative error {worst:.2e}, {secs:.1}s"),
    )
}

fn icl_capability(runs: &[RunOutputs]) -> Outcome {
    let rows: Vec<(f64, f64)> = runs
        .iter()
        .map(|r| (r.train.icl_accuracy, r.train.zero_shot_accuracy))
        .collect();
    let pass = rows.iter().all(|(i, z)| *i >= 0.90 && i - z >= 0.15);
    let detail = rows
        .iter()
        .map(|(i, z)| format!("icl16 {i:.3} / zs {z:.3}"))
        .collect::<Vec<_>>()
        .join(", ");
    outcome(2, pass, detail)
}

fn gap_recovery(runs: &[RunOutputs]) -> Outcome {
    let gaps: Vec<f64> = runs.iter().map(gap).collect();
    let agree = runs.iter().zip(&gaps).all(|(r, g)| {
        r.report
            .gap_recovery
            .as_ref()
            .is_some_and(|x| (x.mean - g).abs() < 1e-12)
    });
    let free = runs
        .iter()
        .all(|r| r.eval(Method::Elicit).mean_tokens == r.eval(Method::ZeroShot).mean_tokens);
    let m = mean(gaps.iter().copied());
    outcome(
        3,
        m >= GAP_MARGIN && agree && free,
        format!("per seed {gaps:.3?}, seed-mean {m:.3}, report agrees {agree}, extra tokens 0 {free}"),
    )
}

fn token_parity(runs: &[RunOutputs]) -> Outcome {
    let mut n = 0;
    let mut bad = 0;
    for r in runs {
        let z = r.eval(Method::ZeroShot);
        for (report, other) in [(r.eval(Method::Elicit), z), (&r.unseen.elicit, &r.unseen.zero_shot)] {
            for (a, b) in report.queries.iter().zip(&other.queries) {
                n += 1;
                if a.task_id != b.task_id
                    || a.input != b.input
                    || a.tokens != b.tokens
                    || a.tokens != a.zero_shot_tokens
                {
                    bad += 1;
                }
            }
        }
    }
    outcome(4, bad == 0 && n > 0, format!("{n} queries, {bad} mismatches"))
}

fn retriever_quality(runs: &[RunOutputs]) -> Outcome {
    let pass = runs.iter().all(|r| {
        let x = &r.retriever;
        x.pr_auc >= 0.90 && x.pr_auc - x.cosine_auc >= 0.15 && x.pr_auc - x.euclidean_auc >= 0.15
    });
    let detail = runs
        .iter()
        .map(|r| {
            format!(
                "auc {:.3} (cos {:.3}, euc {:.3})",
                r.retriever.pr_auc, r.retriever.cosine_auc, r.retriever.euclidean_auc
            )
        })
        .collect::<Vec<_>>()
        .join(", ");
    outcome(5, pass, detail)
}

fn calibration(runs: &[RunOutputs]) -> Outcome {
    let mut pass = true;
    let mut detail = Vec::new();
    for (seed, r) in SEEDS.iter().zip(runs) {
        let cfg = PipelineConfig {
            seed: *seed,
            ..PipelineConfig::default()
        };
        let suite = TaskSuite::new(cfg.suite_config()).unwrap();
        let (_, held) = pipeline::retriever_split(&cfg, &suite);
        let (scores, labels) = pipeline::top1_scores(&suite, &r.library, &r.scorer, &held);
        let positives = labels.iter().filter(|l| **l).count() as f64;
        let recall =
            |tau: f64| scores.iter().zip(&labels).filter(|(s, l)| **l && **s >= tau).count() as f64 / positives;
        let target = cfg.retriever.target_recall;
        let tau = r.calibration.tau;
        let got = recall(tau);
        let maximal = scores.iter().filter(|s| **s > tau).all(|s| recall(*s) < target);
        pass &= got >= target && got <= target + 0.05 && maximal && got == r.calibration.achieved_recall;
        detail.push(format!("recall {got:.3} at tau {tau:.4}, maximal {maximal}"));
    }
    outcome(6, pass, detail.join(", "))
}

fn identities(run: &RunOutputs) -> Outcome {
    let p = &run.params;
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut bad = 0;
    for _ in 0..100 {
        let len = rng.random_range(1..=p.config.context_len);
        let tokens: Vec<u32> = (0..len).map(|_| rng.random_range(0..VOCAB_SIZE as u32)).collect();
        let layer = rng.random_range(0..p.config.n_layers);
        let (base, trace) = forward(p, &tokens, None, Capture::States).unwrap();
        let own = trace.unwrap().state(layer).to_vec();
        let noise: Vec<f32> = (0..own.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let zero = forward(
            p,
            &tokens,
            Some(&InterventionSpec::add(layer, 0.0, noise)),
            Capture::Off,
        )
        .unwrap()
        .0;
        let same = forward(p, &tokens, Some(&InterventionSpec::replace(layer, own)), Capture::Off)
            .unwrap()
            .0;
        let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        if bits(&zero) != bits(&base) || bits(&same) != bits(&base) {
            bad += 1;
        }
    }
    outcome(
        7,
        bad == 0,
        format!("100 random prompts on the seed-0 model, {bad} differ"),
    )
}

fn trade_off(run: &RunOutputs) -> Outcome {
    let grid = &run.sweep;
    let mut alphas: Vec<f32> = grid
        .cells
        .iter()
        .map(|c| c.alpha)
        .filter(|a| (0.0..=5.0).contains(a))
        .collect();
    alphas.sort_by(f32::total_cmp);
    alphas.dedup();
    let layers: Vec<usize> = (0..run.params.config.n_layers).collect();
    let mut rising = true;
    for &l in &layers {
        let ce: Vec<f64> = alphas.iter().map(|a| grid.cell(l, *a).unwrap().ce_loss).collect();
        rising &= ce.windows(2).all(|w| w[1] >= w[0]);
    }
    let best = grid
        .cells
        .iter()
        .max_by(|a, b| a.accuracy.total_cmp(&b.accuracy))
        .unwrap();
    let base = grid
        .cells
        .iter()
        .filter(|c| c.alpha == 0.0)
        .map(|c| c.accuracy)
        .fold(f64::MIN, f64::max);
    outcome(
        8,
        rising && best.alpha > 0.0 && best.accuracy > base,
        format!(
            "CE non-decreasing in alpha at all {} layers: {rising}; peak accuracy {:.3} at layer {} alpha {} (alpha 0: {base:.3})",
            layers.len(),
            best.accuracy,
            best.layer,
            best.alpha
        ),
    )
}

fn selective(runs: &[RunOutputs]) -> Outcome {
    let mut deltas: BTreeMap<String, (bool, Vec<f64>)> = BTreeMap::new();
    for r in runs {
        let z = &r.selective.zero_shot.per_domain;
        let e = &r.selective.elicit.per_domain;
        for (a, b) in z.iter().zip(e) {
            let entry = deltas.entry(format!("{:?}", a.domain).to_lowercase()).or_default();
            entry.0 = a.domain == r.selective.library_domain;
            entry.1.push(b.accuracy - a.accuracy);
        }
    }
    let mut pass = true;
    let mut detail = Vec::new();
    for (name, (inside, d)) in &deltas {
        let m = mean(d.iter().copied());
        pass &= if *inside { m > 0.0 } else { m > -NO_HARM };
        detail.push(format!("{name} {m:+.3}"));
    }
    outcome(9, pass, format!("seed-mean deltas: {}", detail.join(", ")))
}

fn dtt_ablation(runs: &[RunOutputs]) -> Outcome {
    let grid_ok = runs
        .iter()
        .all(|r| [1, 5, 10, 15].iter().all(|n| r.ablation.row(*n).is_some()));
    let g10 = mean(
        runs.iter()
            .map(|r| r.ablation.row(10).map_or(f64::NAN, |x| x.gap_recovery)),
    );
    let beats = runs.iter().all(|r| {
        r.ablation
            .row(10)
            .is_some_and(|x| x.accuracy > r.ablation.zero_shot_accuracy)
    });
    let table = runs[0]
        .ablation
        .rows
        .iter()
        .map(|x| format!("n={} {:.3}", x.top_n, x.accuracy))
        .collect::<Vec<_>>()
        .join(" ");
    outcome(
        10,
        grid_ok && beats && g10 >= GAP_MARGIN,
        format!(
            "n=10 gap recovery seed-mean {g10:.3}; seed 0: zs {:.3}, {table}",
            runs[0].ablation.zero_shot_accuracy
        ),
    )
}

fn serialization_and_determinism(run: &RunOutputs) -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let lib_path = dir.path().join("lib.elib");
    save_library(&run.library, &lib_path).unwrap();
    let lib = load_library(&lib_path).unwrap();
    let lib_ok = lib == run.library && library_bytes(&lib).unwrap() == std::fs::read(&lib_path).unwrap();
    let scorer_path = dir.path().join("scorer.ertr");
    save_scorer(&run.scorer, &scorer_path).unwrap();
    let scorer = load_scorer(&scorer_path).unwrap();
    let scorer_ok = scorer == run.scorer && scorer_bytes(&scorer) == std::fs::read(&scorer_path).unwrap();

    // Two fresh full runs with short training.
    let mut cfg = PipelineConfig {
        seed: 4,
        ..PipelineConfig::default()
    };
    cfg.train.steps = 80;
    cfg.train.warmup_steps = 10;
    let snapshot = |sub: &str| {
        let out = dir.path().join(sub);
        run_all(&cfg, &Artifacts::new(&out)).unwrap();
        let mut files: Vec<(String, Vec<u8>)> = std::fs::read_dir(&out)
            .unwrap()
            .map(|e| e.unwrap().path())
            .map(|p| {
                (
                    p.file_name().unwrap().to_string_lossy().into_owned(),
                    std::fs::read(&p).unwrap(),
                )
            })
            .collect();
        files.sort();
        files
    };
    let a = snapshot("a");
    let b = snapshot("b");
    let json = a.iter().filter(|(n, _)| n.ends_with(".json")).count();
    let identical = a == b;
    outcome(
        11,
        lib_ok && scorer_ok && identical && json >= 10,
        format!("library round trip {lib_ok}, scorer round trip {scorer_ok}, {json} JSON reports identical across reruns {identical}"),
    )
}

fn unseen(runs: &[RunOutputs]) -> Outcome {
    let z = mean(runs.iter().map(|r| r.unseen.zero_shot_accuracy));
    let e = mean(runs.iter().map(|r| r.unseen.elicit_accuracy));
    let rate = mean(runs.iter().map(|r| r.unseen.intervention_rate));
    outcome(
        12,
        e >= z - NO_HARM,
        format!("seed-mean zs {z:.3}, elicit {e:.3}, intervention rate {rate:.3}"),
    )
}

fn main() -> ExitCode {
    let start = Instant::now();
    let mut results = vec![gradient_check()];
    println!("training and evaluating seeds {SEEDS:?}");
    let runs: Vec<RunOutputs> = SEEDS.iter().map(|s| run_seed(*s)).collect();
    results.push(icl_capability(&runs));
    results.push(gap_recovery(&runs));
    results.push(token_parity(&runs));
    results.push(retriever_quality(&runs));
    results.push(calibration(&runs));
    results.push(identities(&runs[0]));
    results.push(trade_off(&runs[0]));
    results.push(selective(&runs));
    results.push(dtt_ablation(&runs));
    results.push(serialization_and_determinism(&runs[0]));
    results.push(unseen(&runs));

    println!();
    for r in &results {
        println!(
            "criterion {:>2}: {}  {}",
            r.id,
            if r.pass { "PASS" } else { "FAIL" },
            r.detail
        );
    }
    let failed = results.iter().filter(|r| !r.pass).count();
    println!(
        "{} of {} criteria pass ({:.0}s)",
        results.len() - failed,
        results.len(),
        start.elapsed().as_secs_f64()
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
