use std::path::Path;
use std::process::{Command, Output};

use elicit::library::{save_library, CapabilityLibrary, TaskVectorEntry};
use elicit::model::{save_model, InterventionMode, ModelParams};
use elicit::pipeline::PipelineConfig;

fn elicit(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_elicit"))
        .args(args)
        .arg("--out-dir")
        .arg(out)
        .env("RUST_LOG", "error")
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_untrained_model(dir: &Path) -> ModelParams {
    let params = ModelParams::init(&PipelineConfig::default().model_config());
    save_model(&params, &dir.join("model.elct")).unwrap();
    params
}

#[test]
fn usage_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let o = elicit(&["eval", "--no-such-flag"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("--no-such-flag"));

    let o = elicit(&["eval", "--method", "telepathy"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("telepathy"));
}

#[test]
fn help_exits_0() {
    let dir = tempfile::tempdir().unwrap();
    let o = elicit(&["--help"], dir.path());
    assert_eq!(o.status.code(), Some(0));
    let text = String::from_utf8_lossy(&o.stdout);
    for cmd in [
        "train-model",
        "build-library",
        "train-retriever",
        "calibrate",
        "eval",
        "sweep-alpha",
        "selective",
        "unseen",
        "report",
    ] {
        assert!(text.contains(cmd), "{cmd} missing from help");
    }
}

#[test]
fn elicit_without_library_names_the_file() {
    let dir = tempfile::tempdir().unwrap();
    write_untrained_model(dir.path());
    let o = elicit(&["eval", "--method", "elicit"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert!(err.contains("missing artifact"), "{err}");
    assert!(err.contains("library.elib"), "{err}");
}

#[test]
fn missing_config_file_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let o = elicit(&["report", "--config", "/nonexistent/elicit.toml"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("elicit.toml"));
}

#[test]
fn foreign_library_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let params = write_untrained_model(dir.path());
    let (l, d) = (params.config.n_layers, params.config.d_model);
    let lib = CapabilityLibrary {
        fingerprint: 1,
        k: 1,
        n_tasks: 1,
        n_layers: l,
        d_model: d,
        alpha: 2.0,
        mode: InterventionMode::Add,
        entries: vec![TaskVectorEntry {
            entry_id: 0,
            task_id: 0,
            prompt: vec![1, 2, 3],
            theta: vec![0.0; l * d],
            best_layer: 0,
            val_accuracy: 0.0,
        }],
    };
    save_library(&lib, &dir.path().join("library.elib")).unwrap();
    let o = elicit(&["sweep-alpha"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("fingerprint"));
}

#[test]
fn report_merges_available_evaluations() {
    let dir = tempfile::tempdir().unwrap();
    write_untrained_model(dir.path());
    let o = elicit(&["eval", "--method", "zero_shot"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let o = elicit(&["report"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let report: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("report.json")).unwrap()).unwrap();
    assert_eq!(report["rows"].as_array().unwrap().len(), 1);
}
