//! The `forge` binary: exit codes, workspace resolution and stage chaining.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use forge_cli::report::{export_curves, read_curve};
use forge_cli::workspace::deterministic_view;
use forge_train::checkpoint::PARAMS_FILE;
use forge_train::trainer::METRICS_FILE;

fn demo_config() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../demo/forge.json")
}

/// Small batches and a 4-step schedule so a whole pipeline takes seconds.
const QUICK: [&str; 5] = [
    "pack.batch_rows=4",
    "pack.context=16",
    "pack.val_fraction=0.1",
    "schedule.total_steps=4",
    "schedule.checkpoint_every=2",
];

fn forge(args: &[&str], workspace: Option<&Path>, extra: &[&str]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_forge"));
    cmd.args(args).arg("--config").arg(demo_config());
    if let Some(ws) = workspace {
        cmd.arg("--set").arg(format!("workspace_dir={}", serde_json::to_string(ws).unwrap()));
    }
    for s in QUICK.iter().chain(extra) {
        cmd.arg("--set").arg(s);
    }
    cmd.env_remove("FORGE_WORKSPACE");
    cmd.output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn missing_vocab_file_exits_2_naming_the_field() {
    let ws = tempfile::tempdir().unwrap();
    let o = forge(&["ingest"], Some(ws.path()), &["tokenizer.vocab_file=missing/encoder.json"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("tokenizer.vocab_file"), "{}", stderr(&o));
    assert!(fs::read_dir(ws.path()).unwrap().next().is_none());
}

#[test]
fn config_errors_name_the_field() {
    let ws = tempfile::tempdir().unwrap();
    for (set, field) in [
        ("pack.batch_rows=\"many\"", "pack.batch_rows"),
        ("model.n_heads=0", "model.n_heads"),
        ("schedule.total_iterations=7", "schedule.total_iterations"),
        ("report.emissions.hours=-1", "report.emissions.hours"),
        ("pack.colour=1", "pack"),
        ("ingest.sources.1.root_path=\"nowhere\"", "ingest.sources.1.root_path"),
    ] {
        let o = forge(&["ingest"], Some(ws.path()), &[set]);
        assert_eq!(o.status.code(), Some(2), "{set}");
        assert!(stderr(&o).contains(field), "{set}: {}", stderr(&o));
    }
}

#[test]
fn workspace_falls_back_to_environment() {
    let ws = tempfile::tempdir().unwrap();
    let o = forge(&["ingest"], None, &["workspace_dir=null"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("workspace_dir"));

    let o = Command::new(env!("CARGO_BIN_EXE_forge"))
        .args(["ingest", "--config"])
        .arg(demo_config())
        .args(["--set", "workspace_dir=null"])
        .env("FORGE_WORKSPACE", ws.path())
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(ws.path().join("ingest/documents.jsonl").is_file());
}

#[test]
fn stage_without_inputs_exits_1_naming_the_stage() {
    let ws = tempfile::tempdir().unwrap();
    let o = forge(&["dedup"], Some(ws.path()), &[]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert!(err.contains("stage dedup failed") && err.contains("filter"), "{err}");
}

#[test]
fn pipeline_equals_manual_chain_and_resume_is_exact() {
    let piped = tempfile::tempdir().unwrap();
    let o = forge(&["pipeline"], Some(piped.path()), &[]);
    assert!(o.status.success(), "{}", stderr(&o));

    let manual = tempfile::tempdir().unwrap();
    for stage in ["ingest", "filter", "dedup", "tokenize", "pack", "train", "generate", "stats", "report"] {
        let o = forge(&[stage], Some(manual.path()), &[]);
        assert!(o.status.success(), "{stage}: {}", stderr(&o));
    }
    let a = deterministic_view(piped.path()).unwrap();
    let b = deterministic_view(manual.path()).unwrap();
    assert_eq!(a.keys().collect::<Vec<_>>(), b.keys().collect::<Vec<_>>());
    for (k, v) in &a {
        assert!(b[k] == *v, "{k} differs");
    }

    // interrupt after step 2, then resume
    let train = manual.path().join("train");
    fs::remove_dir_all(train.join("step_00000004")).unwrap();
    let metrics = fs::read_to_string(train.join(METRICS_FILE)).unwrap();
    let kept: Vec<&str> = metrics.lines().take(3).collect();
    fs::write(train.join(METRICS_FILE), kept.join("\n") + "\n").unwrap();
    let o = forge(&["train", "--resume"], Some(manual.path()), &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let resumed = deterministic_view(manual.path()).unwrap();
    for k in a.keys().filter(|k| k.starts_with("train/")) {
        assert!(resumed[k] == a[k], "{k} differs after resume");
    }
    assert_eq!(
        fs::read(train.join("step_00000004").join(PARAMS_FILE)).unwrap(),
        fs::read(piped.path().join("train/step_00000004").join(PARAMS_FILE)).unwrap()
    );
}

#[test]
fn resume_rejects_a_changed_schedule() {
    let ws = tempfile::tempdir().unwrap();
    let o = forge(&["pipeline"], Some(ws.path()), &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = forge(&["train", "--resume"], Some(ws.path()), &["optimizer.lr=0.01"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("stage train failed"), "{}", stderr(&o));
}

#[test]
fn generate_accepts_a_prompt_override() {
    let ws = tempfile::tempdir().unwrap();
    assert!(forge(&["pipeline"], Some(ws.path()), &[]).status.success());
    let o = forge(&["generate", "--prompt", "always @(posedge clk)"], Some(ws.path()), &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let sample: serde_json::Value =
        serde_json::from_slice(&fs::read(ws.path().join("generate/sample.json")).unwrap()).unwrap();
    assert_eq!(sample["prompt"], "always @(posedge clk)");
    assert_eq!(sample["checkpoint_step"], 4);
}

#[test]
fn five_row_fixture_exports_five_points_per_series() {
    let fixture = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data/metrics_5rows.csv");
    let out = tempfile::tempdir().unwrap();
    let files = export_curves(&fixture, out.path()).unwrap();
    assert_eq!(files.len(), 4);
    for svg in ["val_loss.svg", "perplexity.svg"] {
        let body = fs::read_to_string(out.path().join(svg)).unwrap();
        assert_eq!(body.matches("class=\"point\"").count(), 5, "{svg}");
        assert!(body.starts_with("<svg") && body.trim_end().ends_with("</svg>"));
    }
    let series = |name: &str| -> Vec<(u64, f64)> {
        csv::Reader::from_path(out.path().join(name))
            .unwrap()
            .deserialize::<(u64, f64)>()
            .map(Result::unwrap)
            .collect()
    };
    let (loss, ppl) = (series("val_loss.csv"), series("perplexity.csv"));
    assert_eq!(loss.len(), 5);
    for ((s1, l), (s2, p)) in loss.iter().zip(&ppl) {
        assert_eq!(s1, s2);
        assert!((p - l.exp()).abs() <= 1e-9 * l.exp());
    }
}

#[test]
fn empty_metrics_is_an_error_and_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let metrics = dir.path().join(METRICS_FILE);
    fs::write(&metrics, "step,train_loss,val_loss,perplexity,tokens_per_sec,batches_per_sec\n").unwrap();
    let out = dir.path().join("curves");
    assert!(read_curve(&metrics).is_err());
    assert!(export_curves(&metrics, &out).is_err());
    assert!(!out.exists());

    fs::write(&metrics, "step,val_loss\n1,not-a-number\n").unwrap();
    assert!(export_curves(&metrics, &out).is_err());
    assert!(!out.exists());
}

#[test]
fn report_stage_fails_on_empty_metrics() {
    let ws = tempfile::tempdir().unwrap();
    fs::create_dir_all(ws.path().join("train")).unwrap();
    fs::write(ws.path().join("train").join(METRICS_FILE), "step,train_loss,val_loss,perplexity\n").unwrap();
    let o = forge(&["report"], Some(ws.path()), &[]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("stage report failed"));
    assert!(!ws.path().join("report/val_loss.svg").exists());
}
