use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use coldchain::docstore::Store;

const CONFIG: &str = r#"{
  "store_path": "store",
  "seed": 5,
  "log_level": "warn",
  "simulator": { "n_fridges": 3, "days": 2.0 },
  "dsr": {
    "train_pipeline": "train.json",
    "test_pipeline": "test.json",
    "models": { "lstm": { "net": { "kind": "lstm", "hidden": 4, "depth": 1 }, "hyper": { "epochs": 1 } } }
  },
  "faults": { "train_pipeline": "train.json", "test_pipeline": "test.json" }
}"#;

fn setup(config: &str) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("run.json"), config).unwrap();
    fs::write(dir.path().join("train.json"), r#"[{"$match":{"split":"train"}}]"#).unwrap();
    fs::write(dir.path().join("test.json"), r#"[{"$match":{"split":"test"}}]"#).unwrap();
    dir
}

fn coldchain(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_coldchain"))
        .current_dir(dir)
        .env_remove("CONFIG_PATH")
        .env_remove("STORE_PATH")
        .args(args)
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn validate_config_accepts_a_good_config() {
    let dir = setup(CONFIG);
    let out = coldchain(dir.path(), &["--config", "run.json", "validate-config"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(stdout(&out).contains("config ok: 0 stage(s), 1 DSR model(s)"));
}

#[test]
fn unknown_fields_are_config_errors() {
    let dir = setup(&CONFIG.replacen("\"seed\": 5", "\"seed\": 5, \"sede\": 6", 1));
    let out = coldchain(dir.path(), &["--config", "run.json", "validate-config"]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("sede"));
}

#[test]
fn usage_errors_exit_two() {
    let dir = setup(CONFIG);
    assert_eq!(code(&coldchain(dir.path(), &["validate-config"])), 2, "no config anywhere");
    assert_eq!(code(&coldchain(dir.path(), &["frobnicate"])), 2);
    assert_eq!(code(&coldchain(dir.path(), &["--config", "missing.json", "validate-config"])), 2);
    assert_eq!(code(&coldchain(dir.path(), &["--config", "run.json", "task", "bogus"])), 2);
    assert_eq!(code(&coldchain(dir.path(), &["--config", "run.json", "run"])), 2, "no stages");
    assert_eq!(code(&coldchain(dir.path(), &["--help"])), 0);
}

#[test]
fn environment_supplies_config_and_store() {
    let dir = setup(CONFIG);
    let out = Command::new(env!("CARGO_BIN_EXE_coldchain"))
        .current_dir(dir.path())
        .env("CONFIG_PATH", dir.path().join("run.json"))
        .env("STORE_PATH", dir.path().join("elsewhere"))
        .arg("validate-config")
        .output()
        .unwrap();
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(stdout(&out).trim_end().ends_with("elsewhere"), "{}", stdout(&out));
}

#[test]
fn learning_without_data_is_a_task_failure() {
    let dir = setup(CONFIG);
    let out = coldchain(dir.path(), &["--config", "run.json", "learn"]);
    assert_eq!(code(&out), 1, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn simulate_then_ingest_through_worker_tasks() {
    let dir = setup(CONFIG);
    let out = coldchain(dir.path(), &["--config", "run.json", "simulate", "--out", "csv"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(dir.path().join("csv/telemetry.csv")).unwrap();
    // 3 fridges, 2 days, one reading a minute, plus the header
    assert_eq!(csv.lines().count(), 1 + 3 * 2 * 1440);
    assert!(dir.path().join("csv/work_orders.csv").exists());

    let out = coldchain(dir.path(), &["--config", "run.json", "ingest", "--telemetry", "csv/telemetry.csv"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let out = coldchain(dir.path(), &["--config", "run.json", "task", "wrangle_dsr", "--stage", "wrangle", "--pe-index", "0", "--pe-total", "1"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let out = coldchain(dir.path(), &["--config", "run.json", "task", "index", "--stage", "serve"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));

    let store = Store::open_reader(dir.path().join("store")).unwrap();
    assert_eq!(store.count("telemetry"), 3 * 2 * 1440);
    assert!(store.count("defrost_examples") > 0);
}
