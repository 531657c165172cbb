use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use bevcollab::config::ScenarioConfig;
use tempfile::TempDir;

const SMALL: &str = "[grid]\nheight = 48\nwidth = 48\n";

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_bevcollab"));
    c.env_remove("BEVCOLLAB_THREADS");
    c
}

fn config(dir: &Path, body: &str) -> String {
    let path = dir.join("scenario.toml");
    fs::write(&path, body).unwrap();
    path.to_str().unwrap().to_string()
}

fn run(cmd: &mut Command) -> Output {
    cmd.output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn defaults_print_the_default_config() {
    let o = run(bin().arg("defaults"));
    assert!(o.status.success());
    let text = String::from_utf8(o.stdout).unwrap();
    assert_eq!(ScenarioConfig::from_toml_str(&text).unwrap(), ScenarioConfig::default());
}

#[test]
fn run_writes_report_with_overrides() {
    let tmp = TempDir::new().unwrap();
    let cfg = config(tmp.path(), SMALL);
    let out = tmp.path().join("out");
    let o = run(bin().args(["run", "--config", &cfg, "--seed", "11", "--out"]).arg(&out));
    assert!(o.status.success(), "{}", stderr(&o));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["seed"], 11);
    assert_eq!(report["variant"], "full");
    assert!(report["metrics"]["acc@0.7"].is_number());
}

#[test]
fn thread_count_does_not_change_report_bytes() {
    let tmp = TempDir::new().unwrap();
    let cfg = config(tmp.path(), &format!("{SMALL}[pipeline]\negos = [0, 1, 2]\n"));
    let mut bytes = Vec::new();
    for threads in ["1", "3"] {
        let out = tmp.path().join(format!("t{threads}"));
        let o = run(bin().env("BEVCOLLAB_THREADS", threads).args(["run", "--config", &cfg, "--out"]).arg(&out));
        assert!(o.status.success(), "{}", stderr(&o));
        bytes.push(fs::read(out.join("report.json")).unwrap());
    }
    assert_eq!(bytes[0], bytes[1]);
}

#[test]
fn bad_thread_override_is_a_config_error() {
    let o = run(bin().env("BEVCOLLAB_THREADS", "zero").arg("defaults"));
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("BEVCOLLAB_THREADS"));
}

#[test]
fn type_error_exits_2_with_location() {
    let tmp = TempDir::new().unwrap();
    let cfg = config(tmp.path(), "[pipeline]\ntoken_ratios = [0.5, \"x\"]\n");
    let o = run(bin().args(["run", "--config", &cfg]));
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains("pipeline.token_ratios[1]") && err.contains("line 2"), "{err}");
}

#[test]
fn range_error_exits_2() {
    let tmp = TempDir::new().unwrap();
    let cfg = config(tmp.path(), "[channel]\ndrop_probability = 1.5\n");
    let o = run(bin().args(["run", "--config", &cfg]));
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("channel.drop_probability"));
}

#[test]
fn missing_config_exits_2() {
    let o = run(bin().args(["run", "--config", "/nonexistent/scenario.toml"]));
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn unknown_variant_exits_2() {
    let o = run(bin().args(["ablate", "--variants", "full,bogus"]));
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn budget_overrun_exits_3() {
    let tmp = TempDir::new().unwrap();
    let cfg = config(tmp.path(), &format!("{SMALL}[pipeline]\nbudget_units = 0.0001\n"));
    let o = run(bin().args(["run", "--config", &cfg, "--out"]).arg(tmp.path()));
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("budget"));
}

#[test]
fn sweep_writes_csv_in_value_order() {
    let tmp = TempDir::new().unwrap();
    let cfg = config(tmp.path(), SMALL);
    let o = run(bin().args(["sweep", "--config", &cfg, "--axis", "latency", "--values", "0,100", "--out"]).arg(tmp.path()));
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(tmp.path().join("sweep_latency_ms.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[0].starts_with("latency_ms,acc@0.5,acc@0.7,tp_0_30,"));
    assert!(lines[0].ends_with(",comm_units,wall_ms"));
    assert!(lines[1].starts_with("0,") && lines[2].starts_with("100,"));
    assert!(tmp.path().join("sweep_latency_ms.json").exists());
}

#[test]
fn ablate_writes_table_and_deltas() {
    let tmp = TempDir::new().unwrap();
    let cfg = config(tmp.path(), SMALL);
    let o = run(bin().args(["ablate", "--config", &cfg, "--variants", "full,camera-only", "--out"]).arg(tmp.path()));
    assert!(o.status.success(), "{}", stderr(&o));
    let table = fs::read_to_string(tmp.path().join("ablation.csv")).unwrap();
    assert!(table.lines().nth(1).unwrap().starts_with("full,"));
    assert!(table.lines().nth(2).unwrap().starts_with("camera-only,"));
    let deltas = fs::read_to_string(tmp.path().join("ablation_deltas.csv")).unwrap();
    assert!(deltas.lines().nth(1).unwrap().starts_with("full,0.000000,0.000000,"));
    assert!(tmp.path().join("ablation.json").exists());
}

#[test]
fn empty_sweep_values_exit_2() {
    let tmp = TempDir::new().unwrap();
    let cfg = config(tmp.path(), &format!("{SMALL}[sweep]\ntoken_ratios = []\n"));
    let o = run(bin().args(["sweep", "--config", &cfg, "--axis", "ratio", "--out"]).arg(tmp.path()));
    assert_eq!(o.status.code(), Some(2));
}
