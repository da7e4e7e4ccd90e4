use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const BIN: &str = env!("CARGO_BIN_EXE_graphprompt");

fn config(dir: &Path, feature_dim: usize) -> PathBuf {
    let text = format!(
        r#"seed = 3
out_dir = "{out}"

[dataset]
name = "tiny"
synthetic_seed = 1

[dataset.synthetic]
num_graphs = 12
nodes_per_graph = 16
edge_prob = 0.2
feature_dim = {feature_dim}
node_class_count = 2
graph_class_count = 2

[encoder]
hidden_dim = 8

[pretrain]
triplets_per_graph = 10
max_epochs = 3
patience = 3

[tune]
max_epochs = 10

[protocol]
level = "graph"
k = 2
num_tasks = 3
"#,
        out = dir.join("out").display()
    );
    let path = dir.join(format!("run_{feature_dim}.toml"));
    fs::write(&path, text).unwrap();
    path
}

fn run(args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn pretrain(dir: &Path, cfg: &Path, name: &str) -> PathBuf {
    let ckpt = dir.join(name);
    let out = run(&["pretrain", "--config", s(cfg), "--out", s(&ckpt)]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    ckpt
}

#[test]
fn pretrain_writes_checkpoint_with_config_snapshot() {
    let tmp = TempDir::new().unwrap();
    let cfg = config(tmp.path(), 4);
    let ckpt = pretrain(tmp.path(), &cfg, "a.json");
    let doc: serde_json::Value = serde_json::from_str(&fs::read_to_string(&ckpt).unwrap()).unwrap();
    assert_eq!(doc["format_version"], 1);
    assert_eq!(doc["config"]["seed"], 3);
    assert_eq!(doc["config"]["encoder"]["hidden_dim"], 8);
}

#[test]
fn same_seed_gives_byte_identical_checkpoints() {
    let tmp = TempDir::new().unwrap();
    let cfg = config(tmp.path(), 4);
    let a = pretrain(tmp.path(), &cfg, "a.json");
    let b = pretrain(tmp.path(), &cfg, "b.json");
    assert_eq!(fs::read(a).unwrap(), fs::read(b).unwrap());
    let c = tmp.path().join("c.json");
    let out = run(&["pretrain", "--config", s(&cfg), "--seed", "4", "--out", s(&c), "--jobs", "1"]);
    assert_eq!(out.status.code(), Some(0));
    assert_ne!(fs::read(tmp.path().join("a.json")).unwrap(), fs::read(c).unwrap());
}

#[test]
fn missing_dataset_path_is_a_config_error() {
    let tmp = TempDir::new().unwrap();
    let cfg = tmp.path().join("bad.toml");
    fs::write(&cfg, "seed = 1\n[dataset]\nname = \"X\"\n").unwrap();
    let out = run(&["pretrain", "--config", s(&cfg)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("dataset.path"));
}

#[test]
fn missing_dataset_files_are_a_data_error() {
    let tmp = TempDir::new().unwrap();
    let cfg = tmp.path().join("gone.toml");
    let dir = tmp.path().join("nowhere");
    fs::write(&cfg, format!("[dataset]\nname = \"X\"\npath = \"{}\"\n", dir.display())).unwrap();
    let out = run(&["inspect", "--config", s(&cfg)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("X_A.txt"));
}

#[test]
fn eval_writes_reports_and_rejects_mismatched_features() {
    let tmp = TempDir::new().unwrap();
    let cfg = config(tmp.path(), 4);
    let ckpt = pretrain(tmp.path(), &cfg, "a.json");
    let reports = tmp.path().join("eval");
    let out = run(&["eval", "--config", s(&cfg), "--ckpt", s(&ckpt), "--out", s(&reports)]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("tiny"), "{stdout}");
    for f in ["report.txt", "report.csv", "report.json"] {
        assert!(reports.join(f).exists(), "{f}");
    }
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(reports.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["tasks"].as_array().unwrap().len(), 3);
    assert_eq!(report["config"]["protocol"]["k"], 2);

    let wide = config(tmp.path(), 5);
    let out = run(&["eval", "--config", s(&wide), "--ckpt", s(&ckpt), "--out", s(&reports)]);
    assert_eq!(out.status.code(), Some(4));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains('5') && err.contains('4'), "{err}");
}

#[test]
fn ablate_and_tune_write_per_variant_artifacts() {
    let tmp = TempDir::new().unwrap();
    let cfg = config(tmp.path(), 4);
    let ckpt = pretrain(tmp.path(), &cfg, "a.json");
    let dir = tmp.path().join("ablate");
    let out = run(&["ablate", "--config", s(&cfg), "--ckpt", s(&ckpt), "--out", s(&dir), "--tasks", "2"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    for v in ["prompt", "linear_prompt", "no_prompt"] {
        assert!(dir.join(v).join("report.json").exists(), "{v}");
    }
    let head = tmp.path().join("head.json");
    let out = run(&[
        "tune", "--config", s(&cfg), "--ckpt", s(&ckpt), "--variant", "linear_prompt", "--task", "1", "--out", s(&head),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let doc: serde_json::Value = serde_json::from_str(&fs::read_to_string(&head).unwrap()).unwrap();
    assert_eq!(doc["task_id"], 1);
    assert_eq!(doc["head"]["params"]["variant"], "linear_prompt");
}

#[test]
fn sweep_writes_one_directory_per_value() {
    let tmp = TempDir::new().unwrap();
    let cfg = config(tmp.path(), 4);
    let dir = tmp.path().join("sweep");
    let out = run(&["sweep", "--config", s(&cfg), "--axis", "delta", "--values", "1,2,3", "--out", s(&dir)]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    for v in 1..=3 {
        let report: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(dir.join(format!("delta_{v}/report.json"))).unwrap()).unwrap();
        assert_eq!(report["config"]["tune"]["delta"], v);
    }
    assert!(dir.join("summary.txt").exists());
}

#[test]
fn gradcheck_passes_and_flags_injected_fault() {
    let out = run(&["gradcheck", "--fixtures", "5"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let table = String::from_utf8_lossy(&out.stdout);
    for suite in ["pretrain", "prompt", "classifier"] {
        assert!(table.contains(suite), "{table}");
    }

    let out = run(&["gradcheck", "--fixtures", "5", "--inject-fault"]);
    assert_eq!(out.status.code(), Some(5));
    assert!(String::from_utf8_lossy(&out.stdout).contains("FAIL"));
}

#[test]
fn gradcheck_module_selects_one_suite() {
    let out = run(&["gradcheck", "--module", "prompt", "--fixtures", "3"]);
    assert_eq!(out.status.code(), Some(0));
    let table = String::from_utf8_lossy(&out.stdout);
    assert_eq!(table.lines().count(), 2, "{table}");
    assert!(table.lines().nth(1).unwrap().starts_with("prompt"));
}

#[test]
fn scalability_skips_empty_buckets() {
    let tmp = TempDir::new().unwrap();
    let cfg = config(tmp.path(), 4);
    let ckpt = pretrain(tmp.path(), &cfg, "a.json");
    let dir = tmp.path().join("scale");
    let out = run(&["scalability", "--config", s(&cfg), "--ckpt", s(&ckpt), "--buckets", "16,90", "--out", s(&dir)]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let doc: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.join("scalability.json")).unwrap()).unwrap();
    assert_eq!(doc["report"]["points"].as_array().unwrap().len(), 1);
    assert_eq!(doc["report"]["skipped"][0], 90);
    assert!(dir.join("scalability.csv").exists());
}

#[test]
fn synth_then_inspect_round_trip() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    let out = run(&["synth", "--out", s(&data), "--name", "S", "--graphs", "6", "--nodes", "10"]);
    assert_eq!(out.status.code(), Some(0));
    let cfg = tmp.path().join("s.toml");
    fs::write(&cfg, format!("[dataset]\nname = \"S\"\npath = \"{}\"\n", data.display())).unwrap();
    let out = run(&["inspect", "--config", s(&cfg)]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    let row = stdout.lines().nth(1).unwrap();
    let cols: Vec<&str> = row.split_whitespace().collect();
    assert_eq!(cols[0], "S");
    assert_eq!(cols[1], "6");
    assert_eq!(cols[2], "10.00");
}

#[test]
fn help_lists_commands_and_flags() {
    let out = run(&["--help"]);
    let text = String::from_utf8_lossy(&out.stdout);
    for cmd in ["pretrain", "tune", "eval", "ablate", "sweep", "scalability", "gradcheck", "inspect"] {
        assert!(text.contains(cmd), "{cmd}");
    }
    let out = run(&["eval", "--help"]);
    let text = String::from_utf8_lossy(&out.stdout);
    for flag in ["--config", "--ckpt", "--level", "--k", "--tasks", "--variant", "--seed", "--jobs", "--out"] {
        assert!(text.contains(flag), "{flag}");
    }
}
