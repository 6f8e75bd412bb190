use std::collections::HashMap;
use std::ffi::OsStr;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const MODEL: &str = r#"{"lookback": 24, "horizon": 6,
 "patch": {"window": 8, "stride": 4, "embed_dim": 6, "kernel": 3, "channels": 4},
 "slots_per_day": 24, "top_k": 2, "clusters": 2, "epochs": 2, "batch_size": 32,
 "learning_rate": 0.005, "baseline_hidden": 8}"#;

fn hierflow<S: AsRef<OsStr>>(args: &[S]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hierflow"))
        .args(args)
        .env_remove("HIERFLOW_SEED")
        .output()
        .expect("binary runs")
}

fn ok<S: AsRef<OsStr> + std::fmt::Debug>(args: &[S]) -> String {
    let out = hierflow(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code<S: AsRef<OsStr>>(args: &[S]) -> i32 {
    hierflow(args).status.code().expect("exit code")
}

fn strings(v: &[&str]) -> Vec<String> {
    v.iter().map(|s| s.to_string()).collect()
}

struct Workspace {
    dir: TempDir,
}

impl Workspace {
    /// Synthetic data for `nodes` series over ten hourly days plus a small
    /// model config.
    fn new(nodes: usize) -> Self {
        let w = Workspace {
            dir: TempDir::new().unwrap(),
        };
        fs::write(w.path("model.json"), MODEL).unwrap();
        ok(&w.gen_args(nodes, "data.csv", "truth.json"));
        w
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn s(&self, name: &str) -> String {
        self.path(name).to_str().unwrap().to_string()
    }

    fn gen_args(&self, nodes: usize, csv: &str, truth: &str) -> Vec<String> {
        let mut v = strings(&[
            "gen-synthetic",
            "--nodes",
            &nodes.to_string(),
            "--days",
            "10",
            "--seed",
            "3",
        ]);
        v.extend(["--out".into(), self.s(csv), "--assignment-out".into(), self.s(truth)]);
        v
    }

    /// `command` plus the data flags, the model config and `rest`.
    fn args(&self, command: &str, rest: &[String]) -> Vec<String> {
        let mut v = vec![command.to_string(), "--data".into(), self.s("data.csv")];
        v.extend(strings(&["--granularity", "60", "--config"]));
        v.push(self.s("model.json"));
        v.extend_from_slice(rest);
        v
    }

    fn hierarchy_args(&self, layer: &str, extra: &[&str]) -> Vec<String> {
        let mut rest = strings(&["--prediction-layer", layer, "--out"]);
        rest.push(self.s("hierarchy.json"));
        rest.extend(strings(extra));
        self.args("build-hierarchy", &rest)
    }

    fn hierarchy(&self, layer: &str) {
        ok(&self.hierarchy_args(layer, &[]));
    }

    fn train_args(&self, mode: &str, out: &str, extra: &[&str]) -> Vec<String> {
        let mut rest = vec!["--hierarchy".into(), self.s("hierarchy.json")];
        rest.extend(strings(&["--mode", mode, "--out"]));
        rest.push(self.s(out));
        rest.extend(strings(extra));
        self.args("train", &rest)
    }

    fn train(&self, mode: &str, out: &str, extra: &[&str]) -> String {
        ok(&self.train_args(mode, out, extra))
    }

    fn data_args(&self, command: &str, rest: &[String]) -> Vec<String> {
        let mut v = vec![command.to_string(), "--data".into(), self.s("data.csv")];
        v.extend(strings(&["--granularity", "60"]));
        v.extend_from_slice(rest);
        v
    }

    fn predict_args(&self, ckpt: &str, t_origin: &str, out: &str) -> Vec<String> {
        let rest = vec![
            "--checkpoint".into(),
            self.s(ckpt),
            "--t-origin".into(),
            t_origin.into(),
            "--out".into(),
            self.s(out),
        ];
        self.data_args("predict", &rest)
    }

    fn evaluate_args(&self, ckpt: &str, baselines: &str, out: &str) -> Vec<String> {
        let rest = vec![
            "--checkpoint".into(),
            self.s(ckpt),
            "--baselines".into(),
            baselines.into(),
            "--out".into(),
            self.s(out),
        ];
        self.data_args("evaluate", &rest)
    }
}

fn read_csv(path: &Path) -> Vec<HashMap<String, String>> {
    let mut r = csv::Reader::from_path(path).unwrap();
    let header: Vec<String> = r.headers().unwrap().iter().map(String::from).collect();
    r.records()
        .map(|rec| {
            header
                .iter()
                .cloned()
                .zip(rec.unwrap().iter().map(String::from))
                .collect()
        })
        .collect()
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn gen_synthetic_repeats_bytes_and_rejects_negative_noise() {
    let w = Workspace::new(6);
    ok(&w.gen_args(6, "again.csv", "again.json"));
    assert_eq!(
        fs::read(w.path("data.csv")).unwrap(),
        fs::read(w.path("again.csv")).unwrap()
    );
    assert_eq!(
        fs::read(w.path("truth.json")).unwrap(),
        fs::read(w.path("again.json")).unwrap()
    );
    let mut args = w.gen_args(6, "x.csv", "x.json");
    args.extend(strings(&["--noise", "-0.1"]));
    let bad = hierflow(&args);
    assert_eq!(bad.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("noise"));
}

#[test]
fn build_hierarchy_reports_layers_and_rejects_large_top_k() {
    let w = Workspace::new(4);
    let mut args = w.hierarchy_args("all", &["--matrix-out"]);
    args.push(w.s("hr.csv"));
    let stdout = ok(&args);
    assert!(stdout.contains("bottom=4 middle=2 top=1"), "{stdout}");
    let h = json(&w.path("hierarchy.json"));
    let layers: Vec<usize> = h["layers"]
        .as_array()
        .unwrap()
        .iter()
        .map(|l| l.as_array().unwrap().len())
        .collect();
    assert_eq!(layers, [4, 2, 1]);
    // each bottom column has a one in its own row, its cluster's and the total's
    let rows = read_csv(&w.path("hr.csv"));
    assert_eq!(rows.len(), 7);
    for n in 0..4 {
        let total: f64 = rows
            .iter()
            .map(|r| r[&format!("n{n:02}")].parse::<f64>().unwrap())
            .sum();
        assert_eq!(total, 3.0);
    }
    let bad = w.hierarchy_args("all", &["--top-k", "4"]);
    assert_eq!(code(&bad), 2);
}

#[test]
fn train_writes_logs_per_epoch_and_phase() {
    let w = Workspace::new(6);
    w.hierarchy("all");
    w.train("tp", "tp", &[]);
    assert_eq!(read_csv(&w.path("tp/train_log.csv")).len(), 2);
    let m = json(&w.path("tp/manifest.json"));
    assert!(m["phase2"].is_null());
    assert_eq!(m["mode"], "tp");

    w.train("hp", "hp", &["--coordination-epochs", "3"]);
    let log = read_csv(&w.path("hp/train_log.csv"));
    assert_eq!(log.iter().filter(|r| r["phase"] == "1").count(), 2);
    assert_eq!(log.iter().filter(|r| r["phase"] == "2").count(), 3);
    assert!(!json(&w.path("hp/manifest.json"))["phase2"].is_null());
}

#[test]
fn resume_refuses_a_different_config_and_keeps_a_finished_run() {
    let w = Workspace::new(6);
    w.hierarchy("bottom");
    w.train("tp", "ckpt", &["--epochs", "3"]);
    let before = fs::read(w.path("ckpt/checkpoint.json")).unwrap();
    w.train("tp", "ckpt", &["--epochs", "3", "--resume"]);
    assert_eq!(fs::read(w.path("ckpt/checkpoint.json")).unwrap(), before);
    assert_eq!(read_csv(&w.path("ckpt/train_log.csv")).len(), 3);

    let args = w.train_args("tp", "ckpt", &["--epochs", "5", "--resume"]);
    assert_eq!(code(&args), 2);
}

#[test]
fn untrained_checkpoint_predicts_and_rejects_early_origins() {
    let w = Workspace::new(6);
    w.hierarchy("all");
    w.train("tp", "ckpt", &["--epochs", "0"]);
    ok(&w.predict_args("ckpt", "24", "pred.csv"));
    let rows = read_csv(&w.path("pred.csv"));
    let h = json(&w.path("hierarchy.json"));
    let nodes: usize = h["layers"]
        .as_array()
        .unwrap()
        .iter()
        .map(|l| l.as_array().unwrap().len())
        .sum();
    assert_eq!(rows.len(), nodes * 6);
    assert!(!rows[0].contains_key("coordinated"));
    assert_eq!(code(&w.predict_args("ckpt", "23", "bad.csv")), 2);
}

#[test]
fn coordinated_predictions_add_up() {
    let w = Workspace::new(6);
    w.hierarchy("all");
    w.train("hp", "ckpt", &["--coordination-epochs", "2"]);
    ok(&w.predict_args("ckpt", "200", "pred.csv"));
    let rows = read_csv(&w.path("pred.csv"));
    let h = json(&w.path("hierarchy.json"));
    let layers: Vec<Vec<String>> = serde_json::from_value(h["layers"].clone()).unwrap();
    let parents: HashMap<String, String> = serde_json::from_value(h["parents"].clone()).unwrap();
    let value = |id: &str, step: usize| -> f64 {
        rows.iter()
            .find(|r| r["node_id"] == id && r["step"] == step.to_string())
            .unwrap()["coordinated"]
            .parse()
            .unwrap()
    };
    for step in 1..=6 {
        let mut middle_sum = 0.0;
        for cluster in &layers[1] {
            let kids: f64 = layers[0]
                .iter()
                .filter(|b| &parents[*b] == cluster)
                .map(|b| value(b, step))
                .sum();
            let parent = value(cluster, step);
            assert!(
                (kids - parent).abs() <= 1e-9 * parent.abs().max(1.0),
                "{cluster} step {step}"
            );
            middle_sum += parent;
        }
        let total = value(&layers[2][0], step);
        assert!((middle_sum - total).abs() <= 1e-9 * total.abs().max(1.0));
    }
}

#[test]
fn evaluate_scores_every_baseline_and_the_oracle() {
    let w = Workspace::new(6);
    w.hierarchy("all");
    w.train("hp", "ckpt", &["--coordination-epochs", "1"]);
    for b in ["ha", "gru", "bu", "mo", "td"] {
        let out = format!("eval_{b}");
        ok(&w.evaluate_args("ckpt", b, &out));
        let reports = json(&w.path(&out).join("metrics.json"));
        let modes: Vec<&str> = reports
            .as_array()
            .unwrap()
            .iter()
            .map(|r| r["mode"].as_str().unwrap())
            .collect();
        assert_eq!(modes, ["tp", "hp", b]);
        assert!(w.path(&out).join("per_node.csv").exists());
        assert!(w.path(&out).join("hierarchical_error.csv").exists());
    }
    let mut args = w.evaluate_args("ckpt", "", "eval_oracle");
    args.push("--debug-oracle".into());
    ok(&args);
    let reports = json(&w.path("eval_oracle/metrics.json"));
    let oracle = reports
        .as_array()
        .unwrap()
        .iter()
        .find(|r| r["mode"] == "oracle")
        .unwrap();
    assert_eq!(oracle["aggregate"]["mae"].as_f64(), Some(0.0));
    assert_eq!(code(&w.evaluate_args("ckpt", "ha,arima", "eval_bad")), 2);
}
