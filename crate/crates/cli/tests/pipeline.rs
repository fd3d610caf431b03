use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use serde_json::Value;
use tempfile::TempDir;

const WINDOW: &str = "32";

fn bolaco(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bolaco")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = bolaco(args);
    assert!(
        out.status.success(),
        "bolaco {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    bolaco(args).status.code().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A synthetic model, its corpora and pooled statistics, shared by all
/// tests and never modified by them.
struct Fixture {
    _dir: TempDir,
    root: PathBuf,
    paths: [String; 4],
}

impl Fixture {
    fn model(&self) -> &str {
        &self.paths[0]
    }
    fn corpus(&self) -> &str {
        &self.paths[1]
    }
    fn heldout(&self) -> &str {
        &self.paths[2]
    }
    fn stats(&self) -> &str {
        &self.paths[3]
    }
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = TempDir::new().unwrap();
        let root = dir.path().to_path_buf();
        ok(&["synth", "--output-dir", s(&root), "--window", WINDOW, "--corpus-sequences", "32"]);
        let paths = ["model.btns", "corpus.txt", "heldout.txt", "stats"].map(|n| s(&root.join(n)).to_owned());
        let f = Fixture { _dir: dir, root, paths };
        ok(&[
            "calibrate", "--model", f.model(), "--data", f.corpus(), "--output-dir", s(&f.root), "--window",
            WINDOW, "--groups", "8",
        ]);
        f
    })
}

/// Runs `search` into `out` with a short budget plus `extra` flags.
fn search(out: &Path, extra: &[&str]) -> String {
    let f = fixture();
    let mut args = vec![
        "search", "--model", f.model(), "--data", f.corpus(), "--stats-dir", f.stats(), "--output-dir",
        s(out), "--window", WINDOW, "--n-probe", "4", "--top-k", "6", "--candidates-per-step", "128",
    ];
    args.extend_from_slice(extra);
    ok(&args)
}

fn records(path: &Path) -> Vec<Value> {
    fs::read_to_string(path).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect()
}

fn without_timestamps(mut rows: Vec<Value>) -> Vec<Value> {
    for r in &mut rows {
        r.as_object_mut().unwrap().remove("timestamp");
    }
    rows
}

#[test]
fn calibrate_writes_one_cov_per_layer_and_a_manifest() {
    let f = fixture();
    let covs = fs::read_dir(f.stats()).unwrap().filter(|e| e.as_ref().unwrap().path().extension().unwrap() == "cov");
    assert_eq!(covs.count(), 28);
    let manifest: Value = serde_json::from_str(&fs::read_to_string(Path::new(f.stats()).join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["estimator"], "pcm");
    assert_eq!(manifest["groups"], 8);
    assert_eq!(manifest["layers"].as_array().unwrap().len(), 28);
}

#[test]
fn calibrate_single_group_is_scm_and_reruns_are_identical() {
    let f = fixture();
    let dir = TempDir::new().unwrap();
    let run = |name: &str| {
        let stats = dir.path().join(name);
        ok(&[
            "calibrate", "--model", f.model(), "--data", f.corpus(), "--stats-dir", s(&stats), "--window",
            WINDOW, "--groups", "1",
        ]);
        stats
    };
    let (a, b) = (run("a"), run("b"));
    let manifest: Value = serde_json::from_str(&fs::read_to_string(a.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["estimator"], "scm");
    for entry in fs::read_dir(&a).unwrap() {
        let name = entry.unwrap().file_name();
        assert_eq!(fs::read(a.join(&name)).unwrap(), fs::read(b.join(&name)).unwrap(), "{name:?} differs");
    }
}

#[test]
fn calibrate_reports_bad_inputs_with_exit_codes() {
    let f = fixture();
    let dir = TempDir::new().unwrap();
    let absent = dir.path().join("absent.btns");
    let base = ["calibrate", "--output-dir", s(dir.path()), "--window", WINDOW];
    let run = |extra: &[&str]| -> i32 { code(&[&base[..], extra].concat()) };
    // 32 sequences do not split into 5 groups
    assert_eq!(run(&["--model", f.model(), "--data", f.corpus(), "--groups", "5"]), 3);
    assert_eq!(run(&["--model", s(&absent), "--data", f.corpus()]), 2);
    assert_eq!(run(&["--model", f.model(), "--data", f.corpus(), "--groups", "0"]), 3);
    assert_eq!(code(&["calibrate", "--no-such-flag"]), 3);
}

#[test]
fn search_writes_allocation_log_and_summary() {
    let dir = TempDir::new().unwrap();
    let line = search(dir.path(), &["--scheme", "5x1", "--rho", "0.2", "--epochs", "6", "--init-points", "3"]);
    let line = line.trim();
    assert!(line.starts_with("best H=") && line.contains(" ppl=") && line.contains(" rkl=") && line.contains(" at epoch "), "{line}");

    let alloc: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("allocation.json")).unwrap()).unwrap();
    assert_eq!(alloc["scheme"], "5x1");
    assert_eq!(alloc["rho"], 0.2);
    assert_eq!(alloc["lambdas"].as_array().unwrap().len(), 5);
    let ranks = alloc["ranks"].as_object().unwrap();
    assert_eq!(ranks.len(), 28);
    assert!(ranks.values().all(|r| r.is_null() || r.as_u64().unwrap() % 8 == 0));
    for l in 0..4 {
        assert_eq!(ranks[&format!("layers.{l}.attn_q")], ranks[&format!("layers.{l}.attn_k")]);
        assert!(ranks[&format!("layers.{l}.attn_v")].is_null());
    }

    let log = records(&dir.path().join("observations.jsonl"));
    assert_eq!(log.len(), 6);
    for (i, r) in log.iter().enumerate() {
        assert_eq!(r["epoch"], i + 1);
        for key in ["lambdas", "H", "ppl", "rkl", "beta_rkl", "timestamp"] {
            assert!(r.get(key).is_some(), "record lacks {key}");
        }
    }
    let best = log.iter().map(|r| r["H"].as_f64().unwrap()).fold(f64::INFINITY, f64::min);
    assert!(line.starts_with(&format!("best H={best} ")));
}

#[test]
fn search_is_reproducible_and_ablation_is_recorded() {
    let dir = TempDir::new().unwrap();
    let flags = ["--epochs", "4", "--init-points", "2", "--seed", "7"];
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let c = dir.path().join("c");
    search(&a, &flags);
    search(&b, &flags);
    search(&c, &[&flags[..], &["--beta-rkl", "0"]].concat());

    assert_eq!(fs::read(a.join("allocation.json")).unwrap(), fs::read(b.join("allocation.json")).unwrap());
    assert_eq!(fs::read(a.join("validation.json")).unwrap(), fs::read(b.join("validation.json")).unwrap());
    let (log_a, log_c) = (records(&a.join("observations.jsonl")), records(&c.join("observations.jsonl")));
    assert_eq!(without_timestamps(log_a.clone()), without_timestamps(records(&b.join("observations.jsonl"))));
    assert!(log_a.iter().all(|r| r["beta_rkl"] == 1.0));
    assert!(log_c.iter().all(|r| r["beta_rkl"] == 0.0));
    for r in &log_c {
        let h = r["H"].as_f64().unwrap();
        assert!((h - r["ppl"].as_f64().unwrap().ln()).abs() < 1e-12);
    }
}

#[test]
fn warm_start_evaluates_the_prior_first() {
    let dir = TempDir::new().unwrap();
    let first = dir.path().join("first");
    search(&first, &["--epochs", "3", "--init-points", "2"]);
    let prior_path = first.join("allocation.json");
    let prior: Value = serde_json::from_str(&fs::read_to_string(&prior_path).unwrap()).unwrap();

    let second = dir.path().join("second");
    search(&second, &["--warm-start", s(&prior_path), "--epochs", "3"]);
    let log = records(&second.join("observations.jsonl"));
    assert_eq!(log.len(), 3);
    assert_eq!(log[0]["lambdas"], prior["lambdas"]);

    let missing = dir.path().join("nope.json");
    let f = fixture();
    let out = bolaco(&[
        "search", "--model", f.model(), "--data", f.corpus(), "--stats-dir", f.stats(), "--output-dir",
        s(dir.path()), "--window", WINDOW, "--warm-start", s(&missing),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn search_rejects_bad_configuration() {
    let f = fixture();
    let dir = TempDir::new().unwrap();
    let no_stats = dir.path().join("empty");
    fs::create_dir_all(&no_stats).unwrap();
    let common = ["search", "--model", f.model(), "--data", f.corpus(), "--output-dir", s(dir.path()), "--window", WINDOW];
    let base = [&common[..], &["--stats-dir", f.stats()]].concat();
    assert_eq!(code(&[&base[..], &["--rho", "1.5"]].concat()), 3);
    assert_eq!(code(&[&base[..], &["--scheme", "7x7"]].concat()), 3);
    // more validation sequences than the pool holds
    assert_eq!(code(&[&base[..], &["--top-k", "1000"]].concat()), 3);
    assert_eq!(code(&[&common[..], &["--stats-dir", s(&no_stats)]].concat()), 2);
}

#[test]
fn config_file_is_overridden_by_flags() {
    let f = fixture();
    let dir = TempDir::new().unwrap();
    let config = dir.path().join("pipeline.json");
    let body = serde_json::json!({
        "model_path": f.model(),
        "data_path": f.corpus(),
        "stats_dir": f.stats(),
        "output_dir": dir.path(),
        "window": 32,
        "epochs": 3,
        "init_points": 2,
        "n_probe": 4,
        "top_k": 6,
        "candidates_per_step": 64,
        "beta_rkl": 0.5,
    });
    fs::write(&config, body.to_string()).unwrap();
    ok(&["search", "--config", s(&config), "--beta-rkl", "0"]);
    let log = records(&dir.path().join("observations.jsonl"));
    assert_eq!(log.len(), 3);
    assert!(log.iter().all(|r| r["beta_rkl"] == 0.0));

    fs::write(&config, r#"{"rho": 0.2, "bogus": 1}"#).unwrap();
    assert_eq!(code(&["search", "--config", s(&config)]), 3);
    assert_eq!(code(&["search", "--config", s(&dir.path().join("none.json"))]), 2);
}

fn compress_with(dir: &Path, lambdas: Value) {
    let f = fixture();
    let alloc = serde_json::json!({ "scheme": "5x1", "rho": 0.2, "lambdas": lambdas });
    let path = dir.join("allocation.json");
    fs::write(&path, alloc.to_string()).unwrap();
    ok(&["compress", "--model", f.model(), "--stats-dir", f.stats(), "--output-dir", s(dir)]);
}

fn report_rows(dir: &Path) -> Vec<Vec<String>> {
    let text = fs::read_to_string(dir.join("report.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("section,item,ratio,value"));
    lines.map(|l| l.split(',').map(String::from).collect()).collect()
}

fn summary(rows: &[Vec<String>], key: &str) -> f64 {
    rows.iter().find(|r| r[0] == "summary" && r[1] == key).unwrap_or_else(|| panic!("no {key}"))[3].parse().unwrap()
}

#[test]
fn report_of_an_uncompressed_allocation() {
    let f = fixture();
    let dir = TempDir::new().unwrap();
    compress_with(dir.path(), serde_json::json!([null, null, null, null, null]));
    ok(&[
        "sweep", "--model", f.model(), "--data", f.heldout(), "--stats-dir", f.stats(), "--output-dir",
        s(dir.path()), "--window", WINDOW, "--sweep-ratios", "0,0.5",
    ]);
    ok(&["report", "--model", f.model(), "--data", f.heldout(), "--output-dir", s(dir.path()), "--window", WINDOW]);
    let rows = report_rows(dir.path());
    assert_eq!(summary(&rows, "param_ratio"), 0.0);
    assert_eq!(summary(&rows, "ppl_base"), summary(&rows, "ppl_compressed"));
    assert_eq!(summary(&rows, "rkl_compressed"), 0.0);
    assert_eq!(rows.iter().filter(|r| r[0] == "rank").count(), 28);
    assert!(rows.iter().filter(|r| r[0] == "rank").all(|r| r[3] == "dense"));
    let sweep: Vec<_> = rows.iter().filter(|r| r[0] == "sweep").collect();
    assert_eq!(sweep.len(), 7 * 2);
    // ratio 0 leaves the model dense
    for r in sweep.iter().filter(|r| r[2] == "0") {
        assert_eq!(r[3].parse::<f64>().unwrap(), summary(&rows, "ppl_base"));
    }
}

#[test]
fn report_param_ratio_matches_hand_arithmetic() {
    let f = fixture();
    let dir = TempDir::new().unwrap();
    // q and k at ratio 0.5: rank 16 in each 64x64 layer, 16*128 + 64 = 2112 params
    compress_with(dir.path(), serde_json::json!([0.5, null, null, null, null]));
    ok(&["report", "--model", f.model(), "--data", f.heldout(), "--output-dir", s(dir.path()), "--window", WINDOW]);
    let rows = report_rows(dir.path());
    let before = 4.0 * (16384.0 + 22528.0 + 11264.0);
    let after = before - 8.0 * (4096.0 - 2112.0);
    assert_eq!(summary(&rows, "params_before"), before);
    assert_eq!(summary(&rows, "params_after"), after);
    assert!((summary(&rows, "param_ratio") - (1.0 - after / before)).abs() < 1e-15);
    let ranks: Vec<_> = rows.iter().filter(|r| r[0] == "rank" && r[3] != "dense").collect();
    assert_eq!(ranks.len(), 8);
    assert!(ranks.iter().all(|r| r[3] == "16" && (r[1].ends_with("attn_q") || r[1].ends_with("attn_k"))));
}

#[test]
fn report_lists_missing_artifacts() {
    let f = fixture();
    let dir = TempDir::new().unwrap();
    let out = bolaco(&["report", "--model", f.model(), "--data", f.heldout(), "--output-dir", s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("compressed.btns"), "{err}");
}

#[test]
fn posttrain_and_eval_round_trip() {
    let f = fixture();
    let dir = TempDir::new().unwrap();
    compress_with(dir.path(), serde_json::json!([null, 0.5, null, 0.4, 0.3]));
    let common = ["--model", f.model(), "--output-dir", s(dir.path()), "--window", WINDOW];
    let line = ok(&[&["posttrain", "--data", f.corpus(), "--steps", "20", "--max-tokens", "512"][..], &common[..]].concat());
    let (before, after) = line
        .split("loss ")
        .nth(1)
        .and_then(|rest| rest.split(',').next())
        .and_then(|pair| pair.split_once(" -> "))
        .map(|(a, b)| (a.parse::<f64>().unwrap(), b.parse::<f64>().unwrap()))
        .unwrap();
    assert!(after <= before, "{line}");

    let posttrained = dir.path().join("posttrained.btns");
    let eval = ok(&[&["eval", "--data", f.heldout(), "--checkpoint", s(&posttrained)][..], &common[..]].concat());
    assert!(eval.starts_with("ppl=") && eval.contains("rkl="), "{eval}");
    let base = ok(&[&["eval", "--data", f.heldout()][..], &common[..]].concat());
    assert!(base.starts_with("ppl=") && !base.contains("rkl="), "{base}");

    ok(&[&["report", "--data", f.heldout()][..], &common[..]].concat());
    let rows = report_rows(dir.path());
    assert!(summary(&rows, "ppl_posttrained") > 0.0);
    assert!(summary(&rows, "params_after") < 200704.0);
}
