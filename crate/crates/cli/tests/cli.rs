use std::fs;
use std::path::Path;
use std::process::{Command, Output};
use std::time::{Duration, Instant};

const STAGES: [&str; 6] = ["gen-data", "annotate", "train-reward", "relabel", "train-policy", "eval"];

fn dtr(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dtr"))
        .arg("--out")
        .arg(out)
        .args(args)
        .output()
        .expect("spawn dtr")
}

fn ok(out: &Path, args: &[&str]) -> String {
    let o = dtr(out, args);
    assert!(o.status.success(), "dtr {args:?} failed: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn pipeline(out: &Path, extra: &[&str]) {
    for st in STAGES {
        let mut args = extra.to_vec();
        args.push(st);
        ok(out, &args);
    }
}

fn data_lines(path: &Path) -> usize {
    fs::read_to_string(path).unwrap().lines().filter(|l| !l.trim().is_empty()).count() - 1
}

#[test]
fn figure1_pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let t0 = Instant::now();
    pipeline(dir.path(), &["--preset", "figure1"]);
    assert!(t0.elapsed() < Duration::from_secs(300));
    assert_eq!(data_lines(&dir.path().join("dataset.jsonl")), 4);
    let eval: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("eval.json")).unwrap()).unwrap();
    assert_eq!(eval["returns"].as_array().unwrap().len(), 1);
    let manifest = fs::read_to_string(dir.path().join("manifest.jsonl")).unwrap();
    let stages: Vec<String> = manifest
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["stage"].as_str().unwrap().to_string())
        .collect();
    assert_eq!(stages, STAGES);
}

#[test]
fn eval_episode_count_only_touches_the_eval_stage() {
    let dir = tempfile::tempdir().unwrap();
    pipeline(dir.path(), &["--preset", "figure1"]);
    ok(dir.path(), &["--preset", "figure1", "--set", "eval.episodes=10", "eval"]);
    let eval: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("eval.json")).unwrap()).unwrap();
    assert_eq!(eval["returns"].as_array().unwrap().len(), 10);
    assert_eq!(eval["episodes"], 10);
}

#[test]
fn reruns_are_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    pipeline(a.path(), &["--preset", "figure1", "--seed", "3"]);
    pipeline(b.path(), &["--preset", "figure1", "--seed", "3"]);
    let mut names: Vec<_> = fs::read_dir(a.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert!(names.len() >= 12);
    for n in names {
        let (x, y) = (fs::read(a.path().join(&n)).unwrap(), fs::read(b.path().join(&n)).unwrap());
        assert!(x == y, "{n:?} differs between identical runs");
    }
}

#[test]
fn gridworld_record_count() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["--preset", "gridworld-medium", "--set", "data.episodes=500", "gen-data"]);
    assert_eq!(data_lines(&dir.path().join("dataset.jsonl")), 500);
}

#[test]
fn annotation_counts_and_empty_request() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["--preset", "gridworld-medium", "gen-data"]);
    ok(dir.path(), &["--preset", "gridworld-medium", "annotate"]);
    assert_eq!(data_lines(&dir.path().join("prefs.jsonl")), 2000);
    let o = dtr(dir.path(), &["--preset", "gridworld-medium", "--set", "annotate.queries=0", "annotate"]);
    assert_eq!(code(&o), 0);
    assert!(String::from_utf8_lossy(&o.stderr).contains("warning"));
    assert_eq!(data_lines(&dir.path().join("prefs.jsonl")), 0);
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&dtr(dir.path(), &["--set", "no.such.key=1", "gen-data"])), 2);
    assert_eq!(code(&dtr(dir.path(), &["--preset", "nope", "gen-data"])), 2);
    assert_eq!(code(&dtr(dir.path(), &["--set", "train.heads=abc", "gen-data"])), 2);
    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "include figure1\nseed = 1\nreward.hidden = 8\nfrobnicate = 2\n").unwrap();
    assert_eq!(code(&dtr(dir.path(), &["--config", cfg.to_str().unwrap(), "gen-data"])), 2);
}

#[test]
fn config_file_with_include() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("exp.cfg");
    fs::write(&cfg, "# tiny run\ninclude figure1\ndata.episodes = 8\n").unwrap();
    ok(dir.path(), &["--config", cfg.to_str().unwrap(), "gen-data"]);
    assert_eq!(data_lines(&dir.path().join("dataset.jsonl")), 8);
}

#[test]
fn upstream_problems_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&dtr(dir.path(), &["--preset", "figure1", "annotate"])), 3);
    ok(dir.path(), &["--preset", "figure1", "--seed", "1", "gen-data"]);
    assert_eq!(code(&dtr(dir.path(), &["--preset", "figure1", "--seed", "2", "annotate"])), 3);
    ok(dir.path(), &["--preset", "figure1", "--seed", "1", "annotate"]);
    // A reward model trained for other annotations must not be reused.
    ok(dir.path(), &["--preset", "figure1", "--seed", "1", "train-reward"]);
    let o = dtr(dir.path(), &["--preset", "figure1", "--seed", "1", "--set", "annotate.queries=10", "relabel"]);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn numeric_failure_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let args = ["--preset", "figure1", "--set", "reward.lr=1e300"];
    for st in ["gen-data", "annotate"] {
        let mut a = args.to_vec();
        a.push(st);
        ok(dir.path(), &a);
    }
    let mut a = args.to_vec();
    a.push("train-reward");
    assert_eq!(code(&dtr(dir.path(), &a)), 4);
}

#[test]
fn report_aggregates_seeds_and_verifies_manifests() {
    let root = tempfile::tempdir().unwrap();
    let mut runs = Vec::new();
    for s in 0..3 {
        let d = root.path().join(format!("seed{s}"));
        pipeline(&d, &["--preset", "figure1", "--seed", &s.to_string()]);
        runs.push(d.to_str().unwrap().to_string());
    }
    let rep = root.path().join("report");
    let mut args = vec!["report"];
    args.extend(runs.iter().map(String::as_str));
    ok(&rep, &args);
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(rep.join("summary.json")).unwrap()).unwrap();
    let exps = summary["experiments"].as_array().unwrap();
    assert_eq!(exps.len(), 1);
    let e = &exps[0];
    assert_eq!(e["seeds"].as_array().unwrap().len(), 3);
    let rets: Vec<f64> = e["eval_returns"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
    let mean = rets.iter().sum::<f64>() / 3.0;
    assert!((e["eval_mean"].as_f64().unwrap() - mean).abs() < 1e-12);
    assert!(e["eval_std"].as_f64().unwrap() >= 0.0);
    let curve = fs::read_to_string(rep.join("score_vs_iteration.csv")).unwrap();
    assert!(curve.starts_with("experiment,algorithm,queries,iteration,step,mean,std,n\n"));
    assert_eq!(curve.lines().count(), 1 + 6);
    assert!(curve.lines().skip(1).all(|l| l.ends_with(",3")));
    let scaling = fs::read_to_string(rep.join("score_vs_queries.csv")).unwrap();
    assert_eq!(scaling.lines().count(), 2);

    fs::write(Path::new(&runs[1]).join("relabeled.jsonl"), "tampered\n").unwrap();
    assert_eq!(code(&dtr(&rep, &args)), 3);
}

#[test]
fn scaling_curve_groups_by_query_count() {
    let root = tempfile::tempdir().unwrap();
    let mut runs = Vec::new();
    for q in [16, 64] {
        let d = root.path().join(format!("q{q}"));
        pipeline(&d, &["--preset", "figure1", "--set", &format!("annotate.queries={q}")]);
        runs.push(d.to_str().unwrap().to_string());
    }
    let rep = root.path().join("report");
    let mut args = vec!["report"];
    args.extend(runs.iter().map(String::as_str));
    ok(&rep, &args);
    let scaling = fs::read_to_string(rep.join("score_vs_queries.csv")).unwrap();
    let qs: Vec<&str> = scaling.lines().skip(1).map(|l| l.split(',').nth(2).unwrap()).collect();
    assert_eq!(qs, ["16", "64"]);
    let groups: Vec<&str> = scaling.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(groups[0], groups[1]);
}

#[test]
fn pbdt_has_no_critic() {
    let dir = tempfile::tempdir().unwrap();
    pipeline(dir.path(), &["--preset", "figure1", "--set", "train.algorithm=pbdt"]);
    assert!(!dir.path().join("critic.bin").exists());
    let metrics = fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    let eta_col = metrics.lines().next().unwrap().split(',').position(|h| h == "eta").unwrap();
    assert!(metrics.lines().skip(1).all(|l| l.split(',').nth(eta_col).unwrap().parse::<f64>().unwrap() == 0.0));
}
