//! Aggregation over run directories: one summary entry per experiment (runs
//! that differ only in `seed`), plus curves for plotting.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use dtr_core::config::ConfigMap;
use dtr_core::inference::EvalReport;
use dtr_core::stats;
use serde_json::json;

use crate::artifacts::*;
use crate::Global;

pub const SUMMARY: &str = "summary.json";
pub const BY_ITERATION: &str = "score_vs_iteration.csv";
pub const BY_QUERIES: &str = "score_vs_queries.csv";

struct RunData {
    dir: PathBuf,
    seed: u64,
    algorithm: String,
    queries: usize,
    experiment: String,
    scaling_group: String,
    eval: EvalReport,
    /// `(iteration, step, eval mean)` per row of the metrics file.
    curve: Vec<(usize, usize, f64)>,
}

fn hash_without(map: &ConfigMap, keys: &[&str]) -> String {
    let mut m = map.clone();
    for k in keys {
        m.set(k, "0").expect("known key");
    }
    m.hash()
}

fn load_run(dir: &Path) -> CliResult<RunData> {
    verify_manifest(dir)?;
    let cfg_path = dir.join(CONFIG);
    let map = ConfigMap::load(&cfg_path).map_err(|e| Failure::upstream(format!("{}: {e}", cfg_path.display())))?;
    let eval_path = dir.join(EVAL);
    let text = fs::read_to_string(&eval_path).map_err(|e| Failure::upstream(format!("cannot read {}: {e}", eval_path.display())))?;
    let eval: EvalReport = serde_json::from_str(&text).map_err(|e| Failure::upstream(format!("{}: {e}", eval_path.display())))?;
    check_hash(&eval_path, eval.config_hash.as_deref(), &map.hash())?;
    let mut curve = Vec::new();
    let metrics = dir.join(METRICS);
    if metrics.is_file() {
        let mut rdr = csv::Reader::from_path(&metrics).map_err(|e| Failure::upstream(format!("{}: {e}", metrics.display())))?;
        let headers = rdr.headers().map_err(|e| Failure::upstream(e.to_string()))?.clone();
        let col = |name: &str| headers.iter().position(|h| h == name);
        let (ci, cs, cm) = match (col("iteration"), col("step"), col("eval_return_mean")) {
            (Some(a), Some(b), Some(c)) => (a, b, c),
            _ => return Err(Failure::upstream(format!("{} lacks iteration/step/eval_return_mean columns", metrics.display()))),
        };
        for rec in rdr.records() {
            let rec = rec.map_err(|e| Failure::upstream(format!("{}: {e}", metrics.display())))?;
            let num = |i: usize| rec.get(i).unwrap_or("").parse::<f64>().map_err(|_| Failure::upstream(format!("{}: bad number", metrics.display())));
            curve.push((num(ci)? as usize, num(cs)? as usize, num(cm)?));
        }
    }
    Ok(RunData {
        dir: dir.to_path_buf(),
        seed: map.get("seed").parse().unwrap_or(0),
        algorithm: map.get("train.algorithm").to_string(),
        queries: map.get("annotate.queries").parse().unwrap_or(0),
        experiment: hash_without(&map, &["seed"]),
        scaling_group: hash_without(&map, &["seed", "annotate.queries"]),
        eval,
        curve,
    })
}

pub fn report(g: &Global, runs: &[PathBuf]) -> CliResult {
    let dirs: Vec<PathBuf> = if runs.is_empty() { vec![g.out.clone()] } else { runs.to_vec() };
    let data: Vec<RunData> = dirs.iter().map(|d| load_run(d)).collect::<CliResult<_>>()?;
    let mut experiments: BTreeMap<&str, Vec<&RunData>> = BTreeMap::new();
    for r in &data {
        experiments.entry(&r.experiment).or_default().push(r);
    }

    let mut summary = Vec::new();
    let mut by_iter = String::from("experiment,algorithm,queries,iteration,step,mean,std,n\n");
    for (exp, rs) in &experiments {
        let means: Vec<f64> = rs.iter().map(|r| r.eval.mean).collect();
        summary.push(json!({
            "experiment": exp,
            "algorithm": rs[0].algorithm,
            "queries": rs[0].queries,
            "runs": rs.iter().map(|r| r.dir.display().to_string()).collect::<Vec<_>>(),
            "seeds": rs.iter().map(|r| r.seed).collect::<Vec<_>>(),
            "eval_returns": means,
            "eval_mean": stats::mean(&means),
            "eval_std": stats::std_dev(&means),
        }));
        let mut rows: BTreeMap<(usize, usize), Vec<f64>> = BTreeMap::new();
        for r in rs {
            for &(it, step, m) in &r.curve {
                if m.is_finite() {
                    rows.entry((it, step)).or_default().push(m);
                }
            }
        }
        for ((it, step), v) in rows {
            by_iter.push_str(&format!(
                "{exp},{},{},{it},{step},{},{},{}\n",
                rs[0].algorithm,
                rs[0].queries,
                stats::mean(&v),
                stats::std_dev(&v),
                v.len()
            ));
        }
    }

    let mut scaling: BTreeMap<(&str, &str, usize), Vec<f64>> = BTreeMap::new();
    for r in &data {
        scaling.entry((&r.scaling_group, &r.algorithm, r.queries)).or_default().push(r.eval.mean);
    }
    let mut by_queries = String::from("group,algorithm,queries,mean,std,n\n");
    for ((grp, alg, q), v) in &scaling {
        by_queries.push_str(&format!("{grp},{alg},{q},{},{},{}\n", stats::mean(v), stats::std_dev(v), v.len()));
    }

    fs::create_dir_all(&g.out)?;
    let text = serde_json::to_string_pretty(&json!({ "experiments": summary })).map_err(std::io::Error::from)?;
    fs::write(g.out.join(SUMMARY), text + "\n")?;
    fs::write(g.out.join(BY_ITERATION), by_iter)?;
    fs::write(g.out.join(BY_QUERIES), by_queries)?;
    for s in &summary {
        println!(
            "{} {} queries={} seeds={}: {:.4} +- {:.4}",
            s["experiment"].as_str().unwrap_or(""),
            s["algorithm"].as_str().unwrap_or(""),
            s["queries"],
            s["seeds"],
            s["eval_mean"].as_f64().unwrap_or(f64::NAN),
            s["eval_std"].as_f64().unwrap_or(f64::NAN)
        );
    }
    println!("wrote {}, {}, {}", SUMMARY, BY_ITERATION, BY_QUERIES);
    Ok(())
}
