//! Run-directory layout, config resolution, hash-chain checks and the manifest.

use std::fs;
use std::path::{Path, PathBuf};

use dtr_core::config::{ConfigMap, ExperimentConfig, Stage};
use dtr_core::Error;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::Global;

pub const CONFIG: &str = "config.txt";
pub const DATASET: &str = "dataset.jsonl";
pub const PREFS: &str = "prefs.jsonl";
pub const REWARD_BIN: &str = "reward.bin";
pub const REWARD_JSON: &str = "reward.json";
pub const RELABELED: &str = "relabeled.jsonl";
pub const POLICY_BIN: &str = "policy.bin";
pub const POLICY_JSON: &str = "policy.json";
pub const CRITIC_BIN: &str = "critic.bin";
pub const METRICS: &str = "metrics.csv";
pub const EVAL: &str = "eval.json";
pub const MANIFEST: &str = "manifest.jsonl";

/// Process exit code plus message.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub msg: String,
}

pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_UPSTREAM: u8 = 3;
pub const EXIT_NUMERIC: u8 = 4;

impl Failure {
    pub fn config(msg: impl ToString) -> Self {
        Self { code: EXIT_CONFIG, msg: msg.to_string() }
    }

    pub fn upstream(msg: impl ToString) -> Self {
        Self { code: EXIT_UPSTREAM, msg: msg.to_string() }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::NonFinite { .. } | Error::NanGradient(_) | Error::Diverged { .. } | Error::DegenerateMember { .. } => EXIT_NUMERIC,
            Error::Config(_) => EXIT_CONFIG,
            _ => 1,
        };
        Self { code, msg: e.to_string() }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Self { code: 1, msg: e.to_string() }
    }
}

pub type CliResult<T = ()> = Result<T, Failure>;

/// Defaults, then `--preset`, then `--config`, then `--set`, then `--seed`.
pub fn resolve_map(g: &Global) -> CliResult<ConfigMap> {
    let mut m = match &g.preset {
        Some(p) => ConfigMap::from_preset(p).map_err(Failure::config)?,
        None => ConfigMap::default(),
    };
    if let Some(path) = &g.config {
        let text = fs::read_to_string(path).map_err(|e| Failure::config(format!("cannot read {}: {e}", path.display())))?;
        m.apply_text(&text, path.parent(), &path.display().to_string()).map_err(Failure::config)?;
    }
    for kv in &g.overrides {
        let (k, v) = kv.split_once('=').ok_or_else(|| Failure::config(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        m.set(k.trim(), v).map_err(Failure::config)?;
    }
    if let Some(s) = g.seed {
        m.set("seed", &s.to_string()).map_err(Failure::config)?;
    }
    Ok(m)
}

pub struct Run {
    pub dir: PathBuf,
    pub map: ConfigMap,
    pub cfg: ExperimentConfig,
}

impl Run {
    pub fn open(g: &Global) -> CliResult<Self> {
        let map = resolve_map(g)?;
        let cfg = ExperimentConfig::from_map(&map).map_err(Failure::config)?;
        fs::create_dir_all(&g.out).map_err(|e| Failure { code: 1, msg: format!("cannot create {}: {e}", g.out.display()) })?;
        Ok(Self { dir: g.out.clone(), map, cfg })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn hash(&self, stage: Stage) -> &str {
        self.cfg.stage_hash(stage)
    }

    /// Fails with the upstream exit code unless every file exists.
    pub fn require(&self, names: &[&str]) -> CliResult {
        for n in names {
            let p = self.path(n);
            if !p.is_file() {
                return Err(Failure::upstream(format!("missing upstream artifact {}", p.display())));
            }
        }
        Ok(())
    }

    /// Records a finished stage: writes the resolved config and replaces the
    /// stage's manifest line.
    pub fn finish(&self, stage: &str, hash: &str, inputs: &[&str], outputs: &[&str]) -> CliResult {
        fs::write(self.path(CONFIG), self.map.to_text())?;
        let entry = |names: &[&str]| -> CliResult<Vec<Value>> {
            names
                .iter()
                .map(|n| Ok(json!({ "path": n, "sha256": file_sha256(&self.path(n))? })))
                .collect()
        };
        let line = json!({
            "stage": stage,
            "config_hash": hash,
            "inputs": entry(inputs)?,
            "outputs": entry(outputs)?,
        });
        let mut lines = read_manifest(&self.path(MANIFEST))?;
        lines.retain(|l| l["stage"] != stage);
        lines.push(line);
        lines.sort_by_key(|l| STAGE_ORDER.iter().position(|s| l["stage"] == *s).unwrap_or(usize::MAX));
        let text: String = lines.iter().map(|l| format!("{l}\n")).collect();
        fs::write(self.path(MANIFEST), text)?;
        Ok(())
    }
}

pub const STAGE_ORDER: [&str; 6] = ["gen-data", "annotate", "train-reward", "relabel", "train-policy", "eval"];

/// Fails with the upstream exit code when an artifact was produced under a
/// different configuration.
pub fn check_hash(what: &Path, found: Option<&str>, expected: &str) -> CliResult {
    match found {
        Some(h) if h == expected => Ok(()),
        Some(h) => Err(Failure::upstream(format!(
            "{} was produced with config hash {h}, current config gives {expected}",
            what.display()
        ))),
        None => Err(Failure::upstream(format!("{} carries no config hash", what.display()))),
    }
}

pub fn upstream_err(path: &Path) -> impl Fn(Error) -> Failure + '_ {
    move |e| Failure::upstream(format!("cannot load {}: {e}", path.display()))
}

pub fn file_sha256(path: &Path) -> CliResult<String> {
    let bytes = fs::read(path)?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

pub fn read_manifest(path: &Path) -> CliResult<Vec<Value>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Failure::upstream(format!("corrupt manifest {}: {e}", path.display()))))
        .collect()
}

/// Checks that every recorded output still has its recorded digest and that
/// every stage consumed exactly the bytes its upstream stage produced.
pub fn verify_manifest(dir: &Path) -> CliResult<Vec<Value>> {
    let lines = read_manifest(&dir.join(MANIFEST))?;
    let mut produced: std::collections::HashMap<String, String> = Default::default();
    for l in &lines {
        for inp in l["inputs"].as_array().into_iter().flatten() {
            let (p, h) = (inp["path"].as_str().unwrap_or(""), inp["sha256"].as_str().unwrap_or(""));
            if let Some(prev) = produced.get(p) {
                if prev != h {
                    return Err(Failure::upstream(format!(
                        "{}: stage `{}` consumed a different {p} than its producer wrote",
                        dir.display(),
                        l["stage"]
                    )));
                }
            }
        }
        for out in l["outputs"].as_array().into_iter().flatten() {
            let (p, h) = (out["path"].as_str().unwrap_or(""), out["sha256"].as_str().unwrap_or(""));
            produced.insert(p.to_string(), h.to_string());
        }
    }
    for (p, h) in &produced {
        let path = dir.join(p);
        if !path.is_file() || file_sha256(&path)? != *h {
            return Err(Failure::upstream(format!("{} changed after the manifest recorded it", path.display())));
        }
    }
    Ok(lines)
}
