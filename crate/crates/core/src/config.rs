//! Flat `key = value` experiment configuration with presets and includes.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::critic::{BootstrapNets, CriticConfig};
use crate::dataset::{AnnotationMode, OfflineDataset};
use crate::env::{self, figure1, BehaviorPolicy, StateCodec, TabularMdp};
use crate::error::{Error, Result};
use crate::inference::RtgMode;
use crate::reward::{NormMode, RewardConfig};
use crate::trainer::{BootstrapPolicy, EtaSchedule, PolicyQ, TrainConfig};

/// Every recognised key with its default and a one-line description.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("seed", "0", "master seed"),
    ("env", "gridworld", "figure1 | gridworld"),
    ("env.biased", "false", "figure1 only: inflate r(s4 -> s5) to 3"),
    ("grid.width", "8", "gridworld width"),
    ("grid.height", "8", "gridworld height"),
    ("grid.goal", "63", "goal cell index"),
    ("grid.traps", "", "comma-separated trap cells"),
    ("grid.step_penalty", "-0.05", "reward for ordinary moves"),
    ("codec.noise", "0.01", "uniform noise added to one-hot states"),
    ("data.episodes", "500", "episodes per dataset (split evenly over epsilons)"),
    ("data.epsilons", "0.3", "comma-separated behavior epsilons"),
    ("data.gamma", "0.99", "discount of the behavior policy's greedy table"),
    ("annotate.queries", "2000", "preference pairs"),
    ("annotate.segment_len", "200", "segment length"),
    ("annotate.mode", "stochastic", "deterministic | stochastic"),
    ("annotate.truncate", "false", "allow segments shorter than segment_len"),
    ("reward.hidden", "256,256,256", "reward MLP hidden widths"),
    ("reward.lr", "3e-4", "reward learning rate"),
    ("reward.weight_decay", "0", "reward decoupled weight decay"),
    ("reward.batch_size", "64", "reward batch size"),
    ("reward.max_epochs", "100", "reward epoch cap"),
    ("reward.ensemble_size", "3", "ensemble members"),
    ("reward.accuracy_threshold", "0.968", "early-stop accuracy"),
    ("reward.normalization", "minmax", "minmax | zscore"),
    ("reward.permissive", "false", "map constant members to 0"),
    ("reward.parallel", "true", "train members on threads"),
    ("train.algorithm", "dtr", "dtr | pbdt"),
    ("train.iterations", "50", "training iterations"),
    ("train.steps_per_iter", "1000", "gradient steps per iteration"),
    ("train.batch_size", "256", "windows per batch"),
    ("train.context_len", "20", "window length H"),
    ("train.embed_dim", "256", "transformer width"),
    ("train.layers", "4", "transformer blocks"),
    ("train.heads", "4", "attention heads"),
    ("train.dropout", "0.1", "dropout rate"),
    ("train.rtg_scale", "auto", "return-to-go divisor, or auto"),
    ("train.action_bound", "1.0", "tanh action scale"),
    ("train.lr", "3e-4", "policy and critic learning rate"),
    ("train.weight_decay", "1e-4", "decoupled weight decay"),
    ("train.warmup_steps", "10000", "linear warmup updates"),
    ("train.grad_clip", "0.25", "gradient norm clip, or none"),
    ("train.eta_max", "1.0", "final Q-weight"),
    ("train.eta_schedule", "linear", "linear | constant"),
    ("train.policy_q", "q1", "q1 | min"),
    ("train.bootstrap_policy", "target", "target | online"),
    ("train.normalize_states", "true", "z-score states before the networks"),
    ("critic.hidden", "256,256,256", "critic MLP hidden widths"),
    ("critic.gamma", "0.99", "discount"),
    ("critic.tau", "5e-3", "EMA rate"),
    ("critic.bootstrap_nets", "target", "target | online"),
    ("eval.episodes", "10", "evaluation episodes"),
    ("eval.rtg_mode", "fixed", "fixed | learned"),
    ("eval.start", "none", "fixed start state, or none"),
];

pub const PRESETS: &[(&str, &str)] = &[
    (
        "figure1",
        "env = figure1
env.biased = true
codec.noise = 0.0
data.episodes = 4
annotate.queries = 64
annotate.segment_len = 2
annotate.mode = deterministic
reward.hidden = 32,32
reward.lr = 1e-3
reward.batch_size = 16
reward.max_epochs = 300
train.iterations = 6
train.steps_per_iter = 100
train.batch_size = 16
train.context_len = 2
train.embed_dim = 32
train.layers = 1
train.heads = 2
train.dropout = 0.0
train.lr = 1e-3
train.weight_decay = 0.0
train.warmup_steps = 50
train.grad_clip = none
critic.hidden = 32,32
critic.tau = 0.05
eval.episodes = 1
eval.start = 0
",
    ),
    (
        "gridworld-medium",
        "env = gridworld
grid.width = 8
grid.height = 8
grid.goal = 63
grid.traps = 27,36
data.episodes = 300
data.epsilons = 0.3,0.5,0.7
annotate.queries = 2000
annotate.segment_len = 8
annotate.truncate = true
reward.hidden = 64,64
reward.lr = 1e-3
reward.max_epochs = 30
train.iterations = 5
train.steps_per_iter = 300
train.batch_size = 32
train.context_len = 5
train.embed_dim = 32
train.layers = 1
train.heads = 2
train.lr = 1e-3
train.warmup_steps = 100
critic.hidden = 64,64
critic.tau = 0.02
eval.episodes = 10
",
    ),
    (
        "gridworld-medium-replay",
        "include gridworld-medium
data.epsilons = 0.3,0.6,0.9
",
    ),
    (
        "gridworld-medium-expert",
        "include gridworld-medium
data.epsilons = 0.05,0.5
",
    ),
];

/// Pipeline stages in execution order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    Data,
    Annotate,
    Reward,
    Policy,
    Eval,
}

impl Stage {
    pub const ALL: [Stage; 5] = [Stage::Data, Stage::Annotate, Stage::Reward, Stage::Policy, Stage::Eval];

    pub fn of_key(key: &str) -> Stage {
        match key.split('.').next().unwrap_or("") {
            "annotate" => Stage::Annotate,
            "reward" => Stage::Reward,
            "train" | "critic" => Stage::Policy,
            "eval" => Stage::Eval,
            _ => Stage::Data,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Stage::Data => "data",
            Stage::Annotate => "annotate",
            Stage::Reward => "reward",
            Stage::Policy => "policy",
            Stage::Eval => "eval",
        }
    }
}

fn short_digest(text: &str) -> String {
    let d = Sha256::digest(text.as_bytes());
    d.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

pub fn preset(name: &str) -> Option<&'static str> {
    PRESETS.iter().find(|(n, _)| *n == name).map(|(_, t)| *t)
}

/// Resolved key/value pairs, defaults included.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfigMap {
    values: BTreeMap<String, String>,
}

impl Default for ConfigMap {
    fn default() -> Self {
        Self {
            values: KEYS.iter().map(|(k, v, _)| (k.to_string(), v.to_string())).collect(),
        }
    }
}

const MAX_INCLUDE_DEPTH: usize = 16;

impl ConfigMap {
    pub fn get(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or("")
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match self.values.get_mut(key) {
            Some(v) => {
                *v = value.trim().to_string();
                Ok(())
            }
            None => Err(Error::Config(format!("unknown key `{key}`"))),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.values.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    /// Applies `text`; `include X` pulls in a preset or a file relative to `base`.
    pub fn apply_text(&mut self, text: &str, base: Option<&Path>, origin: &str) -> Result<()> {
        self.apply_inner(text, base, origin, 0)
    }

    fn apply_inner(&mut self, text: &str, base: Option<&Path>, origin: &str, depth: usize) -> Result<()> {
        if depth > MAX_INCLUDE_DEPTH {
            return Err(Error::Config(format!("include nesting deeper than {MAX_INCLUDE_DEPTH} at {origin}")));
        }
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(target) = line.strip_prefix("include ") {
                let target = target.trim();
                if let Some(t) = preset(target) {
                    self.apply_inner(t, None, target, depth + 1)?;
                } else {
                    let path = match base {
                        Some(b) => b.join(target),
                        None => PathBuf::from(target),
                    };
                    let t = std::fs::read_to_string(&path)
                        .map_err(|e| Error::Config(format!("{origin}:{}: cannot include {}: {e}", i + 1, path.display())))?;
                    self.apply_inner(&t, path.parent(), &path.display().to_string(), depth + 1)?;
                }
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("{origin}:{}: expected `key = value`", i + 1)))?;
            self.set(k.trim(), v).map_err(|e| Error::Config(format!("{origin}:{}: {e}", i + 1)))?;
        }
        Ok(())
    }

    pub fn from_preset(name: &str) -> Result<Self> {
        let text = preset(name).ok_or_else(|| Error::Config(format!("unknown preset `{name}`")))?;
        let mut m = Self::default();
        m.apply_text(text, None, name)?;
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut m = Self::default();
        m.apply_text(&text, path.parent(), &path.display().to_string())?;
        Ok(m)
    }

    /// Canonical `key = value` listing.
    pub fn to_text(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// First 16 hex digits of the SHA-256 of the canonical listing.
    pub fn hash(&self) -> String {
        short_digest(&self.to_text())
    }

    /// Hash over the keys consumed by `stage` and every stage before it.
    /// `stage_hash(Stage::Eval) == hash()`.
    pub fn stage_hash(&self, stage: Stage) -> String {
        let text: String = self
            .values
            .iter()
            .filter(|(k, _)| Stage::of_key(k) <= stage)
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect();
        short_digest(&text)
    }

    fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        self.get(key)
            .parse()
            .map_err(|_| Error::Config(format!("bad value `{}` for `{key}`", self.get(key))))
    }

    fn list<T: std::str::FromStr>(&self, key: &str) -> Result<Vec<T>> {
        let v = self.get(key);
        if v.is_empty() {
            return Ok(Vec::new());
        }
        v.split(',')
            .map(|x| x.trim().parse().map_err(|_| Error::Config(format!("bad list `{v}` for `{key}`"))))
            .collect()
    }

    fn optional<T: std::str::FromStr>(&self, key: &str, none: &str) -> Result<Option<T>> {
        if self.get(key) == none {
            Ok(None)
        } else {
            self.parse(key).map(Some)
        }
    }

    fn choice<T: Copy>(&self, key: &str, options: &[(&str, T)]) -> Result<T> {
        let v = self.get(key);
        options.iter().find(|(n, _)| *n == v).map(|(_, t)| *t).ok_or_else(|| {
            let names: Vec<&str> = options.iter().map(|(n, _)| *n).collect();
            Error::Config(format!("`{key}` must be one of {}, got `{v}`", names.join(" | ")))
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EnvKind {
    Figure1,
    Gridworld,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Algorithm {
    Dtr,
    PbDt,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub env: EnvKind,
    pub biased: bool,
    pub grid: (usize, usize, usize, Vec<usize>, f64),
    pub noise: f64,
    pub episodes: usize,
    pub epsilons: Vec<f64>,
    pub behavior_gamma: f64,
    pub queries: usize,
    pub segment_len: usize,
    pub annotation: AnnotationMode,
    pub truncate: bool,
    pub reward: RewardConfig,
    pub algorithm: Algorithm,
    pub train: TrainConfig,
    pub eval_episodes: usize,
    pub rtg_mode: RtgMode,
    pub eval_start: Option<usize>,
    pub hash: String,
    /// Indexed by `Stage as usize`.
    pub stage_hashes: [String; 5],
}

impl ExperimentConfig {
    pub fn from_map(m: &ConfigMap) -> Result<Self> {
        let seed: u64 = m.parse("seed")?;
        let train = TrainConfig {
            seed,
            iterations: m.parse("train.iterations")?,
            steps_per_iter: m.parse("train.steps_per_iter")?,
            batch_size: m.parse("train.batch_size")?,
            context_len: m.parse("train.context_len")?,
            embed_dim: m.parse("train.embed_dim")?,
            layers: m.parse("train.layers")?,
            heads: m.parse("train.heads")?,
            dropout: m.parse("train.dropout")?,
            rtg_scale: m.optional("train.rtg_scale", "auto")?,
            action_bound: m.parse("train.action_bound")?,
            lr: m.parse("train.lr")?,
            weight_decay: m.parse("train.weight_decay")?,
            warmup_steps: m.parse("train.warmup_steps")?,
            grad_clip: m.optional("train.grad_clip", "none")?,
            eta_max: m.parse("train.eta_max")?,
            eta_schedule: m.choice("train.eta_schedule", &[("linear", EtaSchedule::Linear), ("constant", EtaSchedule::Constant)])?,
            policy_q: m.choice("train.policy_q", &[("q1", PolicyQ::Q1), ("min", PolicyQ::Min)])?,
            bootstrap_policy: m.choice("train.bootstrap_policy", &[("target", BootstrapPolicy::Target), ("online", BootstrapPolicy::Online)])?,
            critic: CriticConfig {
                hidden: m.list("critic.hidden")?,
                gamma: m.parse("critic.gamma")?,
                tau: m.parse("critic.tau")?,
                bootstrap_nets: m.choice("critic.bootstrap_nets", &[("target", BootstrapNets::Target), ("online", BootstrapNets::Online)])?,
            },
            normalize_states: m.parse("train.normalize_states")?,
            diag_dir: None,
        };
        train.validate().map_err(|e| Error::Config(e.to_string()))?;
        let cfg = Self {
            seed,
            env: m.choice("env", &[("figure1", EnvKind::Figure1), ("gridworld", EnvKind::Gridworld)])?,
            biased: m.parse("env.biased")?,
            grid: (
                m.parse("grid.width")?,
                m.parse("grid.height")?,
                m.parse("grid.goal")?,
                m.list("grid.traps")?,
                m.parse("grid.step_penalty")?,
            ),
            noise: m.parse("codec.noise")?,
            episodes: m.parse("data.episodes")?,
            epsilons: m.list("data.epsilons")?,
            behavior_gamma: m.parse("data.gamma")?,
            queries: m.parse("annotate.queries")?,
            segment_len: m.parse("annotate.segment_len")?,
            annotation: m.choice("annotate.mode", &[("deterministic", AnnotationMode::Deterministic), ("stochastic", AnnotationMode::Stochastic)])?,
            truncate: m.parse("annotate.truncate")?,
            reward: RewardConfig {
                hidden: m.list("reward.hidden")?,
                lr: m.parse("reward.lr")?,
                weight_decay: m.parse("reward.weight_decay")?,
                batch_size: m.parse("reward.batch_size")?,
                max_epochs: m.parse("reward.max_epochs")?,
                ensemble_size: m.parse("reward.ensemble_size")?,
                accuracy_threshold: m.parse("reward.accuracy_threshold")?,
                normalization: m.choice("reward.normalization", &[("minmax", NormMode::MinMax), ("zscore", NormMode::ZScore)])?,
                permissive: m.parse("reward.permissive")?,
                parallel: m.parse("reward.parallel")?,
            },
            algorithm: m.choice("train.algorithm", &[("dtr", Algorithm::Dtr), ("pbdt", Algorithm::PbDt)])?,
            train,
            eval_episodes: m.parse("eval.episodes")?,
            rtg_mode: m.choice("eval.rtg_mode", &[("fixed", RtgMode::FixedDecrement), ("learned", RtgMode::LearnedReward)])?,
            eval_start: m.optional("eval.start", "none")?,
            hash: m.hash(),
            stage_hashes: Stage::ALL.map(|st| m.stage_hash(st)),
        };
        if cfg.env == EnvKind::Gridworld && cfg.epsilons.is_empty() {
            return Err(Error::Config("`data.epsilons` must list at least one value".into()));
        }
        if cfg.epsilons.iter().any(|e| !(0.0..=1.0).contains(e)) {
            return Err(Error::Config("epsilons must lie in [0, 1]".into()));
        }
        if cfg.reward.ensemble_size == 0 || cfg.reward.hidden.is_empty() || cfg.train.critic.hidden.is_empty() {
            return Err(Error::Config("ensemble size and hidden widths must be non-empty".into()));
        }
        Ok(cfg)
    }

    pub fn stage_hash(&self, stage: Stage) -> &str {
        &self.stage_hashes[stage as usize]
    }

    pub fn mdp(&self) -> Result<TabularMdp> {
        match self.env {
            EnvKind::Figure1 => {
                let m = figure1::mdp();
                if self.biased {
                    m.with_rewards(figure1::biased_rewards())
                } else {
                    Ok(m)
                }
            }
            EnvKind::Gridworld => {
                let (w, h, goal, traps, pen) = &self.grid;
                env::build_gridworld(*w, *h, *goal, traps, *pen)
            }
        }
    }

    pub fn codec(&self, mdp: &TabularMdp) -> StateCodec {
        StateCodec {
            noise: self.noise,
            ..StateCodec::new(mdp)
        }
    }

    /// Scripted trajectories on Figure 1; an epsilon mixture on gridworlds.
    pub fn generate_dataset(&self) -> Result<OfflineDataset> {
        let mdp = self.mdp()?;
        let codec = self.codec(&mdp);
        let trajs = match self.env {
            EnvKind::Figure1 => {
                let scripts = figure1::scripted();
                let policy = BehaviorPolicy::scripted(&mdp, scripts.iter().map(|(_, s, a)| (*s, a.clone())).collect())?;
                let eps = env::rollout_tabular(&mdp, &policy, self.seed, self.episodes.max(1))?;
                let mut out = env::encode_episodes(&codec, &eps, &mdp.name, self.seed)?;
                for (i, t) in out.iter_mut().enumerate() {
                    t.id = format!("{}-{}", scripts[i % scripts.len()].0, i / scripts.len());
                }
                out
            }
            EnvKind::Gridworld => {
                let k = self.epsilons.len();
                let mut out = Vec::new();
                for (j, &e) in self.epsilons.iter().enumerate() {
                    let count = self.episodes / k + usize::from(j < self.episodes % k);
                    if count == 0 {
                        continue;
                    }
                    let policy = BehaviorPolicy::epsilon_optimal(&mdp, e, self.behavior_gamma)?;
                    let seed = self.seed.wrapping_mul(1000).wrapping_add(j as u64);
                    let eps = env::rollout_tabular(&mdp, &policy, seed, count)?;
                    out.extend(env::encode_episodes(&codec, &eps, &format!("{}-e{j}", mdp.name), seed)?);
                }
                out
            }
        };
        let mut ds = OfflineDataset::new(&mdp.name, self.seed, trajs)?;
        ds.meta.config_hash = Some(self.stage_hash(Stage::Data).to_string());
        Ok(ds)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_parse_and_hash_differently() {
        let mut hashes = Vec::new();
        for (name, _) in PRESETS {
            let m = ConfigMap::from_preset(name).unwrap();
            ExperimentConfig::from_map(&m).unwrap();
            hashes.push(m.hash());
        }
        hashes.sort();
        hashes.dedup();
        assert_eq!(hashes.len(), PRESETS.len());
        assert_eq!(ExperimentConfig::from_map(&ConfigMap::default()).unwrap().train.embed_dim, 256);
    }

    #[test]
    fn unknown_keys_and_bad_values_fail() {
        let mut m = ConfigMap::default();
        assert!(m.apply_text("no.such = 1", None, "t").is_err());
        assert!(m.apply_text("seed 3", None, "t").is_err());
        m.apply_text("train.policy_q = max", None, "t").unwrap();
        assert!(ExperimentConfig::from_map(&m).is_err());
    }

    #[test]
    fn includes_and_overrides() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("base.cfg"), "include figure1\nseed = 7 # comment\n").unwrap();
        std::fs::write(dir.path().join("top.cfg"), "include base.cfg\ntrain.iterations = 2\n").unwrap();
        let m = ConfigMap::load(&dir.path().join("top.cfg")).unwrap();
        let c = ExperimentConfig::from_map(&m).unwrap();
        assert_eq!((c.seed, c.env, c.train.iterations), (7, EnvKind::Figure1, 2));
        let again = ConfigMap::load(&dir.path().join("top.cfg")).unwrap();
        assert_eq!(m.hash(), again.hash());
        assert_eq!(m.hash().len(), 16);
        assert_eq!(m.stage_hash(Stage::Eval), m.hash());
    }

    #[test]
    fn figure1_preset_yields_four_trajectories() {
        let c = ExperimentConfig::from_map(&ConfigMap::from_preset("figure1").unwrap()).unwrap();
        let ds = c.generate_dataset().unwrap();
        assert_eq!(ds.len(), 4);
        assert_eq!(ds.return_max(), 5.0);
        assert_eq!(ds.get("red-0").unwrap().total_return(), 3.5);
    }

    #[test]
    fn mixture_counts() {
        let mut m = ConfigMap::from_preset("gridworld-medium-replay").unwrap();
        m.set("data.episodes", "10").unwrap();
        let c = ExperimentConfig::from_map(&m).unwrap();
        let ds = c.generate_dataset().unwrap();
        assert_eq!(ds.len(), 10);
        assert_eq!(ds.meta.config_hash.as_deref(), Some(c.stage_hash(Stage::Data)));
    }

    #[test]
    fn stage_hashes_ignore_downstream_keys() {
        let base = ConfigMap::from_preset("figure1").unwrap();
        let mut m = base.clone();
        m.set("eval.episodes", "7").unwrap();
        for st in [Stage::Data, Stage::Annotate, Stage::Reward, Stage::Policy] {
            assert_eq!(m.stage_hash(st), base.stage_hash(st));
        }
        assert_ne!(m.stage_hash(Stage::Eval), base.stage_hash(Stage::Eval));
        m.set("annotate.queries", "3").unwrap();
        assert_eq!(m.stage_hash(Stage::Data), base.stage_hash(Stage::Data));
        assert_ne!(m.stage_hash(Stage::Annotate), base.stage_hash(Stage::Annotate));
        assert_ne!(m.stage_hash(Stage::Policy), base.stage_hash(Stage::Policy));
    }
}
