//! Trajectories, return-to-go, preference segments, synthetic annotation and
//! JSON-lines storage.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::sigmoid;

/// Suffix sums: `rtg[t] = rewards[t] + rtg[t + 1]`.
pub fn compute_rtg(rewards: &[f64]) -> Result<Vec<f64>> {
    if rewards.is_empty() {
        return Err(Error::InvalidArgument("return-to-go of an empty reward sequence".into()));
    }
    let mut out = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for t in (0..rewards.len()).rev() {
        acc += rewards[t];
        out[t] = acc;
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub id: String,
    pub states: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
    pub rewards: Vec<f64>,
    pub terminals: Vec<bool>,
    #[serde(skip)]
    rtg: Vec<f64>,
}

impl Trajectory {
    pub fn new(id: String, states: Vec<Vec<f64>>, actions: Vec<Vec<f64>>, rewards: Vec<f64>, terminals: Vec<bool>) -> Result<Self> {
        let n = states.len();
        if actions.len() != n || rewards.len() != n || terminals.len() != n {
            return Err(Error::InvalidArgument(format!(
                "trajectory `{id}` has mismatched lengths {n}/{}/{}/{}",
                actions.len(),
                rewards.len(),
                terminals.len()
            )));
        }
        let rtg = compute_rtg(&rewards)?;
        Ok(Self {
            id,
            states,
            actions,
            rewards,
            terminals,
            rtg,
        })
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn rtg(&self) -> &[f64] {
        &self.rtg
    }

    pub fn total_return(&self) -> f64 {
        self.rtg[0]
    }

    pub fn set_rewards(&mut self, rewards: Vec<f64>) -> Result<()> {
        if rewards.len() != self.len() {
            return Err(Error::InvalidArgument("reward count differs from trajectory length".into()));
        }
        self.rtg = compute_rtg(&rewards)?;
        self.rewards = rewards;
        Ok(())
    }

    fn refresh_rtg(&mut self) -> Result<()> {
        self.rtg = compute_rtg(&self.rewards)?;
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardProvenance {
    Gt,
    Relabeled,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub env: String,
    pub seed: u64,
    pub reward_provenance: RewardProvenance,
    pub return_max: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
}

/// An offline dataset of trajectories.
#[derive(Clone, Debug, PartialEq)]
pub struct OfflineDataset {
    pub meta: DatasetMeta,
    trajectories: Vec<Trajectory>,
    index: HashMap<String, usize>,
}

impl OfflineDataset {
    pub fn new(env: &str, seed: u64, trajectories: Vec<Trajectory>) -> Result<Self> {
        let mut d = Self {
            meta: DatasetMeta {
                env: env.to_string(),
                seed,
                reward_provenance: RewardProvenance::Gt,
                return_max: 0.0,
                config_hash: None,
            },
            trajectories: Vec::new(),
            index: HashMap::new(),
        };
        d.set_trajectories(trajectories)?;
        Ok(d)
    }

    fn set_trajectories(&mut self, trajectories: Vec<Trajectory>) -> Result<()> {
        if trajectories.is_empty() {
            return Err(Error::InvalidArgument("dataset needs at least one trajectory".into()));
        }
        let mut index = HashMap::with_capacity(trajectories.len());
        for (i, t) in trajectories.iter().enumerate() {
            if index.insert(t.id.clone(), i).is_some() {
                return Err(Error::InvalidArgument(format!("duplicate trajectory id `{}`", t.id)));
            }
        }
        self.index = index;
        self.trajectories = trajectories;
        self.meta.return_max = self
            .trajectories
            .iter()
            .map(Trajectory::total_return)
            .fold(f64::NEG_INFINITY, f64::max);
        Ok(())
    }

    pub fn trajectories(&self) -> &[Trajectory] {
        &self.trajectories
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn return_max(&self) -> f64 {
        self.meta.return_max
    }

    pub fn get(&self, id: &str) -> Option<&Trajectory> {
        self.index.get(id).map(|&i| &self.trajectories[i])
    }

    pub fn state_dim(&self) -> usize {
        self.trajectories[0].states[0].len()
    }

    pub fn action_dim(&self) -> usize {
        self.trajectories[0].actions[0].len()
    }

    pub fn num_steps(&self) -> usize {
        self.trajectories.iter().map(Trajectory::len).sum()
    }

    /// Replaces every reward (in trajectory order), recomputing RTGs and `return_max`.
    pub fn with_rewards(&self, rewards: &[Vec<f64>], provenance: RewardProvenance) -> Result<Self> {
        if rewards.len() != self.len() {
            return Err(Error::InvalidArgument("one reward sequence per trajectory required".into()));
        }
        let mut trajs = self.trajectories.clone();
        for (t, r) in trajs.iter_mut().zip(rewards) {
            t.set_rewards(r.clone())?;
        }
        let mut out = self.clone();
        out.set_trajectories(trajs)?;
        out.meta.reward_provenance = provenance;
        Ok(out)
    }

    /// Sum of rewards over a segment.
    pub fn segment_return(&self, seg: &Segment) -> Result<f64> {
        let t = self.resolve(seg)?;
        Ok(t.rewards[seg.start..seg.start + seg.len].iter().sum())
    }

    pub fn resolve(&self, seg: &Segment) -> Result<&Trajectory> {
        let t = self
            .get(&seg.traj)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown trajectory `{}`", seg.traj)))?;
        if seg.len == 0 || seg.start + seg.len > t.len() {
            return Err(Error::InvalidArgument(format!(
                "segment {}..{} outside trajectory `{}` of length {}",
                seg.start,
                seg.start + seg.len,
                seg.traj,
                t.len()
            )));
        }
        Ok(t)
    }
}

/// Per-dimension z-score statistics of dataset states.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StateNorm {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Standard deviations below this are treated as this value.
pub const STATE_STD_FLOOR: f64 = 1e-6;

impl StateNorm {
    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    pub fn fit(dataset: &OfflineDataset) -> Self {
        let d = dataset.state_dim();
        let n = dataset.num_steps() as f64;
        let mut mean = vec![0.0; d];
        for t in dataset.trajectories() {
            for s in &t.states {
                for (m, v) in mean.iter_mut().zip(s) {
                    *m += v;
                }
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; d];
        for t in dataset.trajectories() {
            for s in &t.states {
                for ((acc, v), m) in var.iter_mut().zip(s).zip(&mean) {
                    *acc += (v - m) * (v - m);
                }
            }
        }
        let std = var.into_iter().map(|v| (v / n).sqrt().max(STATE_STD_FLOOR)).collect();
        Self { mean, std }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn apply(&self, s: &[f64]) -> Vec<f64> {
        s.iter().zip(&self.mean).zip(&self.std).map(|((v, m), sd)| (v - m) / sd).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Segment {
    pub traj: String,
    pub start: usize,
    pub len: usize,
}

/// Two segments and the target probability `y` that `seg1` is preferred.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub seg0: Segment,
    pub seg1: Segment,
    pub y: f64,
}

impl PreferencePair {
    pub fn new(seg0: Segment, seg1: Segment, y: f64) -> Result<Self> {
        if y != 0.0 && y != 0.5 && y != 1.0 {
            return Err(Error::InvalidArgument(format!("label {y} not in {{0, 0.5, 1}}")));
        }
        Ok(Self { seg0, seg1, y })
    }

    /// Converts an external label where `1` means `seg0` is preferred.
    pub fn from_seg0_preferred_label(seg0: Segment, seg1: Segment, label: f64) -> Result<Self> {
        Self::new(seg0, seg1, 1.0 - label)
    }
}

/// Uniform `(trajectory, start)` draws. Without `truncate`, only trajectories of
/// at least `len` steps qualify; with it, shorter trajectories are taken whole.
pub fn sample_segments(dataset: &OfflineDataset, len: usize, count: usize, seed: u64, truncate: bool) -> Result<Vec<Segment>> {
    if len == 0 {
        return Err(Error::InvalidArgument("segment length must be >= 1".into()));
    }
    // weight each trajectory by its number of admissible starts
    let mut choices: Vec<(usize, usize)> = Vec::new();
    for (i, t) in dataset.trajectories().iter().enumerate() {
        if t.len() >= len {
            choices.push((i, t.len() - len + 1));
        } else if truncate {
            choices.push((i, 1));
        }
    }
    if choices.is_empty() {
        let longest = dataset.trajectories().iter().map(Trajectory::len).max().unwrap_or(0);
        return Err(Error::SegmentTooLong { needed: len, longest });
    }
    let total: usize = choices.iter().map(|c| c.1).sum();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let mut k = rng.gen_range(0..total);
        let mut pick = choices[0];
        for &c in &choices {
            if k < c.1 {
                pick = c;
                break;
            }
            k -= c.1;
        }
        let t = &dataset.trajectories()[pick.0];
        let seg_len = len.min(t.len());
        out.push(Segment {
            traj: t.id.clone(),
            start: k,
            len: seg_len,
        });
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnnotationMode {
    Deterministic,
    Stochastic,
}

/// Labels a pair with the dataset's (ground-truth) rewards. Deterministic mode
/// compares returns exactly; stochastic mode samples from the Bradley–Terry
/// probability that `seg1` is preferred.
pub fn annotate<R: Rng + ?Sized>(dataset: &OfflineDataset, seg0: &Segment, seg1: &Segment, mode: AnnotationMode, rng: &mut R) -> Result<f64> {
    let r0 = dataset.segment_return(seg0)?;
    let r1 = dataset.segment_return(seg1)?;
    Ok(match mode {
        AnnotationMode::Deterministic => {
            if r1 > r0 {
                1.0
            } else if r1 < r0 {
                0.0
            } else {
                0.5
            }
        }
        AnnotationMode::Stochastic => {
            if rng.gen::<f64>() < sigmoid(r1 - r0) {
                1.0
            } else {
                0.0
            }
        }
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreferenceHeader {
    pub mode: AnnotationMode,
    pub seed: u64,
    pub segment_len: usize,
    pub count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PreferenceDataset {
    pub header: PreferenceHeader,
    pub pairs: Vec<PreferencePair>,
}

impl PreferenceDataset {
    /// Samples `count` segment pairs and annotates them.
    pub fn synthesize(dataset: &OfflineDataset, segment_len: usize, count: usize, mode: AnnotationMode, seed: u64) -> Result<Self> {
        let segs = sample_segments(dataset, segment_len, 2 * count, seed, false)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x9e37_79b9_7f4a_7c15));
        let pairs = segs
            .chunks(2)
            .map(|c| {
                let y = annotate(dataset, &c[0], &c[1], mode, &mut rng)?;
                PreferencePair::new(c[0].clone(), c[1].clone(), y)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            header: PreferenceHeader {
                mode,
                seed,
                segment_len,
                count,
                config_hash: None,
            },
            pairs,
        })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// The first `n` pairs.
    pub fn truncated(&self, n: usize) -> Self {
        let mut out = self.clone();
        out.pairs.truncate(n);
        out.header.count = out.pairs.len();
        out
    }
}

fn parse_err(path: &Path, line: usize, msg: impl ToString) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.to_string(),
    }
}

/// Header line with metadata, then one trajectory record per line.
pub fn save_dataset(dataset: &OfflineDataset, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer(&mut w, &dataset.meta).map_err(std::io::Error::from)?;
    w.write_all(b"\n")?;
    for t in dataset.trajectories() {
        serde_json::to_writer(&mut w, t).map_err(std::io::Error::from)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<OfflineDataset> {
    let r = BufReader::new(File::open(path)?);
    let mut meta: Option<DatasetMeta> = None;
    let mut trajs = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        if meta.is_none() {
            meta = Some(serde_json::from_str(&line).map_err(|e| parse_err(path, lineno, e))?);
            continue;
        }
        let mut t: Trajectory = serde_json::from_str(&line).map_err(|e| parse_err(path, lineno, e))?;
        let n = t.states.len();
        if n == 0 || t.actions.len() != n || t.rewards.len() != n || t.terminals.len() != n {
            return Err(parse_err(path, lineno, "trajectory fields have mismatched lengths"));
        }
        t.refresh_rtg().map_err(|e| parse_err(path, lineno, e))?;
        trajs.push(t);
    }
    let meta = meta.ok_or_else(|| parse_err(path, 1, "missing metadata header"))?;
    let mut d = OfflineDataset::new(&meta.env, meta.seed, trajs).map_err(|e| parse_err(path, 1, e))?;
    let computed = d.meta.return_max;
    d.meta = meta;
    if d.meta.return_max != computed {
        return Err(parse_err(path, 1, "return_max disagrees with the trajectories"));
    }
    Ok(d)
}

pub fn save_preferences(prefs: &PreferenceDataset, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer(&mut w, &prefs.header).map_err(std::io::Error::from)?;
    w.write_all(b"\n")?;
    for p in &prefs.pairs {
        serde_json::to_writer(&mut w, p).map_err(std::io::Error::from)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_preferences(path: &Path) -> Result<PreferenceDataset> {
    let r = BufReader::new(File::open(path)?);
    let mut header: Option<PreferenceHeader> = None;
    let mut pairs = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        if header.is_none() {
            header = Some(serde_json::from_str(&line).map_err(|e| parse_err(path, lineno, e))?);
            continue;
        }
        let p: PreferencePair = serde_json::from_str(&line).map_err(|e| parse_err(path, lineno, e))?;
        let p = PreferencePair::new(p.seg0, p.seg1, p.y).map_err(|e| parse_err(path, lineno, e))?;
        pairs.push(p);
    }
    let header = header.ok_or_else(|| parse_err(path, 1, "missing preference header"))?;
    Ok(PreferenceDataset { header, pairs })
}
