//! Bradley–Terry reward ensembles: training from segment preferences,
//! per-member normalization over the offline dataset, and relabeling.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{OfflineDataset, PreferenceDataset, RewardProvenance, Segment};
use crate::error::{Error, Result};
use crate::tensor::{read_checkpoint, sigmoid, softplus, write_checkpoint, Activation, Adam, AdamConfig, Graph, Mlp, ParamSet, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormMode {
    MinMax,
    ZScore,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardConfig {
    pub hidden: Vec<usize>,
    pub lr: f64,
    /// Decoupled weight decay.
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub ensemble_size: usize,
    /// Training stops once accuracy strictly exceeds this.
    pub accuracy_threshold: f64,
    pub normalization: NormMode,
    /// Map a constant member to 0 instead of failing.
    pub permissive: bool,
    /// Train members on separate threads.
    pub parallel: bool,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            hidden: vec![256, 256, 256],
            lr: 3e-4,
            weight_decay: 0.0,
            batch_size: 64,
            max_epochs: 100,
            ensemble_size: 3,
            accuracy_threshold: 0.968,
            normalization: NormMode::MinMax,
            permissive: false,
            parallel: true,
        }
    }
}

/// An MLP `r(s, a)` with tanh output.
#[derive(Clone, Debug)]
pub struct RewardNet {
    pub mlp: Mlp,
    pub params: ParamSet,
}

impl RewardNet {
    pub fn new<R: rand::Rng + ?Sized>(input_dim: usize, hidden: &[usize], rng: &mut R) -> Self {
        let mut params = ParamSet::new();
        let mlp = Mlp::new(&mut params, "reward", input_dim, hidden, 1, Activation::Tanh, rng);
        Self { mlp, params }
    }

    pub fn input_dim(&self) -> usize {
        self.mlp.input_dim()
    }

    /// Per-row rewards for a `[n, input_dim]` row-major buffer.
    pub fn rewards(&self, rows: &[f64]) -> Result<Vec<f64>> {
        let d = self.input_dim();
        let mut out = Vec::with_capacity(rows.len() / d);
        for chunk in rows.chunks(4096 * d) {
            let x = Tensor::new(vec![chunk.len() / d, d], chunk.to_vec())?;
            out.extend_from_slice(self.mlp.eval(&self.params, &x)?.data());
        }
        Ok(out)
    }

    pub fn forward(&self, g: &mut Graph, p: &[Var], x: Var) -> Result<Var> {
        self.mlp.forward(g, p, x)
    }
}

/// `P[seg1 preferred]` from the two segments' reward sums, in log space.
pub fn preference_from_sums(sum0: f64, sum1: f64) -> f64 {
    sigmoid(sum1 - sum0)
}

/// Concatenated `(state, action)` rows of a segment.
pub fn segment_rows(dataset: &OfflineDataset, seg: &Segment) -> Result<Vec<f64>> {
    let t = dataset.resolve(seg)?;
    let mut out = Vec::new();
    for i in seg.start..seg.start + seg.len {
        out.extend_from_slice(&t.states[i]);
        out.extend_from_slice(&t.actions[i]);
    }
    Ok(out)
}

pub fn preference_probability(dataset: &OfflineDataset, seg0: &Segment, seg1: &Segment, net: &RewardNet) -> Result<f64> {
    let s0: f64 = net.rewards(&segment_rows(dataset, seg0)?)?.iter().sum();
    let s1: f64 = net.rewards(&segment_rows(dataset, seg1)?)?.iter().sum();
    Ok(preference_from_sums(s0, s1))
}

/// Preference pairs flattened into one row buffer.
#[derive(Clone, Debug)]
pub struct PreparedPrefs {
    pub dim: usize,
    pub rows: Vec<f64>,
    /// `(start_row, len)` for seg0 and seg1 of each pair.
    pub spans: Vec<[(usize, usize); 2]>,
    pub y: Vec<f64>,
}

impl PreparedPrefs {
    pub fn new(dataset: &OfflineDataset, prefs: &PreferenceDataset) -> Result<Self> {
        let dim = dataset.state_dim() + dataset.action_dim();
        let mut rows = Vec::new();
        let mut spans = Vec::with_capacity(prefs.len());
        let mut y = Vec::with_capacity(prefs.len());
        for p in &prefs.pairs {
            let mut span = [(0, 0); 2];
            for (k, seg) in [&p.seg0, &p.seg1].into_iter().enumerate() {
                span[k] = (rows.len() / dim, seg.len);
                rows.extend(segment_rows(dataset, seg)?);
            }
            spans.push(span);
            y.push(p.y);
        }
        Ok(Self { dim, rows, spans, y })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    /// Per-pair `(sum0, sum1)` under `net`.
    pub fn sums(&self, net: &RewardNet) -> Result<Vec<(f64, f64)>> {
        let r = net.rewards(&self.rows)?;
        let seg = |(s, l): (usize, usize)| r[s..s + l].iter().sum::<f64>();
        Ok(self.spans.iter().map(|sp| (seg(sp[0]), seg(sp[1]))).collect())
    }

    /// Records the cross-entropy loss of the pairs in `batch` on `g`.
    pub fn loss_on_graph(&self, g: &mut Graph, net: &RewardNet, p: &[Var], batch: &[usize]) -> Result<Var> {
        let d = self.dim;
        let mut x = Vec::new();
        let mut sel = [Vec::new(), Vec::new()];
        let mut offsets = Vec::with_capacity(batch.len());
        let mut n = 0;
        for &b in batch {
            let mut o = [0; 2];
            for k in 0..2 {
                let (s, l) = self.spans[b][k];
                x.extend_from_slice(&self.rows[s * d..(s + l) * d]);
                o[k] = n;
                n += l;
            }
            offsets.push(o);
        }
        for k in 0..2 {
            sel[k] = vec![0.0; batch.len() * n];
            for (i, &b) in batch.iter().enumerate() {
                let l = self.spans[b][k].1;
                for j in 0..l {
                    sel[k][i * n + offsets[i][k] + j] = 1.0;
                }
            }
        }
        let xv = g.constant(Tensor::new(vec![n, d], x)?);
        let r = net.forward(g, p, xv)?;
        let [s0, s1] = sel;
        let s0 = g.constant(Tensor::new(vec![batch.len(), n], s0)?);
        let s1 = g.constant(Tensor::new(vec![batch.len(), n], s1)?);
        let sum0 = g.matmul(s0, r)?;
        let sum1 = g.matmul(s1, r)?;
        let y: Vec<f64> = batch.iter().map(|&b| self.y[b]).collect();
        ce_from_sums(g, sum0, sum1, &y)
    }
}

/// Mean over pairs of `(1 - y) softplus(s1 - s0) + y softplus(s0 - s1)`, i.e.
/// the negative log-likelihood with `y` the probability that seg1 wins.
pub fn ce_from_sums(g: &mut Graph, sum0: Var, sum1: Var, y: &[f64]) -> Result<Var> {
    let shape = g.shape(sum0).to_vec();
    let diff = g.sub(sum1, sum0)?;
    let neg = g.neg(diff)?;
    let lose = g.softplus(diff)?;
    let win = g.softplus(neg)?;
    let wy = g.constant(Tensor::new(shape.clone(), y.to_vec())?);
    let w1 = g.constant(Tensor::new(shape, y.iter().map(|v| 1.0 - v).collect())?);
    let a = g.mul(w1, lose)?;
    let b = g.mul(wy, win)?;
    let t = g.add(a, b)?;
    g.mean(t)
}

/// Cross-entropy loss of `prefs` under `net`, evaluated without a tape.
pub fn ce_loss(prepared: &PreparedPrefs, net: &RewardNet) -> Result<f64> {
    let sums = prepared.sums(net)?;
    let total: f64 = sums
        .iter()
        .zip(&prepared.y)
        .map(|(&(s0, s1), &y)| (1.0 - y) * softplus(s1 - s0) + y * softplus(s0 - s1))
        .sum();
    Ok(total / sums.len().max(1) as f64)
}

/// Fraction of non-tied pairs whose predicted side matches the label.
pub fn accuracy_from_sums(sums: &[(f64, f64)], y: &[f64]) -> Result<f64> {
    let mut hits = 0usize;
    let mut counted = 0usize;
    for (&(s0, s1), &y) in sums.iter().zip(y) {
        if y == 0.5 {
            continue;
        }
        counted += 1;
        let pred = (preference_from_sums(s0, s1) - 0.5).signum();
        let pred = if s1 == s0 { 0.0 } else { pred };
        if pred == (y - 0.5).signum() {
            hits += 1;
        }
    }
    if counted == 0 {
        return Err(Error::UndefinedAccuracy);
    }
    Ok(hits as f64 / counted as f64)
}

pub fn preference_accuracy(prepared: &PreparedPrefs, net: &RewardNet) -> Result<f64> {
    accuracy_from_sums(&prepared.sums(net)?, &prepared.y)
}

/// Min/max and mean/std of one member's raw outputs over a dataset.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub min: f64,
    pub max: f64,
    pub mean: f64,
    pub std: f64,
}

impl NormStats {
    pub fn of(raw: &[f64]) -> Self {
        let min = raw.iter().copied().fold(f64::INFINITY, f64::min);
        let max = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Self {
            min,
            max,
            mean: crate::stats::mean(raw),
            std: crate::stats::std_dev(raw),
        }
    }

    fn degenerate(&self, mode: NormMode) -> bool {
        match mode {
            NormMode::MinMax => self.min == self.max,
            NormMode::ZScore => self.std == 0.0,
        }
    }

    pub fn apply(&self, mode: NormMode, x: f64) -> f64 {
        if self.degenerate(mode) {
            return 0.0;
        }
        match mode {
            NormMode::MinMax => (x - self.min) / (self.max - self.min),
            NormMode::ZScore => (x - self.mean) / self.std,
        }
    }
}

/// Normalizes each member's raw outputs and averages across members.
pub fn normalize_members(raw: &[Vec<f64>], mode: NormMode, permissive: bool) -> Result<(Vec<f64>, Vec<NormStats>)> {
    if raw.is_empty() {
        return Err(Error::InvalidArgument("ensemble has no members".into()));
    }
    let n = raw[0].len();
    let mut stats = Vec::with_capacity(raw.len());
    for (i, r) in raw.iter().enumerate() {
        if r.len() != n {
            return Err(Error::InvalidArgument("members scored different row counts".into()));
        }
        let s = NormStats::of(r);
        if s.degenerate(mode) && !permissive {
            return Err(Error::DegenerateMember { member: i, value: s.min });
        }
        stats.push(s);
    }
    let k = raw.len() as f64;
    let out = (0..n)
        .map(|j| raw.iter().zip(&stats).map(|(r, s)| s.apply(mode, r[j])).sum::<f64>() / k)
        .collect();
    Ok((out, stats))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemberReport {
    pub epochs: usize,
    pub accuracy_trace: Vec<f64>,
    pub loss_trace: Vec<f64>,
    pub reached_threshold: bool,
}

#[derive(Clone, Debug)]
pub struct RewardEnsemble {
    pub members: Vec<RewardNet>,
    pub stats: Option<Vec<NormStats>>,
    pub mode: NormMode,
    pub seed: u64,
    pub reports: Vec<MemberReport>,
}

fn member_rngs(seed: u64, member: usize) -> (ChaCha8Rng, ChaCha8Rng) {
    let mut init = ChaCha8Rng::seed_from_u64(seed);
    init.set_stream(2 * member as u64);
    let mut order = ChaCha8Rng::seed_from_u64(seed);
    order.set_stream(2 * member as u64 + 1);
    (init, order)
}

/// Trains one member until its training accuracy exceeds the threshold or the
/// epoch budget runs out.
pub fn train_member(prepared: &PreparedPrefs, cfg: &RewardConfig, seed: u64, member: usize) -> Result<(RewardNet, MemberReport)> {
    if prepared.is_empty() {
        return Err(Error::InvalidArgument("empty preference dataset".into()));
    }
    let (mut init, mut order) = member_rngs(seed, member);
    let mut net = RewardNet::new(prepared.dim, &cfg.hidden, &mut init);
    let mut adam = Adam::new(
        AdamConfig {
            lr: cfg.lr,
            weight_decay: cfg.weight_decay,
            ..AdamConfig::default()
        },
        &net.params,
    );
    let mut report = MemberReport {
        epochs: 0,
        accuracy_trace: Vec::new(),
        loss_trace: Vec::new(),
        reached_threshold: false,
    };
    let mut idx: Vec<usize> = (0..prepared.len()).collect();
    let mut step = 0usize;
    let diverged = |step| Error::Diverged {
        what: format!("reward member {member} loss"),
        step,
    };
    for _ in 0..cfg.max_epochs {
        idx.shuffle(&mut order);
        let mut epoch_loss = 0.0;
        for batch in idx.chunks(cfg.batch_size.max(1)) {
            let mut g = Graph::new();
            let p = net.params.bind(&mut g, true);
            let loss = match prepared.loss_on_graph(&mut g, &net, &p, batch) {
                Err(Error::NonFinite { .. }) => return Err(diverged(step)),
                other => other?,
            };
            let lv = g.value(loss).item();
            if !lv.is_finite() {
                return Err(diverged(step));
            }
            epoch_loss += lv * batch.len() as f64;
            let grads = g.backward(loss)?;
            let gs = net.params.grads(&p, &grads);
            match adam.step(&mut net.params, &gs) {
                Err(Error::NanGradient(_)) => return Err(diverged(step)),
                other => other?,
            }
            step += 1;
        }
        report.epochs += 1;
        report.loss_trace.push(epoch_loss / prepared.len() as f64);
        let acc = match preference_accuracy(prepared, &net) {
            Ok(a) => a,
            Err(Error::UndefinedAccuracy) => {
                report.accuracy_trace.push(f64::NAN);
                continue;
            }
            Err(e) => return Err(e),
        };
        report.accuracy_trace.push(acc);
        if acc > cfg.accuracy_threshold {
            report.reached_threshold = true;
            break;
        }
    }
    Ok((net, report))
}

pub fn train_ensemble(dataset: &OfflineDataset, prefs: &PreferenceDataset, cfg: &RewardConfig, seed: u64) -> Result<RewardEnsemble> {
    if cfg.ensemble_size == 0 {
        return Err(Error::InvalidArgument("ensemble size must be >= 1".into()));
    }
    let prepared = PreparedPrefs::new(dataset, prefs)?;
    let results: Vec<Result<(RewardNet, MemberReport)>> = if cfg.parallel && cfg.ensemble_size > 1 {
        std::thread::scope(|sc| {
            let handles: Vec<_> = (0..cfg.ensemble_size)
                .map(|i| {
                    let prepared = &prepared;
                    sc.spawn(move || train_member(prepared, cfg, seed, i))
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("member thread")).collect()
        })
    } else {
        (0..cfg.ensemble_size).map(|i| train_member(&prepared, cfg, seed, i)).collect()
    };
    let mut members = Vec::new();
    let mut reports = Vec::new();
    for r in results {
        let (n, rep) = r?;
        members.push(n);
        reports.push(rep);
    }
    Ok(RewardEnsemble {
        members,
        stats: None,
        mode: cfg.normalization,
        seed,
        reports,
    })
}

/// All `(state, action)` rows of the dataset in trajectory order.
pub fn dataset_rows(dataset: &OfflineDataset) -> Vec<f64> {
    let mut rows = Vec::new();
    for t in dataset.trajectories() {
        for (s, a) in t.states.iter().zip(&t.actions) {
            rows.extend_from_slice(s);
            rows.extend_from_slice(a);
        }
    }
    rows
}

impl RewardEnsemble {
    /// Raw outputs of every member over every dataset step.
    pub fn raw_outputs(&self, dataset: &OfflineDataset) -> Result<Vec<Vec<f64>>> {
        let rows = dataset_rows(dataset);
        self.members.iter().map(|m| m.rewards(&rows)).collect()
    }

    /// Normalized ensemble reward for arbitrary rows; statistics must be fitted.
    pub fn predict(&self, rows: &[f64]) -> Result<Vec<f64>> {
        let stats = self
            .stats
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("normalization statistics not fitted".into()))?;
        let raw: Vec<Vec<f64>> = self.members.iter().map(|m| m.rewards(rows)).collect::<Result<_>>()?;
        let k = raw.len() as f64;
        Ok((0..raw[0].len())
            .map(|j| raw.iter().zip(stats).map(|(r, s)| s.apply(self.mode, r[j])).sum::<f64>() / k)
            .collect())
    }

    pub fn save(&self, bin: &Path, sidecar: &Path, config_hash: Option<&str>) -> Result<()> {
        let mut named: Vec<(String, Tensor)> = Vec::new();
        for (i, m) in self.members.iter().enumerate() {
            for (n, t) in m.params.iter() {
                named.push((format!("member{i}.{n}"), t.clone()));
            }
        }
        write_checkpoint(bin, named.iter().map(|(n, t)| (n.as_str(), t)))?;
        let side = EnsembleSidecar {
            members: self.members.len(),
            input_dim: self.members[0].input_dim(),
            hidden: self.members[0].mlp.layers[..self.members[0].mlp.layers.len() - 1]
                .iter()
                .map(|l| l.fan_out)
                .collect(),
            mode: self.mode,
            seed: self.seed,
            stats: self.stats.clone(),
            reports: self.reports.clone(),
            config_hash: config_hash.map(str::to_string),
        };
        std::fs::write(sidecar, serde_json::to_string_pretty(&side).map_err(std::io::Error::from)?)?;
        Ok(())
    }

    pub fn load(bin: &Path, sidecar: &Path) -> Result<(Self, EnsembleSidecar)> {
        let text = std::fs::read_to_string(sidecar)?;
        let side: EnsembleSidecar = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: sidecar.to_path_buf(),
            line: e.line(),
            msg: e.to_string(),
        })?;
        let entries = read_checkpoint(bin)?;
        let mut members = Vec::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for i in 0..side.members {
            let mut net = RewardNet::new(side.input_dim, &side.hidden, &mut rng);
            let prefix = format!("member{i}.");
            net.params.load_named(
                entries
                    .iter()
                    .filter_map(|(n, t)| n.strip_prefix(&prefix).map(|k| (k, t))),
            )?;
            members.push(net);
        }
        Ok((
            Self {
                members,
                stats: side.stats.clone(),
                mode: side.mode,
                seed: side.seed,
                reports: side.reports.clone(),
            },
            side,
        ))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleSidecar {
    pub members: usize,
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub mode: NormMode,
    pub seed: u64,
    pub stats: Option<Vec<NormStats>>,
    pub reports: Vec<MemberReport>,
    #[serde(default)]
    pub config_hash: Option<String>,
}

/// Replaces the dataset's rewards with the normalized ensemble mean and stores
/// the fitted statistics on the ensemble.
pub fn ensemble_normalize_and_relabel(ensemble: &mut RewardEnsemble, dataset: &OfflineDataset, permissive: bool) -> Result<OfflineDataset> {
    let raw = ensemble.raw_outputs(dataset)?;
    let (flat, stats) = normalize_members(&raw, ensemble.mode, permissive)?;
    ensemble.stats = Some(stats);
    relabel_with(dataset, &flat)
}

/// Splits a flat per-step reward vector back into trajectories.
pub fn relabel_with(dataset: &OfflineDataset, flat: &[f64]) -> Result<OfflineDataset> {
    if flat.len() != dataset.num_steps() {
        return Err(Error::InvalidArgument("reward count differs from dataset steps".into()));
    }
    let mut per = Vec::with_capacity(dataset.len());
    let mut at = 0;
    for t in dataset.trajectories() {
        per.push(flat[at..at + t.len()].to_vec());
        at += t.len();
    }
    dataset.with_rewards(&per, RewardProvenance::Relabeled)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{AnnotationMode, PreferencePair, Trajectory};

    fn toy_dataset() -> OfflineDataset {
        let mk = |id: &str, s: f64, r: f64| {
            Trajectory::new(id.into(), vec![vec![s, 1.0 - s]], vec![vec![0.5]], vec![r], vec![true]).unwrap()
        };
        OfflineDataset::new("toy", 0, vec![mk("a", 0.0, 0.0), mk("b", 1.0, 1.0), mk("c", 0.3, 0.5)]).unwrap()
    }

    fn seg(id: &str) -> Segment {
        Segment {
            traj: id.into(),
            start: 0,
            len: 1,
        }
    }

    #[test]
    fn probability_identities() {
        assert_eq!(preference_from_sums(1.3, 1.3), 0.5);
        assert!((preference_from_sums(0.0, 3f64.ln()) - 0.75).abs() < 1e-15);
        assert!(preference_from_sums(0.0, 1e4) <= 1.0);
    }

    #[test]
    fn log_space_matches_naive_formula() {
        let d = toy_dataset();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = RewardNet::new(3, &[8, 8], &mut rng);
        let p = preference_probability(&d, &seg("a"), &seg("b"), &net).unwrap();
        let r0 = net.rewards(&segment_rows(&d, &seg("a")).unwrap()).unwrap()[0];
        let r1 = net.rewards(&segment_rows(&d, &seg("b")).unwrap()).unwrap()[0];
        let naive = r1.exp() / (r0.exp() + r1.exp());
        assert!((p - naive).abs() < 1e-12);
    }

    #[test]
    fn ce_hand_values() {
        let mut g = Graph::new();
        let s0 = g.constant(Tensor::from_vec(vec![0.0, 0.0]));
        // sums chosen so that P[seg1] is 0.9 and 0.6
        let s1 = g.constant(Tensor::from_vec(vec![(0.9f64 / 0.1).ln(), (0.6f64 / 0.4).ln()]));
        let l = ce_from_sums(&mut g, s0, s1, &[1.0, 0.0]).unwrap();
        let want = (-(0.9f64).ln() - (0.4f64).ln()) / 2.0;
        assert!((g.value(l).item() - want).abs() < 1e-12);
        let mut g = Graph::new();
        let z = g.constant(Tensor::from_vec(vec![0.5, -2.0]));
        let l = ce_from_sums(&mut g, z, z, &[1.0, 0.0]).unwrap();
        assert!((g.value(l).item() - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn accuracy_rules() {
        assert_eq!(accuracy_from_sums(&[(0.0, 1.0), (1.0, 0.0)], &[1.0, 0.0]).unwrap(), 1.0);
        assert_eq!(accuracy_from_sums(&[(0.0, 1.0), (0.0, 1.0)], &[1.0, 0.5]).unwrap(), 1.0);
        assert!(matches!(
            accuracy_from_sums(&[(0.0, 1.0)], &[0.5]),
            Err(Error::UndefinedAccuracy)
        ));
    }

    #[test]
    fn min_max_examples() {
        let (out, _) = normalize_members(&[vec![0.0, 2.0, 4.0]], NormMode::MinMax, false).unwrap();
        assert_eq!(out, vec![0.0, 0.5, 1.0]);
        assert!(matches!(
            normalize_members(&[vec![0.0, 1.0], vec![3.0, 3.0]], NormMode::MinMax, false),
            Err(Error::DegenerateMember { member: 1, value: 3.0 })
        ));
        let (out, _) = normalize_members(&[vec![0.0, 1.0], vec![3.0, 3.0]], NormMode::MinMax, true).unwrap();
        assert_eq!(out, vec![0.0, 0.5]);
    }

    #[test]
    fn single_pair_overfits() {
        let d = toy_dataset();
        let prefs = PreferenceDataset {
            header: crate::dataset::PreferenceHeader {
                mode: AnnotationMode::Deterministic,
                seed: 0,
                segment_len: 1,
                count: 1,
                config_hash: None,
            },
            pairs: vec![PreferencePair::new(seg("a"), seg("b"), 1.0).unwrap()],
        };
        let cfg = RewardConfig {
            hidden: vec![16, 16, 16],
            ..RewardConfig::default()
        };
        let ens = train_ensemble(&d, &prefs, &cfg, 1).unwrap();
        let prepared = PreparedPrefs::new(&d, &prefs).unwrap();
        for (m, rep) in ens.members.iter().zip(&ens.reports) {
            assert!(rep.reached_threshold);
            let (s0, s1) = prepared.sums(m).unwrap()[0];
            assert!(preference_from_sums(s0, s1) > 0.5);
        }
        let again = train_ensemble(&d, &prefs, &cfg, 1).unwrap();
        for (a, b) in ens.members.iter().zip(&again.members) {
            assert_eq!(a.params, b.params);
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let d = toy_dataset();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut ens = RewardEnsemble {
            members: vec![RewardNet::new(3, &[4], &mut rng), RewardNet::new(3, &[4], &mut rng)],
            stats: None,
            mode: NormMode::MinMax,
            seed: 2,
            reports: vec![],
        };
        let relabeled = ensemble_normalize_and_relabel(&mut ens, &d, false).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let (b, s) = (dir.path().join("r.bin"), dir.path().join("r.json"));
        ens.save(&b, &s, Some("abc")).unwrap();
        let (back, side) = RewardEnsemble::load(&b, &s).unwrap();
        assert_eq!(side.config_hash.as_deref(), Some("abc"));
        let flat: Vec<f64> = relabeled.trajectories().iter().flat_map(|t| t.rewards.clone()).collect();
        assert_eq!(back.predict(&dataset_rows(&d)).unwrap(), flat);
    }
}
