//! Exact oracles over tabular environments: value iteration, Q restricted to
//! dataset actions, exhaustive trajectory enumeration, and a brute-force
//! pessimistic maximum-likelihood reward demo.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::dataset::OfflineDataset;
use crate::env::{argmax, Next, TabularMdp, TabularEpisode};
use crate::error::{Error, Result};
use crate::tensor::softplus;

pub const BELLMAN_TOLERANCE: f64 = 1e-10;
pub const ENUMERATION_BUDGET: usize = 1_000_000;
const MAX_SWEEPS: usize = 1_000_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DpSolution {
    /// Row-major `[state][action]`.
    pub q: Vec<f64>,
    pub v: Vec<f64>,
    /// Lowest-index maximizer of `q` per state.
    pub greedy: Vec<usize>,
    pub gamma: f64,
}

impl DpSolution {
    pub fn q(&self, mdp: &TabularMdp, s: usize, a: usize) -> f64 {
        self.q[mdp.idx(s, a)]
    }

    /// States visited by the greedy policy from `start`.
    pub fn greedy_path(&self, mdp: &TabularMdp, start: usize) -> Vec<usize> {
        let actions: Vec<usize> = {
            let mut s = start;
            let mut acts = Vec::new();
            for _ in 0..mdp.horizon {
                if mdp.is_terminal(s) {
                    break;
                }
                let a = self.greedy[s];
                acts.push(a);
                match mdp.next(s, a) {
                    Next::State(n) => s = n,
                    Next::Terminal => break,
                }
            }
            acts
        };
        mdp.replay(start, &actions)
    }
}

fn successor_value(mdp: &TabularMdp, next: Next, v: &[f64]) -> f64 {
    match next {
        Next::State(n) if !mdp.is_terminal(n) => v[n],
        _ => 0.0,
    }
}

/// True if following non-terminal transitions can revisit a state.
pub fn has_cycle(mdp: &TabularMdp) -> bool {
    // 0 = unvisited, 1 = on stack, 2 = done
    let n = mdp.num_states();
    let mut mark = vec![0u8; n];
    for root in 0..n {
        if mark[root] != 0 {
            continue;
        }
        let mut stack = vec![(root, 0usize)];
        mark[root] = 1;
        while let Some(&mut (s, ref mut a)) = stack.last_mut() {
            if mdp.is_terminal(s) || *a == mdp.num_actions {
                mark[s] = 2;
                stack.pop();
                continue;
            }
            let next = mdp.next(s, *a);
            *a += 1;
            if let Next::State(t) = next {
                if mdp.is_terminal(t) {
                    continue;
                }
                match mark[t] {
                    1 => return true,
                    0 => {
                        mark[t] = 1;
                        stack.push((t, 0));
                    }
                    _ => {}
                }
            }
        }
    }
    false
}

/// Sup-norm Bellman residual of `v` under optimal backups.
pub fn bellman_residual(mdp: &TabularMdp, rewards: &[f64], gamma: f64, v: &[f64]) -> f64 {
    let mut worst: f64 = 0.0;
    for s in 0..mdp.num_states() {
        if mdp.is_terminal(s) {
            continue;
        }
        let best = (0..mdp.num_actions)
            .map(|a| rewards[mdp.idx(s, a)] + gamma * successor_value(mdp, mdp.next(s, a), v))
            .fold(f64::NEG_INFINITY, f64::max);
        worst = worst.max((best - v[s]).abs());
    }
    worst
}

/// Optimal Q and V by repeated Bellman backups. Terminal states have value 0.
pub fn value_iteration(mdp: &TabularMdp, rewards: &[f64], gamma: f64) -> Result<DpSolution> {
    mdp.validate()?;
    if rewards.len() != mdp.rewards.len() {
        return Err(Error::InvalidArgument("reward table size differs from the MDP".into()));
    }
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(Error::InvalidArgument(format!("discount {gamma} outside (0, 1]")));
    }
    if gamma == 1.0 && has_cycle(mdp) {
        return Err(Error::NonTerminating);
    }
    let (ns, na) = (mdp.num_states(), mdp.num_actions);
    let mut v = vec![0.0; ns];
    let mut q = vec![0.0; ns * na];
    for _ in 0..MAX_SWEEPS {
        let mut delta: f64 = 0.0;
        for s in 0..ns {
            for a in 0..na {
                let i = mdp.idx(s, a);
                q[i] = if mdp.is_terminal(s) {
                    0.0
                } else {
                    rewards[i] + gamma * successor_value(mdp, mdp.next(s, a), &v)
                };
            }
            let nv = if mdp.is_terminal(s) {
                0.0
            } else {
                q[s * na..(s + 1) * na].iter().copied().fold(f64::NEG_INFINITY, f64::max)
            };
            delta = delta.max((nv - v[s]).abs());
            v[s] = nv;
        }
        if delta == 0.0 || (delta < BELLMAN_TOLERANCE * 1e-2 && bellman_residual(mdp, rewards, gamma, &v) < BELLMAN_TOLERANCE) {
            break;
        }
    }
    if bellman_residual(mdp, rewards, gamma, &v) >= BELLMAN_TOLERANCE {
        return Err(Error::Diverged {
            what: "value iteration".into(),
            step: MAX_SWEEPS,
        });
    }
    let greedy = (0..ns).map(|s| argmax(&q[s * na..(s + 1) * na])).collect();
    Ok(DpSolution { q, v, greedy, gamma })
}

/// Q over the `(state, action)` pairs present in `episodes`, bootstrapping
/// only through actions the dataset takes at the successor. A successor with
/// no recorded action contributes 0.
pub fn dataset_constrained_q(mdp: &TabularMdp, rewards: &[f64], gamma: f64, episodes: &[TabularEpisode]) -> Result<BTreeMap<(usize, usize), f64>> {
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(Error::InvalidArgument(format!("discount {gamma} outside (0, 1]")));
    }
    let pairs: BTreeSet<(usize, usize)> = episodes
        .iter()
        .flat_map(|e| e.states.iter().copied().zip(e.actions.iter().copied()))
        .collect();
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("no dataset pairs".into()));
    }
    let mut by_state: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for &(s, a) in &pairs {
        by_state.entry(s).or_default().push(a);
    }
    if gamma == 1.0 && has_cycle(mdp) {
        return Err(Error::NonTerminating);
    }
    let mut q: BTreeMap<(usize, usize), f64> = pairs.iter().map(|&p| (p, 0.0)).collect();
    for sweep in 0..MAX_SWEEPS {
        let mut delta: f64 = 0.0;
        for &(s, a) in &pairs {
            let boot = match mdp.next(s, a) {
                Next::State(n) if !mdp.is_terminal(n) => by_state
                    .get(&n)
                    .map(|acts| acts.iter().map(|&b| q[&(n, b)]).fold(f64::NEG_INFINITY, f64::max))
                    .unwrap_or(0.0),
                _ => 0.0,
            };
            let nq = rewards[mdp.idx(s, a)] + gamma * boot;
            let slot = q.get_mut(&(s, a)).expect("pair present");
            delta = delta.max((nq - *slot).abs());
            *slot = nq;
        }
        if delta < BELLMAN_TOLERANCE * 1e-2 {
            return Ok(q);
        }
        if sweep + 1 == MAX_SWEEPS {
            break;
        }
    }
    Err(Error::Diverged {
        what: "dataset-constrained Q".into(),
        step: MAX_SWEEPS,
    })
}

/// Highest return-to-go at the first visit of `start` over all trajectories,
/// with the winning trajectory id. States are decoded by argmax.
pub fn best_in_dataset_return(dataset: &OfflineDataset, start: usize) -> Result<(f64, String)> {
    let mut best: Option<(f64, String)> = None;
    for t in dataset.trajectories() {
        if let Some(i) = t.states.iter().position(|s| argmax(s) == start) {
            let r = t.rtg()[i];
            if best.as_ref().is_none_or(|b| r > b.0) {
                best = Some((r, t.id.clone()));
            }
        }
    }
    best.ok_or(Error::StateAbsent(start))
}

/// Every feasible trajectory from `start`, keyed by its state path, with the
/// best return among action sequences producing that path.
pub fn enumerate_returns(mdp: &TabularMdp, rewards: &[f64], start: usize) -> Result<BTreeMap<Vec<usize>, f64>> {
    enumerate_returns_with_budget(mdp, rewards, start, ENUMERATION_BUDGET)
}

pub fn enumerate_returns_with_budget(mdp: &TabularMdp, rewards: &[f64], start: usize, budget: usize) -> Result<BTreeMap<Vec<usize>, f64>> {
    if start >= mdp.num_states() {
        return Err(Error::InvalidArgument(format!("start state {start} out of range")));
    }
    let mut out: BTreeMap<Vec<usize>, f64> = BTreeMap::new();
    let mut leaves = 0usize;
    let mut stack = vec![(vec![start], 0.0f64)];
    while let Some((path, ret)) = stack.pop() {
        let s = *path.last().expect("non-empty path");
        let steps = path.len() - 1;
        if mdp.is_terminal(s) || steps == mdp.horizon {
            leaves += 1;
            if leaves > budget {
                return Err(Error::EnumerationBudget(budget));
            }
            let e = out.entry(path).or_insert(f64::NEG_INFINITY);
            *e = e.max(ret);
            continue;
        }
        for a in (0..mdp.num_actions).rev() {
            let r = ret + rewards[mdp.idx(s, a)];
            match mdp.next(s, a) {
                Next::State(n) => {
                    let mut p = path.clone();
                    p.push(n);
                    stack.push((p, r));
                }
                Next::Terminal => {
                    leaves += 1;
                    if leaves > budget {
                        return Err(Error::EnumerationBudget(budget));
                    }
                    let e = out.entry(path.clone()).or_insert(f64::NEG_INFINITY);
                    *e = e.max(r);
                }
            }
        }
    }
    Ok(out)
}

/// A lattice of reward tables. Each edge is a group of `[state][action]`
/// table entries sharing one value drawn from `values`; entries outside every
/// group keep `base`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardLattice {
    pub edges: Vec<Vec<usize>>,
    pub values: Vec<f64>,
    pub base: Vec<f64>,
}

impl RewardLattice {
    pub fn len(&self) -> usize {
        self.values.len().pow(self.edges.len() as u32)
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Edge values of candidate `i`; the first edge is the most significant digit.
    pub fn candidate(&self, i: usize) -> Vec<f64> {
        let k = self.values.len();
        let mut digits = vec![0; self.edges.len()];
        let mut rest = i;
        for d in digits.iter_mut().rev() {
            *d = rest % k;
            rest /= k;
        }
        digits.into_iter().map(|d| self.values[d]).collect()
    }

    pub fn table(&self, i: usize) -> Vec<f64> {
        let mut t = self.base.clone();
        for (edge, v) in self.edges.iter().zip(self.candidate(i)) {
            for &e in edge {
                t[e] = v;
            }
        }
        t
    }

    pub fn index_of(&self, edge_values: &[f64]) -> Option<usize> {
        if edge_values.len() != self.edges.len() {
            return None;
        }
        let k = self.values.len();
        let mut idx = 0;
        for v in edge_values {
            idx = idx * k + self.values.iter().position(|x| x == v)?;
        }
        Some(idx)
    }
}

/// The six edges of the stitching example as a lattice over `values`.
pub fn figure1_lattice(values: Vec<f64>) -> RewardLattice {
    use crate::env::figure1::*;
    let m = mdp();
    RewardLattice {
        edges: vec![
            vec![m.idx(S1, 0)],
            vec![m.idx(S1, 1)],
            vec![m.idx(S2, 0), m.idx(S2, 1)],
            vec![m.idx(S3, 0), m.idx(S3, 1)],
            vec![m.idx(S4, 0)],
            vec![m.idx(S4, 1)],
        ],
        values,
        base: vec![0.0; m.rewards.len()],
    }
}

/// A comparison between two segments given as lists of table entries.
/// `y` is the probability that `seg1` is preferred.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TabularPreference {
    pub seg0: Vec<usize>,
    pub seg1: Vec<usize>,
    pub y: f64,
}

/// Bradley–Terry log-likelihood of the preferences under a reward table.
pub fn log_likelihood(prefs: &[TabularPreference], table: &[f64]) -> f64 {
    prefs
        .iter()
        .map(|p| {
            let r0: f64 = p.seg0.iter().map(|&i| table[i]).sum();
            let r1: f64 = p.seg1.iter().map(|&i| table[i]).sum();
            -(p.y * softplus(r0 - r1) + (1.0 - p.y) * softplus(r1 - r0))
        })
        .sum()
}

/// Slack `ln(n / delta)` for a finite class of `n` candidates.
pub fn confidence_slack(n: usize, delta: f64) -> f64 {
    (n as f64 / delta).ln()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceSet {
    pub loglik: Vec<f64>,
    pub zeta: f64,
    /// First maximizer of the log-likelihood.
    pub mle: usize,
    pub members: Vec<bool>,
}

impl ConfidenceSet {
    pub fn build(lattice: &RewardLattice, prefs: &[TabularPreference], zeta: f64) -> Result<Self> {
        if !(zeta >= 0.0) {
            return Err(Error::InvalidArgument(format!("slack {zeta} must be >= 0")));
        }
        let loglik: Vec<f64> = (0..lattice.len()).map(|i| log_likelihood(prefs, &lattice.table(i))).collect();
        let mle = argmax(&loglik);
        let mut set = Self {
            loglik,
            zeta,
            mle,
            members: Vec::new(),
        };
        set.members = set.membership(zeta);
        Ok(set)
    }

    fn membership(&self, zeta: f64) -> Vec<bool> {
        let floor = self.loglik[self.mle] - zeta;
        self.loglik.iter().map(|&l| l >= floor).collect()
    }

    /// The same likelihoods with a different slack.
    pub fn with_slack(&self, zeta: f64) -> Self {
        let mut s = self.clone();
        s.zeta = zeta;
        s.members = self.membership(zeta);
        s
    }

    pub fn member_indices(&self) -> Vec<usize> {
        (0..self.members.len()).filter(|&i| self.members[i]).collect()
    }

    pub fn contains(&self, i: usize) -> bool {
        self.members.get(i).copied().unwrap_or(false)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PessimisticSolution {
    /// Action per state (terminal states carry 0).
    pub policy: Vec<usize>,
    /// Least favorable member for the chosen policy.
    pub psi_tilde: usize,
    pub objective: f64,
    pub set: ConfidenceSet,
}

/// Undiscounted return of a deterministic policy averaged over the initial states.
pub fn policy_value(mdp: &TabularMdp, table: &[f64], policy: &[usize]) -> f64 {
    let total: f64 = mdp
        .initial_states
        .iter()
        .map(|&s0| {
            let mut s = s0;
            let mut ret = 0.0;
            for _ in 0..mdp.horizon {
                if mdp.is_terminal(s) {
                    break;
                }
                let a = policy[s];
                ret += table[mdp.idx(s, a)];
                match mdp.next(s, a) {
                    Next::State(n) => s = n,
                    Next::Terminal => break,
                }
            }
            ret
        })
        .sum();
    total / mdp.initial_states.len() as f64
}

/// Every deterministic policy over the non-terminal states, in lexicographic order.
pub fn enumerate_policies(mdp: &TabularMdp) -> Result<Vec<Vec<usize>>> {
    let free: Vec<usize> = (0..mdp.num_states()).filter(|&s| !mdp.is_terminal(s)).collect();
    let count = (mdp.num_actions as f64).powi(free.len() as i32);
    if count > ENUMERATION_BUDGET as f64 {
        return Err(Error::EnumerationBudget(ENUMERATION_BUDGET));
    }
    let mut out = Vec::with_capacity(count as usize);
    for mut code in 0..count as usize {
        let mut p = vec![0; mdp.num_states()];
        for &s in free.iter().rev() {
            p[s] = code % mdp.num_actions;
            code /= mdp.num_actions;
        }
        out.push(p);
    }
    Ok(out)
}

/// Solves `max_pi min_{psi in set} V_psi(pi) - E_ref[r_psi]` by enumeration.
/// `reference` lists trajectories (as table entries) drawn from the reference
/// distribution, each with equal weight. Ties go to the earlier policy and
/// the earlier candidate.
pub fn pessimistic_mle_demo(
    mdp: &TabularMdp,
    lattice: &RewardLattice,
    prefs: &[TabularPreference],
    zeta: f64,
    reference: &[Vec<usize>],
) -> Result<PessimisticSolution> {
    if reference.is_empty() {
        return Err(Error::InvalidArgument("reference distribution is empty".into()));
    }
    let set = ConfidenceSet::build(lattice, prefs, zeta)?;
    let members = set.member_indices();
    assert!(set.contains(set.mle), "maximum-likelihood candidate must be a member");
    let tables: Vec<(usize, Vec<f64>, f64)> = members
        .iter()
        .map(|&i| {
            let t = lattice.table(i);
            let baseline = reference.iter().map(|tr| tr.iter().map(|&e| t[e]).sum::<f64>()).sum::<f64>() / reference.len() as f64;
            (i, t, baseline)
        })
        .collect();
    let mut best: Option<(f64, Vec<usize>, usize)> = None;
    for pi in enumerate_policies(mdp)? {
        let mut worst = (f64::INFINITY, 0);
        for (i, t, baseline) in &tables {
            let obj = policy_value(mdp, t, &pi) - baseline;
            if obj < worst.0 {
                worst = (obj, *i);
            }
        }
        if best.as_ref().is_none_or(|b| worst.0 > b.0) {
            best = Some((worst.0, pi, worst.1));
        }
    }
    let (objective, policy, psi_tilde) = best.expect("at least one policy");
    Ok(PessimisticSolution {
        policy,
        psi_tilde,
        objective,
        set,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{build_gridworld, figure1::*};

    #[test]
    fn figure1_greedy_choices() {
        let m = mdp();
        let gt = value_iteration(&m, &m.rewards, 1.0).unwrap();
        assert_eq!(gt.greedy_path(&m, S1), vec![S1, S3, S5]);
        let b = value_iteration(&m, &biased_rewards(), 1.0).unwrap();
        assert_eq!(b.greedy_path(&m, S1), vec![S1, S4, S5]);
        assert!(bellman_residual(&m, &biased_rewards(), 1.0, &b.v) < BELLMAN_TOLERANCE);
    }

    #[test]
    fn self_loop_geometric_series() {
        let m = TabularMdp {
            name: "loop".into(),
            state_names: vec!["s".into()],
            num_actions: 1,
            transitions: vec![Next::State(0)],
            rewards: vec![1.0],
            terminal_states: vec![false],
            initial_states: vec![0],
            horizon: 1000,
        };
        let sol = value_iteration(&m, &m.rewards, 0.5).unwrap();
        assert!((sol.v[0] - 2.0).abs() < 1e-10);
        assert!(matches!(value_iteration(&m, &m.rewards, 1.0), Err(Error::NonTerminating)));
    }

    #[test]
    fn gridworld_path_length_is_manhattan() {
        let g = build_gridworld(8, 8, 63, &[], 0.0).unwrap();
        let sol = value_iteration(&g, &g.rewards, 0.9).unwrap();
        let path = sol.greedy_path(&g, 0);
        assert_eq!(path.len() - 1, 14);
        assert_eq!(*path.last().unwrap(), 63);
    }

    #[test]
    fn walled_goal_falls_back_to_wandering() {
        // goal at 8 in a 3x3 grid, walled off by traps at 5 and 7
        let g = build_gridworld(3, 3, 8, &[5, 7], -0.1).unwrap();
        let sol = value_iteration(&g, &g.rewards, 0.9).unwrap();
        // wandering forever costs -0.1 / (1 - 0.9) = -1, same as a trap; never positive
        assert!(sol.v[0] <= 0.0);
        assert!((sol.v[0] - (-1.0)).abs() < 1e-9);
    }

    #[test]
    fn enumeration_from_s1() {
        let m = mdp();
        let all = enumerate_returns(&m, &m.rewards, S1).unwrap();
        let paths: Vec<_> = all.keys().cloned().collect();
        assert_eq!(paths, vec![vec![S1, S3, S5], vec![S1, S4, S5], vec![S1, S4, S6]]);
        let vi = value_iteration(&m, &m.rewards, 1.0).unwrap();
        let best = all.values().copied().fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(vi.v[S1], best);
        assert!(matches!(
            enumerate_returns_with_budget(&m, &m.rewards, S1, 2),
            Err(Error::EnumerationBudget(2))
        ));
    }

    #[test]
    fn policy_enumeration_size() {
        assert_eq!(enumerate_policies(&mdp()).unwrap().len(), 16);
    }

    #[test]
    fn lattice_indexing() {
        let l = figure1_lattice(vec![0.5, 1.0, 1.5, 2.0]);
        assert_eq!(l.len(), 4096);
        let gt = [R13, R14, R24, R35, R45, R46];
        let i = l.index_of(&gt).unwrap();
        assert_eq!(l.candidate(i), gt.to_vec());
        assert_eq!(l.table(i), mdp().rewards);
    }

    #[test]
    fn confidence_set_boundaries() {
        let l = RewardLattice {
            edges: vec![vec![0], vec![1]],
            values: vec![0.0, 1.0, 2.0],
            base: vec![0.0, 0.0],
        };
        let prefs = vec![
            TabularPreference { seg0: vec![0], seg1: vec![1], y: 1.0 },
            TabularPreference { seg0: vec![0], seg1: vec![1], y: 1.0 },
            TabularPreference { seg0: vec![0], seg1: vec![1], y: 0.0 },
        ];
        let set = ConfidenceSet::build(&l, &prefs, 0.0).unwrap();
        assert!(set.contains(set.mle));
        let all = set.with_slack(1e9);
        assert_eq!(all.member_indices().len(), l.len());
        let mid = set.with_slack(0.5);
        for i in set.member_indices() {
            assert!(mid.contains(i));
        }
    }
}
