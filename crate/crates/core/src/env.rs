//! Deterministic tabular environments, a continuous encoding for them, and
//! behavior policies that generate offline datasets.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Trajectory;
use crate::error::{Error, Result};
use crate::oracle;

/// Result of taking an action.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Next {
    State(usize),
    /// Sentinel: the episode ends without a successor state.
    Terminal,
}

/// A deterministic finite MDP with a ground-truth reward table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TabularMdp {
    pub name: String,
    pub state_names: Vec<String>,
    pub num_actions: usize,
    /// Row-major `[state][action]`.
    pub transitions: Vec<Next>,
    /// Row-major `[state][action]`.
    pub rewards: Vec<f64>,
    /// Entering one of these ends the episode.
    pub terminal_states: Vec<bool>,
    pub initial_states: Vec<usize>,
    pub horizon: usize,
}

/// Outcome of [`TabularMdp::step`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Step {
    pub next: Next,
    pub reward: f64,
    pub done: bool,
}

impl TabularMdp {
    pub fn num_states(&self) -> usize {
        self.state_names.len()
    }

    pub fn idx(&self, s: usize, a: usize) -> usize {
        s * self.num_actions + a
    }

    pub fn next(&self, s: usize, a: usize) -> Next {
        self.transitions[self.idx(s, a)]
    }

    pub fn reward(&self, s: usize, a: usize) -> f64 {
        self.rewards[self.idx(s, a)]
    }

    pub fn is_terminal(&self, s: usize) -> bool {
        self.terminal_states[s]
    }

    /// Steps with the ground-truth reward table.
    pub fn step(&self, s: usize, a: usize) -> Step {
        self.step_with(&self.rewards, s, a)
    }

    pub fn step_with(&self, rewards: &[f64], s: usize, a: usize) -> Step {
        let next = self.next(s, a);
        let done = match next {
            Next::Terminal => true,
            Next::State(n) => self.terminal_states[n],
        };
        Step {
            next,
            reward: rewards[self.idx(s, a)],
            done,
        }
    }

    /// Replaces the ground-truth reward table.
    pub fn with_rewards(mut self, rewards: Vec<f64>) -> Result<Self> {
        if rewards.len() != self.rewards.len() {
            return Err(Error::InvalidEnv(format!(
                "reward table has {} entries, expected {}",
                rewards.len(),
                self.rewards.len()
            )));
        }
        self.rewards = rewards;
        Ok(self)
    }

    pub fn with_initial_states(mut self, states: Vec<usize>) -> Result<Self> {
        if states.is_empty() || states.iter().any(|&s| s >= self.num_states() || self.terminal_states[s]) {
            return Err(Error::InvalidEnv("invalid initial state set".into()));
        }
        self.initial_states = states;
        Ok(self)
    }

    pub fn with_horizon(mut self, horizon: usize) -> Self {
        self.horizon = horizon;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let (s, a) = (self.num_states(), self.num_actions);
        if self.transitions.len() != s * a || self.rewards.len() != s * a || self.terminal_states.len() != s {
            return Err(Error::InvalidEnv("table sizes disagree".into()));
        }
        if let Some(bad) = self.transitions.iter().find(|n| matches!(n, Next::State(k) if *k >= s)) {
            return Err(Error::InvalidEnv(format!("transition to invalid state {bad:?}")));
        }
        if self.rewards.iter().any(|r| !r.is_finite()) {
            return Err(Error::InvalidEnv("non-finite reward".into()));
        }
        if self.initial_states.is_empty() || self.initial_states.iter().any(|&i| i >= s) {
            return Err(Error::InvalidEnv("invalid initial state set".into()));
        }
        if self.horizon == 0 {
            return Err(Error::InvalidEnv("horizon must be positive".into()));
        }
        Ok(())
    }

    pub fn state_index(&self, name: &str) -> Option<usize> {
        self.state_names.iter().position(|n| n == name)
    }

    /// Follows `actions` from `start`, returning the visited states including
    /// the final one. Stops early if the episode ends.
    pub fn replay(&self, start: usize, actions: &[usize]) -> Vec<usize> {
        let mut path = vec![start];
        let mut s = start;
        for &a in actions {
            match self.next(s, a) {
                Next::Terminal => break,
                Next::State(n) => {
                    path.push(n);
                    s = n;
                    if self.terminal_states[n] {
                        break;
                    }
                }
            }
        }
        path
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("mdp serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let mdp: TabularMdp = serde_json::from_str(text).map_err(|e| Error::Parse {
            path: "<mdp>".into(),
            line: e.line(),
            msg: e.to_string(),
        })?;
        mdp.validate()?;
        Ok(mdp)
    }
}

/// The six-state stitching example.
///
/// States `s1..s6` are indices `0..6`; `s5` and `s6` are terminal. Two
/// actions everywhere: from `s1`, action 0 goes to `s3` and action 1 to `s4`;
/// from `s4`, action 0 goes to `s5` and action 1 to `s6`; `s2` and `s3` have a
/// single successor reached by either action.
pub mod figure1 {
    use super::*;

    pub const S1: usize = 0;
    pub const S2: usize = 1;
    pub const S3: usize = 2;
    pub const S4: usize = 3;
    pub const S5: usize = 4;
    pub const S6: usize = 5;

    pub const R13: f64 = 1.5;
    pub const R14: f64 = 1.0;
    pub const R24: f64 = 2.0;
    pub const R35: f64 = 2.0;
    pub const R45: f64 = 2.0;
    pub const R46: f64 = 1.0;
    /// Overestimated `s4 -> s5` reward used to provoke optimistic stitching.
    pub const BIASED_R45: f64 = 3.0;

    pub fn mdp() -> TabularMdp {
        use Next::{State, Terminal};
        let transitions = vec![
            State(S3), State(S4), // s1
            State(S4), State(S4), // s2
            State(S5), State(S5), // s3
            State(S5), State(S6), // s4
            Terminal, Terminal,   // s5
            Terminal, Terminal,   // s6
        ];
        let rewards = vec![R13, R14, R24, R24, R35, R35, R45, R46, 0.0, 0.0, 0.0, 0.0];
        TabularMdp {
            name: "figure1".into(),
            state_names: (1..=6).map(|i| format!("s{i}")).collect(),
            num_actions: 2,
            transitions,
            rewards,
            terminal_states: vec![false, false, false, false, true, true],
            initial_states: vec![S1, S2],
            horizon: 2,
        }
    }

    /// Ground truth with `r(s4 -> s5)` inflated to [`BIASED_R45`].
    pub fn biased_rewards() -> Vec<f64> {
        let m = mdp();
        let mut r = m.rewards.clone();
        r[m.idx(S4, 0)] = BIASED_R45;
        r
    }

    /// The four in-dataset trajectories as `(name, start, actions)`.
    pub fn scripted() -> Vec<(&'static str, usize, Vec<usize>)> {
        vec![
            ("red", S1, vec![0, 0]),
            ("yellow", S1, vec![1, 1]),
            ("green", S2, vec![0, 0]),
            ("purple", S2, vec![0, 1]),
        ]
    }

    /// Pairs `(seg0, seg1)` with `seg1` the preferred trajectory, mirroring the
    /// four comparisons of the toy preference set.
    pub fn preference_orderings() -> Vec<(&'static str, &'static str)> {
        vec![("yellow", "red"), ("yellow", "green"), ("red", "green"), ("purple", "red")]
    }
}

/// Builds a 4-action gridworld. Cells are indexed `y * width + x`; actions are
/// up, down, left, right; moving into a wall leaves the agent in place.
/// Entering the goal pays +1 and entering a trap pays -1, both terminal.
pub fn build_gridworld(width: usize, height: usize, goal: usize, traps: &[usize], step_penalty: f64) -> Result<TabularMdp> {
    let n = width * height;
    if n == 0 || n > 4096 {
        return Err(Error::InvalidEnv(format!("grid of {n} cells outside 1..=4096")));
    }
    if goal >= n {
        return Err(Error::InvalidEnv(format!("goal {goal} outside grid")));
    }
    if traps.contains(&goal) {
        return Err(Error::InvalidEnv("goal is also a trap".into()));
    }
    if let Some(t) = traps.iter().find(|&&t| t >= n) {
        return Err(Error::InvalidEnv(format!("trap {t} outside grid")));
    }
    let mut terminal = vec![false; n];
    terminal[goal] = true;
    for &t in traps {
        terminal[t] = true;
    }
    let mut transitions = Vec::with_capacity(n * 4);
    let mut rewards = Vec::with_capacity(n * 4);
    for s in 0..n {
        let (x, y) = (s % width, s / width);
        for a in 0..4 {
            if terminal[s] {
                transitions.push(Next::Terminal);
                rewards.push(0.0);
                continue;
            }
            let (nx, ny) = match a {
                0 => (x, y.saturating_sub(1)),
                1 => (x, (y + 1).min(height - 1)),
                2 => (x.saturating_sub(1), y),
                _ => ((x + 1).min(width - 1), y),
            };
            let ns = ny * width + nx;
            transitions.push(Next::State(ns));
            rewards.push(if ns == goal {
                1.0
            } else if traps.contains(&ns) {
                -1.0
            } else {
                step_penalty
            });
        }
    }
    let start = (0..n).find(|&s| !terminal[s]).unwrap_or(0);
    Ok(TabularMdp {
        name: format!("grid{width}x{height}"),
        state_names: (0..n).map(|s| format!("c{s}")).collect(),
        num_actions: 4,
        transitions,
        rewards,
        terminal_states: terminal,
        initial_states: vec![start],
        horizon: 4 * (width + height),
    })
}

/// One-hot state encoding with additive uniform noise, one-hot actions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StateCodec {
    pub num_states: usize,
    pub num_actions: usize,
    pub noise: f64,
}

impl StateCodec {
    pub fn new(mdp: &TabularMdp) -> Self {
        Self {
            num_states: mdp.num_states(),
            num_actions: mdp.num_actions,
            noise: 0.01,
        }
    }

    pub fn state_dim(&self) -> usize {
        self.num_states
    }

    pub fn action_dim(&self) -> usize {
        self.num_actions
    }

    pub fn encode_state<R: Rng + ?Sized>(&self, s: usize, rng: &mut R) -> Vec<f64> {
        (0..self.num_states)
            .map(|i| {
                let base = if i == s { 1.0 } else { 0.0 };
                if self.noise > 0.0 {
                    base + rng.gen_range(-self.noise..self.noise)
                } else {
                    base
                }
            })
            .collect()
    }

    pub fn decode_state(&self, v: &[f64]) -> usize {
        argmax(v)
    }

    pub fn encode_action(&self, a: usize) -> Vec<f64> {
        (0..self.num_actions).map(|i| if i == a { 1.0 } else { 0.0 }).collect()
    }

    /// Nearest valid action embedding by Euclidean distance.
    pub fn decode_action(&self, v: &[f64]) -> usize {
        let mut best = (0, f64::INFINITY);
        for a in 0..self.num_actions {
            let d: f64 = v
                .iter()
                .enumerate()
                .map(|(i, x)| {
                    let e = if i == a { 1.0 } else { 0.0 };
                    (x - e) * (x - e)
                })
                .sum();
            if d < best.1 {
                best = (a, d);
            }
        }
        best.0
    }

    /// Every valid action embedding, in action order.
    pub fn action_set(&self) -> Vec<Vec<f64>> {
        (0..self.num_actions).map(|a| self.encode_action(a)).collect()
    }
}

/// First index of the maximum.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq)]
pub enum BehaviorPolicy {
    UniformRandom,
    /// Greedy with respect to an optimal Q table, random with probability epsilon.
    EpsilonOptimal { epsilon: f64, greedy: Vec<usize> },
    /// Replays fixed `(start, actions)` scripts in order, cycling.
    Scripted(Vec<(usize, Vec<usize>)>),
}

impl BehaviorPolicy {
    pub fn epsilon_optimal(mdp: &TabularMdp, epsilon: f64, gamma: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&epsilon) {
            return Err(Error::InvalidArgument(format!("epsilon {epsilon} outside [0, 1]")));
        }
        let sol = oracle::value_iteration(mdp, &mdp.rewards, gamma)?;
        Ok(BehaviorPolicy::EpsilonOptimal {
            epsilon,
            greedy: sol.greedy,
        })
    }

    pub fn scripted(mdp: &TabularMdp, scripts: Vec<(usize, Vec<usize>)>) -> Result<Self> {
        for (start, actions) in &scripts {
            let path = mdp.replay(*start, actions);
            if path.len() != actions.len() + 1 || actions.iter().any(|&a| a >= mdp.num_actions) {
                return Err(Error::InvalidArgument(format!(
                    "script from state {start} is not valid under the transition table"
                )));
            }
        }
        Ok(BehaviorPolicy::Scripted(scripts))
    }
}

/// A trajectory on the tabular MDP before encoding.
#[derive(Clone, Debug, PartialEq)]
pub struct TabularEpisode {
    pub states: Vec<usize>,
    pub actions: Vec<usize>,
    pub rewards: Vec<f64>,
    pub terminals: Vec<bool>,
}

/// Runs `count` episodes. Deterministic given `seed`.
pub fn rollout_tabular(mdp: &TabularMdp, policy: &BehaviorPolicy, seed: u64, count: usize) -> Result<Vec<TabularEpisode>> {
    if count == 0 {
        return Err(Error::InvalidArgument("rollout count must be >= 1".into()));
    }
    mdp.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    for ep in 0..count {
        let (start, script) = match policy {
            BehaviorPolicy::Scripted(s) => {
                let (st, acts) = &s[ep % s.len()];
                (*st, Some(acts))
            }
            _ => (mdp.initial_states[rng.gen_range(0..mdp.initial_states.len())], None),
        };
        let mut e = TabularEpisode {
            states: Vec::new(),
            actions: Vec::new(),
            rewards: Vec::new(),
            terminals: Vec::new(),
        };
        let mut s = start;
        for t in 0..mdp.horizon {
            let a = match (policy, script) {
                (_, Some(acts)) => match acts.get(t) {
                    Some(&a) => a,
                    None => break,
                },
                (BehaviorPolicy::UniformRandom, _) => rng.gen_range(0..mdp.num_actions),
                (BehaviorPolicy::EpsilonOptimal { epsilon, greedy }, _) => {
                    if rng.gen::<f64>() < *epsilon {
                        rng.gen_range(0..mdp.num_actions)
                    } else {
                        greedy[s]
                    }
                }
                (BehaviorPolicy::Scripted(_), None) => unreachable!(),
            };
            let st = mdp.step(s, a);
            e.states.push(s);
            e.actions.push(a);
            e.rewards.push(st.reward);
            e.terminals.push(st.done);
            match st.next {
                Next::State(n) if !st.done => s = n,
                _ => break,
            }
        }
        out.push(e);
    }
    Ok(out)
}

/// Encodes tabular episodes into trajectories with ids `{prefix}-{i}`.
pub fn encode_episodes(codec: &StateCodec, episodes: &[TabularEpisode], prefix: &str, seed: u64) -> Result<Vec<Trajectory>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_c0de);
    episodes
        .iter()
        .enumerate()
        .map(|(i, e)| {
            let states = e.states.iter().map(|&s| codec.encode_state(s, &mut rng)).collect();
            let actions = e.actions.iter().map(|&a| codec.encode_action(a)).collect();
            Trajectory::new(format!("{prefix}-{i}"), states, actions, e.rewards.clone(), e.terminals.clone())
        })
        .collect()
}

/// Rolls out and encodes in one go.
pub fn rollout(mdp: &TabularMdp, codec: &StateCodec, policy: &BehaviorPolicy, seed: u64, count: usize) -> Result<Vec<Trajectory>> {
    let eps = rollout_tabular(mdp, policy, seed, count)?;
    encode_episodes(codec, &eps, &mdp.name, seed)
}
