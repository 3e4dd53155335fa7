//! Multi-target return conditioning with critic-based action selection.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::critic::TwinCritic;
use crate::env::{StateCodec, TabularMdp};
use crate::error::{Error, Result};
use crate::policy::{DtPolicy, WindowBuilder};
use crate::reward::RewardEnsemble;
use crate::stats;

pub const TARGET_MULTIPLIERS: [f64; 5] = [0.5, 0.75, 1.0, 1.5, 2.0];

pub fn initial_rtg_targets(return_max: f64) -> Result<Vec<f64>> {
    if !(return_max > 0.0) {
        return Err(Error::InvalidArgument(format!("return_max {return_max} must be > 0")));
    }
    Ok(TARGET_MULTIPLIERS.iter().map(|m| m * return_max).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RtgMode {
    /// `R_{t+1} = R_t - R_0 / max_timestep`.
    FixedDecrement,
    /// `R_{t+1} = R_t - r_hat_t` from the reward ensemble.
    LearnedReward,
}

/// Return-to-go tracks over a shared state/action history.
#[derive(Clone, Debug, PartialEq)]
pub struct InferenceState {
    pub initial: Vec<f64>,
    /// `rtg[k][j]` is track `k`'s conditioning at step `j`.
    pub rtg: Vec<Vec<f64>>,
    pub states: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
    pub t: usize,
    pub max_timestep: usize,
}

impl InferenceState {
    pub fn new(targets: Vec<f64>, first_state: Vec<f64>, max_timestep: usize) -> Result<Self> {
        if targets.is_empty() || max_timestep == 0 {
            return Err(Error::InvalidArgument("need at least one target and max_timestep >= 1".into()));
        }
        Ok(Self {
            rtg: targets.iter().map(|&r| vec![r]).collect(),
            initial: targets,
            states: vec![first_state],
            actions: Vec::new(),
            t: 0,
            max_timestep,
        })
    }

    pub fn current(&self) -> Vec<f64> {
        self.rtg.iter().map(|r| r[self.t]).collect()
    }

    /// Records the executed action and the next observation, then advances
    /// every track. `learned_reward` is required in `LearnedReward` mode.
    pub fn rtg_step(&mut self, action: Vec<f64>, next_state: Vec<f64>, mode: RtgMode, learned_reward: Option<f64>) -> Result<()> {
        if self.t >= self.max_timestep {
            return Err(Error::InvalidArgument(format!("timestep {} already at max {}", self.t, self.max_timestep)));
        }
        let t1 = (self.t + 1) as f64;
        for (k, track) in self.rtg.iter_mut().enumerate() {
            let next = match mode {
                RtgMode::FixedDecrement => {
                    let r0 = self.initial[k];
                    r0 - t1 * (r0 / self.max_timestep as f64)
                }
                RtgMode::LearnedReward => {
                    let r = learned_reward.ok_or_else(|| Error::InvalidArgument("learned reward missing".into()))?;
                    track[self.t] - r
                }
            };
            track.push(next);
        }
        self.actions.push(action);
        self.states.push(next_state);
        self.t += 1;
        Ok(())
    }
}

/// Candidate actions for every track at the current step, `[K][action_dim]`.
pub fn candidate_actions(policy: &DtPolicy, st: &InferenceState) -> Result<Vec<Vec<f64>>> {
    let c = &policy.config;
    let h = c.context_len;
    let builder = WindowBuilder {
        norm: &policy.norm,
        len: h,
        action_dim: c.action_dim,
    };
    let mut w = builder.empty();
    let start = (st.t + 1).saturating_sub(h);
    let zero = vec![0.0; c.action_dim];
    for track in &st.rtg {
        let steps: Vec<(f64, &[f64], &[f64], usize)> = (start..=st.t)
            .map(|j| {
                let a = st.actions.get(j).unwrap_or(&zero);
                (track[j], st.states[j].as_slice(), a.as_slice(), j.min(c.max_timestep))
            })
            .collect();
        builder.push(&mut w, &steps)?;
    }
    let (acts, _) = policy.predict(&w)?;
    let ad = c.action_dim;
    Ok((0..st.rtg.len())
        .map(|k| {
            let row = k * h + h - 1;
            acts.data()[row * ad..(row + 1) * ad].to_vec()
        })
        .collect())
}

/// First index of the largest value.
pub fn argmax_lowest(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq)]
pub struct Selection {
    pub action: Vec<f64>,
    pub track: usize,
    pub candidates: Vec<Vec<f64>>,
    pub q: Vec<f64>,
}

/// Picks the candidate with the highest online `Q1`; without a critic, or
/// with one track, the first candidate.
pub fn select_action(policy: &DtPolicy, critic: Option<&TwinCritic>, st: &InferenceState) -> Result<Selection> {
    let candidates = candidate_actions(policy, st)?;
    let (track, q) = match critic {
        Some(c) if candidates.len() > 1 => {
            let s = policy.norm.apply(&st.states[st.t]);
            let states: Vec<f64> = candidates.iter().flat_map(|_| s.iter().copied()).collect();
            let actions: Vec<f64> = candidates.iter().flatten().copied().collect();
            let q = c.q1(&states, &actions)?;
            (argmax_lowest(&q), q)
        }
        _ => (0, Vec::new()),
    };
    Ok(Selection {
        action: candidates[track].clone(),
        track,
        candidates,
        q,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub episodes: usize,
    pub seed: u64,
    pub targets: Vec<f64>,
    pub rtg_mode: RtgMode,
    /// Fixed start state; otherwise drawn from the MDP's initial states.
    pub start: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub episodes: usize,
    pub returns: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    pub paths: Vec<Vec<usize>>,
    pub config_hash: Option<String>,
    pub checkpoint_path: Option<String>,
}

/// Runs greedy episodes scored with the MDP's own rewards.
pub fn evaluate(
    policy: &DtPolicy,
    critic: Option<&TwinCritic>,
    mdp: &TabularMdp,
    codec: &StateCodec,
    ensemble: Option<&RewardEnsemble>,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    if opts.episodes == 0 {
        return Err(Error::InvalidArgument("need at least one evaluation episode".into()));
    }
    if opts.rtg_mode == RtgMode::LearnedReward && ensemble.is_none() {
        return Err(Error::InvalidArgument("learned-reward return updates need a reward ensemble".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut returns = Vec::with_capacity(opts.episodes);
    let mut paths = Vec::with_capacity(opts.episodes);
    for _ in 0..opts.episodes {
        let mut s = match opts.start {
            Some(s) => s,
            None => {
                use rand::seq::SliceRandom;
                *mdp.initial_states.choose(&mut rng).ok_or_else(|| Error::InvalidEnv("no initial states".into()))?
            }
        };
        let mut st = InferenceState::new(opts.targets.clone(), codec.encode_state(s, &mut rng), mdp.horizon)?;
        let mut path = vec![s];
        let mut total = 0.0;
        for _ in 0..mdp.horizon {
            if mdp.is_terminal(s) {
                break;
            }
            let sel = select_action(policy, critic, &st)?;
            let a = codec.decode_action(&sel.action);
            let step = mdp.step(s, a);
            total += step.reward;
            let next = match step.next {
                crate::env::Next::State(n) => n,
                crate::env::Next::Terminal => break,
            };
            let executed = codec.encode_action(a);
            let learned = match ensemble {
                Some(e) if opts.rtg_mode == RtgMode::LearnedReward => {
                    let mut row = st.states[st.t].clone();
                    row.extend_from_slice(&executed);
                    Some(e.predict(&row)?[0])
                }
                _ => None,
            };
            path.push(next);
            s = next;
            st.rtg_step(executed, codec.encode_state(s, &mut rng), opts.rtg_mode, learned)?;
            if step.done {
                break;
            }
        }
        returns.push(total);
        paths.push(path);
    }
    Ok(EvalReport {
        episodes: opts.episodes,
        mean: stats::mean(&returns),
        std: stats::std_dev(&returns),
        returns,
        paths,
        config_hash: None,
        checkpoint_path: None,
    })
}
