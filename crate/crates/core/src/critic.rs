//! Twin Q-networks with exponential-moving-average targets.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::StateNorm;
use crate::env::{StateCodec, TabularEpisode};
use crate::error::{Error, Result};
use crate::tensor::{read_checkpoint, write_checkpoint, Activation, Adam, AdamConfig, Graph, Mlp, ParamSet, Tensor, Var};

/// Which networks the bootstrap minimum is taken over.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BootstrapNets {
    Target,
    Online,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CriticConfig {
    pub hidden: Vec<usize>,
    pub gamma: f64,
    pub tau: f64,
    pub bootstrap_nets: BootstrapNets,
}

impl Default for CriticConfig {
    fn default() -> Self {
        Self {
            hidden: vec![256, 256, 256],
            gamma: 0.99,
            tau: 5e-3,
            bootstrap_nets: BootstrapNets::Target,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TwinCritic {
    pub config: CriticConfig,
    pub state_dim: usize,
    pub action_dim: usize,
    /// Same architecture for all four networks.
    pub mlp: Mlp,
    pub online: [ParamSet; 2],
    pub target: [ParamSet; 2],
}

impl TwinCritic {
    pub fn new<R: Rng + ?Sized>(config: CriticConfig, state_dim: usize, action_dim: usize, rng: &mut R) -> Result<Self> {
        if !(config.gamma > 0.0 && config.gamma <= 1.0) {
            return Err(Error::InvalidArgument(format!("discount {} outside (0, 1]", config.gamma)));
        }
        let mut p1 = ParamSet::new();
        let mlp = Mlp::new(&mut p1, "q", state_dim + action_dim, &config.hidden, 1, Activation::Identity, rng);
        let mut p2 = ParamSet::new();
        Mlp::new(&mut p2, "q", state_dim + action_dim, &config.hidden, 1, Activation::Identity, rng);
        Ok(Self {
            config,
            state_dim,
            action_dim,
            mlp,
            target: [p1.clone(), p2.clone()],
            online: [p1, p2],
        })
    }

    fn rows(&self, states: &[f64], actions: &[f64]) -> Result<Tensor> {
        let (sd, ad) = (self.state_dim, self.action_dim);
        if !states.len().is_multiple_of(sd) || !actions.len().is_multiple_of(ad) || states.len() / sd != actions.len() / ad {
            return Err(Error::ShapeMismatch {
                op: "critic_input",
                left: vec![states.len(), sd],
                right: vec![actions.len(), ad],
            });
        }
        let n = states.len() / sd;
        let mut x = Vec::with_capacity(n * (sd + ad));
        for i in 0..n {
            x.extend_from_slice(&states[i * sd..(i + 1) * sd]);
            x.extend_from_slice(&actions[i * ad..(i + 1) * ad]);
        }
        Tensor::new(vec![n, sd + ad], x)
    }

    /// `Q(s, a)` for `[n, state_dim]` / `[n, action_dim]` buffers using `params`.
    pub fn q_with(&self, params: &ParamSet, states: &[f64], actions: &[f64]) -> Result<Vec<f64>> {
        let x = self.rows(states, actions)?;
        Ok(self.mlp.eval(params, &x)?.into_data())
    }

    pub fn q1(&self, states: &[f64], actions: &[f64]) -> Result<Vec<f64>> {
        self.q_with(&self.online[0], states, actions)
    }

    /// Elementwise minimum of the two bootstrap networks.
    pub fn min_bootstrap(&self, states: &[f64], actions: &[f64]) -> Result<Vec<f64>> {
        let nets = match self.config.bootstrap_nets {
            BootstrapNets::Target => &self.target,
            BootstrapNets::Online => &self.online,
        };
        let a = self.q_with(&nets[0], states, actions)?;
        let b = self.q_with(&nets[1], states, actions)?;
        Ok(a.into_iter().zip(b).map(|(x, y)| x.min(y)).collect())
    }

    /// Records `Q(s, a)` for one online twin on `g`; `actions` may carry gradients.
    pub fn q_on_graph(&self, g: &mut Graph, p: &[Var], states: Var, actions: Var) -> Result<Var> {
        let x = g.concat_last(&[states, actions])?;
        let q = self.mlp.forward(g, p, x)?;
        let n = g.shape(q)[0];
        g.reshape(q, &[n])
    }

    /// Sum over twins of the weighted squared error against shared targets.
    pub fn q_loss_on_graph(&self, g: &mut Graph, p: [&[Var]; 2], states: &[f64], actions: &[f64], targets: &[f64], weights: &[f64]) -> Result<Var> {
        let x = g.constant(self.rows(states, actions)?);
        let y = g.constant(Tensor::from_vec(targets.to_vec()));
        let w = g.constant(Tensor::from_vec(weights.to_vec()));
        let mut total = None;
        for pk in p {
            let q = self.mlp.forward(g, pk, x)?;
            let q = g.reshape(q, &[targets.len()])?;
            let d = g.sub(q, y)?;
            let d = g.square(d)?;
            let d = g.mul(d, w)?;
            let s = g.sum(d)?;
            total = Some(match total {
                None => s,
                Some(t) => g.add(t, s)?,
            });
        }
        Ok(total.expect("two twins"))
    }

    /// `target <- tau * online + (1 - tau) * target` for both twins.
    pub fn ema_update(&mut self, tau: f64) {
        for k in 0..2 {
            self.target[k].ema_from(&self.online[k], tau);
        }
    }

    pub fn save(&self, bin: &Path) -> Result<()> {
        let mut named = Vec::new();
        for (kind, sets) in [("online", &self.online), ("target", &self.target)] {
            for (k, ps) in sets.iter().enumerate() {
                for (n, t) in ps.iter() {
                    named.push((format!("{kind}{}.{n}", k + 1), t.clone()));
                }
            }
        }
        write_checkpoint(bin, named.iter().map(|(n, t)| (n.as_str(), t)))
    }

    /// Rebuilds a critic saved with [`TwinCritic::save`].
    pub fn load(config: CriticConfig, state_dim: usize, action_dim: usize, bin: &Path) -> Result<Self> {
        let mut c = Self::new(config, state_dim, action_dim, &mut ChaCha8Rng::seed_from_u64(0))?;
        c.load_params(bin)?;
        Ok(c)
    }

    pub fn load_params(&mut self, bin: &Path) -> Result<()> {
        let entries = read_checkpoint(bin)?;
        for (kind, k) in [("online", 0), ("online", 1), ("target", 0), ("target", 1)] {
            let prefix = format!("{kind}{}.", k + 1);
            let set = if kind == "online" { &mut self.online[k] } else { &mut self.target[k] };
            set.load_named(entries.iter().filter_map(|(n, t)| n.strip_prefix(&prefix).map(|s| (s, t))))?;
        }
        Ok(())
    }
}

/// Targets for every window position `i in 0..=n`:
/// `sum_{j=i}^{n-1} gamma^{j-i} r_j + gamma^{n-i} B`, with `B = 0` when the
/// window ends in a terminal (`bootstrap == None`). Position `n` is `B` itself.
pub fn n_step_targets(rewards: &[f64], bootstrap: Option<f64>, gamma: f64) -> Vec<f64> {
    let n = rewards.len();
    let mut out = vec![0.0; n + 1];
    let mut acc = bootstrap.unwrap_or(0.0);
    out[n] = acc;
    for i in (0..n).rev() {
        acc = rewards[i] + gamma * acc;
        out[i] = acc;
    }
    out
}

/// Encoded `(state, action)` pairs of tabular episodes.
pub struct TabularBatch {
    pub states: Vec<f64>,
    pub actions: Vec<f64>,
    pub keys: Vec<(usize, usize)>,
}

/// Noise-free normalized encodings of every key in `q`.
pub fn encode_pairs(codec: &StateCodec, norm: &StateNorm, keys: impl IntoIterator<Item = (usize, usize)>) -> TabularBatch {
    let clean = StateCodec { noise: 0.0, ..codec.clone() };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut b = TabularBatch {
        states: Vec::new(),
        actions: Vec::new(),
        keys: Vec::new(),
    };
    for (s, a) in keys {
        b.states.extend(norm.apply(&clean.encode_state(s, &mut rng)));
        b.actions.extend(clean.encode_action(a));
        b.keys.push((s, a));
    }
    b
}

/// `max |Q1 - Q_dp|` over the pairs of `dp`.
pub fn fitted_q_convergence_check(critic: &TwinCritic, codec: &StateCodec, norm: &StateNorm, dp: &BTreeMap<(usize, usize), f64>) -> Result<f64> {
    let b = encode_pairs(codec, norm, dp.keys().copied());
    let q = critic.q1(&b.states, &b.actions)?;
    if q.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op: "fitted_q_convergence_check" });
    }
    Ok(b.keys.iter().zip(q).map(|(k, v)| (v - dp[k]).abs()).fold(0.0, f64::max))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

fn adam(lr: f64, ps: &ParamSet) -> Adam {
    Adam::new(
        AdamConfig {
            lr,
            ..AdamConfig::default()
        },
        ps,
    )
}

fn regression_step(critic: &mut TwinCritic, opt: &mut [Adam; 2], states: &[f64], actions: &[f64], targets: &[f64]) -> Result<f64> {
    let mut g = Graph::new();
    let p1 = critic.online[0].bind(&mut g, true);
    let p2 = critic.online[1].bind(&mut g, true);
    let w = vec![1.0 / targets.len() as f64; targets.len()];
    let loss = critic.q_loss_on_graph(&mut g, [&p1, &p2], states, actions, targets, &w)?;
    let lv = g.value(loss).item();
    let grads = g.backward(loss)?;
    let g1 = critic.online[0].grads(&p1, &grads);
    let g2 = critic.online[1].grads(&p2, &grads);
    opt[0].step(&mut critic.online[0], &g1)?;
    opt[1].step(&mut critic.online[1], &g2)?;
    Ok(lv)
}

/// Regresses both twins onto fixed targets; targets are then synced.
pub fn supervised_pretrain(critic: &mut TwinCritic, codec: &StateCodec, norm: &StateNorm, targets: &BTreeMap<(usize, usize), f64>, fit: &FitConfig) -> Result<f64> {
    let b = encode_pairs(codec, norm, targets.keys().copied());
    let y: Vec<f64> = b.keys.iter().map(|k| targets[k]).collect();
    let mut opt = [adam(fit.lr, &critic.online[0]), adam(fit.lr, &critic.online[1])];
    let mut last = f64::NAN;
    for _ in 0..fit.steps {
        last = regression_step(critic, &mut opt, &b.states, &b.actions, &y)?;
    }
    critic.ema_update(1.0);
    Ok(last)
}

/// One-step transition on a tabular dataset.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Transition {
    pub s: usize,
    pub a: usize,
    pub r: f64,
    /// `None` when the episode ends here.
    pub next: Option<usize>,
}

pub fn transitions(episodes: &[TabularEpisode], rewards: Option<&dyn Fn(usize, usize) -> f64>) -> Vec<Transition> {
    let mut out = Vec::new();
    for e in episodes {
        for i in 0..e.states.len() {
            let r = match rewards {
                Some(f) => f(e.states[i], e.actions[i]),
                None => e.rewards[i],
            };
            let next = if e.terminals[i] { None } else { e.states.get(i + 1).copied() };
            out.push(Transition {
                s: e.states[i],
                a: e.actions[i],
                r,
                next,
            });
        }
    }
    out
}

/// Fitted Q iteration with a greedy bootstrap `r + gamma * max_a' min_k Q'_k(s', a')`.
/// The maximum runs over the actions recorded at `s'` when `in_sample` is
/// set, otherwise over every action embedding. No behavior regularization.
pub fn fit_greedy_td(critic: &mut TwinCritic, codec: &StateCodec, norm: &StateNorm, data: &[Transition], in_sample: bool, fit: &FitConfig) -> Result<()> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("no transitions".into()));
    }
    let mut seen: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for t in data {
        let e = seen.entry(t.s).or_default();
        if !e.contains(&t.a) {
            e.push(t.a);
        }
    }
    let all: Vec<usize> = (0..codec.num_actions).collect();
    let choices = |s: usize| -> &[usize] {
        match seen.get(&s) {
            Some(v) if in_sample => v,
            _ => &all,
        }
    };
    let clean = StateCodec { noise: 0.0, ..codec.clone() };
    let mut rng0 = ChaCha8Rng::seed_from_u64(0);
    let enc_s = |s: usize, rng: &mut ChaCha8Rng| norm.apply(&clean.encode_state(s, rng));
    let mut opt = [adam(fit.lr, &critic.online[0]), adam(fit.lr, &critic.online[1])];
    let mut rng = ChaCha8Rng::seed_from_u64(fit.seed);
    let mut idx: Vec<usize> = (0..data.len()).collect();
    for _ in 0..fit.steps {
        idx.shuffle(&mut rng);
        let batch = &idx[..fit.batch_size.min(idx.len())];
        let mut s = Vec::new();
        let mut a = Vec::new();
        let mut ns = Vec::new();
        let mut na_enc = Vec::new();
        for &i in batch {
            let t = data[i];
            s.extend(enc_s(t.s, &mut rng0));
            a.extend(clean.encode_action(t.a));
            if let Some(n) = t.next {
                for &b in choices(n) {
                    ns.extend(enc_s(n, &mut rng0));
                    na_enc.extend(clean.encode_action(b));
                }
            }
        }
        let boot = if ns.is_empty() { Vec::new() } else { critic.min_bootstrap(&ns, &na_enc)? };
        let mut at = 0;
        let y: Vec<f64> = batch
            .iter()
            .map(|&i| {
                let t = data[i];
                match t.next {
                    Some(n) => {
                        let na = choices(n).len();
                        let best = boot[at..at + na].iter().copied().fold(f64::NEG_INFINITY, f64::max);
                        at += na;
                        t.r + critic.config.gamma * best
                    }
                    None => t.r,
                }
            })
            .collect();
        regression_step(critic, &mut opt, &s, &a, &y)?;
        let tau = critic.config.tau;
        critic.ema_update(tau);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::figure1;
    use crate::oracle::dataset_constrained_q;

    #[test]
    fn n_step_hand_values() {
        let t = n_step_targets(&[1.0, 2.0], Some(4.0), 0.5);
        assert_eq!(t, vec![3.0, 4.0, 4.0]);
        let t = n_step_targets(&[1.0, 2.0], None, 0.9);
        assert_eq!(t[0], 1.0 + 0.9 * 2.0);
        assert_eq!(t[2], 0.0);
    }

    fn critic(seed: u64) -> TwinCritic {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = CriticConfig {
            hidden: vec![16, 16],
            ..CriticConfig::default()
        };
        TwinCritic::new(cfg, 3, 2, &mut rng).unwrap()
    }

    #[test]
    fn exact_targets_give_zero_loss_and_hand_value() {
        let c = critic(0);
        let s = vec![0.1, 0.2, 0.3, -0.4, 0.5, 0.6];
        let a = vec![1.0, 0.0, 0.0, 1.0];
        let q1 = c.q_with(&c.online[0], &s, &a).unwrap();
        let mut c2 = c.clone();
        c2.online[1] = c2.online[0].clone();
        let w = [0.5, 0.5];
        let mut g = Graph::new();
        let p1 = c2.online[0].bind(&mut g, false);
        let p2 = c2.online[1].bind(&mut g, false);
        let l = c2.q_loss_on_graph(&mut g, [&p1, &p2], &s, &a, &q1, &w).unwrap();
        assert_eq!(g.value(l).item(), 0.0);
        let mut off = q1.clone();
        off[1] += 0.25;
        let mut g = Graph::new();
        let p1 = c2.online[0].bind(&mut g, false);
        let p2 = c2.online[1].bind(&mut g, false);
        let l = c2.q_loss_on_graph(&mut g, [&p1, &p2], &s, &a, &off, &w).unwrap();
        // both twins miss by 0.25 at one of two positions
        assert!((g.value(l).item() - 2.0 * 0.0625 / 2.0).abs() < 1e-15);
    }

    #[test]
    fn ema_converges_geometrically() {
        let mut c = critic(1);
        c.target = critic(2).target;
        let online = c.online[0].tensors()[0].data()[0];
        let start = c.target[0].tensors()[0].data()[0];
        let tau = 5e-3;
        for _ in 0..100 {
            c.ema_update(tau);
        }
        let err = c.target[0].tensors()[0].data()[0] - online;
        let want = (start - online) * (1.0 - tau).powi(100);
        assert!((err - want).abs() < 1e-12);
        c.ema_update(1.0);
        assert_eq!(c.target[0].tensors(), c.online[0].tensors());
    }

    #[test]
    fn bootstrap_uses_minimum() {
        let c = critic(3);
        let s = vec![0.3, -0.2, 0.9];
        let a = vec![0.0, 1.0];
        let t1 = c.q_with(&c.target[0], &s, &a).unwrap()[0];
        let t2 = c.q_with(&c.target[1], &s, &a).unwrap()[0];
        assert_eq!(c.min_bootstrap(&s, &a).unwrap()[0], t1.min(t2));
    }

    #[test]
    fn random_critic_is_far_from_dp() {
        let m = figure1::mdp();
        let codec = StateCodec::new(&m);
        let norm = StateNorm::identity(codec.state_dim());
        let scripts = figure1::scripted().into_iter().map(|(_, s, a)| (s, a)).collect();
        let p = crate::env::BehaviorPolicy::scripted(&m, scripts).unwrap();
        let eps = crate::env::rollout_tabular(&m, &p, 0, 4).unwrap();
        let dp = dataset_constrained_q(&m, &figure1::biased_rewards(), 0.99, &eps).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let c = TwinCritic::new(CriticConfig::default(), 6, 2, &mut rng).unwrap();
        assert!(fitted_q_convergence_check(&c, &codec, &norm, &dp).unwrap() > 0.5);
    }
}
