//! Joint training of the policy and the twin critics.

use std::path::PathBuf;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::critic::{n_step_targets, CriticConfig, TwinCritic};
use crate::dataset::{OfflineDataset, StateNorm};
use crate::error::{Error, Result};
use crate::policy::{l_dt_on_graph, rollout_window_actions, DtConfig, DtPolicy, WindowBatch, WindowBuilder};
use crate::tensor::{Adam, AdamConfig, Graph, LrSchedule, ParamSet, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EtaSchedule {
    /// `eta = step * eta_max / max_step`.
    Linear,
    Constant,
}

/// Which critic output the policy term maximizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyQ {
    Q1,
    Min,
}

/// Which policy parameters produce the bootstrap action.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BootstrapPolicy {
    Target,
    Online,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub seed: u64,
    pub iterations: usize,
    pub steps_per_iter: usize,
    pub batch_size: usize,
    pub context_len: usize,
    pub embed_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub dropout: f64,
    /// `None` scales return-to-go inputs by `max(|return_max|, 1)`.
    pub rtg_scale: Option<f64>,
    pub action_bound: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_steps: usize,
    pub grad_clip: Option<f64>,
    pub eta_max: f64,
    pub eta_schedule: EtaSchedule,
    pub policy_q: PolicyQ,
    pub bootstrap_policy: BootstrapPolicy,
    pub critic: CriticConfig,
    pub normalize_states: bool,
    /// Where a checkpoint is dumped if training diverges.
    pub diag_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            iterations: 50,
            steps_per_iter: 1000,
            batch_size: 256,
            context_len: 20,
            embed_dim: 256,
            layers: 4,
            heads: 4,
            dropout: 0.1,
            rtg_scale: None,
            action_bound: 1.0,
            lr: 3e-4,
            weight_decay: 1e-4,
            warmup_steps: 10_000,
            grad_clip: Some(0.25),
            eta_max: 1.0,
            eta_schedule: EtaSchedule::Linear,
            policy_q: PolicyQ::Q1,
            bootstrap_policy: BootstrapPolicy::Target,
            critic: CriticConfig::default(),
            normalize_states: true,
            diag_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn max_steps(&self) -> usize {
        self.iterations * self.steps_per_iter
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.steps_per_iter == 0 {
            return Err(Error::InvalidArgument("batch size and steps per iteration must be >= 1".into()));
        }
        if !(self.eta_max >= 0.0) {
            return Err(Error::InvalidArgument(format!("eta_max {} must be >= 0", self.eta_max)));
        }
        if !(self.critic.gamma > 0.0 && self.critic.gamma < 1.0) {
            return Err(Error::InvalidArgument(format!("discount {} outside (0, 1)", self.critic.gamma)));
        }
        if !(self.critic.tau > 0.0 && self.critic.tau <= 1.0) {
            return Err(Error::InvalidArgument(format!("tau {} outside (0, 1]", self.critic.tau)));
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            schedule: LrSchedule::LinearWarmup {
                warmup: self.warmup_steps,
            },
            ..AdamConfig::default()
        }
    }
}

/// `eta` at 0-based `step` of `max_step`.
pub fn eta_at(schedule: EtaSchedule, eta_max: f64, step: usize, max_step: usize) -> f64 {
    match schedule {
        EtaSchedule::Constant => eta_max,
        EtaSchedule::Linear if max_step == 0 => eta_max,
        EtaSchedule::Linear => step.min(max_step) as f64 * eta_max / max_step as f64,
    }
}

/// `eta / max(mean |Q|, 1e-8)`.
pub fn lambda_coefficient(eta: f64, mean_abs_q: f64) -> f64 {
    eta / mean_abs_q.max(1e-8)
}

/// One row of the per-iteration metrics file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub iteration: usize,
    pub step: usize,
    pub l_dt: f64,
    pub q_loss: f64,
    pub policy_loss: f64,
    pub eta: f64,
    pub lambda: f64,
    pub mean_abs_q: f64,
    pub eval_return_mean: f64,
    pub eval_return_std: f64,
    pub wall_seconds: f64,
}

pub const METRICS_HEADER: &str = "iteration,step,l_dt,q_loss,policy_loss,eta,lambda,mean_abs_q,eval_return_mean,eval_return_std";

/// One row per iteration; `wall_time` appends a `wall_seconds` column, which
/// makes the output differ between otherwise identical runs.
pub fn metrics_csv(rows: &[MetricsRow], wall_time: bool) -> String {
    let mut out = String::from(METRICS_HEADER);
    if wall_time {
        out.push_str(",wall_seconds");
    }
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}",
            r.iteration, r.step, r.l_dt, r.q_loss, r.policy_loss, r.eta, r.lambda, r.mean_abs_q, r.eval_return_mean, r.eval_return_std
        ));
        if wall_time {
            out.push_str(&format!(",{}", r.wall_seconds));
        }
        out.push('\n');
    }
    out
}

/// Called after every iteration; returns `(mean, std)` of evaluation returns.
pub type EvalHook<'a> = dyn FnMut(&DtPolicy, Option<&TwinCritic>) -> Result<(f64, f64)> + 'a;

pub struct TrainOutcome {
    pub policy: DtPolicy,
    pub policy_target: ParamSet,
    pub critic: Option<TwinCritic>,
    pub metrics: Vec<MetricsRow>,
}

/// Independent generator streams derived from one seed.
pub(crate) fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(id);
    r
}

const STREAM_POLICY_INIT: u64 = 0;
const STREAM_CRITIC_INIT: u64 = 1;
const STREAM_BATCHES: u64 = 2;
const STREAM_DROPOUT: u64 = 3;

pub fn dt_config_for(dataset: &OfflineDataset, cfg: &TrainConfig) -> DtConfig {
    let max_len = dataset.trajectories().iter().map(|t| t.len()).max().unwrap_or(1);
    DtConfig {
        context_len: cfg.context_len,
        embed_dim: cfg.embed_dim,
        layers: cfg.layers,
        heads: cfg.heads,
        dropout: cfg.dropout,
        rtg_scale: cfg.rtg_scale.unwrap_or_else(|| dataset.return_max().abs().max(1.0)),
        action_bound: cfg.action_bound,
        ..DtConfig::new(dataset.state_dim(), dataset.action_dim(), max_len)
    }
}

/// Sampled training windows plus everything the critic needs.
pub struct SampledBatch {
    pub windows: WindowBatch,
    /// `(trajectory, window end step)` per window.
    pub ends: Vec<(usize, usize)>,
}

/// Window ending at `end` (inclusive), at most `len` steps long.
fn push_window(builder: &WindowBuilder, out: &mut WindowBatch, dataset: &OfflineDataset, traj: usize, end: usize, max_t: usize) -> Result<()> {
    let tr = &dataset.trajectories()[traj];
    let start = (end + 1).saturating_sub(builder.len);
    let rtg = tr.rtg();
    let steps: Vec<(f64, &[f64], &[f64], usize)> = (start..=end)
        .map(|i| (rtg[i], tr.states[i].as_slice(), tr.actions[i].as_slice(), i.min(max_t)))
        .collect();
    builder.push(out, &steps)
}

/// Draws `count` window ends uniformly over every dataset step.
pub fn sample_windows<R: Rng + ?Sized>(dataset: &OfflineDataset, norm: &StateNorm, len: usize, max_t: usize, count: usize, rng: &mut R) -> Result<SampledBatch> {
    let total = dataset.num_steps();
    if total == 0 {
        return Err(Error::InvalidArgument("empty dataset".into()));
    }
    let builder = WindowBuilder {
        norm,
        len,
        action_dim: dataset.action_dim(),
    };
    let mut windows = builder.empty();
    let mut ends = Vec::with_capacity(count);
    for _ in 0..count {
        let mut k = rng.gen_range(0..total);
        let mut ti = 0;
        while k >= dataset.trajectories()[ti].len() {
            k -= dataset.trajectories()[ti].len();
            ti += 1;
        }
        push_window(&builder, &mut windows, dataset, ti, k, max_t)?;
        ends.push((ti, k));
    }
    Ok(SampledBatch { windows, ends })
}

/// Critic regression data for one batch, flattened over window positions.
pub struct CriticTargets {
    pub targets: Vec<f64>,
    pub weights: Vec<f64>,
}

/// Builds n-step targets for every valid position. Windows ending in a
/// terminal do not bootstrap. Windows that reach a truncated trajectory end
/// bootstrap at the last state and do not regress that position.
pub fn critic_targets(dataset: &OfflineDataset, batch: &SampledBatch, policy: &DtPolicy, boot_params: &ParamSet, critic: &TwinCritic) -> Result<CriticTargets> {
    let w = &batch.windows;
    let h = w.len;
    let cfg = &policy.config;
    let builder = WindowBuilder {
        norm: &policy.norm,
        len: h,
        action_dim: cfg.action_dim,
    };
    // (window, bootstrap step, last regressed step)
    let mut plans = Vec::with_capacity(w.batch);
    let mut boot_windows = builder.empty();
    for (bi, &(ti, end)) in batch.ends.iter().enumerate() {
        let tr = &dataset.trajectories()[ti];
        let (boot, last) = if tr.terminals[end] {
            (None, Some(end))
        } else if end + 1 < tr.len() {
            (Some(end + 1), Some(end))
        } else {
            (Some(end), end.checked_sub(1))
        };
        if let Some(b) = boot {
            push_window(&builder, &mut boot_windows, dataset, ti, b, cfg.max_timestep)?;
        }
        plans.push((bi, boot, last));
    }
    let boot_values = if boot_windows.batch > 0 {
        let mut bp = policy.clone();
        bp.params = boot_params.clone();
        let (acts, _) = bp.predict(&boot_windows)?;
        let (sd, ad) = (cfg.state_dim, cfg.action_dim);
        let mut s = Vec::with_capacity(boot_windows.batch * sd);
        let mut a = Vec::with_capacity(boot_windows.batch * ad);
        for k in 0..boot_windows.batch {
            let row = k * h + h - 1;
            s.extend_from_slice(&boot_windows.states[row * sd..(row + 1) * sd]);
            a.extend_from_slice(&acts.data()[row * ad..(row + 1) * ad]);
        }
        critic.min_bootstrap(&s, &a)?
    } else {
        Vec::new()
    };
    let mut targets = vec![0.0; w.positions()];
    let mut mask = vec![false; w.positions()];
    let mut next_boot = 0;
    for (bi, boot, last) in plans {
        let (ti, end) = batch.ends[bi];
        let bv = boot.map(|_| {
            let v = boot_values[next_boot];
            next_boot += 1;
            v
        });
        let Some(last) = last else { continue };
        let tr = &dataset.trajectories()[ti];
        let start = (end + 1).saturating_sub(h);
        if last < start {
            continue;
        }
        let ys = n_step_targets(&tr.rewards[start..=last], bv, critic.config.gamma);
        // window position of step `start`
        let offset = h - (end + 1 - start);
        for (j, y) in ys[..=last - start].iter().enumerate() {
            targets[bi * h + offset + j] = *y;
            mask[bi * h + offset + j] = true;
        }
    }
    let n = mask.iter().filter(|&&m| m).count();
    let weights = mask.iter().map(|&m| if m && n > 0 { 1.0 / n as f64 } else { 0.0 }).collect();
    Ok(CriticTargets { targets, weights })
}

fn clip_grads(grads: &mut [Tensor], max_norm: f64) {
    let norm = grads.iter().flat_map(|t| t.data()).map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let k = max_norm / norm;
        for t in grads.iter_mut() {
            for g in t.data_mut() {
                *g *= k;
            }
        }
    }
}

/// Mean over valid positions of the policy's Q term; critic parameters are constants.
pub fn q_term_on_graph(g: &mut Graph, critic: &TwinCritic, which: PolicyQ, w: &WindowBatch, actions: Var) -> Result<Var> {
    let s = g.constant(w.state_rows(critic.state_dim)?);
    let p1 = critic.online[0].bind(g, false);
    let q1 = critic.q_on_graph(g, &p1, s, actions)?;
    let q = match which {
        PolicyQ::Q1 => q1,
        PolicyQ::Min => {
            let p2 = critic.online[1].bind(g, false);
            let q2 = critic.q_on_graph(g, &p2, s, actions)?;
            let pick: Vec<f64> = g.value(q1).data().iter().zip(g.value(q2).data()).map(|(a, b)| if a <= b { 1.0 } else { 0.0 }).collect();
            let other: Vec<f64> = pick.iter().map(|m| 1.0 - m).collect();
            let m1 = g.constant(Tensor::from_vec(pick));
            let m2 = g.constant(Tensor::from_vec(other));
            let a = g.mul(q1, m1)?;
            let b = g.mul(q2, m2)?;
            g.add(a, b)?
        }
    };
    let nv = w.num_valid();
    let wts = g.constant(Tensor::from_vec(w.valid.iter().map(|&v| if v { 1.0 / nv as f64 } else { 0.0 }).collect()));
    let q = g.mul(q, wts)?;
    g.sum(q)
}

/// `L_DT - lambda * mean Q(s, a_AR)`. With `lambda == 0` the rollout is skipped.
pub fn policy_loss_on_graph(
    g: &mut Graph,
    policy: &DtPolicy,
    p: &[Var],
    critic: Option<(&TwinCritic, PolicyQ)>,
    w: &WindowBatch,
    lambda: f64,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<(Var, Var)> {
    let acts = g.constant(w.action_rows(policy.config.action_dim)?);
    let out = policy.forward(g, p, w, acts, rng.as_deref_mut())?;
    let ldt = l_dt_on_graph(g, out, w, &policy.config)?;
    match critic {
        Some((c, which)) if lambda != 0.0 => {
            let ar = rollout_window_actions(policy, g, p, w, rng)?;
            let q = q_term_on_graph(g, c, which, w, ar)?;
            let q = g.scale(q, lambda)?;
            Ok((g.sub(ldt, q)?, ldt))
        }
        _ => Ok((ldt, ldt)),
    }
}

fn mean_abs_q(critic: &TwinCritic, w: &WindowBatch) -> Result<f64> {
    let q = critic.q1(&w.states, &w.actions)?;
    let nv = w.num_valid().max(1);
    Ok(q.iter().zip(&w.valid).filter(|(_, &v)| v).map(|(q, _)| q.abs()).sum::<f64>() / nv as f64)
}

fn diverged(cfg: &TrainConfig, step: usize, what: String, policy: &DtPolicy, critic: Option<&TwinCritic>) -> Error {
    if let Some(dir) = &cfg.diag_dir {
        if std::fs::create_dir_all(dir).is_ok() {
            let _ = policy.save(&dir.join("diverged_policy.bin"), &dir.join("diverged_policy.json"), serde_json::json!({ "step": step }));
            if let Some(c) = critic {
                let _ = c.save(&dir.join("diverged_critic.bin"));
            }
        }
    }
    Error::Diverged { what, step }
}

/// Trains the policy. With `with_critic == false` this is plain
/// return-conditioned supervised training.
pub fn train(dataset: &OfflineDataset, cfg: &TrainConfig, with_critic: bool, mut eval: Option<&mut EvalHook>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let dt_cfg = dt_config_for(dataset, cfg);
    let norm = if cfg.normalize_states {
        StateNorm::fit(dataset)
    } else {
        StateNorm::identity(dataset.state_dim())
    };
    let mut policy = DtPolicy::new(dt_cfg, norm, &mut stream(cfg.seed, STREAM_POLICY_INIT))?;
    let mut policy_target = policy.params.clone();
    let mut critic = if with_critic {
        Some(TwinCritic::new(cfg.critic.clone(), dataset.state_dim(), dataset.action_dim(), &mut stream(cfg.seed, STREAM_CRITIC_INIT))?)
    } else {
        None
    };
    let mut popt = Adam::new(cfg.adam(), &policy.params);
    let mut copt = critic.as_ref().map(|c| [Adam::new(cfg.adam(), &c.online[0]), Adam::new(cfg.adam(), &c.online[1])]);
    let mut batch_rng = stream(cfg.seed, STREAM_BATCHES);
    let mut drop_rng = stream(cfg.seed, STREAM_DROPOUT);
    let max_step = cfg.max_steps();
    let t0 = Instant::now();
    let mut metrics = Vec::with_capacity(cfg.iterations);
    let mut step = 0;
    for it in 0..cfg.iterations {
        let (mut s_ldt, mut s_q, mut s_pl) = (0.0, 0.0, 0.0);
        let (mut eta, mut lambda, mut maq) = (0.0, 0.0, f64::NAN);
        for _ in 0..cfg.steps_per_iter {
            let batch = sample_windows(dataset, &policy.norm, cfg.context_len, policy.config.max_timestep, cfg.batch_size, &mut batch_rng)?;
            let w = &batch.windows;
            eta = eta_at(cfg.eta_schedule, cfg.eta_max, step, max_step);
            lambda = 0.0;
            if let (Some(c), Some(opt)) = (critic.as_mut(), copt.as_mut()) {
                let boot = match cfg.bootstrap_policy {
                    BootstrapPolicy::Target => &policy_target,
                    BootstrapPolicy::Online => &policy.params,
                };
                let tg = critic_targets(dataset, &batch, &policy, boot, c)?;
                let mut g = Graph::new();
                let p1 = c.online[0].bind(&mut g, true);
                let p2 = c.online[1].bind(&mut g, true);
                let loss = c
                    .q_loss_on_graph(&mut g, [&p1, &p2], &w.states, &w.actions, &tg.targets, &tg.weights)
                    .map_err(|e| diverged(cfg, step, format!("critic loss: {e}"), &policy, Some(c)))?;
                s_q += g.value(loss).item();
                let grads = g.backward(loss)?;
                let mut g1 = c.online[0].grads(&p1, &grads);
                let mut g2 = c.online[1].grads(&p2, &grads);
                if let Some(m) = cfg.grad_clip {
                    clip_grads(&mut g1, m);
                    clip_grads(&mut g2, m);
                }
                opt[0].step(&mut c.online[0], &g1)?;
                opt[1].step(&mut c.online[1], &g2)?;
                maq = mean_abs_q(c, w)?;
                if eta != 0.0 {
                    lambda = lambda_coefficient(eta, maq);
                }
            }
            let mut g = Graph::new();
            let p = policy.params.bind(&mut g, true);
            let critic_ref = critic.as_ref().map(|c| (c, cfg.policy_q));
            let (loss, ldt) = policy_loss_on_graph(&mut g, &policy, &p, critic_ref, w, lambda, Some(&mut drop_rng))
                .map_err(|e| diverged(cfg, step, format!("policy loss: {e}"), &policy, critic.as_ref()))?;
            s_ldt += g.value(ldt).item();
            s_pl += g.value(loss).item();
            let grads = g.backward(loss)?;
            let mut gp = policy.params.grads(&p, &grads);
            if let Some(m) = cfg.grad_clip {
                clip_grads(&mut gp, m);
            }
            popt.step(&mut policy.params, &gp)
                .map_err(|e| diverged(cfg, step, format!("policy update: {e}"), &policy, critic.as_ref()))?;
            if let Some(c) = critic.as_mut() {
                c.ema_update(cfg.critic.tau);
                policy_target.ema_from(&policy.params, cfg.critic.tau);
            }
            step += 1;
        }
        let (em, es) = match eval.as_mut() {
            Some(f) => f(&policy, critic.as_ref())?,
            None => (f64::NAN, f64::NAN),
        };
        let k = cfg.steps_per_iter as f64;
        metrics.push(MetricsRow {
            iteration: it,
            step,
            l_dt: s_ldt / k,
            q_loss: if with_critic { s_q / k } else { f64::NAN },
            policy_loss: s_pl / k,
            eta,
            lambda,
            mean_abs_q: maq,
            eval_return_mean: em,
            eval_return_std: es,
            wall_seconds: t0.elapsed().as_secs_f64(),
        });
    }
    Ok(TrainOutcome {
        policy,
        policy_target,
        critic,
        metrics,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Trajectory;

    fn tiny_dataset() -> OfflineDataset {
        let mk = |id: &str, n: usize, term: bool, r: f64| {
            let states = (0..n).map(|i| vec![i as f64, 1.0 - i as f64 * 0.5]).collect();
            let actions = (0..n).map(|i| if i % 2 == 0 { vec![1.0, 0.0] } else { vec![0.0, 1.0] }).collect();
            let mut terms = vec![false; n];
            terms[n - 1] = term;
            Trajectory::new(id.into(), states, actions, vec![r; n], terms).unwrap()
        };
        OfflineDataset::new("tiny", 0, vec![mk("a", 4, true, 1.0), mk("b", 3, false, 0.5), mk("c", 1, false, 2.0)]).unwrap()
    }

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            iterations: 2,
            steps_per_iter: 3,
            batch_size: 4,
            context_len: 3,
            embed_dim: 8,
            layers: 1,
            heads: 2,
            warmup_steps: 1,
            critic: CriticConfig {
                hidden: vec![8, 8],
                ..CriticConfig::default()
            },
            ..TrainConfig::default()
        }
    }

    #[test]
    fn eta_schedule_values() {
        assert_eq!(eta_at(EtaSchedule::Linear, 2.0, 0, 10), 0.0);
        assert_eq!(eta_at(EtaSchedule::Linear, 2.0, 5, 10), 1.0);
        assert_eq!(eta_at(EtaSchedule::Constant, 2.0, 0, 10), 2.0);
        assert_eq!(lambda_coefficient(1.0, 4.0), 0.25);
        assert_eq!(lambda_coefficient(1.0, 0.0), 1e8);
    }

    #[test]
    fn targets_follow_window_end_rules() {
        let ds = tiny_dataset();
        let cfg = tiny_config();
        let dt = dt_config_for(&ds, &cfg);
        let norm = StateNorm::identity(2);
        let pol = DtPolicy::new(dt, norm.clone(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let critic = TwinCritic::new(cfg.critic.clone(), 2, 2, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let builder = WindowBuilder {
            norm: &norm,
            len: 3,
            action_dim: 2,
        };
        let mut windows = builder.empty();
        // terminal end, interior end, truncated end, single truncated step
        let ends = vec![(0, 3), (0, 1), (1, 2), (2, 0)];
        for &(t, e) in &ends {
            push_window(&builder, &mut windows, &ds, t, e, pol.config.max_timestep).unwrap();
        }
        let batch = SampledBatch { windows, ends };
        let tg = critic_targets(&ds, &batch, &pol, &pol.params, &critic).unwrap();
        let g = 0.99;
        // terminal: steps 1..=3 of a, plain discounted sums
        assert!((tg.targets[0] - (1.0 + g + g * g)).abs() < 1e-12);
        assert!((tg.targets[2] - 1.0).abs() < 1e-12);
        // truncated: last position is not regressed
        assert_eq!(tg.weights[8], 0.0);
        assert!(tg.weights[6] > 0.0 && tg.weights[7] > 0.0);
        // lone truncated step regresses nothing
        assert!(tg.weights[9..12].iter().all(|&w| w == 0.0));
        // interior window: padding is skipped, two positions regressed
        assert_eq!(tg.weights[3], 0.0);
        let n = tg.weights.iter().filter(|&&w| w > 0.0).count();
        assert_eq!(n, 3 + 2 + 2);
    }

    #[test]
    fn zero_eta_matches_plain_training_bitwise() {
        let ds = tiny_dataset();
        let mut cfg = tiny_config();
        cfg.eta_max = 0.0;
        let a = train(&ds, &cfg, true, None).unwrap();
        let b = train(&ds, &cfg, false, None).unwrap();
        assert_eq!(a.policy.params.tensors(), b.policy.params.tensors());
        cfg.eta_max = 1.0;
        let c = train(&ds, &cfg, true, None).unwrap();
        assert_ne!(c.policy.params.tensors(), b.policy.params.tensors());
        assert!(c.metrics[1].lambda > 0.0);
        assert_eq!(c.metrics.len(), 2);
    }

    #[test]
    fn training_is_deterministic() {
        let ds = tiny_dataset();
        let cfg = tiny_config();
        let a = train(&ds, &cfg, true, None).unwrap();
        let b = train(&ds, &cfg, true, None).unwrap();
        assert_eq!(a.policy.params.tensors(), b.policy.params.tensors());
        assert_eq!(a.critic.unwrap().online[1].tensors(), b.critic.unwrap().online[1].tensors());
        let csv = metrics_csv(&a.metrics, false);
        assert!(csv.starts_with(METRICS_HEADER));
        assert_eq!(csv.lines().count(), 3);
    }
}
