//! Decision-Transformer policy over `(rtg, state, action)` token windows.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::StateNorm;
use crate::error::{Error, Result};
use crate::tensor::{read_checkpoint, uniform, write_checkpoint, Graph, LayerNorm, Linear, ParamId, ParamSet, Tensor, Var};

/// Score assigned to masked attention logits.
const MASKED_LOGIT: f64 = -1e9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DtConfig {
    pub state_dim: usize,
    pub action_dim: usize,
    pub context_len: usize,
    pub embed_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub dropout: f64,
    pub max_timestep: usize,
    /// Return-to-go inputs are divided by this.
    pub rtg_scale: f64,
    pub action_bound: f64,
}

impl DtConfig {
    pub fn new(state_dim: usize, action_dim: usize, max_timestep: usize) -> Self {
        Self {
            state_dim,
            action_dim,
            context_len: 20,
            embed_dim: 256,
            layers: 4,
            heads: 4,
            dropout: 0.1,
            max_timestep,
            rtg_scale: 1.0,
            action_bound: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.context_len == 0 {
            return Err(Error::InvalidArgument("context length must be >= 1".into()));
        }
        if self.heads == 0 || !self.embed_dim.is_multiple_of(self.heads) {
            return Err(Error::InvalidArgument(format!(
                "embedding size {} not divisible by {} heads",
                self.embed_dim, self.heads
            )));
        }
        if !(self.rtg_scale > 0.0) {
            return Err(Error::InvalidArgument("rtg scale must be positive".into()));
        }
        Ok(())
    }
}

/// A batch of left-padded windows. Per-position arrays are `[batch * len]`
/// in batch-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowBatch {
    pub batch: usize,
    pub len: usize,
    pub rtg: Vec<f64>,
    /// `[batch * len * state_dim]`, already normalized.
    pub states: Vec<f64>,
    /// `[batch * len * action_dim]`.
    pub actions: Vec<f64>,
    pub timesteps: Vec<usize>,
    pub valid: Vec<bool>,
}

impl WindowBatch {
    pub fn positions(&self) -> usize {
        self.batch * self.len
    }

    pub fn num_valid(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    pub fn state_rows(&self, state_dim: usize) -> Result<Tensor> {
        Tensor::new(vec![self.positions(), state_dim], self.states.clone())
    }

    pub fn action_rows(&self, action_dim: usize) -> Result<Tensor> {
        Tensor::new(vec![self.positions(), action_dim], self.actions.clone())
    }
}

/// Builds one left-padded window from aligned per-step sequences, keeping the
/// last `len` steps.
pub struct WindowBuilder<'a> {
    pub norm: &'a StateNorm,
    pub len: usize,
    pub action_dim: usize,
}

impl WindowBuilder<'_> {
    /// Appends the steps `(rtg, raw state, action, timestep)` as one window.
    pub fn push(&self, out: &mut WindowBatch, steps: &[(f64, &[f64], &[f64], usize)]) -> Result<()> {
        if steps.len() > self.len {
            return Err(Error::InvalidArgument(format!(
                "window of {} steps exceeds context length {}",
                steps.len(),
                self.len
            )));
        }
        let pad = self.len - steps.len();
        let sd = self.norm.dim();
        for _ in 0..pad {
            out.rtg.push(0.0);
            out.states.extend(std::iter::repeat_n(0.0, sd));
            out.actions.extend(std::iter::repeat_n(0.0, self.action_dim));
            out.timesteps.push(0);
            out.valid.push(false);
        }
        for &(r, s, a, t) in steps {
            out.rtg.push(r);
            out.states.extend(self.norm.apply(s));
            out.actions.extend_from_slice(a);
            out.timesteps.push(t);
            out.valid.push(true);
        }
        out.batch += 1;
        Ok(())
    }

    pub fn empty(&self) -> WindowBatch {
        WindowBatch {
            batch: 0,
            len: self.len,
            rtg: Vec::new(),
            states: Vec::new(),
            actions: Vec::new(),
            timesteps: Vec::new(),
            valid: Vec::new(),
        }
    }
}

#[derive(Clone, Debug)]
struct Block {
    ln1: LayerNorm,
    qkv: Linear,
    proj: Linear,
    ln2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

/// Policy network plus the state normalization it was trained with.
#[derive(Clone, Debug)]
pub struct DtPolicy {
    pub config: DtConfig,
    pub params: ParamSet,
    pub norm: StateNorm,
    embed_rtg: Linear,
    embed_state: Linear,
    embed_action: Linear,
    embed_time: ParamId,
    embed_ln: LayerNorm,
    blocks: Vec<Block>,
    final_ln: LayerNorm,
    action_head: Linear,
    state_head: Linear,
}

/// Per-position predictions, `[batch * len, dim]`.
#[derive(Clone, Copy, Debug)]
pub struct DtOutput {
    pub actions: Var,
    pub states: Var,
}

impl DtPolicy {
    pub fn new<R: Rng + ?Sized>(config: DtConfig, norm: StateNorm, rng: &mut R) -> Result<Self> {
        config.validate()?;
        if norm.dim() != config.state_dim {
            return Err(Error::InvalidArgument("state normalizer dimension mismatch".into()));
        }
        let d = config.embed_dim;
        let mut ps = ParamSet::new();
        let embed_rtg = Linear::new(&mut ps, "embed_rtg", 1, d, rng);
        let embed_state = Linear::new(&mut ps, "embed_state", config.state_dim, d, rng);
        let embed_action = Linear::new(&mut ps, "embed_action", config.action_dim, d, rng);
        let embed_time = ps.add("embed_time", uniform(rng, &[config.max_timestep + 1, d], 0.1));
        let embed_ln = LayerNorm::new(&mut ps, "embed_ln", d);
        let blocks = (0..config.layers)
            .map(|i| Block {
                ln1: LayerNorm::new(&mut ps, &format!("block{i}.ln1"), d),
                qkv: Linear::new(&mut ps, &format!("block{i}.qkv"), d, 3 * d, rng),
                proj: Linear::new(&mut ps, &format!("block{i}.proj"), d, d, rng),
                ln2: LayerNorm::new(&mut ps, &format!("block{i}.ln2"), d),
                fc1: Linear::new(&mut ps, &format!("block{i}.fc1"), d, 4 * d, rng),
                fc2: Linear::new(&mut ps, &format!("block{i}.fc2"), 4 * d, d, rng),
            })
            .collect();
        let final_ln = LayerNorm::new(&mut ps, "final_ln", d);
        let action_head = Linear::new(&mut ps, "action_head", d, config.action_dim, rng);
        let state_head = Linear::new(&mut ps, "state_head", d, config.state_dim, rng);
        Ok(Self {
            config,
            params: ps,
            norm,
            embed_rtg,
            embed_state,
            embed_action,
            embed_time,
            embed_ln,
            blocks,
            final_ln,
            action_head,
            state_head,
        })
    }

    fn maybe_dropout(&self, g: &mut Graph, x: Var, rng: &mut Option<&mut ChaCha8Rng>) -> Result<Var> {
        match rng {
            Some(r) if self.config.dropout > 0.0 => g.dropout(x, self.config.dropout, *r),
            _ => Ok(x),
        }
    }

    /// Runs the transformer. `actions` is the `[batch * len, action_dim]`
    /// action-token input, which may be a constant or a differentiable value.
    /// Dropout is active only when `rng` is provided.
    pub fn forward(&self, g: &mut Graph, p: &[Var], w: &WindowBatch, actions: Var, mut rng: Option<&mut ChaCha8Rng>) -> Result<DtOutput> {
        let c = &self.config;
        if w.len > c.context_len || w.len == 0 {
            return Err(Error::InvalidArgument(format!(
                "window length {} outside 1..={}",
                w.len, c.context_len
            )));
        }
        if let Some(&t) = w.timesteps.iter().find(|&&t| t > c.max_timestep) {
            return Err(Error::InvalidArgument(format!("timestep {t} beyond max {}", c.max_timestep)));
        }
        let (b, h, d) = (w.batch, w.len, c.embed_dim);
        let n = b * h;
        let t_tok = 3 * h;
        let rtg = g.constant(Tensor::new(vec![n, 1], w.rtg.iter().map(|r| r / c.rtg_scale).collect())?);
        let st = g.constant(w.state_rows(c.state_dim)?);
        let time = g.embedding(p[self.embed_time.index()], &w.timesteps)?;
        let er = self.embed_rtg.forward(g, p, rtg)?;
        let es = self.embed_state.forward(g, p, st)?;
        let ea = self.embed_action.forward(g, p, actions)?;
        let er = g.add(er, time)?;
        let es = g.add(es, time)?;
        let ea = g.add(ea, time)?;
        let tokens = g.concat_last(&[er, es, ea])?;
        let x = g.reshape(tokens, &[b * t_tok, d])?;
        let x = self.embed_ln.forward(g, p, x)?;
        let mut x = self.maybe_dropout(g, x, &mut rng)?;

        // causal mask over interleaved tokens plus key padding
        let heads = c.heads;
        let mut mask = Vec::with_capacity(b * heads * t_tok * t_tok);
        for bi in 0..b {
            let row_mask: Vec<bool> = (0..t_tok * t_tok)
                .map(|qk| {
                    let (q, k) = (qk / t_tok, qk % t_tok);
                    k > q || !w.valid[bi * h + k / 3]
                })
                .collect();
            for _ in 0..heads {
                mask.extend_from_slice(&row_mask);
            }
        }
        let hd = d / heads;
        let scale = 1.0 / (hd as f64).sqrt();
        for blk in &self.blocks {
            let hx = blk.ln1.forward(g, p, x)?;
            let qkv = blk.qkv.forward(g, p, hx)?;
            let split = |g: &mut Graph, k: usize| -> Result<Var> {
                let part = g.slice_last(qkv, k * d, d)?;
                let part = g.reshape(part, &[b, t_tok, heads, hd])?;
                let part = g.permute_0213(part)?;
                g.reshape(part, &[b * heads, t_tok, hd])
            };
            let q = split(g, 0)?;
            let k = split(g, 1)?;
            let v = split(g, 2)?;
            let kt = g.transpose_last2(k)?;
            let scores = g.batch_matmul(q, kt)?;
            let scores = g.scale(scores, scale)?;
            let scores = g.masked_fill(scores, &mask, MASKED_LOGIT)?;
            let att = g.softmax(scores)?;
            let att = self.maybe_dropout(g, att, &mut rng)?;
            let y = g.batch_matmul(att, v)?;
            let y = g.reshape(y, &[b, heads, t_tok, hd])?;
            let y = g.permute_0213(y)?;
            let y = g.reshape(y, &[b * t_tok, d])?;
            let y = blk.proj.forward(g, p, y)?;
            let y = self.maybe_dropout(g, y, &mut rng)?;
            x = g.add(x, y)?;
            let hx = blk.ln2.forward(g, p, x)?;
            let f = blk.fc1.forward(g, p, hx)?;
            let f = g.relu(f)?;
            let f = blk.fc2.forward(g, p, f)?;
            let f = self.maybe_dropout(g, f, &mut rng)?;
            x = g.add(x, f)?;
        }
        let x = self.final_ln.forward(g, p, x)?;

        let mut act_rows = Vec::with_capacity(n);
        let mut state_rows = Vec::with_capacity(n);
        for bi in 0..b {
            for t in 0..h {
                let base = bi * t_tok;
                act_rows.push(base + 3 * t + 1);
                let prev_valid = t > 0 && w.valid[bi * h + t - 1];
                state_rows.push(if prev_valid { base + 3 * (t - 1) + 2 } else { base + 3 * t });
            }
        }
        let xa = g.gather_rows(x, &act_rows)?;
        let a = self.action_head.forward(g, p, xa)?;
        let a = g.tanh(a)?;
        let a = if c.action_bound != 1.0 { g.scale(a, c.action_bound)? } else { a };
        let xs = g.gather_rows(x, &state_rows)?;
        let s = self.state_head.forward(g, p, xs)?;
        Ok(DtOutput { actions: a, states: s })
    }

    /// Gradient-free predictions with dropout off.
    pub fn predict(&self, w: &WindowBatch) -> Result<(Tensor, Tensor)> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let acts = g.constant(w.action_rows(self.config.action_dim)?);
        let out = self.forward(&mut g, &p, w, acts, None)?;
        Ok((g.value(out.actions).clone(), g.value(out.states).clone()))
    }

    pub fn save(&self, bin: &Path, sidecar: &Path, extra: serde_json::Value) -> Result<()> {
        write_checkpoint(bin, self.params.iter())?;
        let side = serde_json::json!({
            "config": self.config,
            "state_norm": self.norm,
            "extra": extra,
        });
        std::fs::write(sidecar, serde_json::to_string_pretty(&side).map_err(std::io::Error::from)?)?;
        Ok(())
    }

    pub fn load(bin: &Path, sidecar: &Path) -> Result<(Self, serde_json::Value)> {
        let text = std::fs::read_to_string(sidecar)?;
        let side: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: sidecar.to_path_buf(),
            line: e.line(),
            msg: e.to_string(),
        })?;
        let parse = |k: &str| -> Result<serde_json::Value> {
            side.get(k).cloned().ok_or_else(|| Error::Checkpoint(format!("sidecar missing `{k}`")))
        };
        let config: DtConfig = serde_json::from_value(parse("config")?).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let norm: StateNorm = serde_json::from_value(parse("state_norm")?).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut policy = Self::new(config, norm, &mut rng)?;
        let entries = read_checkpoint(bin)?;
        policy.params.load_named(entries.iter().map(|(n, t)| (n.as_str(), t)))?;
        Ok((policy, side.get("extra").cloned().unwrap_or(serde_json::Value::Null)))
    }
}

/// `mean over valid positions of ||s_hat - s||^2 + ||a_hat - a||^2`.
pub fn l_dt_on_graph(g: &mut Graph, out: DtOutput, w: &WindowBatch, cfg: &DtConfig) -> Result<Var> {
    let nv = w.num_valid();
    if nv == 0 {
        return Err(Error::InvalidArgument("window batch has no valid positions".into()));
    }
    let s_t = g.constant(w.state_rows(cfg.state_dim)?);
    let a_t = g.constant(w.action_rows(cfg.action_dim)?);
    let ds = g.sub(out.states, s_t)?;
    let da = g.sub(out.actions, a_t)?;
    let ds = g.square(ds)?;
    let da = g.square(da)?;
    let es = g.sum_last(ds)?;
    let ea = g.sum_last(da)?;
    let e = g.add(es, ea)?;
    let weights = g.constant(Tensor::new(
        vec![w.positions()],
        w.valid.iter().map(|&v| if v { 1.0 / nv as f64 } else { 0.0 }).collect(),
    )?);
    let e = g.mul(e, weights)?;
    g.sum(e)
}

/// L_DT for a batch, with the parameter vars it was computed from.
pub fn l_dt(policy: &DtPolicy, w: &WindowBatch) -> Result<f64> {
    let mut g = Graph::new();
    let p = policy.params.bind(&mut g, false);
    let acts = g.constant(w.action_rows(policy.config.action_dim)?);
    let out = policy.forward(&mut g, &p, w, acts, None)?;
    let l = l_dt_on_graph(&mut g, out, w, &policy.config)?;
    Ok(g.value(l).item())
}

/// Generates actions position by position, feeding each back as the action
/// token of its position before predicting the next. Returns the
/// `[batch * len, action_dim]` generated actions (zero rows at padding).
pub fn rollout_window_actions(
    policy: &DtPolicy,
    g: &mut Graph,
    p: &[Var],
    w: &WindowBatch,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<Var> {
    let (b, h, ad) = (w.batch, w.len, policy.config.action_dim);
    // one [b, ad] block per position, position-major
    let zeros = g.constant(Tensor::zeros(&[b, ad]));
    let mut per_pos: Vec<Var> = vec![zeros; h];
    // row (bi, t) of the batch-major layout lives at t * b + bi in position-major
    let to_batch_major: Vec<usize> = (0..b).flat_map(|bi| (0..h).map(move |t| t * b + bi)).collect();
    for t in 0..h {
        let stacked = g.concat_rows(&per_pos)?;
        let acts = g.gather_rows(stacked, &to_batch_major)?;
        let out = policy.forward(g, p, w, acts, rng.as_deref_mut())?;
        let rows: Vec<usize> = (0..b).map(|bi| bi * h + t).collect();
        let a_t = g.gather_rows(out.actions, &rows)?;
        let keep: Vec<bool> = (0..b * ad).map(|i| !w.valid[(i / ad) * h + t]).collect();
        per_pos[t] = g.masked_fill(a_t, &keep, 0.0)?;
    }
    let stacked = g.concat_rows(&per_pos)?;
    g.gather_rows(stacked, &to_batch_major)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> DtConfig {
        DtConfig {
            context_len: 3,
            embed_dim: 8,
            layers: 2,
            heads: 2,
            dropout: 0.0,
            ..DtConfig::new(3, 2, 10)
        }
    }

    fn batch(rng: &mut ChaCha8Rng, cfg: &DtConfig, b: usize, valid_from: usize) -> WindowBatch {
        let h = cfg.context_len;
        let n = b * h;
        WindowBatch {
            batch: b,
            len: h,
            rtg: (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            states: (0..n * cfg.state_dim).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            actions: (0..n * cfg.action_dim).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            timesteps: (0..n).map(|i| i % h).collect(),
            valid: (0..n).map(|i| i % h >= valid_from).collect(),
        }
    }

    fn policy(cfg: &DtConfig, seed: u64) -> DtPolicy {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DtPolicy::new(cfg.clone(), StateNorm::identity(cfg.state_dim), &mut rng).unwrap()
    }

    #[test]
    fn future_tokens_do_not_leak() {
        let cfg = small_config();
        let pol = policy(&cfg, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = batch(&mut rng, &cfg, 1, 0);
        let (a0, s0) = pol.predict(&w).unwrap();
        let mut w2 = w.clone();
        // perturb the last action token: affects nothing before it
        w2.actions[2 * cfg.action_dim] += 0.7;
        let (a1, s1) = pol.predict(&w2).unwrap();
        assert_eq!(a0, a1);
        assert_eq!(s0, s1);
        // perturb the last state token: earlier positions unchanged
        w2.states[2 * cfg.state_dim] += 0.7;
        let (a2, s2) = pol.predict(&w2).unwrap();
        assert_eq!(a0.row(0), a2.row(0));
        assert_eq!(a0.row(1), a2.row(1));
        assert_eq!(s0.row(1), s2.row(1));
        assert_ne!(a0.row(2), a2.row(2));
    }

    #[test]
    fn padding_is_invisible() {
        let cfg = small_config();
        let pol = policy(&cfg, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = batch(&mut rng, &cfg, 1, 2);
        let (a0, _) = pol.predict(&w).unwrap();
        let mut w2 = w.clone();
        w2.states[0] = 5.0;
        w2.rtg[1] = -3.0;
        let (a1, _) = pol.predict(&w2).unwrap();
        assert_eq!(a0.row(2), a1.row(2));
    }

    #[test]
    fn actions_are_bounded_and_deterministic() {
        let cfg = small_config();
        let pol = policy(&cfg, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w = batch(&mut rng, &cfg, 4, 0);
        let (a, _) = pol.predict(&w).unwrap();
        assert!(a.data().iter().all(|v| v.abs() < 1.0));
        assert_eq!(pol.predict(&w).unwrap().0, a);
    }

    #[test]
    fn rejects_long_windows() {
        let cfg = small_config();
        let pol = policy(&cfg, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut big = cfg.clone();
        big.context_len = 4;
        let w = batch(&mut rng, &big, 1, 0);
        assert!(pol.predict(&w).is_err());
    }

    #[test]
    fn l_dt_zero_and_hand_value() {
        let cfg = small_config();
        let pol = policy(&cfg, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let w = batch(&mut rng, &cfg, 2, 1);
        // targets equal to the predictions made from the same input tokens
        let (a, s) = pol.predict(&w).unwrap();
        let mut w3 = w.clone();
        w3.actions = a.data().to_vec();
        w3.states = s.data().to_vec();
        let mut g = Graph::new();
        let p = pol.params.bind(&mut g, false);
        let acts = g.constant(w.action_rows(cfg.action_dim).unwrap());
        let out = pol.forward(&mut g, &p, &w, acts, None).unwrap();
        let l = l_dt_on_graph(&mut g, out, &w3, &cfg).unwrap();
        assert_eq!(g.value(l).item(), 0.0);
        // shift one valid action target by v
        let mut w4 = w3.clone();
        let pos = 1;
        w4.actions[pos * cfg.action_dim] += 0.3;
        w4.actions[pos * cfg.action_dim + 1] -= 0.4;
        let mut g = Graph::new();
        let p = pol.params.bind(&mut g, false);
        let acts = g.constant(w.action_rows(cfg.action_dim).unwrap());
        let out = pol.forward(&mut g, &p, &w, acts, None).unwrap();
        let l = l_dt_on_graph(&mut g, out, &w4, &cfg).unwrap();
        let want = (0.3f64 * 0.3 + 0.4 * 0.4) / w.num_valid() as f64;
        assert!((g.value(l).item() - want).abs() < 1e-15);
    }

    #[test]
    fn autoregressive_single_step_matches_forward() {
        let mut cfg = small_config();
        cfg.context_len = 1;
        let pol = policy(&cfg, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let w = batch(&mut rng, &cfg, 3, 0);
        let (a, _) = pol.predict(&w).unwrap();
        let mut g = Graph::new();
        let p = pol.params.bind(&mut g, false);
        let ar = rollout_window_actions(&pol, &mut g, &p, &w, None).unwrap();
        assert_eq!(g.value(ar), &a);
    }

    #[test]
    fn checkpoint_round_trip() {
        let cfg = small_config();
        let pol = policy(&cfg, 10);
        let dir = tempfile::tempdir().unwrap();
        let (b, s) = (dir.path().join("p.bin"), dir.path().join("p.json"));
        pol.save(&b, &s, serde_json::json!({"k": 1})).unwrap();
        let (back, extra) = DtPolicy::load(&b, &s).unwrap();
        assert_eq!(back.params, pol.params);
        assert_eq!(extra["k"], 1);
    }
}
