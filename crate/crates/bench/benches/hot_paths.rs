use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use dtr_core::config::{ConfigMap, ExperimentConfig};
use dtr_core::dataset::{OfflineDataset, PreferenceDataset, StateNorm};
use dtr_core::inference::{self, EvalOptions, RtgMode};
use dtr_core::policy::{self, DtPolicy};
use dtr_core::reward::{self, PreparedPrefs, RewardConfig};
use dtr_core::tensor::{Graph, Tensor};
use dtr_core::{env, oracle, trainer};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn gridworld() -> (ExperimentConfig, OfflineDataset) {
    let mut m = ConfigMap::from_preset("gridworld-medium").unwrap();
    m.set("data.episodes", "100").unwrap();
    let cfg = ExperimentConfig::from_map(&m).unwrap();
    let ds = cfg.generate_dataset().unwrap();
    (cfg, ds)
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng, grad: bool) -> Tensor {
    let n = shape.iter().product();
    let mut t = Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
    t.requires_grad = grad;
    t
}

fn tensor_ops(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let a = random(&[128, 128], &mut rng, true);
    let b = random(&[128, 128], &mut rng, true);
    c.bench_function("matmul_128_fwd_bwd", |bch| {
        bch.iter(|| {
            let mut g = Graph::new();
            let (x, y) = (g.leaf(a.clone()), g.leaf(b.clone()));
            let z = g.matmul(x, y).unwrap();
            let z = g.tanh(z).unwrap();
            let l = g.mean(z).unwrap();
            black_box(g.backward(l).unwrap());
        })
    });
    let s = random(&[16, 32, 32], &mut rng, true);
    c.bench_function("softmax_16x32x32_fwd_bwd", |bch| {
        bch.iter(|| {
            let mut g = Graph::new();
            let x = g.leaf(s.clone());
            let y = g.softmax(x).unwrap();
            let y = g.square(y).unwrap();
            let l = g.sum(y).unwrap();
            black_box(g.backward(l).unwrap());
        })
    });
}

fn dp(c: &mut Criterion) {
    let mdp = env::build_gridworld(8, 8, 63, &[27, 36], -0.05).unwrap();
    c.bench_function("value_iteration_8x8", |bch| bch.iter(|| black_box(oracle::value_iteration(&mdp, &mdp.rewards, 0.99).unwrap())));
}

fn reward_model(c: &mut Criterion) {
    let (cfg, ds) = gridworld();
    let prefs = PreferenceDataset::synthesize(&ds, cfg.segment_len, 256, cfg.annotation, 0).unwrap();
    let prepared = PreparedPrefs::new(&ds, &prefs).unwrap();
    let rc = RewardConfig { max_epochs: 1, accuracy_threshold: 2.0, ..cfg.reward.clone() };
    c.bench_function("reward_member_epoch_256_pairs", |bch| bch.iter(|| black_box(reward::train_member(&prepared, &rc, 0, 0).unwrap())));
}

fn policy_and_eval(c: &mut Criterion) {
    let (cfg, ds) = gridworld();
    let tc = &cfg.train;
    let norm = StateNorm::fit(&ds);
    let dt_cfg = trainer::dt_config_for(&ds, tc);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let policy = DtPolicy::new(dt_cfg.clone(), norm.clone(), &mut rng).unwrap();
    let batch = trainer::sample_windows(&ds, &norm, tc.context_len, dt_cfg.max_timestep, tc.batch_size, &mut rng).unwrap();
    c.bench_function("dt_l_dt_batch", |bch| bch.iter(|| black_box(policy::l_dt(&policy, &batch.windows).unwrap())));
    c.bench_function("dt_fwd_bwd_batch", |bch| {
        bch.iter(|| {
            let mut g = Graph::new();
            let p = policy.params.bind(&mut g, true);
            let acts = g.constant(batch.windows.action_rows(dt_cfg.action_dim).unwrap());
            let out = policy.forward(&mut g, &p, &batch.windows, acts, None).unwrap();
            let l = policy::l_dt_on_graph(&mut g, out, &batch.windows, &dt_cfg).unwrap();
            black_box(g.backward(l).unwrap());
        })
    });
    let mdp = cfg.mdp().unwrap();
    let codec = cfg.codec(&mdp);
    let opts = EvalOptions {
        episodes: 1,
        seed: 0,
        targets: inference::initial_rtg_targets(ds.return_max()).unwrap(),
        rtg_mode: RtgMode::FixedDecrement,
        start: None,
    };
    c.bench_function("evaluate_episode_5_targets", |bch| bch.iter(|| black_box(inference::evaluate(&policy, None, &mdp, &codec, None, &opts).unwrap())));
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = tensor_ops, dp, reward_model, policy_and_eval
}
criterion_main!(benches);
