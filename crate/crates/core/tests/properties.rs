use dtr_core::config::{ConfigMap, Stage, KEYS};
use dtr_core::critic::n_step_targets;
use dtr_core::dataset::{compute_rtg, load_dataset, save_dataset, OfflineDataset, Trajectory};
use dtr_core::inference::{argmax_lowest, initial_rtg_targets, TARGET_MULTIPLIERS};
use dtr_core::reward::{normalize_members, NormMode};
use dtr_core::tensor::gradcheck::check_params;
use dtr_core::tensor::{Activation, Graph, Mlp, ParamSet, Tensor};
use dtr_core::trainer::{eta_at, lambda_coefficient, EtaSchedule};
use dtr_core::{env, oracle, stats};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn finite(lo: f64, hi: f64) -> impl Strategy<Value = f64> {
    lo..hi
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn rtg_satisfies_backward_recursion(r in prop::collection::vec(finite(-5.0, 5.0), 1..40)) {
        let g = compute_rtg(&r).unwrap();
        prop_assert_eq!(g.len(), r.len());
        prop_assert!((g[0] - r.iter().sum::<f64>()).abs() < 1e-9);
        prop_assert_eq!(g[r.len() - 1], r[r.len() - 1]);
        for t in 0..r.len() - 1 {
            prop_assert!((g[t] - (r[t] + g[t + 1])).abs() < 1e-9);
        }
    }

    #[test]
    fn n_step_targets_recursion(
        r in prop::collection::vec(finite(-2.0, 2.0), 0..12),
        boot in prop::option::of(finite(-10.0, 10.0)),
        gamma in 0.5f64..1.0,
    ) {
        let t = n_step_targets(&r, boot, gamma);
        prop_assert_eq!(t.len(), r.len() + 1);
        prop_assert_eq!(t[r.len()], boot.unwrap_or(0.0));
        for i in 0..r.len() {
            prop_assert!((t[i] - (r[i] + gamma * t[i + 1])).abs() < 1e-9);
        }
    }

    #[test]
    fn minmax_relabel_range_and_order(
        raw in prop::collection::vec(prop::collection::vec(finite(-3.0, 3.0), 8), 1..4),
    ) {
        prop_assume!(raw.iter().all(|m| m.iter().any(|&x| x != m[0])));
        let (flat, st) = normalize_members(&raw, NormMode::MinMax, false).unwrap();
        prop_assert_eq!(st.len(), raw.len());
        prop_assert!(flat.iter().all(|x| (0.0..=1.0).contains(x)));
        if raw.len() == 1 {
            let m = &raw[0];
            for i in 0..m.len() {
                for j in 0..m.len() {
                    if m[i] < m[j] {
                        prop_assert!(flat[i] < flat[j]);
                    }
                }
            }
            prop_assert!(flat.contains(&0.0) && flat.contains(&1.0));
        }
    }

    #[test]
    fn spearman_is_bounded_and_monotone_invariant(xs in prop::collection::vec(finite(-10.0, 10.0), 3..30), ys in prop::collection::vec(finite(-10.0, 10.0), 30)) {
        let ys = &ys[..xs.len()];
        prop_assume!(xs.iter().any(|&x| x != xs[0]) && ys.iter().any(|&y| y != ys[0]));
        let r = stats::spearman(&xs, ys).unwrap();
        prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&r));
        let cubed: Vec<f64> = xs.iter().map(|x| x * x * x + 2.0 * x).collect();
        prop_assert!((stats::spearman(&cubed, ys).unwrap() - r).abs() < 1e-12);
        prop_assert!((stats::spearman(&xs, &xs).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn argmax_lowest_breaks_ties_low(v in prop::collection::vec(-3i32..3, 1..20)) {
        let f: Vec<f64> = v.iter().map(|&x| x as f64).collect();
        let i = argmax_lowest(&f);
        let m = f.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        prop_assert_eq!(f[i], m);
        prop_assert!(f[..i].iter().all(|&x| x < m));
    }

    #[test]
    fn rtg_targets_scale_with_return_max(rmax in 1e-3f64..1e3) {
        let t = initial_rtg_targets(rmax).unwrap();
        prop_assert_eq!(t.len(), TARGET_MULTIPLIERS.len());
        for (x, k) in t.iter().zip(TARGET_MULTIPLIERS) {
            prop_assert!((x - k * rmax).abs() <= 1e-12 * rmax);
        }
    }

    #[test]
    fn eta_schedule_is_monotone_and_bounded(eta_max in 0.0f64..5.0, max_step in 1usize..10_000, a in 0usize..10_000, b in 0usize..10_000) {
        let (lo, hi) = (a.min(b), a.max(b));
        let (e1, e2) = (eta_at(EtaSchedule::Linear, eta_max, lo, max_step), eta_at(EtaSchedule::Linear, eta_max, hi, max_step));
        prop_assert!(e1 <= e2 + 1e-15);
        prop_assert!((0.0..=eta_max + 1e-12).contains(&e2));
        prop_assert_eq!(eta_at(EtaSchedule::Constant, eta_max, lo, max_step), eta_max);
        let l = lambda_coefficient(e2, 0.0);
        prop_assert!(l.is_finite());
    }

    #[test]
    fn value_iteration_is_a_bellman_fixed_point(
        seed in any::<u64>(),
        w in 2usize..6,
        h in 2usize..6,
        gamma in 0.5f64..0.99,
    ) {
        let mdp = env::build_gridworld(w, h, w * h - 1, &[], -0.1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rewards: Vec<f64> = mdp.rewards.iter().map(|r| r + rand::Rng::gen_range(&mut rng, -0.05..0.05)).collect();
        let sol = oracle::value_iteration(&mdp, &rewards, gamma).unwrap();
        prop_assert!(oracle::bellman_residual(&mdp, &rewards, gamma, &sol.v) < 1e-8);
        for s in 0..sol.v.len() {
            let a = sol.greedy[s];
            prop_assert!((sol.q[s * mdp.num_actions + a] - sol.v[s]).abs() < 1e-9 || mdp.terminal_states[s]);
        }
    }

    #[test]
    fn config_text_roundtrip_preserves_hashes(seed in any::<u32>(), q in 0usize..5000, lr in 1e-6f64..1e-1) {
        let mut m = ConfigMap::from_preset("gridworld-medium").unwrap();
        m.set("seed", &seed.to_string()).unwrap();
        m.set("annotate.queries", &q.to_string()).unwrap();
        m.set("train.lr", &format!("{lr:e}")).unwrap();
        let mut again = ConfigMap::default();
        again.apply_text(&m.to_text(), None, "roundtrip").unwrap();
        prop_assert_eq!(&again, &m);
        prop_assert_eq!(again.hash(), m.hash());
        prop_assert_eq!(m.stage_hash(Stage::Eval), m.hash());
        prop_assert_eq!(m.iter().count(), KEYS.len());
    }

    #[test]
    fn mlp_gradients_match_finite_differences(seed in any::<u64>(), width in 1usize..6, rows in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamSet::default();
        let mlp = Mlp::new(&mut ps, "m", 3, &[width], 2, Activation::Tanh, &mut rng);
        let x: Vec<f64> = (0..rows * 3).map(|i| ((i as f64) * 0.37).sin()).collect();
        let input = Tensor::new(vec![rows, 3], x).unwrap();
        let loss = |p: &ParamSet, grad: bool| {
            let mut g = Graph::new();
            let vars = p.bind(&mut g, grad);
            let xi = g.constant(input.clone());
            let y = mlp.forward(&mut g, &vars, xi).unwrap();
            let y = g.square(y).unwrap();
            let l = g.mean(y).unwrap();
            (g, vars, l)
        };
        let (mut g, vars, l) = loss(&ps, true);
        let grads = g.backward(l).unwrap();
        let analytic: Vec<Tensor> = vars.iter().map(|&v| grads.get(v)).collect();
        let rep = check_params(&ps, &analytic, |p| {
            let (g, _, l) = loss(p, false);
            Ok(g.value(l).data()[0])
        }, 1e-6).unwrap();
        prop_assert!(rep.max_rel_error < 1e-4, "{:?}", rep);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn dataset_jsonl_roundtrip_is_bit_exact(seed in any::<u64>(), n in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut trajs = Vec::new();
        for i in 0..n {
            let len = 1 + i % 4;
            let states = (0..len).map(|_| (0..3).map(|_| rand::Rng::gen_range(&mut rng, -1.0..1.0)).collect()).collect();
            let actions = (0..len).map(|k| { let mut a = vec![0.0; 2]; a[k % 2] = 1.0; a }).collect();
            let rewards = (0..len).map(|_| rand::Rng::gen_range(&mut rng, -1e3..1e3) / 7.0).collect();
            let mut terminals = vec![false; len];
            terminals[len - 1] = i % 2 == 0;
            trajs.push(Trajectory::new(format!("t{i}"), states, actions, rewards, terminals).unwrap());
        }
        let ds = OfflineDataset::new("prop", seed, trajs).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.jsonl");
        save_dataset(&ds, &p).unwrap();
        let back = load_dataset(&p).unwrap();
        prop_assert_eq!(&back, &ds);
        for (a, b) in back.trajectories().iter().zip(ds.trajectories()) {
            prop_assert_eq!(a.rtg(), b.rtg());
        }
    }
}
