use std::fs;

use dtr_core::config::{Algorithm, Stage};
use dtr_core::critic::{CriticConfig, TwinCritic};
use dtr_core::dataset::{self, OfflineDataset};
use dtr_core::inference::{self, EvalOptions, RtgMode};
use dtr_core::policy::DtPolicy;
use dtr_core::reward::{self, RewardEnsemble};
use dtr_core::trainer::{self, TrainConfig};
use serde_json::json;

use crate::artifacts::*;
use crate::Global;

pub fn show_config(g: &Global) -> CliResult {
    let map = resolve_map(g)?;
    dtr_core::config::ExperimentConfig::from_map(&map).map_err(Failure::config)?;
    print!("{}", map.to_text());
    for st in Stage::ALL {
        println!("# {} hash {}", st.name(), map.stage_hash(st));
    }
    Ok(())
}

pub fn gen_data(g: &Global) -> CliResult {
    let run = Run::open(g)?;
    let ds = run.cfg.generate_dataset()?;
    dataset::save_dataset(&ds, &run.path(DATASET))?;
    run.finish("gen-data", run.hash(Stage::Data), &[], &[DATASET])?;
    println!(
        "wrote {} trajectories ({} steps), return_max {:.6}, config {}",
        ds.len(),
        ds.trajectories().iter().map(|t| t.rewards.len()).sum::<usize>(),
        ds.return_max(),
        run.hash(Stage::Data)
    );
    Ok(())
}

fn load_dataset_checked(run: &Run, name: &str, stage: Stage) -> CliResult<OfflineDataset> {
    run.require(&[name])?;
    let path = run.path(name);
    let ds = dataset::load_dataset(&path).map_err(upstream_err(&path))?;
    check_hash(&path, ds.meta.config_hash.as_deref(), run.hash(stage))?;
    Ok(ds)
}

pub fn annotate(g: &Global) -> CliResult {
    let run = Run::open(g)?;
    let ds = load_dataset_checked(&run, DATASET, Stage::Data)?;
    let c = &run.cfg;
    if c.queries == 0 {
        eprintln!("warning: annotate.queries = 0, writing an empty preference file");
    }
    let mut prefs = dataset::PreferenceDataset::synthesize(&ds, c.segment_len, c.queries, c.annotation, c.seed)?;
    prefs.header.config_hash = Some(run.hash(Stage::Annotate).to_string());
    dataset::save_preferences(&prefs, &run.path(PREFS))?;
    run.finish("annotate", run.hash(Stage::Annotate), &[DATASET], &[PREFS])?;
    println!("wrote {} preference pairs (segment length {}), config {}", prefs.len(), c.segment_len, run.hash(Stage::Annotate));
    Ok(())
}

pub fn train_reward(g: &Global) -> CliResult {
    let run = Run::open(g)?;
    let ds = load_dataset_checked(&run, DATASET, Stage::Data)?;
    run.require(&[PREFS])?;
    let pp = run.path(PREFS);
    let prefs = dataset::load_preferences(&pp).map_err(upstream_err(&pp))?;
    check_hash(&pp, prefs.header.config_hash.as_deref(), run.hash(Stage::Annotate))?;
    let mut ens = reward::train_ensemble(&ds, &prefs, &run.cfg.reward, run.cfg.seed)?;
    // Fit normalization statistics now so evaluation can query the ensemble.
    reward::ensemble_normalize_and_relabel(&mut ens, &ds, run.cfg.reward.permissive)?;
    ens.save(&run.path(REWARD_BIN), &run.path(REWARD_JSON), Some(run.hash(Stage::Reward)))?;
    run.finish("train-reward", run.hash(Stage::Reward), &[DATASET, PREFS], &[REWARD_BIN, REWARD_JSON])?;
    for (i, r) in ens.reports.iter().enumerate() {
        println!(
            "member {i}: {} epochs, accuracy {:.4}, threshold reached: {}",
            r.epochs,
            r.accuracy_trace.last().copied().unwrap_or(f64::NAN),
            r.reached_threshold
        );
    }
    Ok(())
}

fn load_ensemble_checked(run: &Run) -> CliResult<RewardEnsemble> {
    run.require(&[REWARD_BIN, REWARD_JSON])?;
    let side = run.path(REWARD_JSON);
    let (ens, meta) = RewardEnsemble::load(&run.path(REWARD_BIN), &side).map_err(upstream_err(&side))?;
    check_hash(&side, meta.config_hash.as_deref(), run.hash(Stage::Reward))?;
    Ok(ens)
}

pub fn relabel(g: &Global) -> CliResult {
    let run = Run::open(g)?;
    let ds = load_dataset_checked(&run, DATASET, Stage::Data)?;
    let mut ens = load_ensemble_checked(&run)?;
    let mut out = reward::ensemble_normalize_and_relabel(&mut ens, &ds, run.cfg.reward.permissive)?;
    out.meta.config_hash = Some(run.hash(Stage::Reward).to_string());
    dataset::save_dataset(&out, &run.path(RELABELED))?;
    run.finish("relabel", run.hash(Stage::Reward), &[DATASET, REWARD_BIN, REWARD_JSON], &[RELABELED])?;
    println!("relabeled {} trajectories, return_max {:.6}, config {}", out.len(), out.return_max(), run.hash(Stage::Reward));
    Ok(())
}

fn train_config(run: &Run) -> TrainConfig {
    match run.cfg.algorithm {
        Algorithm::Dtr => run.cfg.train.clone(),
        Algorithm::PbDt => TrainConfig { eta_max: 0.0, ..run.cfg.train.clone() },
    }
}

/// DTR conditions on the fractional targets and picks by Q; Pb-DT uses one target.
fn eval_options(run: &Run, return_max: f64) -> CliResult<EvalOptions> {
    let targets = match run.cfg.algorithm {
        Algorithm::Dtr => inference::initial_rtg_targets(return_max)?,
        Algorithm::PbDt => vec![return_max],
    };
    Ok(EvalOptions {
        episodes: run.cfg.eval_episodes,
        seed: run.cfg.seed,
        targets,
        rtg_mode: run.cfg.rtg_mode,
        start: run.cfg.eval_start,
    })
}

pub fn train_policy(g: &Global) -> CliResult {
    let run = Run::open(g)?;
    let ds = load_dataset_checked(&run, RELABELED, Stage::Reward)?;
    let ens = if run.cfg.rtg_mode == RtgMode::LearnedReward { Some(load_ensemble_checked(&run)?) } else { None };
    let mdp = run.cfg.mdp()?;
    let codec = run.cfg.codec(&mdp);
    let with_critic = run.cfg.algorithm == Algorithm::Dtr;
    let opts = eval_options(&run, ds.return_max())?;
    let mut hook = |p: &DtPolicy, c: Option<&TwinCritic>| -> dtr_core::Result<(f64, f64)> {
        let r = inference::evaluate(p, c, &mdp, &codec, ens.as_ref(), &opts)?;
        Ok((r.mean, r.std))
    };
    let out = trainer::train(&ds, &train_config(&run), with_critic, Some(&mut hook))?;
    let hash = run.hash(Stage::Policy);
    let extra = json!({
        "config_hash": hash,
        "algorithm": if with_critic { "dtr" } else { "pbdt" },
        "critic": out.critic.as_ref().map(|c| &c.config),
    });
    out.policy.save(&run.path(POLICY_BIN), &run.path(POLICY_JSON), extra)?;
    let mut outputs = vec![POLICY_BIN, POLICY_JSON, METRICS];
    match &out.critic {
        Some(c) => {
            c.save(&run.path(CRITIC_BIN))?;
            outputs.push(CRITIC_BIN);
        }
        None => {
            let _ = fs::remove_file(run.path(CRITIC_BIN));
        }
    }
    fs::write(run.path(METRICS), trainer::metrics_csv(&out.metrics, false))?;
    let mut inputs = vec![RELABELED];
    if ens.is_some() {
        inputs.extend([REWARD_BIN, REWARD_JSON]);
    }
    run.finish("train-policy", hash, &inputs, &outputs)?;
    if let Some(last) = out.metrics.last() {
        println!(
            "trained {} steps: l_dt {:.5}, eta {:.3}, eval return {:.4} +- {:.4}, config {hash}",
            last.step, last.l_dt, last.eta, last.eval_return_mean, last.eval_return_std
        );
    }
    Ok(())
}

pub fn eval(g: &Global) -> CliResult {
    let run = Run::open(g)?;
    let ds = load_dataset_checked(&run, RELABELED, Stage::Reward)?;
    run.require(&[POLICY_BIN, POLICY_JSON])?;
    let side = run.path(POLICY_JSON);
    let (policy, extra) = DtPolicy::load(&run.path(POLICY_BIN), &side).map_err(upstream_err(&side))?;
    check_hash(&side, extra["config_hash"].as_str(), run.hash(Stage::Policy))?;
    let mut inputs = vec![RELABELED, POLICY_BIN, POLICY_JSON];
    let critic = match run.cfg.algorithm {
        Algorithm::Dtr => {
            run.require(&[CRITIC_BIN])?;
            let cfg: CriticConfig = serde_json::from_value(extra["critic"].clone())
                .map_err(|e| Failure::upstream(format!("{}: bad critic config: {e}", side.display())))?;
            let bin = run.path(CRITIC_BIN);
            inputs.push(CRITIC_BIN);
            Some(TwinCritic::load(cfg, ds.state_dim(), ds.action_dim(), &bin).map_err(upstream_err(&bin))?)
        }
        Algorithm::PbDt => None,
    };
    let ens = if run.cfg.rtg_mode == RtgMode::LearnedReward {
        inputs.extend([REWARD_BIN, REWARD_JSON]);
        Some(load_ensemble_checked(&run)?)
    } else {
        None
    };
    let mdp = run.cfg.mdp()?;
    let codec = run.cfg.codec(&mdp);
    let mut report = inference::evaluate(&policy, critic.as_ref(), &mdp, &codec, ens.as_ref(), &eval_options(&run, ds.return_max())?)?;
    report.config_hash = Some(run.hash(Stage::Eval).to_string());
    report.checkpoint_path = Some(POLICY_BIN.to_string());
    fs::write(run.path(EVAL), serde_json::to_string_pretty(&report).map_err(std::io::Error::from)? + "\n")?;
    run.finish("eval", run.hash(Stage::Eval), &inputs, &[EVAL])?;
    println!(
        "{} episodes: mean return {:.4} +- {:.4}, config {}",
        report.episodes,
        report.mean,
        report.std,
        run.hash(Stage::Eval)
    );
    Ok(())
}
