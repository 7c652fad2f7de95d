use std::path::Path;

use anyhow::Result;
use quatro_core::policy::SamplingConfig;
use quatro_core::seed::tagged_stream;
use quatro_core::{RunRecord, SyntheticEnv, TabularPolicy, Trainer};

use crate::config::ExperimentConfig;
use crate::output::{write_json_pretty, write_run_csv, JsonlWriter, RolloutLogLine};

const BASE_TAG: u64 = 0x6261_7365;
const EVAL_TAG: u64 = 0x6576_616c;

/// Runs training and writes every artifact into the already-created `out`.
pub fn train_into(cfg: &ExperimentConfig, out: &Path) -> Result<RunRecord> {
    write_json_pretty(&out.join("config.resolved.json"), cfg)?;

    let envs = cfg.env.build()?;
    let initial = cfg.env.initial_policies(&envs, cfg.seed)?;
    let algorithm = cfg.train.algorithm;

    if cfg.metrics.eval_samples > 0 {
        write_samples(&out.join("base_rollouts.jsonl"), cfg, &envs, &initial, 0, BASE_TAG)?;
    }

    let mut rollouts = JsonlWriter::create(&out.join("rollouts.jsonl"))?;
    let mut write_err = None;
    let mut trainer = Trainer::new(envs.clone(), initial, cfg.train.clone())?;
    let record = trainer.run_with(|step, details| {
        if write_err.is_some() {
            return;
        }
        for d in details {
            for t in &d.rollouts {
                if let Err(e) = rollouts.write(&RolloutLogLine::new(step, algorithm, t)) {
                    write_err = Some(e);
                    return;
                }
            }
        }
    });
    if let Some(e) = write_err {
        return Err(e);
    }
    rollouts.finish()?;
    write_run_csv(&out.join("run.csv"), &record)?;

    if cfg.metrics.eval_samples > 0 {
        let step = record.rows.len();
        write_samples(&out.join("eval_rollouts.jsonl"), cfg, &envs, trainer.policies(), step, EVAL_TAG)?;
    }
    Ok(record)
}

/// Draws `eval_samples` scored rollouts per query with evaluation sampling.
fn write_samples(
    path: &Path,
    cfg: &ExperimentConfig,
    envs: &[SyntheticEnv],
    policies: &[TabularPolicy],
    step: usize,
    tag: u64,
) -> Result<()> {
    let sampling = SamplingConfig::eval();
    let mut w = JsonlWriter::create(path)?;
    for (env, policy) in envs.iter().zip(policies) {
        let mut rng = tagged_stream(cfg.seed, tag, env.query_id.0);
        for _ in 0..cfg.metrics.eval_samples {
            let mut t = policy.sample(env.query_id, &sampling, &mut rng)?;
            env.score(&mut t)?;
            w.write(&RolloutLogLine::new(step, cfg.train.algorithm, &t))?;
        }
    }
    w.finish()
}
