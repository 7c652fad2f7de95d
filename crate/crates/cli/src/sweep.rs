//! Cartesian parameter sweeps, one training run per grid point.

use std::path::Path;

use anyhow::{bail, Context, Result};
use quatro_core::{RunRecord, RunStatus};

use crate::config::ExperimentConfig;
use crate::output::{create_out_dir, csv_writer, float, opt_float, RUN_HEADER};
use crate::train::train_into;

/// One axis of the grid: a parameter name and its textual values.
#[derive(Debug, Clone, PartialEq)]
pub struct Axis {
    pub key: String,
    pub values: Vec<String>,
}

/// Parses `"delta=0.1,0.01;K=1,2,5"`.
pub fn parse_grid(grid: &str) -> Result<Vec<Axis>> {
    let mut axes: Vec<Axis> = Vec::new();
    for part in grid.split(';').map(str::trim).filter(|p| !p.is_empty()) {
        let (key, values) = part
            .split_once('=')
            .with_context(|| format!("grid axis `{part}` is not of the form key=v1,v2"))?;
        let key = key.trim().to_owned();
        let values: Vec<String> = values
            .split(',')
            .map(|v| v.trim().to_owned())
            .filter(|v| !v.is_empty())
            .collect();
        if values.is_empty() {
            bail!("grid axis `{key}` has no values");
        }
        if axes.iter().any(|a| a.key == key) {
            bail!("grid axis `{key}` given twice");
        }
        axes.push(Axis { key, values });
    }
    if axes.is_empty() {
        bail!("empty grid");
    }
    Ok(axes)
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| anyhow::anyhow!("bad value `{value}` for `{key}`: {e}"))
}

pub fn apply(cfg: &mut ExperimentConfig, key: &str, value: &str) -> Result<()> {
    let t = &mut cfg.train;
    match key {
        "delta" => t.delta = parse(key, value)?,
        "K" | "inner_updates" => t.inner_updates = parse(key, value)?,
        "N" | "rollouts" => t.rollouts = parse(key, value)?,
        "lr" | "learning_rate" => t.learning_rate = parse(key, value)?,
        "beta" => t.beta = parse(key, value)?,
        "epsilon" => t.epsilon = parse(key, value)?,
        "steps" => t.steps = parse(key, value)?,
        "algorithm" => t.algorithm = parse(key, value)?,
        "seed" => cfg.seed = parse(key, value)?,
        other => bail!("unknown grid parameter `{other}`"),
    }
    Ok(())
}

/// All grid points in row-major order (last axis varies fastest).
pub fn points(axes: &[Axis]) -> Vec<Vec<(String, String)>> {
    let mut out = vec![Vec::new()];
    for axis in axes {
        out = out
            .into_iter()
            .flat_map(|prefix| {
                axis.values.iter().map(move |v| {
                    let mut p = prefix.clone();
                    p.push((axis.key.clone(), v.clone()));
                    p
                })
            })
            .collect();
    }
    out
}

fn status_str(status: &RunStatus) -> &'static str {
    match status {
        RunStatus::Completed => "completed",
        RunStatus::Diverged { .. } => "diverged",
        RunStatus::NonFinite { .. } => "non_finite",
    }
}

pub fn sweep(base: &ExperimentConfig, axes: &[Axis], out: &Path) -> Result<Vec<RunRecord>> {
    let grid = points(axes);
    // Validate every point before any output is written.
    let configs: Vec<(String, ExperimentConfig)> = grid
        .iter()
        .map(|point| {
            let mut cfg = base.clone();
            for (k, v) in point {
                apply(&mut cfg, k, v)?;
            }
            let name = point.iter().map(|(k, v)| format!("{k}={v}")).collect::<Vec<_>>().join("_");
            let dir = out.join(&name);
            let cfg = cfg.resolve(None, Some(dir))?;
            Ok((name, cfg))
        })
        .collect::<Result<_>>()?;

    create_out_dir(out)?;
    let mut summary = csv_writer(&out.join("sweep_summary.csv"))?;
    let mut header = vec!["run".to_owned()];
    header.extend(axes.iter().map(|a| a.key.clone()));
    header.push("status".to_owned());
    header.extend(RUN_HEADER.iter().map(|s| s.to_string()));
    header.push("min_mean_entropy".to_owned());
    summary.write_record(&header)?;

    let mut records = Vec::with_capacity(configs.len());
    for ((name, cfg), point) in configs.iter().zip(&grid) {
        let dir = cfg.out_dir()?;
        create_out_dir(dir)?;
        let record = train_into(cfg, dir).with_context(|| format!("grid point {name}"))?;
        let mut row = vec![name.clone()];
        row.extend(point.iter().map(|(_, v)| v.clone()));
        row.push(status_str(&record.status).to_owned());
        match record.final_row() {
            Some(last) => row.extend([
                last.step.to_string(),
                float(last.mean_reward),
                float(last.mean_entropy),
                opt_float(last.mean_lambda),
                float(last.kl_to_old),
                opt_float(last.clip_fraction),
            ]),
            None => row.extend(std::iter::repeat(String::new()).take(RUN_HEADER.len())),
        }
        let min_entropy = record.rows.iter().map(|r| r.mean_entropy).reduce(f64::min);
        row.push(opt_float(min_entropy));
        summary.write_record(&row)?;
        records.push(record);
    }
    summary.flush()?;
    Ok(records)
}
