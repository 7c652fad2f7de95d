//! File writers shared by the subcommands. All floats are written with 17
//! significant digits and all files use LF line endings.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use anyhow::{bail, Context, Result};
use quatro_core::{Algorithm, QueryId, RunRecord, Trajectory};
use serde::{Deserialize, Serialize};

pub const RUN_HEADER: [&str; 6] = ["step", "mean_reward", "mean_entropy", "mean_lambda", "kl_to_old", "clip_fraction"];

pub fn float(x: f64) -> String {
    format!("{x:.16e}")
}

pub fn opt_float(x: Option<f64>) -> String {
    x.map(float).unwrap_or_default()
}

/// Creates `path`, refusing to reuse an existing directory.
pub fn create_out_dir(path: &Path) -> Result<()> {
    if path.exists() {
        bail!("output directory {} already exists", path.display());
    }
    fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))
}

pub fn csv_writer(path: &Path) -> Result<csv::Writer<File>> {
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(file))
}

pub fn write_run_csv(path: &Path, record: &RunRecord) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(RUN_HEADER)?;
    for row in &record.rows {
        w.write_record([
            row.step.to_string(),
            float(row.mean_reward),
            float(row.mean_entropy),
            opt_float(row.mean_lambda),
            float(row.kl_to_old),
            opt_float(row.clip_fraction),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_json_pretty<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// One line of a rollout log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RolloutLogLine {
    pub step: usize,
    pub query_id: QueryId,
    pub tokens: Vec<usize>,
    pub logprob_old: f64,
    pub reward: f64,
    pub correct: bool,
    pub algorithm: Algorithm,
}

impl RolloutLogLine {
    pub fn new(step: usize, algorithm: Algorithm, t: &Trajectory) -> Self {
        Self {
            step,
            query_id: t.query_id,
            tokens: t.tokens.clone(),
            logprob_old: t.logprob_old,
            reward: t.reward,
            correct: t.correct,
            algorithm,
        }
    }
}

pub struct JsonlWriter {
    inner: BufWriter<File>,
}

impl JsonlWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
        Ok(Self {
            inner: BufWriter::new(file),
        })
    }

    pub fn write<T: Serialize>(&mut self, value: &T) -> Result<()> {
        serde_json::to_writer(&mut self.inner, value)?;
        self.inner.write_all(b"\n")?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        self.inner.flush()?;
        Ok(())
    }
}

pub fn read_rollouts(path: &Path) -> Result<Vec<RolloutLogLine>> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed = serde_json::from_str(&line)
            .with_context(|| format!("{}:{}: malformed rollout line", path.display(), i + 1))?;
        out.push(parsed);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn floats_have_seventeen_significant_digits() {
        assert_eq!(float(0.1), "1.0000000000000001e-1");
        assert_eq!(float(1.0), "1.0000000000000000e0");
        for x in [0.1, 1.0 / 3.0, 2.5e-300, -7.25] {
            assert_eq!(float(x).parse::<f64>().unwrap(), x);
        }
        assert_eq!(opt_float(None), "");
    }

    #[test]
    fn rollout_line_round_trip() {
        let line = RolloutLogLine {
            step: 3,
            query_id: QueryId(2),
            tokens: vec![0, 2, 1],
            logprob_old: -1.25,
            reward: 1.0,
            correct: true,
            algorithm: Algorithm::Gspo,
        };
        let text = serde_json::to_string(&line).unwrap();
        assert_eq!(
            text,
            r#"{"step":3,"query_id":2,"tokens":[0,2,1],"logprob_old":-1.25,"reward":1.0,"correct":true,"algorithm":"gspo"}"#
        );
        assert_eq!(serde_json::from_str::<RolloutLogLine>(&text).unwrap(), line);
    }

    #[test]
    fn out_dir_collision() {
        let dir = tempfile::tempdir().unwrap();
        assert!(create_out_dir(dir.path()).is_err());
        let fresh = dir.path().join("run");
        create_out_dir(&fresh).unwrap();
        assert!(fresh.is_dir());
    }
}
