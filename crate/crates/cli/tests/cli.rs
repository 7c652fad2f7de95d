use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn quatro(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_quatro"))
        .args(args)
        .current_dir(dir)
        .env_remove("QUATRO_THREADS")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn workspace(config: &str) -> TempDir {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::write(tmp.path().join("config.json"), config).unwrap();
    tmp
}

fn read(path: PathBuf) -> String {
    std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

fn csv_rows(path: PathBuf) -> (Vec<String>, Vec<Vec<String>>) {
    let text = read(path);
    let mut lines = text.lines();
    let header = lines.next().unwrap().split(',').map(str::to_owned).collect();
    let rows = lines.map(|l| l.split(',').map(str::to_owned).collect()).collect();
    (header, rows)
}

fn column(header: &[String], name: &str) -> usize {
    header.iter().position(|h| h == name).unwrap_or_else(|| panic!("no column {name}"))
}

const SMALL: &str = r#"{"env": {"queries": 3}, "train": {"steps": 6}, "metrics": {"eval_samples": 32}, "seed": 3}"#;

#[test]
fn zero_steps_writes_header_only() {
    let tmp = workspace(r#"{"train": {"steps": 0}}"#);
    let out = quatro(tmp.path(), &["train", "config.json", "--out", "run"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(
        read(tmp.path().join("run/run.csv")),
        "step,mean_reward,mean_entropy,mean_lambda,kl_to_old,clip_fraction\n"
    );
    assert_eq!(read(tmp.path().join("run/rollouts.jsonl")), "");
    assert!(tmp.path().join("run/config.resolved.json").exists());
}

#[test]
fn golden_run_matches_fixture() {
    let fixtures = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden");
    let tmp = tempfile::tempdir().unwrap();
    std::fs::copy(fixtures.join("config.json"), tmp.path().join("config.json")).unwrap();
    let out = quatro(tmp.path(), &["train", "config.json", "--out", "run"]);
    assert_eq!(code(&out), 0);
    assert_eq!(read(tmp.path().join("run/run.csv")), read(fixtures.join("run.csv")));
}

#[test]
fn train_is_thread_count_invariant() {
    let tmp = workspace(SMALL);
    for (threads, dir) in [("1", "one"), ("4", "four")] {
        let out = Command::new(env!("CARGO_BIN_EXE_quatro"))
            .args(["train", "config.json", "--out", dir])
            .current_dir(tmp.path())
            .env("QUATRO_THREADS", threads)
            .output()
            .unwrap();
        assert_eq!(code(&out), 0);
    }
    for file in ["run.csv", "rollouts.jsonl", "eval_rollouts.jsonl", "config.resolved.json"] {
        assert_eq!(read(tmp.path().join("one").join(file)), read(tmp.path().join("four").join(file)), "{file}");
    }
}

#[test]
fn seed_flag_changes_output() {
    let tmp = workspace(SMALL);
    assert_eq!(code(&quatro(tmp.path(), &["train", "config.json", "--out", "a"])), 0);
    assert_eq!(code(&quatro(tmp.path(), &["train", "config.json", "--out", "b", "--seed", "4"])), 0);
    assert_ne!(read(tmp.path().join("a/rollouts.jsonl")), read(tmp.path().join("b/rollouts.jsonl")));
    assert!(read(tmp.path().join("b/config.resolved.json")).contains("\"seed\": 4"));
}

#[test]
fn existing_output_directory_is_an_error() {
    let tmp = workspace(SMALL);
    std::fs::create_dir(tmp.path().join("taken")).unwrap();
    let out = quatro(tmp.path(), &["train", "config.json", "--out", "taken"]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("error:"));
    assert_eq!(std::fs::read_dir(tmp.path().join("taken")).unwrap().count(), 0);
}

#[test]
fn bad_configs_exit_one() {
    for config in [
        r#"{"train": {"delta": -1}}"#,
        r#"{"train": {"unknown": 1}}"#,
        r#"{"env": {"queries": 0}}"#,
        "not json",
    ] {
        let tmp = workspace(config);
        let out = quatro(tmp.path(), &["train", "config.json", "--out", "run"]);
        assert_eq!(code(&out), 1, "{config}");
        assert!(!tmp.path().join("run").exists());
    }
    let tmp = workspace(SMALL);
    assert_eq!(code(&quatro(tmp.path(), &["train", "missing.json", "--out", "run"])), 1);
}

#[test]
fn divergence_exits_two() {
    let tmp = workspace(
        r#"{"env": {"queries": 2}, "train": {"algorithm": "grpo", "optimizer": "sgd", "lr": 1e7, "K": 3, "steps": 50}}"#,
    );
    let out = quatro(tmp.path(), &["train", "config.json", "--out", "run"]);
    assert_eq!(code(&out), 2, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(tmp.path().join("run/run.csv").exists());
}

#[test]
fn sweep_three_by_three_makes_nine_runs() {
    let tmp = workspace(r#"{"env": {"queries": 2}, "train": {"steps": 3}, "metrics": {"eval_samples": 0}}"#);
    let out = quatro(tmp.path(), &["sweep", "config.json", "--grid", "delta=0.1,0.01,0.001;K=1,2,5", "--out", "grid"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let dirs = std::fs::read_dir(tmp.path().join("grid")).unwrap().filter(|e| e.as_ref().unwrap().path().is_dir()).count();
    assert_eq!(dirs, 9);
    let (header, rows) = csv_rows(tmp.path().join("grid/sweep_summary.csv"));
    assert_eq!(rows.len(), 9);
    assert_eq!(rows[0][column(&header, "run")], "delta=0.1_K=1");
    assert!(rows.iter().all(|r| r[column(&header, "status")] == "completed"));
}

#[test]
fn one_point_sweep_matches_train() {
    let tmp = workspace(SMALL);
    assert_eq!(code(&quatro(tmp.path(), &["train", "config.json", "--out", "train"])), 0);
    assert_eq!(code(&quatro(tmp.path(), &["sweep", "config.json", "--grid", "delta=0.01", "--out", "grid"])), 0);
    for file in ["run.csv", "rollouts.jsonl", "base_rollouts.jsonl", "eval_rollouts.jsonl", "config.resolved.json"] {
        assert_eq!(
            read(tmp.path().join("train").join(file)),
            read(tmp.path().join("grid/delta=0.01").join(file)),
            "{file}"
        );
    }
}

#[test]
fn sweep_lambda_grows_as_delta_shrinks() {
    let tmp = workspace(r#"{"env": {"queries": 4}, "train": {"steps": 1}, "metrics": {"eval_samples": 0}, "seed": 1}"#);
    let out = quatro(tmp.path(), &["sweep", "config.json", "--grid", "delta=0.1,0.01,0.001", "--out", "grid"]);
    assert_eq!(code(&out), 0);
    let (header, rows) = csv_rows(tmp.path().join("grid/sweep_summary.csv"));
    let lambdas: Vec<f64> = rows.iter().map(|r| r[column(&header, "mean_lambda")].parse().unwrap()).collect();
    assert!(lambdas.windows(2).all(|w| w[0] < w[1]), "{lambdas:?}");
}

#[test]
fn bad_grids_exit_one_without_output() {
    let tmp = workspace(SMALL);
    for grid in ["gamma=1", "delta=", "delta=-0.5", "K=1;K=2"] {
        let out = quatro(tmp.path(), &["sweep", "config.json", "--grid", grid, "--out", "grid"]);
        assert_eq!(code(&out), 1, "{grid}");
        assert!(!tmp.path().join("grid").exists(), "{grid}");
    }
}

fn rollout_line(step: usize, query: u32, tokens: &[usize], correct: bool) -> String {
    format!(
        r#"{{"step":{step},"query_id":{query},"tokens":{tokens:?},"logprob_old":-1.0,"reward":{},"correct":{correct},"algorithm":"quatro"}}"#,
        u8::from(correct)
    )
}

fn eval_metrics(lines: &[String], extra: &[&str]) -> (Vec<String>, Vec<Vec<String>>) {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::write(tmp.path().join("r.jsonl"), lines.join("\n") + "\n").unwrap();
    let mut args = vec!["eval", "r.jsonl", "--out", "m"];
    args.extend_from_slice(extra);
    let out = quatro(tmp.path(), &args);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    csv_rows(tmp.path().join("m/metrics.csv"))
}

#[test]
fn eval_with_no_correct_samples_is_zero() {
    let lines: Vec<String> = (0..4).map(|i| rollout_line(0, 0, &[i, 1], false)).collect();
    let (header, rows) = eval_metrics(&lines, &["--k", "1,2,4"]);
    for r in &rows {
        assert_eq!(r[column(&header, "pass_at_k")].parse::<f64>().unwrap(), 0.0);
        assert_eq!(r[column(&header, "ucc_at_k")].parse::<f64>().unwrap(), 0.0);
    }
}

#[test]
fn eval_with_identical_correct_samples_is_one() {
    let lines: Vec<String> = (0..8).map(|_| rollout_line(2, 5, &[1, 2, 0], true)).collect();
    let (header, rows) = eval_metrics(&lines, &["--k", "1,8,16"]);
    // k=16 exceeds the sample count and is skipped.
    assert_eq!(rows.len(), 4);
    for r in &rows {
        assert_eq!(r[column(&header, "pass_at_k")].parse::<f64>().unwrap(), 1.0);
        assert_eq!(r[column(&header, "ucc_at_k")].parse::<f64>().unwrap(), 1.0);
        assert_eq!(r[column(&header, "unique_correct_ratio")].parse::<f64>().unwrap(), 1.0 / 8.0);
    }
}

#[test]
fn eval_pass_at_k_exact_value() {
    let lines = vec![
        rollout_line(0, 0, &[0], true),
        rollout_line(0, 0, &[1], true),
        rollout_line(0, 0, &[2], false),
        rollout_line(0, 0, &[3], false),
    ];
    let (header, rows) = eval_metrics(&lines, &["--k", "2", "--metric", "edit"]);
    assert_eq!(rows[0][column(&header, "pass_at_k")].parse::<f64>().unwrap(), 5.0 / 6.0);
    assert_eq!(rows[0][column(&header, "num_clusters")], "2");
}

#[test]
fn eval_writes_flip_rate_with_baseline() {
    let tmp = tempfile::tempdir().unwrap();
    let base: Vec<String> = (0..4).map(|i| rollout_line(0, 0, &[i], false)).collect();
    let after: Vec<String> = (0..4).map(|i| rollout_line(9, 0, &[i], i == 0)).collect();
    std::fs::write(tmp.path().join("base.jsonl"), base.join("\n")).unwrap();
    std::fs::write(tmp.path().join("after.jsonl"), after.join("\n")).unwrap();
    let out = quatro(tmp.path(), &["eval", "after.jsonl", "--baseline", "base.jsonl", "--bins", "0,2,4", "--out", "m"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let (header, rows) = csv_rows(tmp.path().join("m/flip_rate.csv"));
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0][column(&header, "flips")], "1");
    assert_eq!(rows[0][column(&header, "flip_rate")].parse::<f64>().unwrap(), 1.0);
    assert_eq!(rows[1][column(&header, "flip_rate")], "");
}

#[test]
fn eval_rejects_malformed_logs() {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::write(tmp.path().join("r.jsonl"), "{\"step\": 0}\n").unwrap();
    assert_eq!(code(&quatro(tmp.path(), &["eval", "r.jsonl", "--out", "m"])), 1);
    assert_eq!(code(&quatro(tmp.path(), &["eval", "missing.jsonl", "--out", "m2"])), 1);
}

#[test]
fn train_then_eval_end_to_end() {
    let tmp = workspace(SMALL);
    assert_eq!(code(&quatro(tmp.path(), &["train", "config.json", "--out", "run"])), 0);
    let out = quatro(
        tmp.path(),
        &["eval", "run/eval_rollouts.jsonl", "--baseline", "run/base_rollouts.jsonl", "--k", "1,4,32", "--out", "m"],
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let (header, rows) = csv_rows(tmp.path().join("m/metrics.csv"));
    assert_eq!(rows.len(), 3 * 4);
    for r in rows {
        let p: f64 = r[column(&header, "pass_at_k")].parse().unwrap();
        assert!((0.0..=1.0).contains(&p));
    }
}

#[test]
fn verify_passes_and_filters() {
    let tmp = tempfile::tempdir().unwrap();
    let out = quatro(tmp.path(), &["verify", "--filter", "dual"]);
    assert_eq!(code(&out), 0);
    let stdout = String::from_utf8_lossy(&out.stdout);
    let checks: Vec<&str> = stdout.lines().filter(|l| l.starts_with("PASS") || l.starts_with("FAIL")).collect();
    assert!(!checks.is_empty());
    assert!(checks.iter().all(|l| l.starts_with("PASS") && l.contains("dual/")));
    assert_eq!(code(&quatro(tmp.path(), &["verify", "--filter", "nothing"])), 1);
}

#[test]
fn verify_full_suite_passes() {
    let tmp = tempfile::tempdir().unwrap();
    let out = quatro(tmp.path(), &["verify"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stdout));
    assert!(String::from_utf8_lossy(&out.stdout).contains("0 failed"));
}

#[test]
fn verify_detects_injected_sign_flip() {
    let tmp = tempfile::tempdir().unwrap();
    let out = quatro(tmp.path(), &["verify", "--inject-fault", "sign-flip"]);
    assert_ne!(code(&out), 0);
    assert!(String::from_utf8_lossy(&out.stdout).contains("FAIL"));
}
