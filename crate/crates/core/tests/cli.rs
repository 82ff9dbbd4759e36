use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const WORKED: &str = r#"{"prompt_id":"w","rollouts":[{"reward":1,"token_logprobs":[-0.5]},{"reward":1,"token_logprobs":[-1.0]},{"reward":-1,"token_logprobs":[-1.5]},{"reward":-1,"token_logprobs":[-2.0]}]}"#;

fn egpo(args: &[&str], out_dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_egpo"))
        .args(args)
        .env("EGPO_OUT_DIR", out_dir)
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn version_matches_library() {
    let dir = tempfile::tempdir().unwrap();
    let o = egpo(&["--version"], dir.path());
    assert!(o.status.success());
    assert_eq!(stdout(&o).trim(), egpo::VERSION);
}

#[test]
fn calibrate_worked_group() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("in.jsonl");
    let output = dir.path().join("out.jsonl");
    fs::write(&input, format!("{WORKED}\n{WORKED}\n")).unwrap();
    let o = egpo(
        &[
            "calibrate",
            input.to_str().unwrap(),
            "-o",
            output.to_str().unwrap(),
            "--eps-h",
            "1e-12",
        ],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let text = fs::read_to_string(&output).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 2);
    let v: Value = serde_json::from_str(lines[0]).unwrap();
    assert_eq!(v["prompt_id"], "w");
    assert_eq!(v["kind"], "mixed");
    let adv: Vec<f64> = v["calibrated_adv"]
        .as_array()
        .unwrap()
        .iter()
        .map(|x| x.as_f64().unwrap())
        .collect();
    for (a, b) in adv.iter().zip([2.0, 1.25, -0.8333333333333334, -0.8]) {
        assert!((a - b).abs() < 1e-9, "{adv:?}");
    }
    for key in ["entropy", "raw_weight", "weight", "base_adv", "mean_entropy"] {
        assert!(v.get(key).is_some(), "missing {key}");
    }
}

#[test]
fn calibrate_to_stdout_and_empty_input() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("empty.jsonl");
    fs::write(&input, "").unwrap();
    let o = egpo(&["calibrate", input.to_str().unwrap()], dir.path());
    assert!(o.status.success());
    assert!(o.stdout.is_empty());

    fs::write(&input, WORKED).unwrap();
    let o = egpo(&["calibrate", input.to_str().unwrap(), "--variant", "grpo"], dir.path());
    assert!(o.status.success());
    let v: Value = serde_json::from_str(stdout(&o).trim()).unwrap();
    assert_eq!(v["weight"], serde_json::json!([1.0, 1.0, 1.0, 1.0]));
}

#[test]
fn calibrate_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("in.jsonl");
    let zero = WORKED.replacen("\"reward\":1", "\"reward\":0", 1);
    fs::write(&input, format!("{WORKED}\n{zero}\n")).unwrap();
    let o = egpo(&["calibrate", input.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("line 2"), "{}", stderr(&o));

    let positive = WORKED.replacen("-0.5", "0.5", 1);
    fs::write(&input, positive).unwrap();
    let o = egpo(&["calibrate", input.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

#[test]
fn train_is_deterministic_and_writes_summary() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("cfg.toml");
    fs::write(&config, "steps = 15\n[task]\ncontexts = 8\n").unwrap();
    let run = |name: &str| {
        let metrics = dir.path().join(format!("{name}/metrics.csv"));
        let o = egpo(
            &[
                "train",
                "-c",
                config.to_str().unwrap(),
                "-m",
                metrics.to_str().unwrap(),
                "--seed",
                "1",
            ],
            dir.path(),
        );
        assert!(o.status.success(), "{}", stderr(&o));
        assert!(stdout(&o).contains("final accuracy"));
        assert!(stdout(&o).contains("final delta"));
        fs::read(metrics).unwrap()
    };
    let a = run("a");
    assert_eq!(a, run("b"));
    assert_eq!(String::from_utf8_lossy(&a).lines().count(), 16);
    let summary = read_json(&dir.path().join("a/summary.json"));
    assert_eq!(summary["steps"], 15);
    assert_eq!(summary["seed"], 1);
}

#[test]
fn train_defaults_to_out_dir() {
    let dir = tempfile::tempdir().unwrap();
    let o = egpo(&["train", "--steps", "2", "--contexts", "4"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(dir.path().join("metrics.csv").exists());
    assert!(dir.path().join("summary.json").exists());
}

#[test]
fn train_all_hard_grpo_vs_egpo() {
    let dir = tempfile::tempdir().unwrap();
    let mut gains = Vec::new();
    for variant in ["grpo", "egpo"] {
        let metrics = dir.path().join(format!("{variant}.csv"));
        let summary = dir.path().join(format!("{variant}.json"));
        let o = egpo(
            &[
                "train",
                "--task",
                "all-hard",
                "--variant",
                variant,
                "--seed",
                "2",
                "-m",
                metrics.to_str().unwrap(),
                "--summary",
                summary.to_str().unwrap(),
            ],
            dir.path(),
        );
        assert!(o.status.success(), "{}", stderr(&o));
        gains.push(read_json(&summary)["gold_prob_improvement"].as_f64().unwrap());
    }
    assert_eq!(gains[0], 0.0);
    assert!(gains[1] > 0.0, "{gains:?}");
}

#[test]
fn train_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let o = egpo(&["train", "--steps", "0"], dir.path());
    assert_eq!(o.status.code(), Some(2));

    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "steps = [1").unwrap();
    let o = egpo(&["train", "-c", bad.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(2));

    let o = egpo(&["train", "--steps", "20", "--learning-rate", "1e300"], dir.path());
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
    assert!(stderr(&o).contains("step"), "{}", stderr(&o));
}

#[test]
fn diagnose_separable_log() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("log.jsonl");
    let mut lines = Vec::new();
    for i in 0..20 {
        let correct = i % 2 == 0;
        let think = -0.5 - 0.05 * ((i * 7) % 10) as f64;
        let ans = if correct { -0.1 } else { -1.0 - 0.01 * i as f64 };
        lines.push(format!(
            r#"{{"token_logprobs":[{think},{think},{ans}],"think_span":[0,2],"correct":{correct},"length":{}}}"#,
            3 + i
        ));
    }
    fs::write(&input, lines.join("\n")).unwrap();
    let out = dir.path().join("diag");
    let o = egpo(
        &["diagnose", input.to_str().unwrap(), "-o", out.to_str().unwrap()],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let s = read_json(&out.join("summary.json"));
    assert_eq!(s["auc_ae"], 1.0);
    assert!(s["auc_te"].is_number());
    assert!(s["delta"].as_f64().unwrap() > 0.0);
    let hist = fs::read_to_string(out.join("histogram.csv")).unwrap();
    assert_eq!(hist.lines().next().unwrap(), "segment,class,bin,lo,hi,count");
    // three segments, two classes, 64 bins
    assert_eq!(hist.lines().count(), 1 + 3 * 2 * 64);
    let roc = fs::read_to_string(out.join("roc.csv")).unwrap();
    assert!(roc.lines().any(|l| l == "answer,0,1"), "{roc}");
}

#[test]
fn diagnose_only_correct_is_missing_class() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("log.jsonl");
    fs::write(
        &input,
        "{\"entropy\":0.1,\"correct\":true}\n{\"entropy\":0.2,\"correct\":true}\n",
    )
    .unwrap();
    let o = egpo(&["diagnose", input.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(5), "{}", stderr(&o));
}

#[test]
fn diagnose_recomputes_rewards_from_text() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("log.jsonl");
    // the stale `correct` flags are all wrong; the verifier must win
    let fixture = [
        r#"{"entropy":0.1,"text":"so \\boxed{4}","gold":"4","correct":false}"#,
        r#"{"entropy":0.5,"text":"\\boxed{5}","gold":"4","correct":true}"#,
        r#"{"entropy":0.7,"text":"no box","gold":"4","correct":true}"#,
    ];
    fs::write(&input, fixture.join("\n")).unwrap();
    let o = egpo(&["diagnose", input.to_str().unwrap()], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let s = read_json(&dir.path().join("summary.json"));
    assert_eq!(s["correct"], 1);
    assert_eq!(s["incorrect"], 2);
    assert_eq!(s["mu_correct"], 0.1);
    assert_eq!(s["auc_ae"], 1.0);
    assert!(s.get("auc_te").is_none());
}

#[test]
fn diagnose_schema_errors() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("log.jsonl");
    fs::write(&input, "{\"entropy\":0.1,\"correct\":true}\n{\"entropy\":0.2}\n").unwrap();
    let o = egpo(&["diagnose", input.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("line 2"));

    fs::write(
        &input,
        r#"{"token_logprobs":[-1,-2],"text":"<think>a</think>b","correct":true}"#,
    )
    .unwrap();
    let o = egpo(&["diagnose", input.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("token_offsets"), "{}", stderr(&o));
}

#[test]
fn gradcheck_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let o = egpo(&["gradcheck", "--trials", "100", "--tol", "1e-5"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("worst relative error"));

    let o = egpo(
        &["gradcheck", "--trials", "5", "--tol", "1e-12", "--seed", "40"],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(6));
    assert!(stderr(&o).contains("seed 4"), "{}", stderr(&o));

    let once = |seed: &str| stdout(&egpo(&["gradcheck", "--trials", "1", "--seed", seed], dir.path()));
    assert_eq!(once("17"), once("17"));

    let o = egpo(&["gradcheck", "--trials", "0"], dir.path());
    assert_eq!(o.status.code(), Some(2));
}
