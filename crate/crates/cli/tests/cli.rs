use std::fs;
use std::process::{Command, Output};

fn head(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_head")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn simulate_prints_perfect_detector_saving() {
    let o = head(&["simulate", "--p", "0.59", "--recall", "1", "--tn-rate", "1", "--f", "0.16"]);
    assert!(o.status.success());
    assert!(stdout(&o).lines().any(|l| l == "saving 0.3444"), "{}", stdout(&o));
}

#[test]
fn exit_codes() {
    assert_eq!(head(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(head(&["simulate", "--f", "0.2", "--recall", "1", "--tn-rate", "1", "--bogus"]).status.code(), Some(1));
    // invalid value: validation error
    assert_eq!(head(&["simulate", "--f", "1.5", "--recall", "1", "--tn-rate", "1"]).status.code(), Some(1));
    assert_eq!(head(&["--help"]).status.code(), Some(0));
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope");
    let o = head(&["eval", "--dataset", missing.to_str().unwrap(), "--model", "x", "--out", "y"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn unknown_config_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    fs::write(&cfg, r#"{"timesaver": {"trails": 5}}"#).unwrap();
    let o = head(&["simulate", "--config", cfg.to_str().unwrap(), "--f", "0.2", "--recall", "1", "--tn-rate", "1"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn full_pipeline_writes_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let p = |s: &str| dir.path().join(s).to_string_lossy().into_owned();
    let cfg = p("cfg.json");
    fs::write(
        &cfg,
        r#"{"dataset": {"seeds_per_prompt": 4, "critical_steps": [5, 8, 10, 16, 18, 20, 25, 40]},
            "timesaver": {"trials": 20000},
            "runtime": {"runs_per_prompt": 3, "eval_seeds_per_prompt": 5}}"#,
    )
    .unwrap();
    assert!(head(&["make-dataset", "--config", &cfg, "--out", &p("data")]).status.success());
    assert!(dir.path().join("data/manifest.jsonl").exists());
    let mut models = Vec::new();
    for t in ["5", "8", "10", "16", "18", "20", "25", "40"] {
        let out = p(&format!("m{t}"));
        let o = head(&["train", "--config", &cfg, "--dataset", &p("data"), "--steps", t, "--out", &out]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        models.push(out);
    }
    let models = models.join(",");
    assert!(head(&["eval", "--config", &cfg, "--dataset", &p("data"), "--model", &p("m8"), "--out", &p("eval")]).status.success());
    assert!(head(&["sweep-tlast", "--config", &cfg, "--dataset", &p("data"), "--models", &models, "--out", &p("sw")]).status.success());
    let sweep = fs::read_to_string(dir.path().join("sw/sweep_tlast.csv")).unwrap();
    let lines: Vec<&str> = sweep.lines().collect();
    assert_eq!(lines[0], "t_last,f,recall,tn_rate,saving_cf,saving_mc,ci_lo,ci_hi");
    let t_col: Vec<&str> = lines[1..].iter().map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(t_col, ["5", "8", "10", "16", "18", "20", "25", "40"]);

    assert!(head(&["sweep-p", "--config", &cfg, "--dataset", &p("data"), "--models", &models, "--out", &p("sw")]).status.success());
    let sweep_p = fs::read_to_string(dir.path().join("sw/sweep_p.csv")).unwrap();
    assert!(sweep_p.starts_with("p,t_last,saving_cf\n"));
    assert!(sweep_p.lines().any(|l| l.starts_with("0.59,8,")));

    let o = head(&["run", "--config", &cfg, "--dataset", &p("data"), "--model", &p("m8"), "--out", &p("run")]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let campaign = fs::read_to_string(dir.path().join("run/campaign.csv")).unwrap();
    assert!(campaign.starts_with("prompt_id,policy,runs,mean_steps,saving,ci_lo,ci_hi\n"));

    let o = head(&["report", "--input", &format!("{},{}", p("sw"), p("run")), "--out", &p("rep")]);
    assert!(o.status.success());
    let text = fs::read_to_string(dir.path().join("rep/report.txt")).unwrap();
    assert!(text.contains("sweep_tlast.csv") && text.contains("t_last=40") && text.contains("campaign.csv"));

    for out in ["data", "m8", "eval", "sw", "run", "rep"] {
        let snap = fs::read_to_string(dir.path().join(out).join("config.json")).unwrap();
        assert!(snap.contains("\"command\""), "{out}");
    }
}
