use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn specmoe(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_specmoe"))
        .args(args)
        .current_dir(root())
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn summary(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join("summary.json")).unwrap()).unwrap()
}

#[test]
fn run_writes_cells_and_summary() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("all3");
    let o = specmoe(&["run", "fixtures/mixtral_all3.cfg", "--out", out.to_str().unwrap(), "-q"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(out.join("cells.csv").is_file());
    let s = summary(&out);
    assert_eq!(s["cells"].as_array().unwrap().len(), 5);
    assert_eq!(s["metadata"]["seed_source"], "config");
    assert_eq!(s["metadata"]["scenario"], "mixtral_all3");
    let none = s["cells"]
        .as_array()
        .unwrap()
        .iter()
        .find(|c| c["policy"] == "none")
        .unwrap();
    assert_eq!(none["speedup"], 1.0);
}

#[test]
fn omitted_seed_is_drawn_and_recorded() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("s.cfg");
    std::fs::write(
        &cfg,
        "models = [\"dense\"]\ntasks = [\"math\"]\npolicies = [\"none\"]\nbudget = { requests = 2 }\n",
    )
    .unwrap();
    let out = tmp.path().join("o");
    let o = specmoe(&["run", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "-q"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let s = summary(&out);
    assert_eq!(s["metadata"]["seed_source"], "entropy");
    assert_eq!(s["metadata"]["seeds"].as_array().unwrap().len(), 1);
}

#[test]
fn sweep_overrides_grid() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("sw");
    let o = specmoe(&[
        "sweep",
        "fixtures/regression120.cfg",
        "--policies",
        "static:0..2",
        "--models",
        "dense",
        "--tasks",
        "math",
        "--seed",
        "3",
        "--out",
        out.to_str().unwrap(),
        "-q",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let s = summary(&out);
    let cells = s["cells"].as_array().unwrap();
    assert_eq!(cells.len(), 3);
    assert_eq!(cells[0]["policy"], "static:0");
    assert_eq!(cells[0]["speedup"], 1.0);
    assert_eq!(s["metadata"]["seeds"][0], 3);
}

#[test]
fn replay_and_report_formats() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("rp");
    let o = specmoe(&[
        "replay",
        "traces/example.trace",
        "--policy",
        "static:2",
        "--out",
        out.to_str().unwrap(),
        "--telemetry",
        "-q",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(out.join("telemetry.jsonl").is_file());
    let csv = specmoe(&["report", out.to_str().unwrap(), "--format", "csv"]);
    assert!(String::from_utf8_lossy(&csv.stdout).starts_with("model,task,policy,seed,"));
    let text = specmoe(&["report", out.to_str().unwrap()]);
    assert!(String::from_utf8_lossy(&text.stdout).contains("static:2"));
    let json = specmoe(&["report", out.to_str().unwrap(), "--format", "json"]);
    let v: serde_json::Value = serde_json::from_slice(&json.stdout).unwrap();
    assert_eq!(v["cells"].as_array().unwrap().len(), 2);
}

#[test]
fn trace_out_round_trips_through_replay() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("t.cfg");
    std::fs::write(&cfg, "seeds = [1]\nmodels = [\"mixtral\"]\ntasks = [\"code\"]\npolicies = [\"static:3\"]\nbudget = { requests = 2 }\n").unwrap();
    let trace = tmp.path().join("t.trace");
    let out = tmp.path().join("o");
    let o = specmoe(&[
        "run",
        cfg.to_str().unwrap(),
        "--trace-out",
        trace.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "-q",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let recorded = summary(&out)["cells"][0]["tokens"].as_u64().unwrap();
    let out2 = tmp.path().join("o2");
    let o = specmoe(&[
        "replay",
        trace.to_str().unwrap(),
        "--policy",
        "static:3",
        "--out",
        out2.to_str().unwrap(),
        "-q",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let replayed = summary(&out2)["cells"][1]["tokens"].as_u64().unwrap();
    assert_eq!(recorded, replayed);
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(specmoe(&[]).status.code(), Some(2));
    assert_eq!(specmoe(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(specmoe(&["report", "x", "--format", "xml"]).status.code(), Some(2));
}

#[test]
fn config_and_io_errors_exit_1_with_one_line() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.cfg");
    std::fs::write(&bad, "models = [\"gpt9\"]\ntasks = [\"math\"]\n").unwrap();
    let broken = tmp.path().join("broken.cfg");
    std::fs::write(&broken, "models = [\n").unwrap();
    let trace = tmp.path().join("bad.trace");
    std::fs::write(&trace, "0,0,2,5\n").unwrap();
    let cases: Vec<(Vec<&str>, &str)> = vec![
        (vec!["run", "missing.cfg"], "does not exist"),
        (vec!["run", bad.to_str().unwrap()], "unknown model preset `gpt9`"),
        (vec!["run", broken.to_str().unwrap()], "broken.cfg"),
        (vec!["replay", trace.to_str().unwrap()], "trace line 1"),
        (vec!["report", "no/such/dir"], "does not exist"),
        (
            vec!["run", "fixtures/mixtral_all3.cfg", "--policies", "static:x"],
            "unknown policy",
        ),
    ];
    for (args, needle) in cases {
        let o = specmoe(&args);
        assert_eq!(o.status.code(), Some(1), "{args:?}");
        let err = stderr(&o);
        assert_eq!(err.trim().lines().count(), 1, "{err}");
        assert!(err.contains(needle), "{args:?}: {err}");
    }
}

#[test]
fn help_is_man_style() {
    let o = specmoe(&["--help"]);
    let text = String::from_utf8_lossy(&o.stdout);
    for section in ["COMMANDS", "FILES", "SEEDS", "PRECEDENCE", "EXIT STATUS", "EXAMPLES"] {
        assert!(text.contains(section), "missing {section}");
    }
}
