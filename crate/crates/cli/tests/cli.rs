use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_cpfactor");

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Workspace {
    _tmp: tempfile::TempDir,
    root: std::path::PathBuf,
}

impl Workspace {
    fn new() -> Self {
        let tmp = tempfile::tempdir().unwrap();
        let root = tmp.path().to_path_buf();
        let out = run(&["design", "--out", s(&root.join("design"))]);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
        Self { _tmp: tmp, root }
    }

    fn design(&self, f: &str) -> String {
        self.root.join("design").join(f).display().to_string()
    }

    fn model_args(&self) -> Vec<String> {
        vec!["--catalog".into(), self.design("catalog.txt"), "--spec".into(), self.design("spec.txt")]
    }

    fn simulate(&self, n: &str, seed: &str, dir: &str) -> Output {
        let mut args = vec!["simulate".to_string()];
        args.extend(self.model_args());
        let out = self.root.join(dir).display().to_string();
        args.extend(
            ["--truth", &self.design("truth.params"), "--n", n, "--seed", seed, "--censor-rate", "0.001", "--out", &out]
                .map(String::from),
        );
        Command::new(BIN).args(&args).output().unwrap()
    }

    fn short_em() -> Vec<String> {
        ["--iters", "40", "--burn-in", "20", "--window", "20"].map(String::from).to_vec()
    }
}

#[test]
fn zero_subjects_is_a_config_error() {
    let ws = Workspace::new();
    let out = ws.simulate("0", "1", "r");
    assert_eq!(code(&out), 4);
}

#[test]
fn simulation_is_byte_identical_for_a_seed() {
    let ws = Workspace::new();
    assert_eq!(code(&ws.simulate("40", "9", "a")), 0);
    assert_eq!(code(&ws.simulate("40", "9", "b")), 0);
    assert_eq!(code(&ws.simulate("40", "10", "c")), 0);
    let read = |d: &str| std::fs::read(ws.root.join(d).join("events.log")).unwrap();
    assert_eq!(read("a"), read("b"));
    assert_ne!(read("a"), read("c"));
    let th = |d: &str| std::fs::read(ws.root.join(d).join("thetas.csv")).unwrap();
    assert_eq!(th("a"), th("b"));
}

#[test]
fn thread_count_does_not_change_simulation() {
    let ws = Workspace::new();
    let mut args = vec!["--threads".to_string(), "1".into()];
    args.push("simulate".into());
    args.extend(ws.model_args());
    let one = ws.root.join("one").display().to_string();
    args.extend(["--truth", &ws.design("truth.params"), "--n", "30", "--seed", "5", "--out", &one].map(String::from));
    assert_eq!(Command::new(BIN).args(&args).status().unwrap().code(), Some(0));
    args[1] = "3".into();
    let three = ws.root.join("three").display().to_string();
    *args.last_mut().unwrap() = three.clone();
    assert_eq!(Command::new(BIN).args(&args).status().unwrap().code(), Some(0));
    assert_eq!(
        std::fs::read(Path::new(&one).join("events.log")).unwrap(),
        std::fs::read(Path::new(&three).join("events.log")).unwrap()
    );
}

#[test]
fn manifest_records_inputs_and_outputs() {
    let ws = Workspace::new();
    assert_eq!(code(&ws.simulate("10", "2", "r")), 0);
    let text = std::fs::read_to_string(ws.root.join("r/manifest.simulate.json")).unwrap();
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(v["command"], "simulate");
    assert_eq!(v["seed"], 2);
    assert_eq!(v["inputs"].as_array().unwrap().len(), 3);
    let outputs = v["outputs"].as_array().unwrap();
    assert!(outputs.iter().any(|o| o["path"].as_str().unwrap().ends_with("events.log")));
    assert!(outputs.iter().all(|o| o["sha256"].as_str().unwrap().len() == 64));
}

#[test]
fn missing_input_is_a_validation_error() {
    let ws = Workspace::new();
    let mut args = vec!["fit".to_string()];
    args.extend(ws.model_args());
    let nowhere = ws.root.join("nowhere").display().to_string();
    args.extend(["--mask", &ws.design("mask.txt"), "--data", &nowhere, "--out", &nowhere].map(String::from));
    let out = Command::new(BIN).args(&args).output().unwrap();
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("events.log"));
}

#[test]
fn malformed_event_log_is_a_validation_error() {
    let ws = Workspace::new();
    let dir = ws.root.join("bad");
    std::fs::create_dir_all(&dir).unwrap();
    std::fs::write(dir.join("events.log"), "s1,W1,2.0\ns1,Nope,3.0\n").unwrap();
    let mut args = vec!["fit".to_string()];
    args.extend(ws.model_args());
    args.extend(["--mask", &ws.design("mask.txt"), "--data", s(&dir), "--out", s(&dir)].map(String::from));
    assert_eq!(Command::new(BIN).args(&args).status().unwrap().code(), Some(2));
}

#[test]
fn bad_arguments_are_config_errors() {
    assert_eq!(code(&run(&["fit"])), 4);
    assert_eq!(code(&run(&["--threads", "0", "design", "--out", "/tmp/unused-cpfactor"])), 4);
    assert_eq!(code(&run(&["--help"])), 0);
}

#[test]
fn negative_penalty_is_a_config_error() {
    let ws = Workspace::new();
    assert_eq!(code(&ws.simulate("10", "1", "r")), 0);
    let mut args = vec!["fit".to_string()];
    args.extend(ws.model_args());
    let r = ws.root.join("r").display().to_string();
    args.extend(["--mask", &ws.design("mask.txt"), "--data", &r, "--gamma1=-1", "--out", &r].map(String::from));
    assert_eq!(Command::new(BIN).args(&args).status().unwrap().code(), Some(4));
}

#[test]
fn huge_penalty_fits_an_empty_support() {
    let ws = Workspace::new();
    assert_eq!(code(&ws.simulate("60", "4", "r")), 0);
    let r = ws.root.join("r").display().to_string();
    let fit_dir = ws.root.join("fit").display().to_string();
    let mut args = vec!["fit".to_string()];
    args.extend(ws.model_args());
    args.extend(
        ["--mask", &ws.design("mask.txt"), "--data", &r, "--gamma1", "1e6", "--gamma2", "1e6", "--out", &fit_dir]
            .map(String::from),
    );
    args.extend(Workspace::short_em());
    let out = Command::new(BIN).args(&args).output().unwrap();
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let support = std::fs::read_to_string(ws.root.join("fit/support.txt")).unwrap();
    assert!(support.trim().is_empty(), "support: {support}");
    let trace = std::fs::read_to_string(ws.root.join("fit/trace.csv")).unwrap();
    assert_eq!(trace.lines().count(), 41);
}

#[test]
fn single_point_grid_runs_select_se_and_eval() {
    let ws = Workspace::new();
    assert_eq!(code(&ws.simulate("80", "6", "r")), 0);
    let r = ws.root.join("r").display().to_string();
    let mut args = vec!["select".to_string()];
    args.extend(ws.model_args());
    args.extend(
        [
            "--mask",
            &ws.design("mask.txt"),
            "--data",
            &r,
            "--log-gamma1=-3,-3",
            "--count1",
            "1",
            "--log-gamma2=-3,-3",
            "--count2",
            "1",
            "--nodes",
            "5",
            "--out",
            &r,
        ]
        .map(String::from),
    );
    args.extend(Workspace::short_em());
    let out = Command::new(BIN).args(&args).output().unwrap();
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let bic = std::fs::read_to_string(ws.root.join("r/bic.csv")).unwrap();
    assert_eq!(bic.lines().count(), 2);
    assert!(ws.root.join("r/selected.params").exists());

    let mut args = vec!["se".to_string()];
    args.extend(ws.model_args());
    let params = ws.root.join("r/selected.params").display().to_string();
    args.extend(
        ["--mask", &ws.design("mask.txt"), "--data", &r, "--params", &params, "--draws", "50", "--warmup", "50", "--out", &r]
            .map(String::from),
    );
    let out = Command::new(BIN).args(&args).output().unwrap();
    let c = code(&out);
    assert!(c == 0 || c == 3, "{}", String::from_utf8_lossy(&out.stderr));
    let se = std::fs::read_to_string(ws.root.join("r/se.csv")).unwrap();
    assert!(se.starts_with("coordinate,estimate,se\n"));

    let mut args = vec!["eval".to_string()];
    args.extend(ws.model_args());
    let eval_dir = ws.root.join("eval").display().to_string();
    args.extend(
        ["--mask", &ws.design("mask.txt"), "--truth", &ws.design("truth.params"), "--replications", &r, "--out", &eval_dir]
            .map(String::from),
    );
    let out = Command::new(BIN).args(&args).output().unwrap();
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let sel = std::fs::read_to_string(ws.root.join("eval/selection.csv")).unwrap();
    assert!(sel.starts_with("setting,replicates,C0,C1,TPR,FDR\n"));
    let est = std::fs::read_to_string(ws.root.join("eval/estimation.csv")).unwrap();
    assert_eq!(est.lines().count(), 55);
    let manifest = std::fs::read_to_string(ws.root.join("eval/manifest.eval.json")).unwrap();
    assert!(manifest.contains("manifest.select.json"));
}

#[test]
fn gated_design_round_trips_through_simulate() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path().join("d");
    assert_eq!(code(&run(&["design", "--gate-terminal", "--out", s(&d)])), 0);
    let spec = std::fs::read_to_string(d.join("spec.txt")).unwrap();
    assert!(spec.lines().any(|l| l.starts_with("gate ")));
    let r = tmp.path().join("r");
    let out = run(&[
        "simulate",
        "--catalog",
        s(&d.join("catalog.txt")),
        "--spec",
        s(&d.join("spec.txt")),
        "--truth",
        s(&d.join("truth.params")),
        "--n",
        "20",
        "--out",
        s(&r),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let log = std::fs::read_to_string(r.join("events.log")).unwrap();
    let lines: Vec<&str> = log.lines().filter(|l| !l.starts_with('#')).collect();
    for (i, l) in lines.iter().enumerate() {
        if l.split(',').nth(1) == Some("Next_OK") {
            let prev = lines[i - 1].split(',').nth(1).unwrap();
            assert_eq!(prev, "Next");
        }
    }
}
