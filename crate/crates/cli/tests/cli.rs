use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"
seed = 3
[phantom]
patients = 8
slices = 3
dims = 32
categories = 2
[preprocess]
size = 32
[pretrain]
epochs = 1
batch = 4
patch = 6
swaps = 2
[finetune]
epochs = 2
task = "steatosis"
[eval]
folds = 2
repeats = 1
tasks = "steatosis"
"#;

fn fibrossl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fibrossl"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_config(dir: &Path) -> String {
    let p = dir.join("small.toml");
    std::fs::write(&p, SMALL).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn unknown_config_key_exits_2_and_names_it() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let o = fibrossl(&["pipeline", "--out", out.to_str().unwrap(), "--set", "pretrain.lrr=1e-3"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("pretrain.lrr"));
}

#[test]
fn mistyped_value_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let o = fibrossl(&["pipeline", "--out", dir.path().to_str().unwrap(), "--set", "pretrain.epochs=many"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("pretrain.epochs"));
}

#[test]
fn missing_data_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nowhere");
    let o = fibrossl(&[
        "preprocess",
        "--data",
        missing.to_str().unwrap(),
        "--out",
        dir.path().join("prep").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

#[test]
fn empty_stage_list_is_a_no_op() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let o = fibrossl(&["pipeline", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(!out.join("eval").exists());
}

#[test]
fn eval_without_finetune_names_the_missing_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let out = dir.path().join("o");
    let o = fibrossl(&["--config", &cfg, "pipeline", "--stages", "gen,prep,eval", "--out", out.to_str().unwrap()]);
    assert_ne!(o.status.code(), Some(0));
    assert!(stderr(&o).contains("steatosis.ckpt"), "{}", stderr(&o));
}

#[test]
fn deterministic_pipeline_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let run = |name: &str| {
        let out = dir.path().join(name);
        let o = fibrossl(&[
            "--config",
            &cfg,
            "--deterministic",
            "pipeline",
            "--stages",
            "gen,prep,pretrain,finetune,eval",
            "--out",
            out.to_str().unwrap(),
        ]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        out
    };
    let (a, b) = (run("a"), run("b"));
    for rel in [
        "config.resolved.toml",
        "phantoms/labels.csv",
        "pretrain/history.csv",
        "pretrain/encoder.ckpt",
        "finetune/steatosis.ckpt",
        "eval/report.json",
        "eval/report.csv",
    ] {
        let x = std::fs::read(a.join(rel)).unwrap_or_else(|e| panic!("{rel}: {e}"));
        let y = std::fs::read(b.join(rel)).unwrap();
        assert!(x == y, "{rel} differs between runs");
    }
}

#[test]
fn subcommands_chain_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let p = |s: &str| dir.path().join(s).to_str().unwrap().to_string();
    let ok = |args: &[&str]| {
        let mut full = vec!["--config", cfg.as_str()];
        full.extend_from_slice(args);
        let o = fibrossl(&full);
        assert_eq!(o.status.code(), Some(0), "{args:?}: {}", stderr(&o));
        o
    };
    ok(&["gen-phantoms", "--out", &p("ph")]);
    ok(&["preprocess", "--data", &p("ph"), "--out", &p("prep")]);
    ok(&["lbp-encode", "--in", &p("prep"), "--out", &p("lbp")]);
    ok(&["pretrain", "--data", &p("prep"), "--out", &p("pt/adv.ckpt")]);
    ok(&["pretrain", "--data", &p("prep"), "--out", &p("pt/plain.ckpt"), "--no-adv"]);
    assert!(Path::new(&p("pt/history.csv")).exists());
    let labels = p("ph/labels.csv");
    ok(&[
        "finetune", "--data", &p("prep"), "--labels", &labels, "--init", &p("pt/adv.ckpt"), "--out", &p("ft/s.ckpt"),
    ]);
    let o = ok(&["evaluate", "--data", &p("prep"), "--labels", &labels, "--init", "random", "--out", &p("ev")]);
    assert!(String::from_utf8_lossy(&o.stdout).contains("steatosis"));
    assert!(Path::new(&p("ev/report.json")).exists());
    let o = ok(&[
        "ablate",
        "--data",
        &p("prep"),
        "--labels",
        &labels,
        "--ckpt-adv",
        &p("pt/adv.ckpt"),
        "--ckpt-no-adv",
        &p("pt/plain.ckpt"),
        "--out",
        &p("ab"),
    ]);
    let csv = String::from_utf8_lossy(&o.stdout).into_owned();
    assert!(csv.starts_with("ssl,adv_loss,input_mode,task,mean_auc,std_auc"));
    assert_eq!(csv.lines().count(), 7);
}
