use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn mtmil(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mtmil")).args(args).current_dir(cwd).output().expect("binary runs")
}

fn ok(args: &[&str], cwd: &Path) -> String {
    let out = mtmil(args, cwd);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

#[test]
fn long_help_lists_every_config_key_with_default() {
    let tmp = tempfile::tempdir().unwrap();
    let help = ok(&["--help"], tmp.path());
    for (key, value) in mtmil::config::default_keys() {
        assert!(help.contains(&key), "{key} missing from --help");
        assert!(help.contains(&value), "default {value} for {key} missing");
    }
    let sub = ok(&["train", "--help"], tmp.path());
    assert!(sub.contains("train.learning_rate"));
}

#[test]
fn config_applies_file_then_overrides() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("c.toml"), "[train]\nlearning_rate = 0.5\nhidden = 16\n").unwrap();
    let text = ok(&["config", "--config", "c.toml", "--set", "train.learning_rate=0.01"], tmp.path());
    let cfg = mtmil::config::RunConfig::from_toml_str(&text).unwrap();
    assert_eq!(cfg.train.learning_rate, 0.01);
    assert_eq!(cfg.train.hidden, 16);
}

#[test]
fn errors_carry_code_and_exit_status() {
    let tmp = tempfile::tempdir().unwrap();
    let out = mtmil(&["config", "--set", "train.no_such_key=1"], tmp.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error[CONFIG]"));

    let out = mtmil(&["eval", "--models", "missing", "--store", "missing", "--splits", "missing.csv", "--out", "r.json"], tmp.path());
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error[STORE_IO]"));

    let out = mtmil(&["split", "--store", "missing", "--out", "s.csv", "--set", "split.k=2"], tmp.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn small_pipeline_produces_reports_and_figures() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    fs::write(
        dir.join("run.toml"),
        "[synth]\nn_bags = 240\n[train]\nhidden = 8\nattn = 4\nmax_epochs = 2\n[split]\nmin_positives = 8\n[stats]\nreplicates = 200\n",
    )
    .unwrap();
    let c = ["--config", "run.toml"];
    let run = |args: &[&str]| ok(&[args, &c[..]].concat(), dir);
    run(&["gen", "--out", "store"]);
    assert!(dir.join("store/programs.csv").exists());
    run(&["split", "--store", "store", "--out", "splits.csv"]);
    let targets = fs::read_to_string(dir.join("targets.csv")).unwrap();
    assert!(targets.lines().count() > 1);
    run(&["train", "--store", "store", "--splits", "splits.csv", "--out", "mt"]);
    run(&["eval", "--models", "mt", "--store", "store", "--splits", "splits.csv", "--out", "dev.json", "--predictions", "dev.csv"]);
    run(&["eval", "--models", "mt", "--store", "store", "--splits", "splits.csv", "--subset", "temporal", "--out", "tmp.json"]);

    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.join("dev.json")).unwrap()).unwrap();
    let text = report.to_string();
    assert!(text.contains("ALT_A"), "{text}");
    let preds = fs::read_to_string(dir.join("dev.csv")).unwrap();
    assert!(preds.lines().count() > 10);

    run(&["compare", "--a", "dev.json", "--b", "tmp.json", "--out", "cmp.json"]);
    let cmp = fs::read_to_string(dir.join("cmp.json")).unwrap();
    assert!(cmp.contains("\"p\"") && cmp.contains("\"significant\""), "{cmp}");

    ok(&["plot", "--in", "dev.json", "--kind", "roc", "--out", "roc.svg", "--no-meta"], dir);
    let svg = fs::read_to_string(dir.join("roc.svg")).unwrap();
    assert!(svg.starts_with("<svg") && svg.contains("<polyline") && !svg.contains("<!--"));
    ok(&["plot", "--in", "dev.json", "--kind", "roc", "--out", "roc_meta.svg"], dir);
    assert!(fs::read_to_string(dir.join("roc_meta.svg")).unwrap().contains("<!-- mtmil "));
}
