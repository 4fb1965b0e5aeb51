//! End-to-end runs of the `lmaug` binary on a small synthetic benchmark.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};
use tempfile::TempDir;

fn lmaug(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lmaug"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok_json(out: Output) -> Value {
    assert!(
        out.status.success(),
        "exit {:?}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("summary is JSON")
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Generates a small benchmark and returns its directory.
fn bench(dir: &TempDir) -> PathBuf {
    let cfg = dir.path().join("bench.json");
    fs::write(&cfg, r#"{"n_train": 300, "n_dev": 60, "n_eval": 40, "n_stats": 50}"#).unwrap();
    let data = dir.path().join("data");
    ok_json(lmaug(&["synth", "--config", s(&cfg), "--out", s(&data)]));
    data
}

/// Rewrites the generated experiment with a tiny model and short schedules.
fn experiment(data: &Path, name: &str, edit: impl FnOnce(&mut Value)) -> PathBuf {
    let mut v = read_json(&data.join("experiment.json"));
    v["model"]["embed_dim"] = json!(8);
    v["model"]["hidden_dim"] = json!(12);
    v["pretrain"]["max_epochs"] = json!(2);
    v["finetune"]["max_epochs"] = json!(1);
    v["paths"]["out_dir"] = json!(name);
    edit(&mut v);
    let path = data.join(format!("{name}.json"));
    fs::write(&path, serde_json::to_string_pretty(&v).unwrap()).unwrap();
    path
}

#[test]
fn synth_writes_a_complete_benchmark() {
    let dir = TempDir::new().unwrap();
    let data = bench(&dir);
    for f in [
        "vocab.txt",
        "train.txt",
        "train.sessions",
        "dev.txt",
        "eval.txt",
        "firstpass.arpa",
        "stats.nbest.jsonl",
        "dev.nbest.jsonl",
        "dev.refs",
        "eval.refs",
        "experiment.json",
        "benchmark.json",
    ] {
        assert!(data.join(f).is_file(), "{f} missing");
    }
    assert_eq!(fs::read_to_string(data.join("train.txt")).unwrap().lines().count(), 300);
}

#[test]
fn baseline_training_writes_both_checkpoints() {
    let dir = TempDir::new().unwrap();
    let data = bench(&dir);
    let cfg = experiment(&data, "base", |_| {});
    let summary = ok_json(lmaug(&["train", "--config", s(&cfg)]));
    let out = data.join("base");
    assert!(out.join("pretrain.ckpt.json").is_file());
    assert!(out.join("model.ckpt.json").is_file());
    let ppl = summary["finetune"]["best_dev_ppl"].as_f64().unwrap();
    assert!(ppl.is_finite() && ppl > 1.0);
    let log = fs::read_to_string(out.join("train_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 1 + 2 + 1, "header plus one row per epoch");
}

#[test]
fn training_is_reproducible_and_seed_sensitive() {
    let dir = TempDir::new().unwrap();
    let data = bench(&dir);
    let cfg = experiment(&data, "a", |_| {});
    ok_json(lmaug(&["train", "--config", s(&cfg), "--out", s(&data.join("a"))]));
    ok_json(lmaug(&["train", "--config", s(&cfg), "--out", s(&data.join("b"))]));
    ok_json(lmaug(&["train", "--config", s(&cfg), "--out", s(&data.join("c")), "--seed", "99"]));
    let read = |d: &str| fs::read(data.join(d).join("model.ckpt.json")).unwrap();
    assert_eq!(read("a"), read("b"));
    assert_ne!(read("a"), read("c"));
}

#[test]
fn input_augmentation_applies_configured_rates() {
    let dir = TempDir::new().unwrap();
    let data = bench(&dir);
    let cfg = experiment(&data, "i0", |v| {
        v["scheme"] = json!("i0");
        v["channel"] = json!({"type": "zerogram", "p_sub": 0.2, "p_del": 0.1, "p_ins": 0.05});
    });
    let summary = ok_json(lmaug(&["corrupt", "--config", s(&cfg)]));
    assert_eq!(summary["sentences"], json!(300));
    for (key, want) in [("sub_rate", 0.2), ("del_rate", 0.1), ("ins_rate", 0.05)] {
        let got = summary[key].as_f64().unwrap();
        assert!((got - want).abs() < 0.04, "{key}: {got}");
    }
    let tsv = fs::read_to_string(data.join("i0/corrupted.tsv")).unwrap();
    assert_eq!(tsv.lines().count(), 301);
    // The trainer logs the same draws for its first epoch.
    ok_json(lmaug(&["train", "--config", s(&cfg)]));
    let log = fs::read_to_string(data.join("i0/train_log.csv")).unwrap();
    let header: Vec<&str> = log.lines().next().unwrap().split(',').collect();
    let first: Vec<&str> = log.lines().nth(1).unwrap().split(',').collect();
    let col = |name: &str| header.iter().position(|h| *h == name).unwrap();
    let logged: f64 = first[col("sub_rate")].parse().unwrap();
    assert!((logged - summary["sub_rate"].as_f64().unwrap()).abs() < 1e-12);
}

#[test]
fn label_smoothing_raises_the_training_loss() {
    let dir = TempDir::new().unwrap();
    let data = bench(&dir);
    let plain = experiment(&data, "plain", |_| {});
    let smooth = experiment(&data, "ls", |v| {
        v["scheme"] = json!("t0LS");
        v["model"]["label_smoothing"] = json!(0.2);
        v["pretrain"]["label_smoothing"] = json!(true);
    });
    ok_json(lmaug(&["train", "--config", s(&plain)]));
    ok_json(lmaug(&["train", "--config", s(&smooth)]));
    let first_loss = |d: &str| -> f64 {
        let log = fs::read_to_string(data.join(d).join("train_log.csv")).unwrap();
        let header: Vec<&str> = log.lines().next().unwrap().split(',').collect();
        let row: Vec<&str> = log.lines().nth(1).unwrap().split(',').collect();
        row[header.iter().position(|h| *h == "train_loss").unwrap()].parse().unwrap()
    };
    assert!(first_loss("ls") > first_loss("plain"));
}

#[test]
fn rescoring_with_lambda_zero_reproduces_the_first_pass() {
    let dir = TempDir::new().unwrap();
    let data = bench(&dir);
    let cfg = experiment(&data, "r", |v| {
        v["rescore"]["grid"] = json!([0.0]);
    });
    ok_json(lmaug(&["train", "--config", s(&cfg)]));
    let summary = ok_json(lmaug(&["rescore", "--config", s(&cfg)]));
    assert_eq!(summary["best_lambda"], json!(0.0));
    assert_eq!(summary["dev_wer"], summary["dev_firstpass_wer"]);
    assert_eq!(summary["eval_wer"]["wer"], summary["eval_firstpass_wer"]);
    // Independent check: the top entry of every list is what was selected.
    let selections = fs::read_to_string(data.join("r/dev.selections.jsonl")).unwrap();
    for line in selections.lines() {
        let v: Value = serde_json::from_str(line).unwrap();
        assert_eq!(v["index"], json!(0));
    }
    let lambda_csv = fs::read_to_string(data.join("r/lambda.csv")).unwrap();
    assert_eq!(lambda_csv.lines().count(), 2);
}

#[test]
fn identity_channel_gives_sppl_equal_to_ppl() {
    let dir = TempDir::new().unwrap();
    let data = bench(&dir);
    let cfg = experiment(&data, "e", |_| {});
    ok_json(lmaug(&["train", "--config", s(&cfg)]));
    let channel = data.join("identity.json");
    fs::write(&channel, r#"{"type": "zerogram"}"#).unwrap();
    let ckpt = data.join("e/model.ckpt.json");
    let out = data.join("eval");
    let summary = ok_json(lmaug(&[
        "eval-ppl",
        "--checkpoint",
        s(&ckpt),
        "--corpus",
        s(&data.join("dev.txt")),
        "--sessions",
        s(&data.join("dev.sessions")),
        "--channel",
        s(&channel),
        "-k",
        "3",
        "--out",
        s(&out),
    ]));
    assert_eq!(summary["sppl_mean"], summary["ppl"]);
    assert_eq!(summary["tppl"], summary["ppl"]);
    assert_eq!(summary["sppl_std"], json!(0.0));
    assert!(out.join("sppl.csv").is_file() && out.join("ppl.csv").is_file());
}

#[test]
fn stats_recovers_error_rates_from_nbest_lists() {
    let dir = TempDir::new().unwrap();
    let data = bench(&dir);
    let out = data.join("stats");
    let summary = ok_json(lmaug(&[
        "stats",
        "--nbest",
        s(&data.join("stats.nbest.jsonl")),
        "--refs",
        s(&data.join("stats.refs")),
        "--vocab",
        s(&data.join("vocab.txt")),
        "--out",
        s(&out),
    ]));
    for key in ["sub_rate", "del_rate", "ins_rate"] {
        let r = summary[key].as_f64().unwrap();
        assert!(r > 0.0 && r < 0.5, "{key}: {r}");
    }
    assert!(out.join("confusion.tsv").is_file());
}

#[test]
fn wer_command_and_exit_codes() {
    let dir = TempDir::new().unwrap();
    let refs = dir.path().join("ref.txt");
    let hyps = dir.path().join("hyp.txt");
    fs::write(&refs, "u1 a b c\nu2 d e\n").unwrap();
    fs::write(&hyps, "u1 a x c\nu2 d e f\n").unwrap();
    let r = ok_json(lmaug(&["wer", "--ref", s(&refs), "--hyp", s(&refs)]));
    assert_eq!(r["wer"], json!(0.0));
    let r = ok_json(lmaug(&["wer", "--ref", s(&refs), "--hyp", s(&hyps)]));
    assert_eq!((r["subs"].clone(), r["inss"].clone(), r["n_ref"].clone()), (json!(1), json!(1), json!(5)));
    assert!((r["wer"].as_f64().unwrap() - 0.4).abs() < 1e-12);

    let bad = dir.path().join("bad.txt");
    fs::write(&bad, "u9 a\n").unwrap();
    assert_eq!(lmaug(&["wer", "--ref", s(&refs), "--hyp", s(&bad)]).status.code(), Some(2));
    assert_eq!(lmaug(&["wer", "--ref", s(&dir.path().join("missing")), "--hyp", s(&bad)]).status.code(), Some(2));
    assert_eq!(lmaug(&["train"]).status.code(), Some(1), "missing --config");
    assert_eq!(lmaug(&["no-such-command"]).status.code(), Some(1));
    assert_eq!(lmaug(&["--help"]).status.code(), Some(0));

    let cfg = dir.path().join("exp.json");
    fs::write(&cfg, r#"{"paths": {"train": "ref.txt", "dev": "ref.txt"}, "scheme": "i0", "seed": 1}"#).unwrap();
    let out = lmaug(&["train", "--config", s(&cfg)]);
    assert_eq!(out.status.code(), Some(1), "i0 without a channel is a configuration error");
}

#[test]
fn diverging_training_exits_with_numerical_failure() {
    let dir = TempDir::new().unwrap();
    let data = bench(&dir);
    let cfg = experiment(&data, "div", |v| {
        v["pretrain"]["initial_lr"] = json!(1e6);
        v["pretrain"]["clip_norm"] = json!(1e300);
    });
    let out = lmaug(&["train", "--config", s(&cfg)]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}
