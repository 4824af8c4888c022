use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use autofi::data::{read_dataset, read_labeled};
use serde_json::Value;

fn autofi(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_autofi"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const SMALL: &str = "\
n_unlabeled = 8
per_class = 4
batch_size = 4
gss_epochs = 2
fsc_epochs = 3
stream_seconds = 60
n_way = 4
k_shot = 1
q_query = 2
n_episodes = 2
";

#[test]
fn unknown_key_is_named_and_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.cfg", "lr = 0.01\nlearnign_rate = 3\n");
    let o = autofi(&["pretrain", "--config", &cfg, "--data", "x.afcs"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("`learnign_rate`"), "{}", stderr(&o));
}

#[test]
fn missing_file_names_path() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.afcs");
    let o = autofi(&["pretrain", "--data", missing.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("nope.afcs"), "{}", stderr(&o));
    let o = autofi(&["pretrain", "--config", dir.path().join("none.cfg").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("none.cfg"));
}

#[test]
fn bad_flag_is_a_validation_error() {
    assert_eq!(autofi(&["pretrain", "--bogus"]).status.code(), Some(1));
    assert_eq!(autofi(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(autofi(&["--help"]).status.code(), Some(0));
}

#[test]
fn help_lists_config_keys() {
    let o = autofi(&["--help"]);
    let text = String::from_utf8_lossy(&o.stdout);
    for key in ["gss_epochs", "mi_sign", "clip_norm", "n_way", "tau"] {
        assert!(text.contains(key), "{key} missing from help");
    }
}

#[test]
fn gradcheck_passes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "g.cfg", "grad_seeds = 2\n");
    let o = autofi(&["gradcheck", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let lines: Vec<Value> = String::from_utf8_lossy(&o.stdout)
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 7);
    assert!(lines.iter().all(|l| l["pass"] == Value::Bool(true)));
}

fn run_ok(args: &[&str]) -> Output {
    let o = autofi(args);
    assert_eq!(o.status.code(), Some(0), "{args:?}: {}", stderr(&o));
    o
}

#[test]
fn full_pipeline_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "small.cfg", SMALL);
    let mut outputs = Vec::new();
    for run in ["a", "b"] {
        let out = dir.path().join(run);
        let o = out.to_str().unwrap();
        let p = |f: &str| out.join(f).to_str().unwrap().to_string();
        run_ok(&["gen", "--config", &cfg, "--seed", "7", "--out", o]);
        run_ok(&["pretrain", "--config", &cfg, "--seed", "7", "--out", o, "--data", &p("unlabeled.afcs")]);
        run_ok(&[
            "calibrate",
            "--config",
            &cfg,
            "--seed",
            "7",
            "--out",
            o,
            "--data",
            &p("labeled.afcs"),
            "--checkpoint",
            &p("pretrain.ckpt"),
        ]);
        let ev = run_ok(&[
            "eval",
            "--config",
            &cfg,
            "--seed",
            "7",
            "--out",
            o,
            "--data",
            &p("labeled.afcs"),
            "--checkpoint",
            &p("pretrain.ckpt"),
        ]);
        let summary: Value = serde_json::from_slice(&ev.stdout).unwrap();
        assert_eq!(summary["episodes"], 2);
        let inf = run_ok(&["infer", "--checkpoint", &p("calibrate.ckpt"), "--data", &p("labeled.afcs")]);
        outputs.push(inf.stdout);
    }
    for f in [
        "unlabeled.afcs",
        "labeled.afcs",
        "labeled.aflb",
        "pretrain.ckpt",
        "pretrain_log.jsonl",
        "calibrate.ckpt",
        "calibrate_log.jsonl",
        "metrics.jsonl",
    ] {
        let a = fs::read(dir.path().join("a").join(f)).unwrap();
        let b = fs::read(dir.path().join("b").join(f)).unwrap();
        assert!(a == b, "{f} differs between identical runs");
    }
    assert_eq!(outputs[0], outputs[1]);

    let metrics = fs::read_to_string(dir.path().join("a/metrics.jsonl")).unwrap();
    for (i, line) in metrics.lines().enumerate() {
        let v: Value = serde_json::from_str(line).unwrap();
        assert_eq!(v["episode"], i);
        assert!(v["accuracy"].as_f64().unwrap() >= 0.0);
    }
    let log = fs::read_to_string(dir.path().join("a/pretrain_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 2);
}

#[test]
fn infer_on_full_size_sample_prints_class_and_posterior() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "full.cfg",
        "subcarriers = 114\nwindow = 500\nn_unlabeled = 1\nper_class = 1\nfsc_epochs = 1\nstream_seconds = 60\n",
    );
    let out = dir.path().to_str().unwrap();
    let p = |f: &str| dir.path().join(f).to_str().unwrap().to_string();
    run_ok(&["gen", "--config", &cfg, "--out", out]);
    run_ok(&["calibrate", "--config", &cfg, "--out", out, "--data", &p("labeled.afcs")]);
    let data = read_labeled(Path::new(&p("labeled.afcs")), Path::new(&p("labeled.aflb"))).unwrap();
    assert_eq!(data[0].values.dims(), &[3, 114, 500]);
    let o = run_ok(&["infer", "--checkpoint", &p("calibrate.ckpt"), "--data", &p("labeled.afcs")]);
    let text = String::from_utf8(o.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), data.len());
    let v: Value = serde_json::from_str(lines[0]).unwrap();
    let posterior: Vec<f64> = v["posterior"].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect();
    assert_eq!(posterior.len(), 4);
    assert!((posterior.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    assert!((4..8).contains(&v["class"].as_u64().unwrap()));
}

#[test]
fn stream_then_segment() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "s.cfg", "kind = stream\nstream_seconds = 120\n");
    let out = dir.path().to_str().unwrap();
    let p = |f: &str| dir.path().join(f).to_str().unwrap().to_string();
    run_ok(&["gen", "--config", &cfg, "--out", out]);
    let seg_cfg = write_config(dir.path(), "seg.cfg", &format!("events = {}\n", p("events.jsonl")));
    let seg_out = dir.path().join("seg");
    run_ok(&["segment", "--config", &seg_cfg, "--data", &p("stream.afcs"), "--out", seg_out.to_str().unwrap()]);
    let all = read_dataset(&seg_out.join("segments.afcs")).unwrap();
    let labeled = read_labeled(&seg_out.join("labeled.afcs"), &seg_out.join("labeled.aflb")).unwrap();
    assert!(!all.is_empty());
    assert!(labeled.len() <= all.len());
    assert!(all.iter().all(|s| s.values.dims() == [3, 69, 320]));
}

#[test]
fn non_finite_training_aborts_with_exit_2_and_keeps_last_good() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "boom.cfg", &format!("{SMALL}lr = 1e30\nclip_norm = none\ngss_epochs = 3\n"));
    let out = dir.path().to_str().unwrap();
    let p = |f: &str| dir.path().join(f).to_str().unwrap().to_string();
    run_ok(&["gen", "--config", &cfg, "--out", out]);
    let o = autofi(&["pretrain", "--config", &cfg, "--out", out, "--data", &p("unlabeled.afcs")]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("non-finite"));
    assert!(dir.path().join("pretrain_last_good.ckpt").exists());
    assert!(!dir.path().join("pretrain.ckpt").exists());
}
