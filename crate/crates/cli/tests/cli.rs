use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use slt_core::corpus::{landmarks_file_name, VIDEO_DIR};
use slt_core::synth::BenchmarkSpec;

fn slt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_slt")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn small_spec() -> BenchmarkSpec {
    let mut spec = BenchmarkSpec::transfer();
    let sl = &mut spec.sign_languages[0];
    sl.train_videos = 4;
    sl.dev_videos = 2;
    sl.test_videos = 2;
    sl.tune_videos = 2;
    spec.mt_pairs.iter_mut().for_each(|p| p.count = 10);
    spec
}

fn gen_corpus(dir: &Path) -> PathBuf {
    let spec_path = dir.join("spec.json");
    fs::write(&spec_path, serde_json::to_string(&small_spec()).unwrap()).unwrap();
    let corpus = dir.join("corpus");
    let o = slt(&["gen", "--spec", spec_path.to_str().unwrap(), "--out", corpus.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    corpus
}

fn write_config(dir: &Path, corpus: &Path) -> PathBuf {
    let cfg = serde_json::json!({
        "corpus": corpus,
        "preset": "baseline+mt",
        "train": {"max_steps": 4, "batch_size": 2},
        "eval_every": 2,
        "decode": {"beam_size": 2, "max_len": 8},
        "dev_decode": {"beam_size": 1, "max_len": 8},
        "finetune": {"train": {"max_steps": 2, "batch_size": 2}, "eval_every": 1}
    });
    let path = dir.join("run.json");
    fs::write(&path, cfg.to_string()).unwrap();
    path
}

#[test]
fn full_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = gen_corpus(tmp.path());
    let config = write_config(tmp.path(), &corpus);
    let out = tmp.path().join("run");
    let (config, out_s) = (config.to_str().unwrap(), out.to_str().unwrap());

    let o = slt(&["pretrain", "--config", config, "--out", out_s, "--seed", "3"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let log = fs::read_to_string(out.join("train_log.csv")).unwrap();
    assert!(log.starts_with("# seed=3\n# config={"));
    assert_eq!(log.lines().filter(|l| !l.starts_with('#')).count(), 1 + 5);
    assert!(out.join("best.ckpt").is_file() && out.join("last.ckpt").is_file());

    let lmk = corpus.join(VIDEO_DIR).join(landmarks_file_name("sl0-test-0000"));
    let ckpt = out.join("last.ckpt");
    let o = slt(&[
        "translate", "--config", config, "--checkpoint", ckpt.to_str().unwrap(),
        "--input", lmk.to_str().unwrap(), "--direction", "sl0-en",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(stdout(&o).lines().count(), 1);

    let report = tmp.path().join("reports").join("pre.csv");
    let o = slt(&[
        "eval", "--config", config, "--checkpoint", ckpt.to_str().unwrap(),
        "--report", report.to_str().unwrap(), "--cascade", "pivot=en",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let table = stdout(&o);
    assert!(table.contains("sl0-xb"), "{table}");
    assert!(table.contains("+cascade:en"), "{table}");
    assert!(table.contains("unavailable"));
    let csv = fs::read_to_string(&report).unwrap();
    assert!(csv.lines().skip(1).all(|l| l.contains(",pretrain,3,")), "{csv}");

    let o = slt(&[
        "finetune", "--config", config, "--out", out_s, "--seed", "3",
        "--checkpoint", ckpt.to_str().unwrap(), "--direction", "sl0-xb",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let ft = out.join("finetune.ckpt");
    assert!(ft.is_file());
    let o = slt(&[
        "eval", "--config", config, "--checkpoint", ft.to_str().unwrap(),
        "--report", tmp.path().join("reports").join("ft.csv").to_str().unwrap(),
        "--direction", "sl0-en", "--direction", "sl0-xb",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("finetune"));

    let o = slt(&["report", tmp.path().join("reports").to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("warning: correlation omitted"), "{}", stdout(&o));
}

#[test]
fn rerun_is_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = gen_corpus(tmp.path());
    let config = write_config(tmp.path(), &corpus);
    let out = tmp.path().join("run");
    let args = ["pretrain", "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()];
    assert!(slt(&args).status.success());
    let log = fs::read(out.join("train_log.csv")).unwrap();
    let ckpt = fs::read(out.join("last.ckpt")).unwrap();
    assert!(slt(&args).status.success());
    assert_eq!(fs::read(out.join("train_log.csv")).unwrap(), log);
    assert_eq!(fs::read(out.join("last.ckpt")).unwrap(), ckpt);
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    // Usage errors.
    assert_eq!(slt(&["pretrain", "--bogus"]).status.code(), Some(1));
    assert_eq!(slt(&["pretrain", "--set", "nokey"]).status.code(), Some(1));
    // Config errors: missing corpus, unknown key, bad preset.
    let missing = tmp.path().join("nope");
    assert_eq!(slt(&["pretrain", "--corpus", missing.to_str().unwrap()]).status.code(), Some(1));
    assert_eq!(slt(&["pretrain", "--set", "sede=1"]).status.code(), Some(1));
    assert_eq!(slt(&["pretrain", "--set", "preset=nope"]).status.code(), Some(1));
    assert_eq!(slt(&["exp", "exp:nope"]).status.code(), Some(1));

    let corpus = gen_corpus(tmp.path());
    let config = write_config(tmp.path(), &corpus);
    let config = config.to_str().unwrap();
    let out = tmp.path().join("run");
    let o = slt(&["pretrain", "--config", config, "--out", out.to_str().unwrap()]);
    assert!(o.status.success());

    // Data error: no references for the requested direction.
    let o = slt(&[
        "eval", "--config", config, "--checkpoint", out.join("last.ckpt").to_str().unwrap(),
        "--direction", "sl0-xa", "--report", tmp.path().join("r.csv").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
    // Data error: unreadable checkpoint.
    let bogus = tmp.path().join("bogus.ckpt");
    fs::write(&bogus, b"nope").unwrap();
    let o = slt(&["eval", "--config", config, "--checkpoint", bogus.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));

    // Numerical failure: a step so large the parameters overflow.
    let o = slt(&[
        "pretrain", "--config", config, "--out", tmp.path().join("nan").to_str().unwrap(),
        "--set", "train.learning_rate=1e39",
    ]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
}
