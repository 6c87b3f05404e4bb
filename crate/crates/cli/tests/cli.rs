use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dgt_core::corpus::load_predictions;
use serde_json::Value;

fn dgt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dgt"))
        .args(args)
        .env_remove("DGT_SEED")
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const TINY: &[&str] = &[
    "--d-model",
    "16",
    "--n-heads",
    "2",
    "--decoder-layers",
    "1",
    "--encoder-layers",
    "3",
    "--max-positions",
    "32",
    "--max-epochs",
    "2",
    "--learning-rate",
    "0.001",
    "--val-max-gen-len",
    "16",
];

fn synth(dir: &Path) -> PathBuf {
    let out = dir.join("syn.csv");
    let o = dgt(&[
        "synth",
        "--out",
        s(&out),
        "--per-district",
        "20",
        "--max-len",
        "4",
        "--seed",
        "1",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    out
}

fn train(data: &Path, out_dir: &Path) -> Output {
    let mut args = vec!["train", "--train", s(data), "--out-dir", s(out_dir)];
    args.extend_from_slice(TINY);
    dgt(&args)
}

#[test]
fn stats_on_two_rows() {
    let dir = tempfile::tempdir().unwrap();
    let f = write(
        dir.path(),
        "t.csv",
        "index,district,contents,ipa\n0,d1,abc,x\n1,d1,a,yy\n",
    );
    let o = dgt(&["stats", "--train", s(&f), "--json"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["contents"]["lengths"]["mean"], 2.0);
    assert_eq!(v["contents"]["lengths"]["median"], 2.0);
    assert_eq!(v["contents"]["lengths"]["max"], 3);
    assert_eq!(v["ipa"]["lengths"]["median"], 1.5);

    let test = write(
        dir.path(),
        "u.csv",
        "index,district,contents\n0,d1,abc\n1,d1,zz q\n",
    );
    let o = dgt(&["stats", "--train", s(&f), "--test", s(&test)]);
    assert!(o.status.success());
    assert!(
        stdout(&o).contains("oov words 2 of 3 (66.67%)"),
        "{}",
        stdout(&o)
    );
}

#[test]
fn missing_file_fails() {
    let o = dgt(&["stats", "--train", "/definitely/not/here.csv"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("not/here.csv"));
}

#[test]
fn train_rejects_schema_errors_before_training() {
    let dir = tempfile::tempdir().unwrap();
    let f = write(dir.path(), "t.csv", "index,contents,ipa\n0,ka,ka\n");
    let o = train(&f, &dir.path().join("run"));
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("district"), "{}", stderr(&o));
    assert!(!dir.path().join("run").join("metrics.jsonl").exists());
}

#[test]
fn training_is_reproducible_and_infer_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for run in [&a, &b] {
        let o = train(&data, run);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    for file in ["metrics.jsonl", "best.dgt", "last.dgt", "config.txt"] {
        assert_eq!(
            fs::read(a.join(file)).unwrap(),
            fs::read(b.join(file)).unwrap(),
            "{file}"
        );
    }
    let log = fs::read_to_string(a.join("metrics.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 2);
    let run_log = fs::read_to_string(a.join("run.log")).unwrap();
    assert!(run_log.contains("seed = 0") && run_log.contains("d_model = 16"));

    let input = write(dir.path(), "in.csv", "index,district,contents\n42,d2,ka\n");
    let out = dir.path().join("out.csv");
    let o = dgt(&[
        "infer",
        "--checkpoint",
        s(&a.join("best.dgt")),
        "--input",
        s(&input),
        "--output",
        s(&out),
        "--max-gen-len",
        "8",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let preds = load_predictions(&out).unwrap();
    assert_eq!(preds.len(), 1);
    assert_eq!(preds[0].0, 42);

    let input = write(
        dir.path(),
        "bad.csv",
        "index,district,contents\n1,d1,ka\n2,x,ka\n3,d2,ta\n",
    );
    let o = dgt(&[
        "infer",
        "--checkpoint",
        s(&a.join("best.dgt")),
        "--input",
        s(&input),
        "--output",
        s(&out),
        "--max-gen-len",
        "8",
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("index 2"), "{}", stderr(&o));
    let preds = load_predictions(&out).unwrap();
    assert_eq!(preds.iter().map(|p| p.0).collect::<Vec<_>>(), vec![1, 2, 3]);

    // Resuming the 2-epoch run to 3 epochs appends one record.
    let o = dgt(&[
        "train",
        "--train",
        s(&data),
        "--out-dir",
        s(&a),
        "--resume",
        s(&a.join("last.dgt")),
        "--max-epochs",
        "3",
        "--learning-rate",
        "0.001",
        "--val-max-gen-len",
        "16",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let log = fs::read_to_string(a.join("metrics.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 3);
    assert!(log.lines().last().unwrap().contains("\"epoch\":3"));
}

const REFS: &str = "index,district,contents,ipa\n0,d1,x,a b c d\n1,d2,x,a\n2,d1,x,p q\n";

fn eval(dir: &Path, preds: &str, extra: &[&str]) -> Output {
    let r = write(dir, "refs.csv", REFS);
    let p = write(dir, "preds.csv", preds);
    let mut args = vec!["eval", "--predictions", s(&p), "--references", s(&r)];
    args.extend_from_slice(extra);
    dgt(&args)
}

#[test]
fn eval_identity_is_zero() {
    let dir = tempfile::tempdir().unwrap();
    let o = eval(dir.path(), "index,ipa\n2,p q\n0,a b c d\n1,a\n", &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["overall"]["wer"], 0.0);
    assert_eq!(v["districts"]["d1"]["wer"], 0.0);
    assert_eq!(v["districts"]["d2"]["wer"], 0.0);
}

#[test]
fn eval_hand_fixture() {
    let dir = tempfile::tempdir().unwrap();
    // row 0: one substitution and one deletion; row 1: one insertion;
    // row 2: correct. 3 errors over 7 reference words.
    let o = eval(dir.path(), "index,ipa\n0,a x c\n1,a b\n2,p q\n", &[]);
    let v: Value = serde_json::from_str(&stdout(&o)).unwrap();
    let overall = &v["overall"];
    assert_eq!(overall["substitutions"], 1);
    assert_eq!(overall["deletions"], 1);
    assert_eq!(overall["insertions"], 1);
    assert_eq!(overall["ref_words"], 7);
    assert!((overall["wer"].as_f64().unwrap() - 300.0 / 7.0).abs() < 1e-9);
    assert!((v["districts"]["d1"]["wer"].as_f64().unwrap() - 100.0 / 3.0).abs() < 1e-9);
    assert_eq!(v["districts"]["d2"]["wer"], 100.0);
}

#[test]
fn eval_split_is_stable_and_seeded() {
    let dir = tempfile::tempdir().unwrap();
    let preds = "index,ipa\n0,a x c\n1,a b\n2,p q\n";
    let first = stdout(&eval(dir.path(), preds, &["--split", "--seed", "5"]));
    let second = stdout(&eval(dir.path(), preds, &["--split", "--seed", "5"]));
    assert_eq!(first, second);
    let v: Value = serde_json::from_str(&first).unwrap();
    let words =
        v["public"]["ref_words"].as_u64().unwrap() + v["private"]["ref_words"].as_u64().unwrap();
    assert_eq!(words, 7);
    assert_eq!(v["split_seed"], 5);
}

#[test]
fn seed_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "run.cfg", "seed = 1\n");
    let r = write(dir.path(), "refs.csv", REFS);
    let p = write(dir.path(), "preds.csv", "index,ipa\n0,a\n1,a\n2,p\n");
    let run = |env: Option<&str>, flag: Option<&str>| -> u64 {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_dgt"));
        cmd.args([
            "eval",
            "--split",
            "--predictions",
            s(&p),
            "--references",
            s(&r),
            "--config",
            s(&cfg),
        ]);
        cmd.env_remove("DGT_SEED").env("RUST_LOG", "warn");
        if let Some(e) = env {
            cmd.env("DGT_SEED", e);
        }
        if let Some(f) = flag {
            cmd.args(["--seed", f]);
        }
        let o = cmd.output().unwrap();
        assert!(o.status.success(), "{}", stderr(&o));
        let v: Value = serde_json::from_str(&stdout(&o)).unwrap();
        v["split_seed"].as_u64().unwrap()
    };
    assert_eq!(run(None, None), 1);
    assert_eq!(run(Some("2"), None), 2);
    assert_eq!(run(Some("2"), Some("3")), 3);
}

#[test]
fn eval_reports_alignment_errors() {
    let dir = tempfile::tempdir().unwrap();
    let o = eval(dir.path(), "index,ipa\n0,a\n9,b\n", &[]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert!(err.contains("[1, 2]") && err.contains("[9]"), "{err}");
}

#[test]
fn effective_config_is_echoed() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("s.csv");
    let o = Command::new(env!("CARGO_BIN_EXE_dgt"))
        .args([
            "synth",
            "--out",
            s(&out),
            "--per-district",
            "5",
            "--seed",
            "9",
        ])
        .env("RUST_LOG", "info")
        .output()
        .unwrap();
    assert!(o.status.success());
    let err = stderr(&o);
    assert!(
        err.contains("seed = 9") && err.contains("batch_size = 4"),
        "{err}"
    );
}
