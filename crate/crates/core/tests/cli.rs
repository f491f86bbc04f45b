use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
[data.sizes]
n_train = 24
n_dev = 12
n_test = 12

[data]
bpe_merges = 80

[encoder]
n_layers = 3
hidden_dim = 16
n_heads = 2
ffn_dim = 32
n_frozen = 1

[train]
epochs = 1
batch_size = 12
max_len = 40

[diagnostics]
n_samples = 8
"#;

fn msd(args: &[&str], root: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_msd"))
        .args(args)
        .env("MSD_OUTPUT_ROOT", root)
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

#[test]
fn synth_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for dir in [&a, &b] {
        ok(&msd(
            &[
                "synth",
                "--out",
                dir.to_str().unwrap(),
                "--seed",
                "4",
                "--n-train",
                "30",
                "--n-dev",
                "5",
                "--n-test",
                "5",
            ],
            tmp.path(),
        ));
    }
    let mut names: Vec<_> = fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert_eq!(names.len(), 6);
    for name in names {
        assert_eq!(fs::read(a.join(&name)).unwrap(), fs::read(b.join(&name)).unwrap());
    }
}

#[test]
fn evaluate_prediction_file_against_itself() {
    let tmp = tempfile::tempdir().unwrap();
    let gold = tmp.path().join("gold.conll");
    fs::write(
        &gold,
        "Peter B-PER\nlives O\nin O\nNew B-LOC\nYork I-LOC\n\nEU B-ORG\nrejects O\n",
    )
    .unwrap();
    let report = tmp.path().join("report.json");
    let stdout = ok(&msd(
        &[
            "evaluate",
            "--corpus",
            gold.to_str().unwrap(),
            "--predictions",
            gold.to_str().unwrap(),
            "--out",
            report.to_str().unwrap(),
        ],
        tmp.path(),
    ));
    assert!(stdout.contains("1.0000"), "{stdout}");
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(report).unwrap()).unwrap();
    assert_eq!(json["f1"], 1.0);
    assert_eq!(json["gold"], 3);
}

#[test]
fn error_classes_map_to_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let bad_cfg = tmp.path().join("bad.toml");
    fs::write(&bad_cfg, "[train]\nbatch_size = 0\n").unwrap();
    let out = msd(&["train-teacher", "--config", bad_cfg.to_str().unwrap()], tmp.path());
    assert_eq!(out.status.code(), Some(2));

    let unknown = tmp.path().join("unknown.toml");
    fs::write(&unknown, "[train]\nlearning_rate = 1.0\n").unwrap();
    assert_eq!(
        msd(&["train-teacher", "--config", unknown.to_str().unwrap()], tmp.path())
            .status
            .code(),
        Some(2)
    );

    let gold = tmp.path().join("gold.conll");
    fs::write(&gold, "Peter B-PER\n").unwrap();
    let pred = tmp.path().join("pred.conll");
    fs::write(&pred, "Peter B-XYZ\n").unwrap();
    let out = msd(
        &[
            "evaluate",
            "--corpus",
            gold.to_str().unwrap(),
            "--predictions",
            pred.to_str().unwrap(),
        ],
        tmp.path(),
    );
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("B-XYZ"));
}

#[test]
fn teacher_student_diagnose_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let cfg = root.join("tiny.toml");
    fs::write(&cfg, TINY).unwrap();
    let cfg = cfg.to_str().unwrap();

    let teacher = root.join("teacher");
    ok(&msd(
        &["train-teacher", "--config", cfg, "--out", teacher.to_str().unwrap()],
        root,
    ));
    for f in [
        "config.toml",
        "history.jsonl",
        "channels.txt",
        "checkpoint/model.json",
        "checkpoint/params.bin",
        "checkpoint/vocab.json",
    ] {
        assert!(teacher.join(f).exists(), "{f}");
    }

    let echoed = teacher.join("config.toml");
    let again = root.join("teacher-again");
    ok(&msd(
        &[
            "train-teacher",
            "--config",
            echoed.to_str().unwrap(),
            "--out",
            again.to_str().unwrap(),
        ],
        root,
    ));
    for f in ["config.toml", "checkpoint/params.bin", "history.jsonl"] {
        assert_eq!(
            fs::read(teacher.join(f)).unwrap(),
            fs::read(again.join(f)).unwrap(),
            "{f}"
        );
    }

    let student = root.join("student");
    let t_ckpt = teacher.join("checkpoint");
    ok(&msd(
        &[
            "distill",
            "--config",
            cfg,
            "--teacher",
            t_ckpt.to_str().unwrap(),
            "--out",
            student.to_str().unwrap(),
        ],
        root,
    ));
    assert!(student.join("target_test.json").exists());

    let s_ckpt = student.join("checkpoint");
    let diag = root.join("diag");
    let table = ok(&msd(
        &[
            "diagnose",
            "--config",
            cfg,
            "--teacher",
            t_ckpt.to_str().unwrap(),
            "--student",
            s_ckpt.to_str().unwrap(),
            "--out",
            diag.to_str().unwrap(),
        ],
        root,
    ));
    assert!(table.contains("tea_src"));
    assert_eq!(
        fs::read_to_string(diag.join("report.jsonl")).unwrap().lines().count(),
        6
    );
    let tsv = fs::read_to_string(diag.join("embeddings.tsv")).unwrap();
    assert_eq!(tsv.lines().count(), 1 + 4 * 8);

    let corpus = root.join("gold.conll");
    ok(&msd(
        &[
            "synth",
            "--out",
            root.join("data").to_str().unwrap(),
            "--n-train",
            "4",
            "--n-dev",
            "4",
            "--n-test",
            "6",
        ],
        root,
    ));
    fs::copy(root.join("data/src.test.conll"), &corpus).unwrap();
    let preds = root.join("preds.conll");
    let report = ok(&msd(
        &[
            "evaluate",
            "--corpus",
            corpus.to_str().unwrap(),
            "--checkpoint",
            t_ckpt.to_str().unwrap(),
            "--write-predictions",
            preds.to_str().unwrap(),
        ],
        root,
    ));
    let again = ok(&msd(
        &[
            "evaluate",
            "--corpus",
            corpus.to_str().unwrap(),
            "--predictions",
            preds.to_str().unwrap(),
        ],
        root,
    ));
    assert_eq!(report, again);
}
