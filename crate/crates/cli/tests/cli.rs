use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn inkline(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_inkline"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const TINY_CONFIG: &str = r#"{
  "seed": 3,
  "normalize": { "target_height": 32, "target_width": 64 },
  "model": {
    "image_height": 32,
    "reader": "lenet",
    "features": { "mode": "patches", "width": 10, "step": 4 },
    "encoder": { "cell": "gru", "size": 8, "layers": 1, "bidirectional": true },
    "attention_size": 8
  },
  "train": { "batch_size": 4, "max_epochs": 2, "dropout": 0.0, "augment": true }
}"#;

#[test]
fn inspect_model_lenet_total() {
    let o = inkline(&[
        "inspect-model",
        "--arch",
        "lenet",
        "--input",
        "28x28",
        "--classes",
        "10",
    ]);
    assert!(o.status.success());
    let out = stdout(&o);
    assert!(out.contains("687,142"), "{out}");
    assert!(out.contains("(14, 14, 20)"));
}

#[test]
fn inspect_model_vgg_and_resnet() {
    let o = inkline(&[
        "inspect-model",
        "--arch",
        "vgg",
        "--input",
        "64x64",
        "--classes",
        "52",
    ]);
    assert!(stdout(&o).contains("4,625,492"));
    let o = inkline(&[
        "inspect-model",
        "--arch",
        "resnet",
        "--input",
        "64x64",
        "--classes",
        "26",
    ]);
    assert!(stdout(&o).contains("8,531,242"));
}

#[test]
fn version_and_help() {
    let o = inkline(&["--version"]);
    assert!(o.status.success());
    assert_eq!(
        stdout(&o).trim(),
        format!("inkline {}", env!("CARGO_PKG_VERSION"))
    );
    for sub in [
        "normalize",
        "augment",
        "synth",
        "train",
        "evaluate",
        "decode",
        "report",
        "inspect-model",
    ] {
        let o = inkline(&[sub, "--help"]);
        assert!(o.status.success(), "{sub} --help");
        assert!(stdout(&o).contains("Usage"));
    }
}

#[test]
fn exit_codes() {
    assert_eq!(inkline(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(
        inkline(&[
            "inspect-model",
            "--arch",
            "lenet",
            "--input",
            "28by28",
            "--classes",
            "10"
        ])
        .status
        .code(),
        Some(1)
    );
    assert_eq!(
        inkline(&["report", "--preds", "/nonexistent/preds.tsv"])
            .status
            .code(),
        Some(2)
    );

    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{ "sed": 1 }"#).unwrap();
    assert_eq!(
        inkline(&["--config", p(&bad), "report", "--preds", "x"])
            .status
            .code(),
        Some(1)
    );

    let preds = dir.path().join("p.tsv");
    fs::write(&preds, "id\tprediction\nfoo\n").unwrap();
    assert_eq!(
        inkline(&["report", "--preds", p(&preds)]).status.code(),
        Some(2)
    );
}

#[test]
fn report_identical_is_zero() {
    let dir = tempfile::tempdir().unwrap();
    let preds = dir.path().join("p.tsv");
    fs::write(
        &preds,
        "id\tprediction\treference\na\tcat\tcat\nb\tdog\tdog\nc\tox\tox\n",
    )
    .unwrap();
    let o = inkline(&["report", "--preds", p(&preds)]);
    assert!(o.status.success());
    let out = stdout(&o);
    assert!(out.contains("CER 0.000000 [0.000000, 0.000000]"), "{out}");
    assert!(out.contains("WER 0.000000 [0.000000, 0.000000]"), "{out}");
}

#[test]
fn decode_snaps_to_lexicon() {
    let dir = tempfile::tempdir().unwrap();
    let preds = dir.path().join("p.tsv");
    let lex = dir.path().join("lex.txt");
    let out = dir.path().join("d.tsv");
    fs::write(
        &preds,
        "id\tprediction\treference\na\tcst\tcat\nb\tdgo\tdog\n",
    )
    .unwrap();
    fs::write(&lex, "cat\ndog\nbird\n").unwrap();
    let o = inkline(&[
        "decode",
        "--preds",
        p(&preds),
        "--lexicon",
        p(&lex),
        "--out",
        p(&out),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(&out).unwrap();
    assert_eq!(
        text,
        "id\tprediction\treference\na\tcat\tcat\nb\tdog\tdog\n"
    );
}

fn tree_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path
                    .strip_prefix(dir)
                    .unwrap()
                    .to_string_lossy()
                    .into_owned();
                out.push((rel, fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn synth_normalize_augment_are_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let mut trees = Vec::new();
    for run in 0..2 {
        let root = dir.path().join(format!("run{run}"));
        let data = root.join("data");
        let o = inkline(&[
            "--seed",
            "5",
            "synth",
            "--out",
            p(&data),
            "--train",
            "6",
            "--val",
            "2",
            "--test",
            "2",
            "--slant",
            "0.3",
            "--slope",
            "0.1",
            "--exemplars",
            "2",
            "--cout",
            "2",
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        let o = inkline(&[
            "--seed",
            "5",
            "normalize",
            "--in",
            p(&data.join("train")),
            "--out",
            p(&root.join("norm")),
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        let first = data.join("train").join("00000.png");
        let o = inkline(&[
            "--seed",
            "5",
            "augment",
            "--in",
            p(&first),
            "--out",
            p(&root.join("aug")),
            "--n",
            "4",
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        trees.push(tree_bytes(&root));
    }
    assert!(trees[0].len() >= 6 + 2 + 2 + 1 + 6 + 5);
    assert_eq!(trees[0], trees[1]);
}

#[test]
fn train_evaluate_roundtrip_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let cfg = dir.path().join("c.json");
    fs::write(&cfg, TINY_CONFIG).unwrap();
    let o = inkline(&[
        "--config",
        p(&cfg),
        "synth",
        "--out",
        p(&data),
        "--train",
        "8",
        "--val",
        "4",
        "--test",
        "4",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    let mut ckpts = Vec::new();
    for run in 0..2 {
        let out = dir.path().join(format!("model{run}"));
        let o = inkline(&[
            "--config",
            p(&cfg),
            "train",
            "--data",
            p(&data),
            "--out",
            p(&out),
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        let stderr = String::from_utf8_lossy(&o.stderr);
        assert!(stderr.contains("resolved config"));
        assert!(out.join("config.json").exists());
        let stats = fs::read_to_string(out.join("stats.csv")).unwrap();
        assert_eq!(stats.lines().count(), 3);
        ckpts.push(fs::read(out.join("best.ckpt")).unwrap());
    }
    assert_eq!(ckpts[0], ckpts[1]);

    let preds = dir.path().join("preds.tsv");
    let att = dir.path().join("att");
    let ckpt = dir.path().join("model0").join("best.ckpt");
    let o = inkline(&[
        "--config",
        p(&cfg),
        "evaluate",
        "--model",
        p(&ckpt),
        "--data",
        p(&data),
        "--out",
        p(&preds),
        "--attention",
        p(&att),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(&preds).unwrap();
    assert!(text.starts_with("id\tprediction\treference\n"));
    assert_eq!(text.lines().count(), 5);
    assert_eq!(fs::read_dir(&att).unwrap().count(), 4);

    let o = inkline(&["report", "--preds", p(&preds), "--resamples", "200"]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("samples 4"));
}

#[test]
fn train_rejects_height_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    fs::write(
        &cfg,
        TINY_CONFIG.replace("\"target_height\": 32", "\"target_height\": 40"),
    )
    .unwrap();
    let o = inkline(&[
        "--config",
        p(&cfg),
        "train",
        "--data",
        p(dir.path()),
        "--out",
        p(&dir.path().join("m")),
    ]);
    assert_eq!(o.status.code(), Some(1));
}
