use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use handgcn::pipeline::synthetic::{separable_sequences, SyntheticSpec};

fn handgcn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_handgcn"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn ok(args: &[&str]) -> String {
    let o = handgcn(args);
    assert!(
        o.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    stdout(&o)
}

fn code(args: &[&str]) -> i32 {
    handgcn(args).status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Writes `root/<class>/<video>.json` for a synthetic separable set.
fn write_dataset(root: &Path, spec: &SyntheticSpec, prefix: &str) -> Vec<PathBuf> {
    let mut files = Vec::new();
    for (mut seq, _) in separable_sequences(spec) {
        seq.label = format!("{prefix}{}", seq.label);
        let dir = root.join(&seq.label);
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join(format!("{}.json", seq.video_id));
        fs::write(&path, seq.to_json()).unwrap();
        files.push(path);
    }
    files
}

fn spec(classes: usize, per_class: usize, frames: usize) -> SyntheticSpec {
    SyntheticSpec {
        classes,
        per_class,
        frames,
        ..SyntheticSpec::default()
    }
}

/// Index and split a synthetic dataset, returning the split manifest path.
fn prepared(dir: &Path, spec: &SyntheticSpec, prefix: &str) -> (PathBuf, Vec<PathBuf>) {
    let files = write_dataset(&dir.join("data"), spec, prefix);
    ok(&["index", "--root", s(&dir.join("data")), "--out", s(&dir.join("idx"))]);
    ok(&[
        "split",
        "--manifest",
        s(&dir.join("idx/manifest.csv")),
        "--fraction",
        "0.25",
        "--out",
        s(&dir.join("split")),
    ]);
    (dir.join("split/manifest.csv"), files)
}

#[test]
fn graph_inspect_counts_and_files() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(&["graph", "inspect", "--out", s(dir.path())]);
    assert_eq!(out.trim(), "vertices=21 natural=20 supplementary=9");
    let self_slice = fs::read_to_string(dir.path().join("adjacency_self.csv")).unwrap();
    for (i, line) in self_slice.lines().enumerate() {
        let cells: Vec<f64> = line.split(',').map(|c| c.parse().unwrap()).collect();
        assert_eq!(cells.len(), 21);
        for (j, c) in cells.iter().enumerate() {
            assert_eq!(*c, if i == j { 1.0 } else { 0.0 });
        }
    }
    assert_eq!(fs::read_to_string(dir.path().join("edges_natural.csv")).unwrap().lines().count(), 21);
    let bare = ok(&["graph", "inspect", "--no-supplementary", "--out", s(&dir.path().join("bare"))]);
    assert_eq!(bare.trim(), "vertices=21 natural=20 supplementary=0");
}

#[test]
fn graph_inspect_unwritable_output() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("plain");
    fs::write(&file, "x").unwrap();
    assert_eq!(code(&["graph", "inspect", "--out", s(&file.join("sub"))]), 2);
}

#[test]
fn index_summary_and_empty_root() {
    let dir = tempfile::tempdir().unwrap();
    write_dataset(&dir.path().join("data"), &spec(3, 4, 6), "");
    let out = ok(&["index", "--root", s(&dir.path().join("data")), "--out", s(dir.path())]);
    assert_eq!(out.trim(), "classes=3 videos=12 clips/class=[4,4]");
    let empty = dir.path().join("empty");
    fs::create_dir(&empty).unwrap();
    assert_eq!(code(&["index", "--root", s(&empty), "--out", s(dir.path())]), 2);
}

#[test]
fn index_reports_invalid_documents() {
    let dir = tempfile::tempdir().unwrap();
    let files = write_dataset(&dir.path().join("data"), &spec(2, 3, 6), "");
    fs::write(&files[0], "{\"video_id\": 3}").unwrap();
    let o = handgcn(&["index", "--root", s(&dir.path().join("data")), "--out", s(dir.path())]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains(files[0].file_name().unwrap().to_str().unwrap()));
}

#[test]
fn split_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    write_dataset(&dir.path().join("data"), &spec(3, 5, 6), "");
    ok(&["index", "--root", s(&dir.path().join("data")), "--out", s(dir.path())]);
    let manifest = dir.path().join("manifest.csv");
    let run = |out: &str| {
        ok(&["split", "--manifest", s(&manifest), "--seed", "7", "--out", s(&dir.path().join(out))]);
        fs::read(dir.path().join(out).join("manifest.csv")).unwrap()
    };
    assert_eq!(run("a"), run("b"));
}

#[test]
fn help_lists_flags_with_defaults() {
    for cmd in ["graph", "index", "split", "preprocess", "train", "eval", "predict"] {
        let out = ok(&[cmd, "--help"]);
        assert!(out.contains("--"), "{cmd} help lists no flags");
    }
    let train = ok(&["train", "--help"]);
    for flag in ["--epochs", "--batch", "--lr", "--T", "--momentum", "--seed", "--precision", "--stream"] {
        assert!(train.contains(flag), "train help lacks {flag}");
    }
    assert!(train.contains("[default: 5]") && train.contains("[default: 0.01]"));
    assert!(ok(&["split", "--help"]).contains("[default: 0.2]"));
}

#[test]
fn unknown_config_key_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, "epochs=2\nlearning_rate=0.1\n").unwrap();
    assert_eq!(code(&["train", "--config", s(&cfg), "--out", s(dir.path())]), 2);
}

#[test]
fn preprocess_writes_tensors() {
    let dir = tempfile::tempdir().unwrap();
    let (manifest, _) = prepared(dir.path(), &spec(2, 4, 7), "");
    let out = ok(&["preprocess", "--manifest", s(&manifest), "--T", "5", "--out", s(&dir.path().join("pre"))]);
    assert_eq!(out.trim(), "sequences=8 T=5");
    let csv = fs::read_to_string(dir.path().join("pre/preprocessed.csv")).unwrap();
    let header = csv.lines().next().unwrap();
    assert_eq!(header.split(',').count(), 3 + 3 * 5 * 21);
    assert_eq!(csv.lines().count(), 9);
}

#[test]
fn train_defaults_then_predict_and_eval() {
    let dir = tempfile::tempdir().unwrap();
    let (manifest, files) = prepared(dir.path(), &spec(8, 4, 30), "");
    let run = dir.path().join("run");
    ok(&["train", "--manifest", s(&manifest), "--out", s(&run)]);
    let echo = fs::read_to_string(run.join("config.echo")).unwrap();
    for line in ["epochs=5", "batch=64", "lr=0.01", "T=50"] {
        assert!(echo.lines().any(|l| l == line), "{line} not echoed:\n{echo}");
    }
    let log = fs::read_to_string(run.join("epochs.csv")).unwrap();
    assert_eq!(log.lines().next(), Some("epoch,step,loss,train_acc"));
    assert_eq!(log.lines().count(), 6);
    let model = run.join("model.agcn");

    let manifest_text = fs::read_to_string(&manifest).unwrap();
    let train_file = files
        .iter()
        .find(|f| {
            let id = f.file_stem().unwrap().to_str().unwrap();
            manifest_text.lines().any(|l| l.starts_with(&format!("{id},")) && l.ends_with(",train"))
        })
        .unwrap();
    let label = train_file.parent().unwrap().file_name().unwrap().to_str().unwrap();
    let top = ok(&["predict", "--model", s(&model), "--sequence", s(train_file)]);
    assert_eq!(top.lines().count(), 5);
    assert!(top.lines().any(|l| l.split(' ').nth(1) == Some(label)), "{label} not in\n{top}");

    let eval_dir = dir.path().join("eval");
    ok(&["eval", "--config", s(&run.join("config.echo")), "--model", s(&model), "--out", s(&eval_dir)]);
    let report = fs::read_to_string(eval_dir.join("report.csv")).unwrap();
    assert_eq!(report.lines().next(), Some("class,precision,recall,f1,support"));
    assert!(report.lines().any(|l| l.starts_with("accuracy,")));
    assert!(report.lines().any(|l| l.starts_with("macro avg,")));

    let other = tempfile::tempdir().unwrap();
    let (other_manifest, _) = prepared(other.path(), &spec(8, 4, 10), "x");
    assert_eq!(
        code(&["eval", "--manifest", s(&other_manifest), "--model", s(&model), "--out", s(&eval_dir)]),
        4
    );

    let broken = dir.path().join("broken.agcn");
    let mut bytes = fs::read(&model).unwrap();
    bytes[4] = 99;
    fs::write(&broken, bytes).unwrap();
    assert_eq!(
        code(&["predict", "--model", s(&broken), "--sequence", s(train_file)]),
        3
    );
}

#[test]
fn both_streams_are_deterministic_and_fuse() {
    let dir = tempfile::tempdir().unwrap();
    let (manifest, _) = prepared(dir.path(), &spec(3, 4, 12), "");
    let args = |out: &Path| {
        vec![
            "train".to_string(),
            "--manifest".into(),
            s(&manifest).into(),
            "--stream".into(),
            "both".into(),
            "--epochs".into(),
            "1".into(),
            "--T".into(),
            "8".into(),
            "--out".into(),
            s(out).into(),
        ]
    };
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let argv = args(out);
        ok(&argv.iter().map(String::as_str).collect::<Vec<_>>());
    }
    for name in ["model.agcn", "model.bone.agcn", "epochs.csv", "epochs.bone.csv", "config.echo"] {
        assert_eq!(fs::read(a.join(name)).unwrap(), fs::read(b.join(name)).unwrap(), "{name} differs");
    }
    let out = ok(&[
        "eval",
        "--config",
        s(&a.join("config.echo")),
        "--model",
        s(&a.join("model.agcn")),
        "--model",
        s(&a.join("model.bone.agcn")),
        "--out",
        s(&dir.path().join("eval")),
    ]);
    assert!(out.contains("joint accuracy=") && out.contains("bone accuracy="));
}

#[test]
fn divergence_exit_code() {
    let dir = tempfile::tempdir().unwrap();
    let (manifest, _) = prepared(dir.path(), &spec(2, 4, 8), "");
    let o = handgcn(&[
        "train",
        "--manifest",
        s(&manifest),
        "--lr",
        "1e30",
        "--epochs",
        "4",
        "--batch",
        "2",
        "--T",
        "6",
        "--out",
        s(&dir.path().join("run")),
    ]);
    assert_eq!(o.status.code(), Some(5), "{}", String::from_utf8_lossy(&o.stderr));
}
