use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn ltrlab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ltrlab"))
        .args(args)
        .output()
        .expect("spawn ltrlab")
}

fn ok(args: &[&str]) -> Output {
    let out = ltrlab(args);
    assert!(
        out.status.success(),
        "ltrlab {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Small dataset shared by the training tests: 6 classes, 100..10 samples.
fn small_data(dir: &Path) -> (PathBuf, PathBuf) {
    let d = dir.join("data");
    ok(&[
        "gen", "--out", s(&d), "--k", "6", "--d", "8", "--nmax", "100", "--ir", "10",
        "--test-per-class", "20", "--seed", "3",
    ]);
    (d.join("train.ltfeat"), d.join("test.ltfeat"))
}

fn csv_rows(path: &Path) -> usize {
    fs::read_to_string(path).unwrap().lines().count() - 1
}

#[test]
fn gen_is_idempotent() {
    let tmp = TempDir::new().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for dir in [&a, &b] {
        ok(&["gen", "--out", s(dir), "--k", "5", "--nmax", "50", "--ir", "10", "--seed", "9"]);
    }
    for f in ["train.ltfeat", "test.ltfeat", "config.toml"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn invalid_arguments_exit_2() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("x");
    assert_eq!(ltrlab(&["gen", "--out", s(&out), "--ir", "0.5"]).status.code(), Some(2));
    let (train, _) = small_data(tmp.path());
    let bad_delta = ltrlab(&["train", "--out", s(&out), "--train", s(&train), "--loss", "lort", "--delta", "1.0"]);
    assert_eq!(bad_delta.status.code(), Some(2));
    let no_train = ltrlab(&["train", "--out", s(&out)]);
    assert_eq!(no_train.status.code(), Some(2));
    let bad_sweep = ltrlab(&[
        "sweep", "--out", s(&out), "--train", s(&train), "--eval", s(&train), "--deltas", "0,1.5",
    ]);
    assert_eq!(bad_sweep.status.code(), Some(2));
}

#[test]
fn unreadable_dataset_exits_1() {
    let tmp = TempDir::new().unwrap();
    let junk = tmp.path().join("junk.ltfeat");
    fs::write(&junk, b"not a dataset").unwrap();
    let out = ltrlab(&["train", "--out", s(&tmp.path().join("o")), "--train", s(&junk)]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn train_writes_artifacts_and_lort_zero_matches_ce() {
    let tmp = TempDir::new().unwrap();
    let (train, test) = small_data(tmp.path());
    let run = |name: &str, extra: &[&str]| {
        let dir = tmp.path().join(name);
        let mut args = vec!["train", "--out", s(&dir), "--train", s(&train), "--eval", s(&test), "--epochs", "3"];
        args.extend_from_slice(extra);
        ok(&args);
        dir
    };
    let ce = run("ce", &["--loss", "ce"]);
    let lort0 = run("lort0", &["--loss", "lort", "--delta", "0"]);
    for f in ["checkpoint.ltcls", "history.csv", "metrics.txt", "metrics.csv", "config.toml", "run.log"] {
        assert!(ce.join(f).is_file(), "missing {f}");
    }
    assert_eq!(csv_rows(&ce.join("history.csv")), 3);
    assert_eq!(
        fs::read(ce.join("checkpoint.ltcls")).unwrap(),
        fs::read(lort0.join("checkpoint.ltcls")).unwrap()
    );

    let again = run("ce-again", &["--loss", "ce"]);
    assert_eq!(
        fs::read(ce.join("checkpoint.ltcls")).unwrap(),
        fs::read(again.join("checkpoint.ltcls")).unwrap()
    );
}

#[test]
fn resolved_config_reproduces_run() {
    let tmp = TempDir::new().unwrap();
    let (train, test) = small_data(tmp.path());
    let first = tmp.path().join("first");
    ok(&[
        "train", "--out", s(&first), "--train", s(&train), "--eval", s(&test), "--loss", "focal",
        "--gamma", "2", "--epochs", "2", "--lr", "0.05",
    ]);
    let second = tmp.path().join("second");
    ok(&["train", "--out", s(&second), "--config", s(&first.join("config.toml"))]);
    assert_eq!(
        fs::read(first.join("checkpoint.ltcls")).unwrap(),
        fs::read(second.join("checkpoint.ltcls")).unwrap()
    );
}

#[test]
fn eval_and_metrics_on_checkpoint() {
    let tmp = TempDir::new().unwrap();
    let (train, test) = small_data(tmp.path());
    let t = tmp.path().join("t");
    ok(&["train", "--out", s(&t), "--train", s(&train), "--eval", s(&test), "--epochs", "3"]);
    let ckpt = t.join("checkpoint.ltcls");

    let e = tmp.path().join("e");
    ok(&["eval", "--out", s(&e), "--checkpoint", s(&ckpt), "--train", s(&train), "--eval", s(&test)]);
    let text = fs::read_to_string(e.join("eval.txt")).unwrap();
    assert!(text.starts_with("acc_all="), "{text}");

    let m = tmp.path().join("m");
    ok(&[
        "metrics", "--out", s(&m), "--checkpoint", s(&ckpt), "--train", s(&train), "--eval",
        s(&test), "--bin-width", "2", "--xi-std", "0.3", "--perturb-trials", "5000",
    ]);
    assert_eq!(csv_rows(&m.join("metrics.csv")), 6);
    assert_eq!(csv_rows(&m.join("metrics_binned.csv")), 3);
    assert_eq!(csv_rows(&m.join("perturbation.csv")), 6);
}

#[test]
fn verify_default_passes_and_reduced_trials_are_marked() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("v");
    ok(&["verify", "--out", s(&out)]);
    let text = fs::read_to_string(out.join("verify.txt")).unwrap();
    assert!(text.lines().all(|l| l.starts_with("PASS")), "{text}");
    assert!(!text.contains("reduced-confidence"));

    let reduced = ltrlab(&["verify", "--trials", "10"]);
    let stdout = String::from_utf8_lossy(&reduced.stdout);
    assert!(stdout.contains("reduced-confidence"), "{stdout}");
}

#[test]
fn verify_negated_hessian_fails() {
    let out = ltrlab(&["verify", "--negate-hessian", "--trials", "200"]);
    assert_eq!(out.status.code(), Some(1));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(
        stdout.lines().any(|l| l.starts_with("FAIL bias-hessian/min-quadratic-form")),
        "{stdout}"
    );
}

#[test]
fn sweep_grid_compare_row_counts() {
    let tmp = TempDir::new().unwrap();
    let (train, test) = small_data(tmp.path());
    let base = |cmd: &'static str, dir: &Path| -> Vec<String> {
        [cmd, "--out", s(dir), "--train", s(&train), "--eval", s(&test), "--epochs", "2"]
            .iter()
            .map(|x| x.to_string())
            .collect()
    };
    let call = |mut args: Vec<String>, extra: &[&str]| {
        args.extend(extra.iter().map(|x| x.to_string()));
        let refs: Vec<&str> = args.iter().map(String::as_str).collect();
        ok(&refs);
    };

    let sw = tmp.path().join("sweep");
    call(base("sweep", &sw), &["--deltas", "0,0.2,0.5,0.8,0.9,0.98,0.99"]);
    assert_eq!(csv_rows(&sw.join("sweep.csv")), 7);

    let gr = tmp.path().join("grid");
    call(base("grid", &gr), &["--lrs", "0.003,0.01,0.03", "--wds", "0,1e-4,5e-4"]);
    assert_eq!(csv_rows(&gr.join("grid.csv")), 9);

    let cmp = tmp.path().join("compare");
    let methods = ["ce", "lort", "bs", "cb-ce", "ldam", "focal"];
    call(base("compare", &cmp), &["--methods", &methods.join(",")]);
    assert_eq!(csv_rows(&cmp.join("compare.csv")), 6);
    for m in methods {
        assert!(cmp.join(format!("metrics_{m}.csv")).is_file(), "{m}");
    }
}

#[test]
fn unknown_method_is_usage_error() {
    let tmp = TempDir::new().unwrap();
    let (train, test) = small_data(tmp.path());
    let out = ltrlab(&[
        "compare", "--out", s(&tmp.path().join("c")), "--train", s(&train), "--eval", s(&test),
        "--methods", "ce,nonsense",
    ]);
    assert_eq!(out.status.code(), Some(2));
}
