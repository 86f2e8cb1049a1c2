//! End-to-end runs of the `davoc` binary at CI scale.

use std::path::Path;
use std::process::Command;

struct Run {
    stdout: String,
    stderr: String,
    code: i32,
}

fn davoc_in(dir: &Path, envs: &[(&str, &str)], args: &[&str]) -> Run {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_davoc"));
    cmd.current_dir(dir).args(args).env_remove("DAVOC_SEED");
    for (k, v) in envs {
        cmd.env(k, v);
    }
    let out = cmd.output().expect("spawn davoc");
    Run {
        stdout: String::from_utf8_lossy(&out.stdout).into_owned(),
        stderr: String::from_utf8_lossy(&out.stderr).into_owned(),
        code: out.status.code().expect("exit code"),
    }
}

fn davoc(dir: &Path, args: &[&str]) -> Run {
    davoc_in(dir, &[], args)
}

fn grab(output: &str, key: &str) -> String {
    output
        .lines()
        .find_map(|l| l.strip_prefix(&format!("{key}=")))
        .unwrap_or_else(|| panic!("no '{key}=' line in:\n{output}"))
        .to_string()
}

/// One CI corpus shared by the tests that only read it.
fn ci_corpus(dir: &Path) -> std::path::PathBuf {
    let run = davoc(dir, &[
        "gen-corpus", "--out", "corpus", "--scale", "ci", "--seed", "5", "--no-selftest",
    ]);
    assert_eq!(run.code, 0, "gen-corpus failed:\n{}", run.stderr);
    dir.join("corpus/manifest.csv")
}

#[test]
fn gen_corpus_reruns_bit_identically() {
    let dir = tempfile::tempdir().unwrap();
    let a = davoc(dir.path(), &[
        "gen-corpus", "--out", "a", "--scale", "ci", "--seed", "3", "--no-selftest",
    ]);
    let b = davoc(dir.path(), &[
        "gen-corpus", "--out", "b", "--scale", "ci", "--seed", "3", "--no-selftest",
    ]);
    assert_eq!(a.code, 0, "{}", a.stderr);
    assert_eq!(grab(&a.stdout, "manifest_sha256"), grab(&b.stdout, "manifest_sha256"));
    assert_eq!(grab(&a.stdout, "files"), "30");

    let c = davoc(dir.path(), &[
        "gen-corpus", "--out", "c", "--scale", "ci", "--seed", "4", "--no-selftest",
    ]);
    assert_ne!(grab(&a.stdout, "manifest_sha256"), grab(&c.stdout, "manifest_sha256"));
}

#[test]
fn train_then_eval_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = ci_corpus(dir.path());
    let manifest = manifest.to_str().unwrap();

    let train = davoc(dir.path(), &[
        "train", "--manifest", manifest, "--out", "run", "--regime", "source-only",
        "--scale", "ci", "--seed", "1",
    ]);
    assert_eq!(train.code, 0, "train failed:\n{}", train.stderr);
    assert!(dir.path().join("run/checkpoint.bin").exists());
    assert!(dir.path().join("run/metrics.csv").exists());
    assert!(dir.path().join("run/run.txt").exists());
    assert_eq!(grab(&train.stdout, "target_label_reads"), "0");

    let eval = davoc(dir.path(), &[
        "eval", "--manifest", manifest, "--checkpoint", "run/checkpoint.bin",
        "--subset", "source_test", "--scores-out", "scores.csv", "--curve-out", "curve.csv",
    ]);
    assert_eq!(eval.code, 0, "eval failed:\n{}", eval.stderr);
    let auc: f64 = grab(&eval.stdout, "pr_auc").parse().unwrap();
    assert!((0.0..=1.0).contains(&auc));
    assert!(dir.path().join("scores.csv").exists());
    assert!(dir.path().join("curve.csv").exists());

    // identical flags reproduce the checkpoint bit for bit
    let again = davoc(dir.path(), &[
        "train", "--manifest", manifest, "--out", "run2", "--regime", "source-only",
        "--scale", "ci", "--seed", "1",
    ]);
    assert_eq!(
        grab(&train.stdout, "checkpoint_sha256"),
        grab(&again.stdout, "checkpoint_sha256")
    );
}

#[test]
fn run_manifest_is_a_valid_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = ci_corpus(dir.path());
    let manifest = manifest.to_str().unwrap();

    let first = davoc(dir.path(), &[
        "train", "--manifest", manifest, "--out", "one", "--regime", "source-only",
        "--scale", "ci", "--seed", "2",
    ]);
    assert_eq!(first.code, 0, "{}", first.stderr);

    // replay the recorded run.txt; the checkpoint must come out identical
    let replay = davoc(dir.path(), &[
        "train", "--manifest", manifest, "--out", "two", "--config", "one/run.txt",
    ]);
    assert_eq!(replay.code, 0, "replay failed:\n{}", replay.stderr);
    assert_eq!(
        grab(&first.stdout, "checkpoint_sha256"),
        grab(&replay.stdout, "checkpoint_sha256")
    );

    // an explicit flag overrides the config file
    let overridden = davoc(dir.path(), &[
        "train", "--manifest", manifest, "--out", "three", "--config", "one/run.txt",
        "--epochs", "2",
    ]);
    assert_eq!(overridden.code, 0);
    assert!(overridden.stdout.contains("epochs=2"), "{}", overridden.stdout);
    assert!(overridden.stdout.contains("final_epoch=1"), "{}", overridden.stdout);
}

#[test]
fn exit_codes_distinguish_failure_kinds() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = ci_corpus(dir.path());
    let manifest = manifest.to_str().unwrap();

    // data error: missing manifest
    let missing = davoc(dir.path(), &[
        "train", "--manifest", "no-such.csv", "--out", "x", "--regime", "source-only",
    ]);
    assert_eq!(missing.code, 3, "{}", missing.stderr);

    // config error: zero epochs outside frozen fine-tuning
    let epochs0 = davoc(dir.path(), &[
        "train", "--manifest", manifest, "--out", "x", "--regime", "dat-unsupervised",
        "--scale", "ci", "--epochs", "0",
    ]);
    assert_eq!(epochs0.code, 2, "{}", epochs0.stderr);

    // config error: fine-tuning without a pretrained checkpoint
    let noft = davoc(dir.path(), &[
        "train", "--manifest", manifest, "--out", "x", "--regime", "frozen-finetune",
        "--scale", "ci",
    ]);
    assert_eq!(noft.code, 2, "{}", noft.stderr);
    assert!(noft.stderr.contains("--pretrained"), "{}", noft.stderr);

    // clap rejects unknown values with its own config exit code
    let badregime = davoc(dir.path(), &[
        "train", "--manifest", manifest, "--out", "x", "--regime", "bogus",
    ]);
    assert_eq!(badregime.code, 2);

    // bad DAVOC_SEED is a config error
    let badseed = davoc_in(dir.path(), &[("DAVOC_SEED", "pi")], &["gradcheck", "--component", "grl"]);
    assert_eq!(badseed.code, 2, "{}", badseed.stderr);
}

#[test]
fn missing_target_adapt_subset_is_reported_clearly() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = ci_corpus(dir.path());

    // drop every target_adapt row; paths stay valid relative to the dir
    let text = std::fs::read_to_string(&manifest).unwrap();
    let filtered: Vec<&str> = text
        .lines()
        .filter(|l| !l.contains("target_adapt"))
        .collect();
    let trimmed = dir.path().join("corpus/trimmed.csv");
    std::fs::write(&trimmed, filtered.join("\n")).unwrap();

    let run = davoc(dir.path(), &[
        "train", "--manifest", trimmed.to_str().unwrap(), "--out", "x",
        "--regime", "dat-unsupervised", "--scale", "ci",
    ]);
    assert_eq!(run.code, 3, "{}", run.stderr);
    assert!(run.stderr.contains("target_adapt"), "{}", run.stderr);
}

#[test]
fn seed_falls_back_to_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let run = davoc_in(dir.path(), &[("DAVOC_SEED", "9")], &["gradcheck", "--component", "grl"]);
    assert_eq!(run.code, 0, "{}", run.stderr);
    assert!(run.stdout.contains("seed=9 (env DAVOC_SEED)"), "{}", run.stdout);

    let flag = davoc_in(dir.path(), &[("DAVOC_SEED", "9")], &[
        "gradcheck", "--component", "grl", "--seed", "4",
    ]);
    assert!(flag.stdout.contains("seed=4 (flag)"), "{}", flag.stdout);
}

#[test]
fn gradcheck_reports_every_component() {
    let dir = tempfile::tempdir().unwrap();
    let run = davoc(dir.path(), &["gradcheck"]);
    assert_eq!(run.code, 0, "{}", run.stderr);
    for component in ["dense", "bilstm", "grl", "stack-mlp", "stack-blstm"] {
        assert!(
            run.stdout.contains(&format!("component={component}")),
            "missing {component} in:\n{}",
            run.stdout
        );
    }
    assert!(!run.stdout.contains("status=FAIL"), "{}", run.stdout);

    // coarser differences stay finite and within the documented bound
    let coarse = davoc(dir.path(), &["gradcheck", "--eps", "1e-3"]);
    assert_eq!(coarse.code, 0, "{}", coarse.stderr);
}

#[test]
fn features_matrix_covers_all_eight_cells() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = ci_corpus(dir.path());
    let manifest = manifest.to_str().unwrap();

    let run = davoc(dir.path(), &[
        "matrix", "--which", "features", "--manifest", manifest, "--out", "mtx",
        "--scale", "ci", "--seeds", "1", "--jobs", "2",
    ]);
    assert_eq!(run.code, 0, "matrix failed:\n{}", run.stderr);

    let csv = std::fs::read_to_string(dir.path().join("mtx/features_matrix.csv")).unwrap();
    assert_eq!(csv.lines().count(), 9, "8 cells + header:\n{csv}");
    assert!(csv.contains(",286,"), "{csv}");
    assert!(csv.contains(",440,"), "{csv}");
    for needle in ["mfcc,32,", "mfcc,100,", "fbank,32,", "fbank,100,"] {
        assert!(csv.contains(needle), "missing {needle} in:\n{csv}");
    }
    assert!(!csv.to_lowercase().contains("nan"), "{csv}");
}

#[test]
fn regimes_matrix_reports_all_five_rows_and_a_p_value() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = ci_corpus(dir.path());
    let manifest = manifest.to_str().unwrap();

    let run = davoc(dir.path(), &[
        "matrix", "--which", "regimes", "--manifest", manifest, "--out", "mtx",
        "--scale", "ci", "--seeds", "2", "--jobs", "2",
    ]);
    assert_eq!(run.code, 0, "matrix failed:\n{}", run.stderr);
    for regime in [
        "source-only",
        "target-only",
        "frozen-finetune",
        "dat-supervised",
        "dat-unsupervised",
    ] {
        assert!(run.stdout.contains(regime), "missing {regime}:\n{}", run.stdout);
    }
    assert!(run.stdout.contains("welch_p"), "{}", run.stdout);
    let csv = std::fs::read_to_string(dir.path().join("mtx/regimes_matrix.csv")).unwrap();
    assert_eq!(csv.lines().count(), 11, "5 regimes x 2 seeds + header:\n{csv}");
}
