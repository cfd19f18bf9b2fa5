use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = "\
image_size = 16
d_vision = 16
d_text = 16
embed_dim = 16
vision_layers = 3
text_layers = 3
n_classes = 4
n_train = 48
n_val = 8
n_test = 12
pretrain_epochs = 2
prompt_epochs = 1
n_views = 8
filter_ratio = 0.25
";

fn tokalign(dir: &Path, args: &[&str]) -> Output {
    let cfg = dir.join("tiny.cfg");
    if !cfg.exists() {
        fs::write(&cfg, TINY).unwrap();
    }
    Command::new(env!("CARGO_BIN_EXE_tokalign"))
        .arg("--config")
        .arg(&cfg)
        .arg("--out")
        .arg(dir.join("out"))
        .args(args)
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let o = tokalign(dir, args);
    assert!(
        o.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8(o.stdout).unwrap()
}

fn pipeline(dir: &Path, seed: &str) {
    ok(dir, &["--seed", seed, "gen-data"]);
    ok(dir, &["--seed", seed, "pretrain"]);
    ok(dir, &["--seed", seed, "compute-stats"]);
    let stats = dir.join("out/source.stats");
    ok(
        dir,
        &["--seed", seed, "eval", "--stats", stats.to_str().unwrap()],
    );
}

const ARTIFACTS: [&str; 7] = [
    "data/test/images.f32",
    "data/train/labels.u32",
    "model.ckpt",
    "source.stats",
    "pretrain.json",
    "eval/report.jsonl",
    "eval/summary.json",
];

#[test]
fn same_seed_gives_identical_artifacts() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    pipeline(a.path(), "7");
    pipeline(b.path(), "7");
    for f in ARTIFACTS {
        let x = fs::read(a.path().join("out").join(f)).unwrap();
        let y = fs::read(b.path().join("out").join(f)).unwrap();
        assert!(x == y, "{f} differs");
    }
    let summary = fs::read_to_string(a.path().join("out/eval/summary.json")).unwrap();
    assert!(summary.contains("\"n_samples\": 12"), "{summary}");
}

#[test]
fn different_seeds_give_different_data() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    ok(a.path(), &["--seed", "1", "gen-data"]);
    ok(b.path(), &["--seed", "2", "gen-data"]);
    let f = "out/data/test/images.f32";
    assert_ne!(
        fs::read(a.path().join(f)).unwrap(),
        fs::read(b.path().join(f)).unwrap()
    );
}

#[test]
fn adapt_and_ablate_run_on_a_trained_model() {
    let d = tempfile::tempdir().unwrap();
    pipeline(d.path(), "3");
    let stats = d.path().join("out/source.stats");
    let stats = stats.to_str().unwrap();
    let out = ok(d.path(), &["adapt", "--stats", stats, "--index", "2"]);
    assert!(
        out.contains("step  1") && out.contains("prediction"),
        "{out}"
    );
    let out = ok(
        d.path(),
        &[
            "ablate",
            "--stats",
            stats,
            "--sweep",
            "beta=0,100",
            "--limit",
            "4",
        ],
    );
    assert!(
        out.lines()
            .filter(|l| l.starts_with("0 ") || l.starts_with("100 "))
            .count()
            == 2,
        "{out}"
    );
    assert!(d.path().join("out/ablate/summary.json").exists());

    let o = tokalign(
        d.path(),
        &["ablate", "--stats", stats, "--sweep", "beta=0;n_views=4"],
    );
    assert_eq!(o.status.code(), Some(1));
    let o = tokalign(d.path(), &["adapt", "--stats", stats, "--index", "999"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn eval_without_statistics_needs_zero_beta() {
    let d = tempfile::tempdir().unwrap();
    ok(d.path(), &["gen-data"]);
    ok(d.path(), &["pretrain"]);
    let o = tokalign(d.path(), &["eval"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("--stats"));
    ok(d.path(), &["--set", "beta=0", "eval", "--limit", "3"]);
}

#[test]
fn usage_errors_exit_with_one() {
    let d = tempfile::tempdir().unwrap();
    for args in [
        &["--bogus", "gen-data"][..],
        &["frobnicate"],
        &[],
        &["--set", "beta", "gen-data"],
        &["--set", "no_such_key=1", "gen-data"],
        &["--set", "n_views=lots", "gen-data"],
    ] {
        assert_eq!(tokalign(d.path(), args).status.code(), Some(1), "{args:?}");
    }
    assert_eq!(tokalign(d.path(), &["--help"]).status.code(), Some(0));
}

#[test]
fn bad_inputs_exit_with_two() {
    let d = tempfile::tempdir().unwrap();
    let o = tokalign(d.path(), &["pretrain", "--data", "/nonexistent"]);
    assert_eq!(o.status.code(), Some(2));

    ok(d.path(), &["gen-data"]);
    let img = d.path().join("out/data/train/images.f32");
    let mut bytes = fs::read(&img).unwrap();
    bytes.truncate(bytes.len() - 4);
    fs::write(&img, bytes).unwrap();
    assert_eq!(tokalign(d.path(), &["pretrain"]).status.code(), Some(2));

    fs::write(d.path().join("out/model.ckpt"), b"not a checkpoint").unwrap();
    assert_eq!(
        tokalign(d.path(), &["--set", "beta=0", "eval"])
            .status
            .code(),
        Some(2)
    );
}

#[test]
fn statistics_from_another_model_are_rejected() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    pipeline(a.path(), "1");
    ok(b.path(), &["--seed", "2", "gen-data"]);
    ok(b.path(), &["--seed", "2", "pretrain"]);
    let foreign = a.path().join("out/source.stats");
    let o = tokalign(b.path(), &["eval", "--stats", foreign.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn grad_check_reports_the_max_error() {
    let d = tempfile::tempdir().unwrap();
    let out = ok(d.path(), &["grad-check", "--episodes", "1"]);
    let line = out.lines().last().unwrap();
    let err: f64 = line
        .trim_start_matches("max relative error ")
        .parse()
        .unwrap();
    assert!(err < 1e-4, "{line}");
}
