use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn warpadapt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_warpadapt"))
        .args(args)
        .env("WARPADAPT_THREADS", "1")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn generate(out: &Path, count: usize, seed: u64) -> Output {
    warpadapt(&[
        "generate",
        "--out",
        out.to_str().unwrap(),
        "--count",
        &count.to_string(),
        "--seed",
        &seed.to_string(),
        "--width",
        "64",
        "--height",
        "32",
        "--max-disp",
        "8",
        "--max-flow",
        "4",
    ])
}

/// Generates a small dataset and trains a few iterations on it.
fn trained(dir: &Path, iters: usize) -> (String, String) {
    let data = dir.join("data");
    assert!(generate(&data, 5, 3).status.success());
    let run = dir.join("run");
    let o = warpadapt(&[
        "train",
        "--data",
        data.to_str().unwrap(),
        "--out",
        run.to_str().unwrap(),
        "--total_iters",
        &iters.to_string(),
        "--batch_size",
        "1",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    (data.to_str().unwrap().into(), run.to_str().unwrap().into())
}

#[test]
fn generate_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert!(generate(&a, 3, 7).status.success());
    assert!(generate(&b, 3, 7).status.success());
    let mut names: Vec<_> = fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert_eq!(names.len(), 7);
    for n in names {
        assert_eq!(fs::read(a.join(&n)).unwrap(), fs::read(b.join(&n)).unwrap(), "{n:?}");
    }
}

#[test]
fn generate_zero_samples_is_fine() {
    let dir = tempfile::tempdir().unwrap();
    let o = generate(&dir.path().join("empty"), 0, 0);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(dir.path().join("empty/manifest.txt").exists());
}

#[test]
fn bad_arguments_exit_with_usage_code() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "k = 5\nno_such_key = 1\n").unwrap();
    let o = warpadapt(&["train", "--config", cfg.to_str().unwrap(), "--data", "x", "--out", "y"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("no_such_key"), "{}", stderr(&o));

    let o = warpadapt(&["train", "--data", "x", "--out", "y", "--k", "0"]);
    assert_eq!(o.status.code(), Some(2));
    let o = warpadapt(&["train", "--data", "x", "--out", "y", "--bogus", "1"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("bogus"));
    let o = warpadapt(&["frobnicate"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn missing_data_and_bad_checkpoints_exit_with_data_code() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope");
    let o = warpadapt(&["train", "--data", missing.to_str().unwrap(), "--out", dir.path().join("r").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));

    let junk = dir.path().join("junk.wck");
    fs::write(&junk, b"not a checkpoint at all").unwrap();
    let o = warpadapt(&["eval", "--checkpoint", junk.to_str().unwrap(), "--data", missing.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn train_logs_overrides_and_eval_is_repeatable() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert!(generate(&data, 5, 1).status.success());
    let run = dir.path().join("run");
    let o = warpadapt(&[
        "train",
        "--data",
        data.to_str().unwrap(),
        "--out",
        run.to_str().unwrap(),
        "--total_iters",
        "3",
        "--batch_size",
        "1",
        "--weights.lambda_ms=0.3",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("trained 3 iterations"));
    let log = fs::read_to_string(run.join("train.log")).unwrap();
    assert!(log.contains("# weights.lambda_ms=0.3"));
    assert!(log.contains("# total_iters=3"));
    assert!(fs::read_to_string(run.join("config.txt")).unwrap().contains("weights.lambda_ms"));

    let ckpt = run.join("final.wck");
    let args = ["eval", "--checkpoint", ckpt.to_str().unwrap(), "--data", data.to_str().unwrap()];
    let a = warpadapt(&args);
    let b = warpadapt(&args);
    assert!(a.status.success(), "{}", stderr(&a));
    assert_eq!(stdout(&a), stdout(&b));
    assert!(stdout(&a).contains("epe_disp="));

    let mut oracle = args.to_vec();
    oracle.push("--oracle");
    let o = warpadapt(&oracle);
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.contains("epe_disp=0") && text.contains("epe_flow=0"), "{text}");
}

#[test]
fn resume_continues_from_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let (data, run) = trained(dir.path(), 2);
    let more = dir.path().join("more");
    let o = warpadapt(&[
        "train",
        "--data",
        &data,
        "--out",
        more.to_str().unwrap(),
        "--resume",
        &format!("{run}/final.wck"),
        "--total_iters",
        "4",
        "--batch_size",
        "1",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("trained 4 iterations"));
}

#[test]
fn cycle_translation_of_fresh_generators_is_lossless() {
    let dir = tempfile::tempdir().unwrap();
    let (data, run) = trained(dir.path(), 0);
    let out = dir.path().join("tr");
    let o = warpadapt(&[
        "translate",
        "--checkpoint",
        &format!("{run}/final.wck"),
        "--in",
        &format!("{data}/sample_00000.wad"),
        "--out",
        out.to_str().unwrap(),
        "--direction",
        "cycle",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert_eq!(text.matches("reconstruction psnr=inf").count(), 3, "{text}");
    for stem in ["left_original", "right_reconstructed", "next_left_reconstructed"] {
        assert!(out.join(format!("{stem}.ppm")).exists(), "{stem}");
        assert!(out.join(format!("{stem}.wten")).exists(), "{stem}");
    }
}

#[test]
fn translation_direction_mismatch_is_warned() {
    let dir = tempfile::tempdir().unwrap();
    let (data, run) = trained(dir.path(), 0);
    let ckpt = format!("{run}/final.wck");
    let mut warned = 0;
    for (i, dir_name) in [(0, "a2b"), (0, "b2a")] {
        let sample = format!("{data}/sample_0000{i}.wad");
        let out = tempfile::tempdir().unwrap();
        let o = warpadapt(&[
            "translate",
            "--checkpoint",
            &ckpt,
            "--in",
            &sample,
            "--out",
            out.path().to_str().unwrap(),
            "--direction",
            dir_name,
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
        if stderr(&o).contains("expects") {
            warned += 1;
        }
    }
    // The sample is one domain, so exactly one direction is wrong for it.
    assert_eq!(warned, 1);
}

#[test]
fn gradcheck_passes() {
    let o = warpadapt(&["gradcheck", "--seed", "1"]);
    assert!(o.status.success(), "{}", stdout(&o));
    assert!(stdout(&o).contains("checks passed"));
    assert!(!stdout(&o).contains("FAIL"));
}

#[test]
fn two_hundred_iteration_smoke_run_exits_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let (_, run) = trained(dir.path(), 200);
    let log = fs::read_to_string(format!("{run}/train.log")).unwrap();
    assert!(log.lines().any(|l| l.starts_with("199\t")));
    assert!(!log.contains("NaN") && !log.contains("inf\t"));
}
