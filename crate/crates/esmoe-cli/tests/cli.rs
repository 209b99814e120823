//! End-to-end tests of the `esmoe` binary: the documented example
//! invocations, artifact layout, and the exit-code contract, each checked
//! against a real subprocess in a fresh working directory.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn esmoe(cwd: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_esmoe"))
        .current_dir(cwd)
        .args(args)
        .output()
        .expect("spawn esmoe")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn exit_code(out: &Output) -> i32 {
    out.status.code().expect("terminated by signal")
}

/// The single run directory created under `<cwd>/runs`.
fn only_run_dir(cwd: &Path) -> PathBuf {
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(cwd.join("runs"))
        .expect("runs directory exists")
        .map(|e| e.expect("dir entry").path())
        .collect();
    assert_eq!(dirs.len(), 1, "expected exactly one run directory, got {dirs:?}");
    dirs.pop().unwrap()
}

#[test]
fn train_twice_produces_identical_csv_bytes() {
    let tmp = tempfile::tempdir().unwrap();
    let args = ["train", "--epochs", "1", "--seed", "1"];

    let first = esmoe(tmp.path(), &args);
    assert_eq!(exit_code(&first), 0, "stderr: {}", stderr(&first));
    let run_dir = only_run_dir(tmp.path());
    assert!(run_dir.file_name().unwrap().to_str().unwrap().ends_with("-seed1"));
    let csv_path = run_dir.join("train_report.csv");
    let first_bytes = std::fs::read(&csv_path).expect("first CSV");
    assert!(run_dir.join("model.ckpt").is_file());
    assert!(run_dir.join("expert_0.pgm").is_file());
    assert!(run_dir.join("expert_3.pgm").is_file());

    let second = esmoe(tmp.path(), &args);
    assert_eq!(exit_code(&second), 0, "stderr: {}", stderr(&second));
    // Same config + seed: same run directory, and byte-identical CSV.
    assert_eq!(only_run_dir(tmp.path()), run_dir);
    let second_bytes = std::fs::read(&csv_path).expect("second CSV");
    assert_eq!(first_bytes, second_bytes, "train CSV must be byte-identical across reruns");

    let header = String::from_utf8(first_bytes).unwrap();
    assert!(header.starts_with("epoch,task_loss,lb_loss,total_loss,train_acc,val_acc,mu_0"));
}

#[test]
fn gradcheck_default_config_exits_zero() {
    let tmp = tempfile::tempdir().unwrap();
    let out = esmoe(tmp.path(), &["gradcheck"]);
    assert_eq!(exit_code(&out), 0, "stderr: {}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("worst relative error"), "stdout: {text}");
    assert!(text.contains("gradient check passed"), "stdout: {text}");
}

#[test]
fn eval_example_prints_the_100_evaluation_counter() {
    let tmp = tempfile::tempdir().unwrap();
    let out = esmoe(tmp.path(), &["eval", "--k", "2", "--experts", "4", "--samples", "50"]);
    assert_eq!(exit_code(&out), 0, "stderr: {}", stderr(&out));
    let text = stdout(&out);
    assert!(
        text.contains("expert evaluations: 100 (top_k 2 x 50 samples)"),
        "stdout: {text}"
    );
    assert!(text.contains("accuracy:"), "stdout: {text}");
    assert!(text.contains("utilization mu:"), "stdout: {text}");
    assert!(text.contains("routing entropy:"), "stdout: {text}");
}

#[test]
fn config_file_is_honored_and_flags_win() {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::write(
        tmp.path().join("cfg.toml"),
        "seed = 7\n[train]\nepochs = 2\nn_train = 32\nn_val = 16\n",
    )
    .unwrap();
    let out = esmoe(tmp.path(), &["train", "--config", "cfg.toml", "--epochs", "1"]);
    assert_eq!(exit_code(&out), 0, "stderr: {}", stderr(&out));
    // Seed comes from the file...
    let run_dir = only_run_dir(tmp.path());
    assert!(run_dir.file_name().unwrap().to_str().unwrap().ends_with("-seed7"));
    // ...while the epoch flag overrides the file: one header + one row.
    let csv = std::fs::read_to_string(run_dir.join("train_report.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2, "csv: {csv}");
}

#[test]
fn unknown_config_keys_and_bad_flags_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::write(tmp.path().join("cfg.toml"), "[model]\nbogus_key = 3\n").unwrap();
    let out = esmoe(tmp.path(), &["train", "--config", "cfg.toml"]);
    assert_eq!(exit_code(&out), 2);
    assert!(stderr(&out).contains("bogus_key"), "stderr: {}", stderr(&out));

    let out = esmoe(tmp.path(), &["train", "--epochs", "notanumber"]);
    assert_eq!(exit_code(&out), 2);

    let out = esmoe(tmp.path(), &["eval", "--k", "9", "--experts", "4"]);
    assert_eq!(exit_code(&out), 2);
    assert!(stderr(&out).contains("configuration error"), "stderr: {}", stderr(&out));
}

#[test]
fn corrupt_checkpoint_exits_1_without_crashing() {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::write(tmp.path().join("broken.ckpt"), [0xAB; 64]).unwrap();
    let out = esmoe(tmp.path(), &["eval", "--checkpoint", "broken.ckpt"]);
    assert_eq!(exit_code(&out), 1, "stderr: {}", stderr(&out));
    let err = stderr(&out);
    assert!(err.contains("checkpoint"), "stderr: {err}");
    assert!(!err.contains("panicked"), "must fail with a typed error: {err}");
}

#[test]
fn bench_appends_csv_rows_and_prints_the_ratio() {
    let tmp = tempfile::tempdir().unwrap();
    let args = [
        "bench",
        "--c-in",
        "4",
        "--c-out",
        "4",
        "--bench-height",
        "8",
        "--bench-width",
        "8",
        "--repetitions",
        "30",
    ];
    let out = esmoe(tmp.path(), &args);
    assert_eq!(exit_code(&out), 0, "stderr: {}", stderr(&out));
    assert!(stdout(&out).contains("sparse/dense median latency ratio:"));

    let csv_path = only_run_dir(tmp.path()).join("bench.csv");
    let csv = std::fs::read_to_string(&csv_path).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 3, "header + sparse + dense: {csv}");
    assert_eq!(
        lines[0],
        "config_id,mode,experts,top_k,median_us,p10_us,p90_us,expert_evals,samples"
    );
    assert!(lines[1].contains(",sparse,"));
    assert!(lines[2].contains(",dense,"));

    // A second invocation appends two more rows to the same file.
    let out = esmoe(tmp.path(), &args);
    assert_eq!(exit_code(&out), 0, "stderr: {}", stderr(&out));
    let csv = std::fs::read_to_string(&csv_path).unwrap();
    assert_eq!(csv.lines().count(), 5, "csv after second run: {csv}");
}

#[test]
fn route_viz_and_dataset_export_write_their_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let out = esmoe(
        tmp.path(),
        &["route-viz", "--samples", "8", "--cell", "2", "--n-train", "32", "--n-val", "16"],
    );
    assert_eq!(exit_code(&out), 0, "stderr: {}", stderr(&out));
    assert!(stdout(&out).contains("mean routing weight per class"));
    let run_dir = only_run_dir(tmp.path());
    for i in 0..4 {
        let pgm = std::fs::read(run_dir.join(format!("expert_{i}.pgm"))).unwrap();
        assert_eq!(&pgm[..3], b"P5\n");
    }

    let out = esmoe(tmp.path(), &["dataset-export", "--count", "6", "--out", "data.bin"]);
    assert_eq!(exit_code(&out), 0, "stderr: {}", stderr(&out));
    let bytes = std::fs::read(tmp.path().join("data.bin")).unwrap();
    assert_eq!(&bytes[..4], b"ESMD", "dataset file must start with its magic");
}
