use std::path::Path;
use std::process::{Command, Output};

fn dtnet(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dtnet"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn text(b: &[u8]) -> String {
    String::from_utf8_lossy(b).into_owned()
}

const TINY: [&str; 12] = [
    "--n-train", "32", "--n-val", "8", "--n-test", "8", "--layers", "1", "--d-model", "16", "--heads", "2",
];

#[test]
fn gen_data_then_short_ce_training() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let data_s = data.display().to_string();
    let mut args = vec!["gen-data", "--data-dir", &data_s, "--run-name", "gen"];
    args.extend(TINY);
    let out = dtnet(&args, tmp.path());
    assert!(out.status.success(), "{}", text(&out.stderr));
    assert!(data.join("train.feat").exists());

    let mut args = vec![
        "train", "--data-dir", &data_s, "--phase", "ce", "--steps", "50", "--run-name=t", "--ce-epochs", "30",
        "--early-stop", "0",
    ];
    args.extend(TINY);
    let out = dtnet(&args, tmp.path());
    assert!(out.status.success(), "{}", text(&out.stderr));
    assert!(text(&out.stdout).contains("steps 50"));
    let log = std::fs::read_to_string(tmp.path().join("runs/t/train.log")).unwrap();
    assert_eq!(log.lines().count(), 50);

    let ckpt = tmp.path().join("runs/t/final.dtnc").display().to_string();
    let mut args = vec!["eval", "--data-dir", &data_s, "--checkpoint", &ckpt, "--run-name", "e"];
    args.extend(TINY);
    let out = dtnet(&args, tmp.path());
    assert!(out.status.success(), "{}", text(&out.stderr));
    assert!(text(&out.stdout).contains("CIDEr-D"));
}

#[test]
fn config_file_values_yield_to_flags() {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::write(tmp.path().join("c.txt"), "run_name = fromfile\nseed = 3\nn_train = 4\n").unwrap();
    let mut args = vec!["route-inspect", "--config", "c.txt", "--seed", "5"];
    args.extend(TINY);
    let out = dtnet(&args, tmp.path());
    assert!(out.status.success(), "{}", text(&out.stderr));
    let saved = std::fs::read_to_string(tmp.path().join("runs/fromfile/config.txt")).unwrap();
    assert!(saved.contains("seed = 5\n"));
    assert!(saved.contains("n_train = 32\n"));
}

#[test]
fn bad_flags_are_all_reported_with_exit_code_two() {
    let tmp = tempfile::tempdir().unwrap();
    let out = dtnet(&["eval", "--seed", "abc", "--no-such-key", "1", "stray", "--heads"], tmp.path());
    assert_eq!(out.status.code(), Some(2));
    let err = text(&out.stderr);
    for part in ["seed", "no_such_key", "stray", "--heads: missing value"] {
        assert!(err.contains(part), "{part} missing from {err}");
    }
    assert_eq!(dtnet(&["explode"], tmp.path()).status.code(), Some(2));
}

#[test]
fn missing_data_directory_exits_with_code_three() {
    let tmp = tempfile::tempdir().unwrap();
    let out = dtnet(&["eval", "--data-dir", "absent"], tmp.path());
    assert_eq!(out.status.code(), Some(3), "{}", text(&out.stderr));
}
