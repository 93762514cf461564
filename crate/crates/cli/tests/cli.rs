//! Black-box checks of the two binaries: exit codes, printed reports, and
//! the committed data files staying in sync with the generator.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).ancestors().nth(2).unwrap().to_path_buf()
}

fn sparseq(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sparseq"))
        .current_dir(root())
        .args(args)
        .output()
        .unwrap()
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

#[test]
fn usage_errors_exit_1() {
    assert_eq!(sparseq(&["--definitely-not-a-flag"]).status.code(), Some(1));
    assert_eq!(sparseq(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(sparseq(&["plan"]).status.code(), Some(1));
}

#[test]
fn data_errors_exit_2() {
    let out = sparseq(&[
        "train",
        "--config",
        "configs/desk_pos.conf",
        "--set",
        "train data=/nonexistent/corpus.txt",
    ]);
    assert_eq!(out.status.code(), Some(2));

    let out = sparseq(&["train", "--config", "configs/no_such_file.conf"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn solve_alpha_plan_and_params_reports() {
    let out = sparseq(&["solve-alpha", "--k", "20", "--delta", "0.2"]);
    assert_eq!(out.status.code(), Some(0));
    let text = stdout(&out);
    assert!(text.contains("alpha = 0.75"), "{text}");

    let out = sparseq(&[
        "plan", "--i", "1150", "--h", "1150", "--n", "5", "--match-dense", "575",
    ]);
    assert_eq!(out.status.code(), Some(0));
    let text = stdout(&out);
    assert!(text.contains("344"), "{text}");
    assert!(text.contains("parameters"), "{text}");

    let out = sparseq(&["params", "--config", "configs/lm_dense_k400.conf"]);
    assert_eq!(out.status.code(), Some(0));
    let text = stdout(&out);
    assert!(text.contains("24221600"), "{text}");
    assert!(text.contains("24.22M"), "{text}");
}

#[test]
fn committed_corpora_match_the_generator() {
    let root = root();
    let tmp = Path::new(env!("CARGO_TARGET_TMPDIR")).join("datagen");
    fs::create_dir_all(&tmp).unwrap();

    let status = Command::new(env!("CARGO_BIN_EXE_sparseq-datagen"))
        .args(["--task", "recite", "--out"])
        .arg(tmp.join("recite.txt"))
        .args(["--seed", "7"])
        .status()
        .unwrap();
    assert!(status.success());
    assert_eq!(
        fs::read(tmp.join("recite.txt")).unwrap(),
        fs::read(root.join("data/recite.txt")).unwrap(),
        "data/recite.txt is stale; regenerate with sparseq-datagen"
    );

    let status = Command::new(env!("CARGO_BIN_EXE_sparseq-datagen"))
        .args(["--task", "pos", "--out"])
        .arg(&tmp)
        .args(["--seed", "7"])
        .status()
        .unwrap();
    assert!(status.success());
    for name in ["pos_train.txt", "pos_valid.txt", "pos_test.txt"] {
        assert_eq!(
            fs::read(tmp.join(name)).unwrap(),
            fs::read(root.join("data").join(name)).unwrap(),
            "data/{name} is stale; regenerate with sparseq-datagen"
        );
    }
}

#[test]
fn train_then_eval_roundtrip() {
    let tmp = Path::new(env!("CARGO_TARGET_TMPDIR")).join("cli_roundtrip");
    fs::create_dir_all(&tmp).unwrap();
    let out_dir = format!("output dir={}", tmp.display());

    let out = sparseq(&[
        "train",
        "--config",
        "configs/desk_pos.conf",
        "--set",
        "epochs=1",
        "--set",
        &out_dir,
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let text = stdout(&out);
    assert!(text.contains("metrics written"), "{text}");

    let ckpt = tmp.join("desk-pos_best.ckpt");
    let ckpt_flag = format!("--checkpoint={}", ckpt.display());
    let out = sparseq(&[
        "eval",
        "--config",
        "configs/desk_pos.conf",
        &ckpt_flag,
        "--split",
        "test",
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let text = stdout(&out);
    assert!(text.contains("loss"), "{text}");
    assert!(text.contains("accuracy"), "{text}");
}
