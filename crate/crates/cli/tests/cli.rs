use std::path::PathBuf;
use std::process::Command;

use serde_json::Value;

fn xedge() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_xedge"));
    cmd.env("SOURCE_DATE_EPOCH", "1700000000");
    cmd
}

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures").join(name)
}

#[test]
fn usage_errors_exit_2() {
    let none = xedge().output().unwrap();
    assert_eq!(none.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&none.stderr).contains("Usage"));
    assert_eq!(xedge().arg("frobnicate").output().unwrap().status.code(), Some(2));
    assert_eq!(xedge().args(["--jobs", "0", "split"]).output().unwrap().status.code(), Some(2));
}

#[test]
fn runtime_errors_exit_1() {
    let out = tempfile::tempdir().unwrap();
    let run = xedge().arg("--out").arg(out.path()).args(["split"]).output().unwrap();
    assert_eq!(run.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&run.stderr).starts_with("error: "));
    let run = xedge()
        .arg("--out")
        .arg(out.path())
        .arg("--dataset")
        .arg(fixture("mini.json"))
        .args(["explain", "--sample", "9-1"])
        .output()
        .unwrap();
    assert_eq!(run.status.code(), Some(1));
}

#[test]
fn eval_xai_writes_report() {
    let out = tempfile::tempdir().unwrap();
    let run = xedge()
        .arg("--out")
        .arg(out.path())
        .arg("--dataset")
        .arg(fixture("mini.json"))
        .args(["--format", "json", "eval-xai", "--methods", "rise", "--model", "toy:region", "--masks", "64", "--grid", "4"])
        .output()
        .unwrap();
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    let report: Value = serde_json::from_slice(&std::fs::read(out.path().join("report.json")).unwrap()).unwrap();
    let methods = report["methods"].as_array().unwrap();
    assert_eq!(methods.len(), 1);
    assert_eq!(methods[0]["name"], "RISE");
    for key in ["ebpg", "bbox", "iou", "del", "ins"] {
        assert!(methods[0][key].is_number(), "{key}");
    }
    assert_eq!(report["advisable"], "RISE");
    let printed: Value = serde_json::from_slice(&run.stdout).unwrap();
    assert_eq!(printed, report);
    assert!(out.path().join("report.md").exists());
}

#[test]
fn rank_reads_published_table() {
    let out = tempfile::tempdir().unwrap();
    let run = xedge()
        .arg("--out")
        .arg(out.path())
        .args(["rank", "--report"])
        .arg(fixture("paper_table.json"))
        .output()
        .unwrap();
    assert!(run.status.success());
    assert!(String::from_utf8_lossy(&run.stdout).starts_with("advisable: RISE\n"));
    let ranking: Value = serde_json::from_slice(&std::fs::read(out.path().join("ranking.json")).unwrap()).unwrap();
    assert_eq!(ranking["table"].as_array().unwrap().len(), 10);
}

#[test]
fn split_and_enlarge_outputs_reload() {
    let out = tempfile::tempdir().unwrap();
    let run = xedge().arg("--out").arg(out.path()).arg("--dataset").arg(fixture("ten.json")).arg("split").output().unwrap();
    assert!(run.status.success());
    let train = xedge_core::dataset::load_dataset(&out.path().join("split/train.json")).unwrap();
    let val = xedge_core::dataset::load_dataset(&out.path().join("split/val.json")).unwrap();
    assert_eq!((train.images().len(), val.images().len()), (8, 2));
    // image paths survive the move to another directory
    assert!(train.image_path(train.images()[0].id).unwrap().exists());

    let run = xedge()
        .arg("--out")
        .arg(out.path())
        .arg("--dataset")
        .arg(fixture("mini.json"))
        .args(["augment", "--enlarge", "cable", "--radius", "2"])
        .output()
        .unwrap();
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    let aug = xedge_core::dataset::load_dataset(&out.path().join("augmented/dataset.json")).unwrap();
    assert_eq!(xedge_core::dataset::build_category_masks(&aug, 1, 1).unwrap().count(), 5 * 32);
}
