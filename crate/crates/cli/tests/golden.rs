//! Re-runs the pipeline and diffs against checked-in output. Set
//! `RFOPT_UPDATE_GOLDEN=1` to rewrite the files after an intended change.

use std::path::PathBuf;
use std::process::Command;

fn check(name: &str, args: &[&str]) {
    let out = Command::new(env!("CARGO_BIN_EXE_rfopt")).args(args).output().unwrap();
    assert!(out.status.success(), "{name}: {}", String::from_utf8_lossy(&out.stderr));
    let actual = String::from_utf8(out.stdout).unwrap();
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name);
    if std::env::var_os("RFOPT_UPDATE_GOLDEN").is_some() {
        std::fs::write(&path, &actual).unwrap();
        return;
    }
    let expected = std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    assert_eq!(actual, expected, "{name} drifted");
}

#[test]
fn analyze_vgg11() {
    check("analyze-vgg11.txt", &["analyze", "presets:vgg11-cifar10"]);
}

#[test]
fn analyze_mobilenet_costs() {
    check("costs-mobilenet.csv", &["analyze", "presets:mobilenet-cifar10", "--costs", "--format", "csv"]);
}

#[test]
fn organize_vgg16() {
    check("organize-vgg16.txt", &["organize", "presets:vgg16-cifar10"]);
}

#[test]
fn organize_resnet50() {
    check("organize-resnet50.txt", &["organize", "presets:resnet50-cifar10"]);
}

#[test]
fn verify_rpw_depths() {
    for stack in ["1", "2", "3"] {
        let args = [
            "verify-block", "--block", "dw_rpw", "--groups", "2", "--overlap", "1/2", "--width", "8", "--channels", "8",
            "--stack", stack,
        ];
        let out = Command::new(env!("CARGO_BIN_EXE_rfopt")).args(args).output().unwrap();
        let name = format!("verify-dw_rpw-g2-o1_2-x{stack}.txt");
        let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(&name);
        let actual = String::from_utf8(out.stdout).unwrap();
        if std::env::var_os("RFOPT_UPDATE_GOLDEN").is_some() {
            std::fs::write(&path, &actual).unwrap();
            continue;
        }
        assert_eq!(actual, std::fs::read_to_string(&path).unwrap(), "{name} drifted");
        assert_eq!(out.status.code(), Some(if stack == "1" { 1 } else { 0 }));
    }
}

#[test]
fn oracle_scaled_stage() {
    check("oracle-mobilenet-stage3.txt", &["oracle", "presets:mobilenet-cifar10", "--stage", "3"]);
}

#[test]
fn oracle_grouped_stage() {
    let input = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden/grouped.yaml");
    check("oracle-grouped.txt", &["oracle", input.to_str().unwrap(), "--stage", "0"]);
}

#[test]
fn report_presets() {
    check(
        "report-imagenet.csv",
        &["report", "--before", "presets:vgg16-imagenet", "--after", "presets:resnet50-imagenet", "--format", "csv"],
    );
}
