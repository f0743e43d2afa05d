//! The toy pipeline script must reproduce the committed report exactly.
//! Regenerate with `UPDATE_GOLDEN=1 cargo test -p mrasp-cli --test golden`.

use std::path::{Path, PathBuf};
use std::process::Command;

fn repo_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

pub fn run_pipeline(work: &Path) -> String {
    let out = Command::new("bash")
        .arg(repo_root().join("scripts/golden_pipeline.sh"))
        .arg(env!("CARGO_BIN_EXE_mrasp"))
        .arg(work)
        .output()
        .expect("run pipeline script");
    assert!(out.status.success(), "pipeline failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).expect("utf-8 report")
}

#[test]
fn golden_pipeline_report() {
    let golden = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden/pipeline_report.txt");
    let dir = tempfile::tempdir().unwrap();
    let report = run_pipeline(dir.path());
    if std::env::var_os("UPDATE_GOLDEN").is_some() {
        std::fs::write(&golden, &report).unwrap();
    }
    let expected = std::fs::read_to_string(&golden).expect("committed golden report");
    assert_eq!(report, expected);
}
