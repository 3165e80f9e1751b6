#![allow(dead_code)]

use std::path::{Path, PathBuf};

use cap_eval_cli::args::ScoreArgs;
use cap_eval_cli::commands::{self, ScoreSummary};

pub fn fixture_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/e2e")
}

pub fn golden(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name)
}

/// Copies the end-to-end fixture into a fresh temporary directory.
pub fn fixture_copy() -> tempfile::TempDir {
    let tmp = tempfile::tempdir().unwrap();
    copy_dir(&fixture_dir(), tmp.path());
    tmp
}

fn copy_dir(from: &Path, to: &Path) {
    std::fs::create_dir_all(to).unwrap();
    for entry in std::fs::read_dir(from).unwrap() {
        let entry = entry.unwrap();
        let target = to.join(entry.file_name());
        if entry.file_type().unwrap().is_dir() {
            copy_dir(&entry.path(), &target);
        } else {
            std::fs::copy(entry.path(), &target).unwrap();
        }
    }
}

pub fn score_args(metrics: &str, out: Option<PathBuf>, max_inflight: Option<usize>) -> ScoreArgs {
    ScoreArgs {
        metrics: metrics.into(),
        dataset: None,
        out,
        max_inflight,
    }
}

pub async fn score_fixture(dir: &Path, out: &str, max_inflight: Option<usize>) -> ScoreSummary {
    let cfg = commands::load_config(Some(&dir.join("config.toml"))).unwrap();
    commands::score(&cfg, &score_args("cite,creativity,pa", Some(dir.join(out)), max_inflight))
        .await
        .unwrap()
}
