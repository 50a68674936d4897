//! Resume semantics of the JSONL result log: re-running skips completed
//! trials, extending the grid appends only the new ones.

use std::path::PathBuf;

use uniah::runner::{self, ExperimentGrid, GridMode, RunConfig};

fn mock_setup() -> (RunConfig, runner::Harness) {
    let config_path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/config/mock_grid.json");
    let raw = std::fs::read_to_string(&config_path).unwrap();
    let config: RunConfig = serde_json::from_str(&raw).unwrap();
    let harness = runner::load_harness(&config, config_path.parent().unwrap()).unwrap();
    (config, harness)
}

fn small_grid(lengths: Vec<usize>) -> ExperimentGrid {
    ExperimentGrid {
        context_lengths: lengths,
        depths: vec![0.5, 1.0],
        cases: vec!["pizza-short-3".into(), "rainbow-short-7".into()],
        modes: vec![GridMode::Lc],
        backends: vec!["echo-mock".into()],
        seeds: vec![0],
    }
}

#[test]
fn rerun_skips_everything_and_leaves_the_log_alone() {
    let (_, harness) = mock_setup();
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("trials.jsonl");
    let plan = runner::plan(&small_grid(vec![1_000, 2_000]), &harness).unwrap();

    let first = runner::run(&plan, &harness, &log, 4).unwrap();
    assert_eq!(first.done + first.failed, plan.trials.len());
    assert_eq!(first.skipped, 0);
    let before = std::fs::read_to_string(&log).unwrap();

    let second = runner::run(&plan, &harness, &log, 4).unwrap();
    assert_eq!(second.skipped, plan.trials.len());
    assert_eq!(second.done, 0);
    assert_eq!(std::fs::read_to_string(&log).unwrap(), before);
}

#[test]
fn extended_grid_appends_only_new_trials() {
    let (_, harness) = mock_setup();
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("trials.jsonl");

    let small = runner::plan(&small_grid(vec![1_000]), &harness).unwrap();
    runner::run(&small, &harness, &log, 2).unwrap();
    let small_count = runner::read_log(&log).unwrap().len();
    assert_eq!(small_count, small.trials.len());

    let big = runner::plan(&small_grid(vec![1_000, 2_000, 4_000]), &harness).unwrap();
    let summary = runner::run(&big, &harness, &log, 2).unwrap();
    assert_eq!(summary.skipped, small.trials.len());
    assert_eq!(summary.done + summary.failed, big.trials.len() - small.trials.len());

    let results = runner::read_log(&log).unwrap();
    assert_eq!(results.len(), big.trials.len());
    // every planned key appears exactly once
    let mut keys: Vec<String> = results.iter().map(|r| r.key.canonical()).collect();
    keys.sort();
    keys.dedup();
    assert_eq!(keys.len(), big.trials.len());
}

#[test]
fn log_keeps_its_schema_header_first() {
    let (_, harness) = mock_setup();
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("trials.jsonl");
    let plan = runner::plan(&small_grid(vec![1_000]), &harness).unwrap();
    runner::run(&plan, &harness, &log, 2).unwrap();
    let raw = std::fs::read_to_string(&log).unwrap();
    assert_eq!(raw.lines().next().unwrap(), runner::LOG_HEADER);
}
