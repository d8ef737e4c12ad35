use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use sentrycam::ingest::{snapshot_file_name, synth_trajectory, write_snapshot, Scenario, SynthConfig};
use sentrycam::pipeline::{
    self, embedding_file_name, Pipeline, PipelineConfig, ALERTS_FILE, EMBEDDING_DIR, HEALTH_FILE,
};

const N_PER_CLASS: usize = 15;
const CLASSES: usize = 3;

fn write_trajectory(dir: &Path, epochs: usize, seed: u64) {
    fs::create_dir_all(dir).unwrap();
    let cfg = SynthConfig::new(Scenario::Stable, epochs, N_PER_CLASS, CLASSES, 32, seed);
    for snap in synth_trajectory(&cfg).unwrap() {
        write_snapshot(&snap, &dir.join(snapshot_file_name(snap.epoch))).unwrap();
    }
}

fn small_config(input: &Path, output: &Path) -> PipelineConfig {
    let mut cfg = PipelineConfig::new(input, output);
    cfg.k = 5;
    cfg.train.epochs = 2;
    cfg.plots = false;
    cfg.save_models = false;
    cfg
}

fn embedding_indices(output: &Path, epoch: u32) -> Vec<(u64, u32)> {
    let text = fs::read_to_string(output.join(EMBEDDING_DIR).join(embedding_file_name(epoch))).unwrap();
    text.lines()
        .map(|line| {
            let v: serde_json::Value = serde_json::from_str(line).unwrap();
            assert!(v["x"].as_f64().unwrap().is_finite() && v["y"].as_f64().unwrap().is_finite());
            (v["global_index"].as_u64().unwrap(), v["epoch"].as_u64().unwrap() as u32)
        })
        .collect()
}

#[test]
fn every_epoch_gets_one_row_per_probe_point() {
    let tmp = tempfile::tempdir().unwrap();
    let (input, output) = (tmp.path().join("in"), tmp.path().join("out"));
    write_trajectory(&input, 4, 1);
    let summary = pipeline::run(small_config(&input, &output)).unwrap();
    assert_eq!(summary.processed, vec![0, 1, 2, 3]);
    assert!(summary.failed.is_empty());
    for epoch in 0..4 {
        let rows = embedding_indices(&output, epoch);
        let ids: BTreeSet<u64> = rows.iter().map(|r| r.0).collect();
        assert_eq!(ids, (0..(N_PER_CLASS * CLASSES) as u64).collect());
        assert!(rows.iter().all(|r| r.1 == epoch));
    }
    let health = fs::read_to_string(output.join(HEALTH_FILE)).unwrap();
    assert_eq!(health.lines().count(), 5);
    assert!(output.join(ALERTS_FILE).exists());

    let report = pipeline::evaluate_run(&input, &output, 5).unwrap();
    assert_eq!(report.epochs.len(), 4);
    assert!(report.epochs.iter().all(|r| (0.0..=1.0).contains(&r.preservation)));
}

#[test]
fn polling_picks_up_only_new_snapshots() {
    let tmp = tempfile::tempdir().unwrap();
    let (input, output, staging) = (tmp.path().join("in"), tmp.path().join("out"), tmp.path().join("stage"));
    write_trajectory(&staging, 3, 2);
    fs::create_dir_all(&input).unwrap();
    let mv = |epoch: u32| {
        let name = snapshot_file_name(epoch);
        fs::rename(staging.join(&name), input.join(&name)).unwrap();
    };
    mv(0);
    mv(1);
    let mut p = Pipeline::new(small_config(&input, &output)).unwrap();
    assert_eq!(p.poll().unwrap(), 2);
    assert_eq!(p.poll().unwrap(), 0);
    mv(2);
    assert_eq!(p.poll().unwrap(), 1);
    assert_eq!(p.summary().processed, vec![0, 1, 2]);
}

#[test]
fn corrupt_snapshot_is_skipped_not_fatal() {
    let tmp = tempfile::tempdir().unwrap();
    let (input, output) = (tmp.path().join("in"), tmp.path().join("out"));
    write_trajectory(&input, 3, 3);
    let last = input.join(snapshot_file_name(2));
    let bytes = fs::read(&last).unwrap();
    fs::write(&last, &bytes[..bytes.len() / 2]).unwrap();
    let summary = pipeline::run(small_config(&input, &output)).unwrap();
    assert_eq!(summary.processed, vec![0, 1]);
    assert_eq!(summary.failed.len(), 1);
    assert_eq!(summary.failed[0].0, 2);
    assert!(!output.join(EMBEDDING_DIR).join(embedding_file_name(2)).exists());
}

#[test]
fn run_is_deterministic_for_a_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let input = tmp.path().join("in");
    write_trajectory(&input, 3, 4);
    let outs: Vec<_> = ["a", "b"]
        .iter()
        .map(|tag| {
            let out = tmp.path().join(tag);
            let mut cfg = small_config(&input, &out);
            cfg.seed = 9;
            pipeline::run(cfg).unwrap();
            out
        })
        .collect();
    for epoch in 0..3 {
        let name = embedding_file_name(epoch);
        let a = fs::read(outs[0].join(EMBEDDING_DIR).join(&name)).unwrap();
        let b = fs::read(outs[1].join(EMBEDDING_DIR).join(&name)).unwrap();
        assert_eq!(a, b, "epoch {epoch}");
    }
}
