//! End-to-end tests of the `dps` binary: every subcommand, the error
//! paths the pipeline promises, and cross-checks between printed values,
//! written files, and library recomputation.

use std::path::Path;
use std::process::{Command, Output};

use dps_core::engine::accuracy;
use dps_core::io::{read_checkpoint, read_dataset, read_store, sha256_file};

fn dps(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dps"))
        .args(args)
        .output()
        .expect("spawn dps binary")
}

fn stdout_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn write_file(path: &Path, content: &str) {
    std::fs::write(path, content).unwrap();
}

const DATASET_CONFIG: &str = "\
kind = shapes
num_classes = 4
samples_per_class = 8
image_size = 16
channels = 1
";

const MODEL_CONFIG: &str = "\
conv_channels = 4, 8
kernel = 3
epochs = 6
lr = 0.05
batch_size = 8
";

#[test]
fn gen_data_writes_dataset_matching_config_and_is_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("data.cfg");
    write_file(&config, DATASET_CONFIG);
    let out_path = dir.path().join("data.dpsd");

    let run = dps(&[
        "gen-data",
        "--config",
        config.to_str().unwrap(),
        "--out",
        out_path.to_str().unwrap(),
        "--seed",
        "5",
    ]);
    assert!(run.status.success(), "{}", stderr_of(&run));

    // magic bytes plus header fields match the config
    let bytes = std::fs::read(&out_path).unwrap();
    assert_eq!(&bytes[..4], b"DPSD");
    let field = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap());
    assert_eq!(field(0), 32); // N = 4 classes x 8
    assert_eq!(field(1), 1);
    assert_eq!(field(2), 16);
    assert_eq!(field(3), 16);

    // rerunning with identical arguments reproduces the digest
    let digest = sha256_file(&out_path).unwrap();
    let rerun = dps(&[
        "gen-data",
        "--config",
        config.to_str().unwrap(),
        "--out",
        out_path.to_str().unwrap(),
        "--seed",
        "5",
    ]);
    assert!(rerun.status.success());
    assert_eq!(sha256_file(&out_path).unwrap(), digest);
}

#[test]
fn gen_data_fails_on_bad_config() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("data.cfg");
    write_file(&config, "kind = shapes\nnum_classes = 1\n");
    let run = dps(&[
        "gen-data",
        "--config",
        config.to_str().unwrap(),
        "--out",
        dir.path().join("x.dpsd").to_str().unwrap(),
    ]);
    assert!(!run.status.success());
    assert!(stderr_of(&run).contains("num_classes"));
}

/// Builds dataset + checkpoint fixtures through the CLI itself.
fn pipeline_fixture(dir: &Path) -> (String, String) {
    let config = dir.join("data.cfg");
    write_file(&config, DATASET_CONFIG);
    let model_config = dir.join("model.cfg");
    write_file(&model_config, MODEL_CONFIG);
    let data = dir.join("data.dpsd");
    let ckpt = dir.join("model.dpsc");

    let run = dps(&[
        "gen-data",
        "--config",
        config.to_str().unwrap(),
        "--out",
        data.to_str().unwrap(),
        "--seed",
        "5",
    ]);
    assert!(run.status.success(), "{}", stderr_of(&run));
    let run = dps(&[
        "train",
        "--dataset",
        data.to_str().unwrap(),
        "--model-config",
        model_config.to_str().unwrap(),
        "--out",
        ckpt.to_str().unwrap(),
        "--seed",
        "9",
    ]);
    assert!(run.status.success(), "{}", stderr_of(&run));
    (
        data.to_str().unwrap().to_string(),
        ckpt.to_str().unwrap().to_string(),
    )
}

#[test]
fn train_reports_accuracy_matching_checkpoint_recomputation() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("data.cfg");
    write_file(&config, DATASET_CONFIG);
    let model_config = dir.path().join("model.cfg");
    write_file(&model_config, MODEL_CONFIG);
    let data = dir.path().join("data.dpsd");
    let ckpt = dir.path().join("model.dpsc");

    let run = dps(&[
        "gen-data",
        "--config",
        config.to_str().unwrap(),
        "--out",
        data.to_str().unwrap(),
        "--seed",
        "5",
    ]);
    assert!(run.status.success());
    let run = dps(&[
        "train",
        "--dataset",
        data.to_str().unwrap(),
        "--model-config",
        model_config.to_str().unwrap(),
        "--out",
        ckpt.to_str().unwrap(),
        "--seed",
        "9",
    ]);
    assert!(run.status.success(), "{}", stderr_of(&run));

    // reload oracle: the printed accuracy must equal recomputation from
    // the written checkpoint
    let stdout = stdout_of(&run);
    let reported: f64 = stdout
        .lines()
        .find_map(|l| l.strip_prefix("train_accuracy = "))
        .expect("accuracy line")
        .trim()
        .parse()
        .unwrap();
    let model = read_checkpoint(&ckpt).unwrap();
    let batch = read_dataset(&data).unwrap();
    let recomputed = accuracy(&model, &batch).unwrap();
    assert_eq!(reported, recomputed);

    // rerun writes an identical checkpoint
    let digest = sha256_file(&ckpt).unwrap();
    let rerun = dps(&[
        "train",
        "--dataset",
        data.to_str().unwrap(),
        "--model-config",
        model_config.to_str().unwrap(),
        "--out",
        ckpt.to_str().unwrap(),
        "--seed",
        "9",
    ]);
    assert!(rerun.status.success());
    assert_eq!(sha256_file(&ckpt).unwrap(), digest);
}

#[test]
fn train_rejects_corrupt_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data.dpsd");
    write_file(&data, "DPSDgarbage");
    let model_config = dir.path().join("model.cfg");
    write_file(&model_config, MODEL_CONFIG);
    let run = dps(&[
        "train",
        "--dataset",
        data.to_str().unwrap(),
        "--model-config",
        model_config.to_str().unwrap(),
        "--out",
        dir.path().join("m.dpsc").to_str().unwrap(),
    ]);
    assert!(!run.status.success());
    assert!(stderr_of(&run).contains("format error"));
}

#[test]
fn extract_writes_store_with_one_record_per_sample() {
    let dir = tempfile::tempdir().unwrap();
    let (data, ckpt) = pipeline_fixture(dir.path());
    let store = dir.path().join("train.dps1");
    let run = dps(&[
        "extract",
        "--checkpoint",
        &ckpt,
        "--dataset",
        &data,
        "--split",
        "train",
        "--out",
        store.to_str().unwrap(),
    ]);
    assert!(run.status.success(), "{}", stderr_of(&run));
    let (patterns, _) = read_store(&store).unwrap();
    let batch = read_dataset(Path::new(&data)).unwrap();
    assert_eq!(patterns.len(), batch.len());
    assert!(store.with_file_name("train.dps1.meta").exists());
}

#[test]
fn extract_rejects_class_count_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let (_, ckpt) = pipeline_fixture(dir.path());

    // six-class dataset against the four-class checkpoint
    let config = dir.path().join("data6.cfg");
    write_file(
        &config,
        "kind = shapes\nnum_classes = 6\nsamples_per_class = 4\n",
    );
    let data6 = dir.path().join("data6.dpsd");
    let run = dps(&[
        "gen-data",
        "--config",
        config.to_str().unwrap(),
        "--out",
        data6.to_str().unwrap(),
    ]);
    assert!(run.status.success(), "{}", stderr_of(&run));

    let run = dps(&[
        "extract",
        "--checkpoint",
        &ckpt,
        "--dataset",
        data6.to_str().unwrap(),
        "--split",
        "test",
        "--out",
        dir.path().join("bad.dps1").to_str().unwrap(),
    ]);
    assert!(!run.status.success());
    assert!(stderr_of(&run).contains("incompatible"));
}

#[test]
fn analyze_emits_report_consistent_with_sample_csv() {
    let dir = tempfile::tempdir().unwrap();
    let (data, ckpt) = pipeline_fixture(dir.path());

    // test split from the same generator family, different seed
    let config = dir.path().join("data.cfg");
    let test_data = dir.path().join("test.dpsd");
    let run = dps(&[
        "gen-data",
        "--config",
        config.to_str().unwrap(),
        "--out",
        test_data.to_str().unwrap(),
        "--seed",
        "6",
    ]);
    assert!(run.status.success());

    let train_store = dir.path().join("train.dps1");
    let test_store = dir.path().join("test.dps1");
    for (dataset, split, store) in [
        (&data[..], "train", &train_store),
        (test_data.to_str().unwrap(), "test", &test_store),
    ] {
        let run = dps(&[
            "extract",
            "--checkpoint",
            &ckpt,
            "--dataset",
            dataset,
            "--split",
            split,
            "--out",
            store.to_str().unwrap(),
        ]);
        assert!(run.status.success(), "{}", stderr_of(&run));
    }

    let out_dir = dir.path().join("analysis");
    let run = dps(&[
        "analyze",
        "--train-store",
        train_store.to_str().unwrap(),
        "--test-store",
        test_store.to_str().unwrap(),
        "--out-dir",
        out_dir.to_str().unwrap(),
        "--bins",
        "20",
    ]);
    assert!(run.status.success(), "{}", stderr_of(&run));

    // dataset-level shift in the report equals the mean of the per-sample
    // export column
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("report.json")).unwrap())
            .unwrap();
    let csv = std::fs::read_to_string(out_dir.join("dps_sample.csv")).unwrap();
    let dps_column: Vec<f64> = csv
        .lines()
        .skip(1)
        .map(|line| line.split(',').nth(2).unwrap().parse().unwrap())
        .collect();
    let mean = dps_column.iter().sum::<f64>() / dps_column.len() as f64;
    let reported = report["dataset"]["dps_dataset"].as_f64().unwrap();
    assert!((mean - reported).abs() < 1e-12, "{mean} vs {reported}");
    assert!(out_dir.join("manifest.txt").exists());
    assert!(out_dir.join("histogram.csv").exists());
}

#[test]
fn analyze_rejects_empty_test_store() {
    let dir = tempfile::tempdir().unwrap();
    let (data, ckpt) = pipeline_fixture(dir.path());
    let train_store = dir.path().join("train.dps1");
    let run = dps(&[
        "extract",
        "--checkpoint",
        &ckpt,
        "--dataset",
        &data,
        "--split",
        "train",
        "--out",
        train_store.to_str().unwrap(),
    ]);
    assert!(run.status.success());

    // hand-crafted store with a valid header and zero records
    let (_, k) = read_store(&train_store).unwrap();
    let mut bytes: Vec<u8> = Vec::new();
    bytes.extend_from_slice(b"DPS1");
    bytes.extend_from_slice(&1u32.to_le_bytes());
    bytes.extend_from_slice(&(k as u32).to_le_bytes());
    bytes.extend_from_slice(&0u32.to_le_bytes());
    let empty_store = dir.path().join("empty.dps1");
    std::fs::write(&empty_store, bytes).unwrap();

    let run = dps(&[
        "analyze",
        "--train-store",
        train_store.to_str().unwrap(),
        "--test-store",
        empty_store.to_str().unwrap(),
        "--out-dir",
        dir.path().join("out").to_str().unwrap(),
    ]);
    assert!(!run.status.success());
    assert!(stderr_of(&run).contains("empty input"));
}

#[test]
fn analyze_rejects_channel_mismatch_between_stores() {
    let dir = tempfile::tempdir().unwrap();
    let (data, ckpt) = pipeline_fixture(dir.path());
    let store_a = dir.path().join("a.dps1");
    let run = dps(&[
        "extract",
        "--checkpoint",
        &ckpt,
        "--dataset",
        &data,
        "--split",
        "train",
        "--out",
        store_a.to_str().unwrap(),
    ]);
    assert!(run.status.success());

    // second checkpoint with a different channel count
    let model_config = dir.path().join("model12.cfg");
    write_file(&model_config, "conv_channels = 4, 12\nepochs = 2\n");
    let ckpt_b = dir.path().join("model12.dpsc");
    let run = dps(&[
        "train",
        "--dataset",
        &data,
        "--model-config",
        model_config.to_str().unwrap(),
        "--out",
        ckpt_b.to_str().unwrap(),
    ]);
    assert!(run.status.success(), "{}", stderr_of(&run));
    let store_b = dir.path().join("b.dps1");
    let run = dps(&[
        "extract",
        "--checkpoint",
        ckpt_b.to_str().unwrap(),
        "--dataset",
        &data,
        "--split",
        "test",
        "--out",
        store_b.to_str().unwrap(),
    ]);
    assert!(run.status.success());

    let run = dps(&[
        "analyze",
        "--train-store",
        store_a.to_str().unwrap(),
        "--test-store",
        store_b.to_str().unwrap(),
        "--out-dir",
        dir.path().join("out").to_str().unwrap(),
    ]);
    assert!(!run.status.success());
    assert!(stderr_of(&run).contains("channel count"));
}

#[test]
fn scenario_command_runs_ideal_within_budget_and_manifests_inputs() {
    let start = std::time::Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("ideal.spec");
    write_file(&spec, "name = ideal\nseed = 2026\n");
    let out_dir = dir.path().join("run");
    let run = dps(&[
        "scenario",
        "--spec",
        spec.to_str().unwrap(),
        "--out-dir",
        out_dir.to_str().unwrap(),
    ]);
    assert!(run.status.success(), "{}", stderr_of(&run));
    let elapsed = start.elapsed().as_secs_f64();
    assert!(elapsed < 300.0, "ideal scenario took {elapsed}s");

    // manifest records the spec digest
    let manifest = std::fs::read_to_string(out_dir.join("manifest.txt")).unwrap();
    let spec_hash = sha256_file(&spec).unwrap();
    assert!(manifest.contains(&format!("input.spec = sha256:{spec_hash}")));
    assert!(manifest.contains("seed.scenario = 2026"));

    for name in [
        "checkpoint.dpsc",
        "train.dps1",
        "test.dps1",
        "report.json",
        "dps_sample.csv",
    ] {
        assert!(out_dir.join(name).exists(), "{name} missing");
    }
}

#[test]
fn scenario_command_rejects_unknown_name_and_misplaced_fields() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("bad.spec");
    write_file(&spec, "name = mystery\n");
    let run = dps(&[
        "scenario",
        "--spec",
        spec.to_str().unwrap(),
        "--out-dir",
        dir.path().join("out").to_str().unwrap(),
    ]);
    assert!(!run.status.success());
    assert!(stderr_of(&run).contains("unknown scenario"));

    write_file(&spec, "name = ideal\nseverity = 2\n");
    let run = dps(&[
        "scenario",
        "--spec",
        spec.to_str().unwrap(),
        "--out-dir",
        dir.path().join("out2").to_str().unwrap(),
    ]);
    assert!(!run.status.success());
    assert!(stderr_of(&run).contains("severity"));
}
