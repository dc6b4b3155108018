//! Command-line surface for the decision-pattern toolkit.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use dps_core::error::{DpsError, Result};
use dps_core::io::store::read_store_meta;
use dps_core::io::{
    read_checkpoint, read_dataset, read_store, sha256_file, write_checkpoint, write_dataset,
    write_store, RunManifest, StoreMeta,
};
use dps_core::model::{conv_stack, ModelCheckpoint};
use dps_core::pattern::{extract_batch, Split};
use dps_core::report::{
    analyze_patterns, write_class_csv, write_dataset_csv, write_histogram_csv, write_report_json,
    write_sample_csv, DEFAULT_HISTOGRAM_BINS, DEFAULT_MIN_CLASS_SIZE,
};
use dps_core::rng::derive_seed;
use dps_core::scenario::{parse_dataset_config, parse_model_config, parse_spec, run_scenario};
use dps_core::synth::{gen_colored_digits, gen_shapes, DatasetKind};
use dps_core::train::{train, TrainConfig};

#[derive(Parser)]
#[command(
    name = "dps",
    version,
    about = "Decision-pattern shift diagnostics for small CNNs"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset file from a dataset config.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a model on a dataset and write the checkpoint.
    Train {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        model_config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Extract decision patterns for every dataset sample into a store.
    Extract {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Split name recorded in the store sidecar: train or test.
        #[arg(long)]
        split: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compute shift metrics from a train store and a test store.
    Analyze {
        #[arg(long)]
        train_store: PathBuf,
        #[arg(long)]
        test_store: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// Histogram bin count over [0, 2].
        #[arg(long, default_value_t = DEFAULT_HISTOGRAM_BINS)]
        bins: usize,
        /// Minimum test records for a class to enter the class-level fit.
        #[arg(long, default_value_t = DEFAULT_MIN_CLASS_SIZE)]
        min_class_size: usize,
    },
    /// Run a full generalization scenario from a spec file.
    Scenario {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

fn command_line() -> String {
    std::env::args().collect::<Vec<_>>().join(" ")
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| DpsError::io(path.display().to_string(), e))
}

fn cmd_gen_data(config: &Path, out: &Path, seed: u64) -> Result<()> {
    let (cfg, correlation) = parse_dataset_config(&read_text(config)?)?;
    let batch = match cfg.kind {
        DatasetKind::ColoredDigits => gen_colored_digits(&cfg, correlation.unwrap_or(0.95), seed)?,
        _ => gen_shapes(&cfg, seed)?,
    };
    write_dataset(out, &batch)?;
    println!(
        "wrote {} samples ({} classes, {}x{}x{}) to {}",
        batch.len(),
        cfg.num_classes,
        cfg.channels,
        cfg.image_size,
        cfg.image_size,
        out.display()
    );
    Ok(())
}

fn cmd_train(dataset: &Path, model_config: &Path, out: &Path, seed: u64) -> Result<()> {
    let batch = read_dataset(dataset)?;
    let cfg = parse_model_config(&read_text(model_config)?)?;
    let (c, h, w) = batch.sample_shape();
    let num_classes = batch.num_classes();
    let (specs, target) = conv_stack([c, h, w], &cfg.conv_channels, cfg.kernel, num_classes);
    let init = ModelCheckpoint::init([c, h, w], specs, target, derive_seed(seed, 0))?;
    let train_cfg = TrainConfig {
        epochs: cfg.epochs,
        lr: cfg.lr,
        batch_size: cfg.batch_size,
        weight_decay: cfg.weight_decay,
        seed: derive_seed(seed, 1),
    };
    let (model, stats) = train(&init, &batch, &train_cfg)?;
    write_checkpoint(out, &model)?;
    println!("final_epoch_loss = {}", stats.final_epoch_loss);
    println!("train_accuracy = {}", stats.final_train_accuracy);
    println!("wrote checkpoint to {}", out.display());
    Ok(())
}

fn cmd_extract(checkpoint: &Path, dataset: &Path, split: Split, out: &Path) -> Result<()> {
    let model = read_checkpoint(checkpoint)?;
    let batch = read_dataset(dataset)?;
    if batch.num_classes() > model.num_classes() {
        return Err(DpsError::Compatibility(format!(
            "dataset has labels up to {} but checkpoint has {} classes",
            batch.num_classes() - 1,
            model.num_classes()
        )));
    }
    let patterns = extract_batch(&model, &batch)?;
    let degenerate = patterns.iter().filter(|p| p.is_degenerate()).count();
    let meta = StoreMeta {
        checkpoint_sha256: sha256_file(checkpoint)?,
        target_layer: model.target_layer_index,
        split: split.name().to_string(),
        extraction_config: "class=ground_truth;normalization=l2".to_string(),
    };
    write_store(out, &patterns, &meta)?;
    println!(
        "extracted {} patterns ({} degenerate) to {}",
        patterns.len(),
        degenerate,
        out.display()
    );
    Ok(())
}

fn cmd_analyze(
    train_store: &Path,
    test_store: &Path,
    out_dir: &Path,
    bins: usize,
    min_class_size: usize,
) -> Result<()> {
    let (train_patterns, k_train) = read_store(train_store)?;
    let (test_patterns, k_test) = read_store(test_store)?;
    if k_train != k_test {
        return Err(DpsError::Compatibility(format!(
            "stores disagree on channel count: {k_train} vs {k_test}"
        )));
    }
    let mut analysis = analyze_patterns(&train_patterns, &test_patterns, bins, min_class_size)?;
    if let Ok(meta) = read_store_meta(train_store) {
        analysis.report.meta.target_layer_index = Some(meta.target_layer);
    }

    std::fs::create_dir_all(out_dir).map_err(|e| DpsError::io(out_dir.display().to_string(), e))?;
    write_sample_csv(&out_dir.join("dps_sample.csv"), &analysis.records)?;
    write_class_csv(&out_dir.join("dps_class.csv"), &analysis.report.per_class)?;
    write_dataset_csv(
        &out_dir.join("dps_dataset.csv"),
        &[(
            "test".to_string(),
            analysis.report.dataset.dps_dataset,
            analysis.report.dataset.mean_gap,
            analysis.report.dataset.n_test_records,
        )],
    )?;
    write_histogram_csv(&out_dir.join("histogram.csv"), &analysis.report.spectrum)?;
    write_report_json(&out_dir.join("report.json"), &analysis.report)?;

    let mut manifest = RunManifest::new(command_line());
    manifest.add_input("train_store", train_store)?;
    manifest.add_input("test_store", test_store)?;
    manifest.write(&out_dir.join("manifest.txt"))?;

    println!("dps_dataset = {}", analysis.report.dataset.dps_dataset);
    println!(
        "excluded_degenerate = {}",
        analysis.report.exclusions.degenerate_test
    );
    println!("wrote report to {}", out_dir.join("report.json").display());
    Ok(())
}

fn cmd_scenario(spec_path: &Path, out_dir: &Path) -> Result<()> {
    let spec = parse_spec(&read_text(spec_path)?)?;
    let outcome = run_scenario(&spec, Some(out_dir))?;

    let mut manifest = RunManifest::new(command_line());
    manifest.add_input("spec", spec_path)?;
    manifest.add_seed("scenario", spec.seed);
    manifest.write(&out_dir.join("manifest.txt"))?;

    println!("scenario = {}", spec.name.as_str());
    println!("train_accuracy = {}", outcome.report.dataset.train_accuracy);
    println!("test_accuracy = {}", outcome.report.dataset.test_accuracy);
    println!("dps_dataset = {}", outcome.report.dataset.dps_dataset);
    if let Some(fit) = &outcome.report.fits.sample {
        println!("sample_r = {}", fit.pearson_r);
    }
    println!("wrote run to {}", out_dir.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::GenData { config, out, seed } => cmd_gen_data(config, out, *seed),
        Command::Train {
            dataset,
            model_config,
            out,
            seed,
        } => cmd_train(dataset, model_config, out, *seed),
        Command::Extract {
            checkpoint,
            dataset,
            split,
            out,
        } => match split.parse::<Split>() {
            Ok(split) => cmd_extract(checkpoint, dataset, split, out),
            Err(err) => Err(err),
        },
        Command::Analyze {
            train_store,
            test_store,
            out_dir,
            bins,
            min_class_size,
        } => cmd_analyze(train_store, test_store, out_dir, *bins, *min_class_size),
        Command::Scenario { spec, out_dir } => cmd_scenario(spec, out_dir),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::FAILURE
        }
    }
}
