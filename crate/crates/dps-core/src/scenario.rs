//! Generalization scenario harness.
//!
//! Each scenario trains a model on a synthetic split, extracts class
//! references from the training data, evaluates a test split, and emits
//! the full shift report. The regimes:
//!
//! - `ideal`: clean train/test from the same generator.
//! - `in_distribution`: fewer training samples and hotter jitter.
//! - `domain_shift`: clean training, corrupted test (blur/contrast/noise
//!   at severity 1..=3; severity 0 means the clean split).
//! - `ood`: test rendered with variant primitives of the same classes.
//! - `shortcut`: color-correlated training, decorrelated test, plus a
//!   correlated control split.
//! - `label_noise`: training labels partially scrambled, with a clean
//!   baseline run for comparison of the shift/gap correlation.
//!
//! Every random stage derives a named sub-seed from the scenario seed, so
//! a spec pins all outputs byte-for-byte.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{DpsError, Result};
use crate::io::{sha256_file, write_checkpoint, write_store, StoreMeta};
use crate::metrics::{
    inter_class_confusability_vectors, intra_class_consistency_vectors, Confusability,
};
use crate::model::{conv_stack, ModelCheckpoint};
use crate::pattern::{
    activation_baseline, class_references, extract_batch, normalize_pattern, ClassReference,
    DecisionPattern, Split,
};
use crate::report::{
    analyze_patterns, margin, write_class_csv, write_dataset_csv, write_histogram_csv,
    write_report_json, write_sample_csv, Analysis, NoiseDegradation, Report, ScenarioEcho,
    ShortcutContrast, DEFAULT_HISTOGRAM_BINS, DEFAULT_MIN_CLASS_SIZE,
};
use crate::rng::derive_seed;
use crate::synth::{
    corrupt, gen_colored_digits, gen_shapes, inject_label_noise, CorruptionKind, DatasetKind,
    SyntheticDatasetConfig,
};
use crate::tensor::Batch;
use crate::train::{train, TrainConfig, TrainStats};

// named sub-seed streams of the scenario seed
const STREAM_TRAIN_DATA: u64 = 1;
const STREAM_TEST_DATA: u64 = 2;
const STREAM_MODEL_INIT: u64 = 3;
const STREAM_TRAIN_SHUFFLE: u64 = 4;
const STREAM_CORRUPTION: u64 = 5; // + severity
const STREAM_LABEL_NOISE: u64 = 9;
const STREAM_CORRELATED_TEST: u64 = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScenarioName {
    Ideal,
    InDistribution,
    DomainShift,
    Ood,
    Shortcut,
    LabelNoise,
}

impl ScenarioName {
    pub fn as_str(&self) -> &'static str {
        match self {
            ScenarioName::Ideal => "ideal",
            ScenarioName::InDistribution => "in_distribution",
            ScenarioName::DomainShift => "domain_shift",
            ScenarioName::Ood => "ood",
            ScenarioName::Shortcut => "shortcut",
            ScenarioName::LabelNoise => "label_noise",
        }
    }
}

impl std::str::FromStr for ScenarioName {
    type Err = DpsError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ideal" => Ok(ScenarioName::Ideal),
            "in_distribution" => Ok(ScenarioName::InDistribution),
            "domain_shift" => Ok(ScenarioName::DomainShift),
            "ood" => Ok(ScenarioName::Ood),
            "shortcut" => Ok(ScenarioName::Shortcut),
            "label_noise" => Ok(ScenarioName::LabelNoise),
            other => Err(DpsError::InvalidConfig(format!(
                "unknown scenario '{other}'"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub conv_channels: Vec<usize>,
    pub kernel: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            conv_channels: vec![8, 16, 16],
            kernel: 3,
            epochs: 40,
            lr: 0.05,
            batch_size: 16,
            weight_decay: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioSpec {
    pub name: ScenarioName,
    /// Corruption severity, `domain_shift` only. 0 evaluates the clean
    /// test split; defaults to 3.
    pub severity: Option<u32>,
    /// Corruption kind, `domain_shift` only; defaults to blur.
    pub corruption: Option<CorruptionKind>,
    /// Fraction of scrambled training labels, `label_noise` only;
    /// defaults to 0.2.
    pub noise_ratio: Option<f64>,
    /// Train-time color-label correlation, `shortcut` only; defaults to
    /// 0.95.
    pub correlation_strength: Option<f64>,
    pub seed: u64,
    pub model: ModelConfig,
    pub dataset: SyntheticDatasetConfig,
    pub histogram_bins: usize,
}

impl ScenarioSpec {
    pub fn new(name: ScenarioName, seed: u64) -> Self {
        let mut spec = ScenarioSpec {
            name,
            severity: None,
            corruption: None,
            noise_ratio: None,
            correlation_strength: None,
            seed,
            model: ModelConfig::default(),
            dataset: SyntheticDatasetConfig::default(),
            histogram_bins: DEFAULT_HISTOGRAM_BINS,
        };
        if name == ScenarioName::Shortcut {
            spec.dataset.kind = DatasetKind::ColoredDigits;
            spec.dataset.channels = 3;
        }
        spec
    }

    pub fn validate(&self) -> Result<()> {
        if self.name != ScenarioName::DomainShift {
            if self.severity.is_some() {
                return Err(DpsError::InvalidConfig(format!(
                    "severity only applies to domain_shift, not {}",
                    self.name.as_str()
                )));
            }
            if self.corruption.is_some() {
                return Err(DpsError::InvalidConfig(format!(
                    "corruption only applies to domain_shift, not {}",
                    self.name.as_str()
                )));
            }
        }
        if self.name != ScenarioName::LabelNoise && self.noise_ratio.is_some() {
            return Err(DpsError::InvalidConfig(format!(
                "noise_ratio only applies to label_noise, not {}",
                self.name.as_str()
            )));
        }
        if self.name != ScenarioName::Shortcut && self.correlation_strength.is_some() {
            return Err(DpsError::InvalidConfig(format!(
                "correlation_strength only applies to shortcut, not {}",
                self.name.as_str()
            )));
        }
        if let Some(sev) = self.severity {
            if sev > 3 {
                return Err(DpsError::InvalidConfig(format!(
                    "severity must be 0..=3, got {sev}"
                )));
            }
        }
        if let Some(r) = self.noise_ratio {
            if !(0.0..=1.0).contains(&r) {
                return Err(DpsError::InvalidConfig(format!(
                    "noise_ratio must be in [0,1], got {r}"
                )));
            }
        }
        if let Some(c) = self.correlation_strength {
            if !(0.0..=1.0).contains(&c) {
                return Err(DpsError::InvalidConfig(format!(
                    "correlation_strength must be in [0,1], got {c}"
                )));
            }
        }
        match self.name {
            ScenarioName::Shortcut => {
                if self.dataset.kind != DatasetKind::ColoredDigits || self.dataset.channels != 3 {
                    return Err(DpsError::InvalidConfig(
                        "shortcut needs dataset.kind = colored_digits with channels = 3".into(),
                    ));
                }
            }
            _ => {
                if self.dataset.kind != DatasetKind::Shapes {
                    return Err(DpsError::InvalidConfig(format!(
                        "{} runs on dataset.kind = shapes",
                        self.name.as_str()
                    )));
                }
            }
        }
        if self.histogram_bins < 2 {
            return Err(DpsError::InvalidConfig("bins must be >= 2".into()));
        }
        if self.model.conv_channels.is_empty() {
            return Err(DpsError::InvalidConfig(
                "model needs at least one conv layer".into(),
            ));
        }
        Ok(())
    }

    fn echo(&self) -> ScenarioEcho {
        ScenarioEcho {
            name: self.name.as_str().to_string(),
            seed: self.seed,
            severity: self.severity,
            corruption: self.corruption.map(|c| c.name().to_string()),
            noise_ratio: self.noise_ratio,
            correlation_strength: self.correlation_strength,
        }
    }

    fn test_samples_per_class(&self) -> usize {
        (self.dataset.samples_per_class / 2).max(10)
    }
}

/// Splits a key = value config file with `#` comments into a map.
fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut entries: BTreeMap<String, String> = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(DpsError::InvalidConfig(format!(
                "line {}: expected key = value, got '{line}'",
                lineno + 1
            )));
        };
        entries.insert(key.trim().to_string(), value.trim().to_string());
    }
    Ok(entries)
}

fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse::<T>()
        .map_err(|_| DpsError::InvalidConfig(format!("bad value for {key}: '{value}'")))
}

/// Parses a standalone dataset config file. Returns the config and the
/// optional color-label correlation (colored datasets only).
pub fn parse_dataset_config(text: &str) -> Result<(SyntheticDatasetConfig, Option<f64>)> {
    let mut cfg = SyntheticDatasetConfig::default();
    let mut correlation = None;
    for (key, value) in parse_kv(text)? {
        match key.as_str() {
            "kind" => cfg.kind = value.parse()?,
            "num_classes" => cfg.num_classes = parse_value(&key, &value)?,
            "samples_per_class" => cfg.samples_per_class = parse_value(&key, &value)?,
            "image_size" => cfg.image_size = parse_value(&key, &value)?,
            "channels" => cfg.channels = parse_value(&key, &value)?,
            "jitter" => cfg.jitter = parse_value(&key, &value)?,
            "correlation_strength" => correlation = Some(parse_value(&key, &value)?),
            other => {
                return Err(DpsError::InvalidConfig(format!(
                    "unknown dataset key '{other}'"
                )))
            }
        }
    }
    if correlation.is_some() && cfg.kind != DatasetKind::ColoredDigits {
        return Err(DpsError::InvalidConfig(
            "correlation_strength only applies to colored_digits datasets".into(),
        ));
    }
    Ok((cfg, correlation))
}

/// Parses a standalone model/training config file.
pub fn parse_model_config(text: &str) -> Result<ModelConfig> {
    let mut cfg = ModelConfig::default();
    for (key, value) in parse_kv(text)? {
        match key.as_str() {
            "conv_channels" => {
                cfg.conv_channels = value
                    .split(',')
                    .map(|tok| parse_value::<usize>("conv_channels", tok.trim()))
                    .collect::<Result<Vec<usize>>>()?;
            }
            "kernel" => cfg.kernel = parse_value(&key, &value)?,
            "epochs" => cfg.epochs = parse_value(&key, &value)?,
            "lr" => cfg.lr = parse_value(&key, &value)?,
            "batch_size" => cfg.batch_size = parse_value(&key, &value)?,
            "weight_decay" => cfg.weight_decay = parse_value(&key, &value)?,
            other => {
                return Err(DpsError::InvalidConfig(format!(
                    "unknown model key '{other}'"
                )))
            }
        }
    }
    if cfg.conv_channels.is_empty() {
        return Err(DpsError::InvalidConfig(
            "conv_channels must not be empty".into(),
        ));
    }
    Ok(cfg)
}

/// Parses the key = value scenario spec format. Unknown keys are errors;
/// `#` starts a comment.
pub fn parse_spec(text: &str) -> Result<ScenarioSpec> {
    let mut entries = parse_kv(text)?;
    let name: ScenarioName = entries
        .remove("name")
        .ok_or_else(|| DpsError::InvalidConfig("spec is missing 'name'".into()))?
        .parse()?;
    let seed = match entries.remove("seed") {
        Some(v) => v
            .parse::<u64>()
            .map_err(|_| DpsError::InvalidConfig(format!("bad seed '{v}'")))?,
        None => 0,
    };
    let mut spec = ScenarioSpec::new(name, seed);
    for (key, value) in entries {
        match key.as_str() {
            "severity" => spec.severity = Some(parse_value(&key, &value)?),
            "corruption" => spec.corruption = Some(value.parse()?),
            "noise_ratio" => spec.noise_ratio = Some(parse_value(&key, &value)?),
            "correlation_strength" => spec.correlation_strength = Some(parse_value(&key, &value)?),
            "bins" => spec.histogram_bins = parse_value(&key, &value)?,
            "dataset.kind" => spec.dataset.kind = value.parse()?,
            "dataset.num_classes" => spec.dataset.num_classes = parse_value(&key, &value)?,
            "dataset.samples_per_class" => {
                spec.dataset.samples_per_class = parse_value(&key, &value)?
            }
            "dataset.image_size" => spec.dataset.image_size = parse_value(&key, &value)?,
            "dataset.channels" => spec.dataset.channels = parse_value(&key, &value)?,
            "dataset.jitter" => spec.dataset.jitter = parse_value(&key, &value)?,
            "model.conv_channels" => {
                spec.model.conv_channels = value
                    .split(',')
                    .map(|tok| parse_value::<usize>("model.conv_channels", tok.trim()))
                    .collect::<Result<Vec<usize>>>()?;
            }
            "model.kernel" => spec.model.kernel = parse_value(&key, &value)?,
            "model.epochs" => spec.model.epochs = parse_value(&key, &value)?,
            "model.lr" => spec.model.lr = parse_value(&key, &value)?,
            "model.batch_size" => spec.model.batch_size = parse_value(&key, &value)?,
            "model.weight_decay" => spec.model.weight_decay = parse_value(&key, &value)?,
            other => {
                return Err(DpsError::InvalidConfig(format!(
                    "unknown spec key '{other}'"
                )))
            }
        }
    }
    spec.validate()?;
    Ok(spec)
}

/// Everything derived from the training side of a run.
#[derive(Debug, Clone)]
pub struct TrainedContext {
    pub spec: ScenarioSpec,
    pub model: ModelCheckpoint,
    pub train_batch: Batch,
    pub train_patterns: Vec<DecisionPattern>,
    pub references: Vec<ClassReference>,
    pub train_stats: TrainStats,
    /// Labels flipped by label-noise injection (zero otherwise).
    pub flipped_labels: usize,
    /// Activation-baseline structural statistics per class.
    pub activation_intra: Vec<Option<f64>>,
    pub activation_inter: Vec<Option<Confusability>>,
}

fn train_split_config(spec: &ScenarioSpec) -> SyntheticDatasetConfig {
    let mut cfg = spec.dataset.clone();
    if spec.name == ScenarioName::InDistribution {
        cfg.samples_per_class = (cfg.samples_per_class / 2).max(8);
        cfg.jitter *= 1.75;
    }
    cfg
}

fn test_split_config(spec: &ScenarioSpec) -> SyntheticDatasetConfig {
    let mut cfg = spec.dataset.clone();
    cfg.samples_per_class = spec.test_samples_per_class();
    if spec.name == ScenarioName::InDistribution {
        cfg.jitter *= 1.75;
    }
    if spec.name == ScenarioName::Ood {
        cfg.kind = DatasetKind::ShapesVariant;
    }
    cfg
}

fn generate_train_batch(spec: &ScenarioSpec) -> Result<(Batch, usize)> {
    let cfg = train_split_config(spec);
    let seed = derive_seed(spec.seed, STREAM_TRAIN_DATA);
    match spec.name {
        ScenarioName::Shortcut => {
            let corr = spec.correlation_strength.unwrap_or(0.95);
            Ok((gen_colored_digits(&cfg, corr, seed)?, 0))
        }
        ScenarioName::LabelNoise => {
            let clean = gen_shapes(&cfg, seed)?;
            let ratio = spec.noise_ratio.unwrap_or(0.2);
            let (noisy, mask) =
                inject_label_noise(&clean, ratio, derive_seed(spec.seed, STREAM_LABEL_NOISE))?;
            Ok((noisy, mask.iter().filter(|&&m| m).count()))
        }
        _ => Ok((gen_shapes(&cfg, seed)?, 0)),
    }
}

/// The scenario's main test split (before any corruption).
fn generate_test_batch(spec: &ScenarioSpec) -> Result<Batch> {
    let cfg = test_split_config(spec);
    let seed = derive_seed(spec.seed, STREAM_TEST_DATA);
    match spec.name {
        // shortcut evaluates on fully decorrelated colors
        ScenarioName::Shortcut => gen_colored_digits(&cfg, 0.0, seed),
        _ => gen_shapes(&cfg, seed),
    }
}

/// Per-class intra consistency and inter confusability columns.
type StructureColumns = (Vec<Option<f64>>, Vec<Option<Confusability>>);

/// Activation-space analogue of the pattern statistics: consistency over
/// raw per-sample activation vectors, confusability over normalized class
/// means. Same metric code path, different vector source.
fn activation_structure(
    model: &ModelCheckpoint,
    batch: &Batch,
    num_classes: usize,
) -> Result<StructureColumns> {
    let mut per_class: Vec<Vec<Vec<f64>>> = vec![Vec::new(); num_classes];
    for i in 0..batch.len() {
        let baseline = activation_baseline(model, &batch.sample(i))?;
        per_class[batch.labels[i] as usize].push(baseline.vector);
    }
    let mut intra = Vec::with_capacity(num_classes);
    for vectors in &per_class {
        let refs: Vec<&[f64]> = vectors
            .iter()
            .map(|v| v.as_slice())
            .filter(|v| v.iter().map(|x| x * x).sum::<f64>().sqrt() > 1e-12)
            .collect();
        intra.push(intra_class_consistency_vectors(&refs).ok());
    }
    let mut means: Vec<(u32, Vec<f64>)> = Vec::new();
    for (c, vectors) in per_class.iter().enumerate() {
        let normalized: Vec<Vec<f64>> = vectors
            .iter()
            .filter_map(|v| normalize_pattern(v).ok())
            .collect();
        if normalized.is_empty() {
            continue;
        }
        let dim = normalized[0].len();
        let mut mean = vec![0.0; dim];
        for q in &normalized {
            for (m, v) in mean.iter_mut().zip(q) {
                *m += v;
            }
        }
        for m in &mut mean {
            *m /= normalized.len() as f64;
        }
        means.push((c as u32, mean));
    }
    let borrowed: Vec<(u32, &[f64])> = means.iter().map(|(c, m)| (*c, m.as_slice())).collect();
    let mut inter = Vec::with_capacity(num_classes);
    for c in 0..num_classes as u32 {
        inter.push(inter_class_confusability_vectors(&borrowed, c).ok());
    }
    Ok((intra, inter))
}

/// Generates the training split, trains the model, and extracts the
/// reference side of the run.
pub fn prepare_trained(spec: &ScenarioSpec) -> Result<TrainedContext> {
    spec.validate()?;
    let (train_batch, flipped_labels) = generate_train_batch(spec)?;
    let (c, h, w) = train_batch.sample_shape();
    let (specs, target) = conv_stack(
        [c, h, w],
        &spec.model.conv_channels,
        spec.model.kernel,
        spec.dataset.num_classes,
    );
    let init = ModelCheckpoint::init(
        [c, h, w],
        specs,
        target,
        derive_seed(spec.seed, STREAM_MODEL_INIT),
    )?;
    let cfg = TrainConfig {
        epochs: spec.model.epochs,
        lr: spec.model.lr,
        batch_size: spec.model.batch_size,
        weight_decay: spec.model.weight_decay,
        seed: derive_seed(spec.seed, STREAM_TRAIN_SHUFFLE),
    };
    let (model, train_stats) = train(&init, &train_batch, &cfg)?;
    let train_patterns = extract_batch(&model, &train_batch)?;
    let (references, _) =
        class_references(&train_patterns, spec.dataset.num_classes, Split::Train)?;
    let (activation_intra, activation_inter) =
        activation_structure(&model, &train_batch, spec.dataset.num_classes)?;
    Ok(TrainedContext {
        spec: spec.clone(),
        model,
        train_batch,
        train_patterns,
        references,
        train_stats,
        flipped_labels,
        activation_intra,
        activation_inter,
    })
}

/// One evaluated test split: the analysis plus the extracted patterns
/// (kept so runs can persist them as a store).
#[derive(Debug, Clone)]
pub struct SplitEval {
    pub analysis: Analysis,
    pub test_patterns: Vec<DecisionPattern>,
}

/// Evaluates one test batch against a trained context.
pub fn evaluate_split(ctx: &TrainedContext, test_batch: &Batch) -> Result<SplitEval> {
    let test_patterns = extract_batch(&ctx.model, test_batch)?;
    let mut analysis = analyze_patterns(
        &ctx.train_patterns,
        &test_patterns,
        ctx.spec.histogram_bins,
        DEFAULT_MIN_CLASS_SIZE,
    )?;
    decorate_report(ctx, &mut analysis.report);
    Ok(SplitEval {
        analysis,
        test_patterns,
    })
}

/// Fills in the fields only the harness knows: scenario echo, target
/// layer, activation statistics, and the activation margin.
fn decorate_report(ctx: &TrainedContext, report: &mut Report) {
    report.meta.scenario = Some(ctx.spec.echo());
    report.meta.target_layer_index = Some(ctx.model.target_layer_index);
    for row in report.per_class.iter_mut() {
        let c = row.class as usize;
        row.activation_s_intra = ctx.activation_intra.get(c).copied().flatten();
        row.activation_s_inter = ctx.activation_inter.get(c).copied().flatten();
    }
    report.dataset.activation_margin = margin(
        &report
            .per_class
            .iter()
            .map(|row| {
                (
                    row.activation_s_intra,
                    row.activation_s_inter.map(|c| c.value),
                )
            })
            .collect::<Vec<_>>(),
    );
    // training accuracy from the engine is authoritative (the pattern-side
    // value is identical; keep the engine's to one source)
    report.dataset.train_accuracy = ctx.train_stats.final_train_accuracy;
}

/// A finished scenario run.
#[derive(Debug, Clone)]
pub struct ScenarioOutcome {
    pub report: Report,
    pub analysis: Analysis,
    pub test_patterns: Vec<DecisionPattern>,
    pub context: TrainedContext,
    /// Correlated-control analysis, shortcut runs only.
    pub correlated_control: Option<Analysis>,
    /// Clean-baseline analysis, label-noise runs only.
    pub clean_baseline: Option<Analysis>,
}

/// Runs a scenario end to end. When `out_dir` is given, writes the
/// checkpoint, pattern stores, report, and tabular exports there; nothing
/// is written until the whole computation has succeeded.
pub fn run_scenario(spec: &ScenarioSpec, out_dir: Option<&Path>) -> Result<ScenarioOutcome> {
    spec.validate()?;
    let ctx = prepare_trained(spec)?;
    let clean_test = generate_test_batch(spec)?;

    let main_batch = match spec.name {
        ScenarioName::DomainShift => {
            let severity = spec.severity.unwrap_or(3);
            if severity == 0 {
                clean_test.clone()
            } else {
                corrupt(
                    &clean_test,
                    spec.corruption.unwrap_or(CorruptionKind::Blur),
                    severity,
                    derive_seed(spec.seed, STREAM_CORRUPTION + severity as u64),
                )?
            }
        }
        _ => clean_test.clone(),
    };

    let SplitEval {
        mut analysis,
        test_patterns,
    } = evaluate_split(&ctx, &main_batch)?;

    let mut correlated_control = None;
    let mut clean_baseline = None;

    if spec.name == ScenarioName::Shortcut {
        let corr = spec.correlation_strength.unwrap_or(0.95);
        let cfg = test_split_config(spec);
        let control_batch =
            gen_colored_digits(&cfg, corr, derive_seed(spec.seed, STREAM_CORRELATED_TEST))?;
        let control = evaluate_split(&ctx, &control_batch)?.analysis;
        let correlated_dps = control.report.dataset.dps_dataset;
        let decorrelated_dps = analysis.report.dataset.dps_dataset;
        analysis.report.shortcut = Some(ShortcutContrast {
            correlated_dps,
            decorrelated_dps,
            ratio: decorrelated_dps / correlated_dps,
            correlated_accuracy: control.report.dataset.test_accuracy,
            decorrelated_accuracy: analysis.report.dataset.test_accuracy,
        });
        correlated_control = Some(control);
    }

    if spec.name == ScenarioName::LabelNoise {
        let mut clean_spec = spec.clone();
        clean_spec.noise_ratio = Some(0.0);
        let clean_ctx = prepare_trained(&clean_spec)?;
        let clean = evaluate_split(&clean_ctx, &clean_test)?.analysis;
        let r_clean = clean.report.fits.sample.as_ref().map(|f| f.pearson_r);
        let r_noisy = analysis.report.fits.sample.as_ref().map(|f| f.pearson_r);
        analysis.report.label_noise = Some(NoiseDegradation {
            noise_ratio: spec.noise_ratio.unwrap_or(0.2),
            flipped: ctx.flipped_labels,
            r_clean,
            r_noisy,
            delta: match (r_clean, r_noisy) {
                (Some(c), Some(n)) => Some(c - n),
                _ => None,
            },
        });
        clean_baseline = Some(clean);
    }

    let outcome = ScenarioOutcome {
        report: analysis.report.clone(),
        analysis,
        test_patterns,
        context: ctx,
        correlated_control,
        clean_baseline,
    };

    if let Some(dir) = out_dir {
        write_outputs(&outcome, dir)?;
    }
    Ok(outcome)
}

/// Writes checkpoint, stores, report, and tabular exports for a finished
/// run. The report lands last.
pub fn write_outputs(outcome: &ScenarioOutcome, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| DpsError::io(dir.display().to_string(), e))?;
    let checkpoint_path = dir.join("checkpoint.dpsc");
    write_checkpoint(&checkpoint_path, &outcome.context.model)?;
    let checkpoint_hash = sha256_file(&checkpoint_path)?;
    let extraction_config = "class=ground_truth;normalization=l2".to_string();

    write_store(
        &dir.join("train.dps1"),
        &outcome.context.train_patterns,
        &StoreMeta {
            checkpoint_sha256: checkpoint_hash.clone(),
            target_layer: outcome.context.model.target_layer_index,
            split: "train".into(),
            extraction_config: extraction_config.clone(),
        },
    )?;
    write_store(
        &dir.join("test.dps1"),
        &outcome.test_patterns,
        &StoreMeta {
            checkpoint_sha256: checkpoint_hash,
            target_layer: outcome.context.model.target_layer_index,
            split: "test".into(),
            extraction_config,
        },
    )?;

    write_sample_csv(&dir.join("dps_sample.csv"), &outcome.analysis.records)?;
    write_class_csv(&dir.join("dps_class.csv"), &outcome.report.per_class)?;
    let mut dataset_rows = vec![(
        "test".to_string(),
        outcome.report.dataset.dps_dataset,
        outcome.report.dataset.mean_gap,
        outcome.report.dataset.n_test_records,
    )];
    if let Some(control) = &outcome.correlated_control {
        dataset_rows.push((
            "correlated_control".to_string(),
            control.report.dataset.dps_dataset,
            control.report.dataset.mean_gap,
            control.report.dataset.n_test_records,
        ));
    }
    if let Some(clean) = &outcome.clean_baseline {
        dataset_rows.push((
            "clean_baseline".to_string(),
            clean.report.dataset.dps_dataset,
            clean.report.dataset.mean_gap,
            clean.report.dataset.n_test_records,
        ));
    }
    write_dataset_csv(&dir.join("dps_dataset.csv"), &dataset_rows)?;
    write_histogram_csv(&dir.join("histogram.csv"), &outcome.report.spectrum)?;
    write_report_json(&dir.join("report.json"), &outcome.report)?;
    Ok(())
}

/// Per-severity evaluation of one corruption kind against a single trained
/// context, with fits pooled across severities 0..=3.
#[derive(Debug, Clone)]
pub struct SweepOutput {
    pub kind: CorruptionKind,
    /// Analyses for severities 0, 1, 2, 3 in order.
    pub per_severity: Vec<Analysis>,
    pub pooled_fit_sample: Option<crate::metrics::FitResult>,
    pub pooled_fit_class: Option<crate::metrics::FitResult>,
    pub fit_dataset: Option<crate::metrics::FitResult>,
}

/// Evaluates severities 0..=3 of `kind`, reusing one trained context. The
/// context must come from a clean-shapes spec (ideal or domain_shift).
pub fn run_corruption_sweep(ctx: &TrainedContext, kind: CorruptionKind) -> Result<SweepOutput> {
    let clean_test = generate_test_batch(&ctx.spec)?;
    let mut per_severity = Vec::with_capacity(4);
    let mut pooled_samples: Vec<(f64, f64)> = Vec::new();
    let mut pooled_classes: Vec<(f64, f64)> = Vec::new();
    let mut dataset_points: Vec<(f64, f64)> = Vec::new();
    for severity in 0..=3u32 {
        let batch = if severity == 0 {
            clean_test.clone()
        } else {
            corrupt(
                &clean_test,
                kind,
                severity,
                derive_seed(ctx.spec.seed, STREAM_CORRUPTION + severity as u64),
            )?
        };
        let analysis = evaluate_split(ctx, &batch)?.analysis;
        for r in &analysis.records {
            pooled_samples.push((r.dps, r.gen_gap));
        }
        for (_, dps, gap, _) in &analysis.class_points {
            pooled_classes.push((*dps, *gap));
        }
        dataset_points.push((
            analysis.report.dataset.dps_dataset,
            analysis.report.dataset.mean_gap,
        ));
        per_severity.push(analysis);
    }
    let fit = |points: &[(f64, f64)]| {
        let xs: Vec<f64> = points.iter().map(|(x, _)| *x).collect();
        let ys: Vec<f64> = points.iter().map(|(_, y)| *y).collect();
        crate::metrics::pearson_fit(&xs, &ys).ok()
    };
    Ok(SweepOutput {
        kind,
        pooled_fit_sample: fit(&pooled_samples),
        pooled_fit_class: fit(&pooled_classes),
        fit_dataset: fit(&dataset_points),
        per_severity,
    })
}
