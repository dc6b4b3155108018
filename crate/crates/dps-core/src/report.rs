//! Report assembly and export: one JSON document per run plus plot-ready
//! CSV tables.
//!
//! `analyze_patterns` is the single analysis path shared by the `analyze`
//! command (which reads pattern stores) and the scenario harness (which
//! holds patterns in memory); the harness only decorates the result with
//! information that needs the model, like activation-baseline statistics.

use std::collections::BTreeMap;
use std::path::Path;

use serde::Serialize;

use crate::error::{DpsError, Result};
use crate::metrics::{
    build_records, dps_class, dps_dataset, inter_class_confusability, intra_class_consistency,
    pearson_fit, spectrum_histogram, taylor_diagnostic, Confusability, DpsRecord, FitResult,
    SpectrumHistogram, TaylorDiagnostic,
};
use crate::pattern::{class_references, DecisionPattern, Split};

pub const DEFAULT_HISTOGRAM_BINS: usize = 50;
pub const DEFAULT_MIN_CLASS_SIZE: usize = 2;

const EXPANSION_REFERENCE_NOTE: &str = "loss expansion around the class-mean training logit; \
     reference probability uses the mean effective non-target logit \
     (log of the softmax partition excluding the class), recovered per sample from (logit, loss)";

#[derive(Debug, Clone, Serialize)]
pub struct ScenarioEcho {
    pub name: String,
    pub seed: u64,
    pub severity: Option<u32>,
    pub corruption: Option<String>,
    pub noise_ratio: Option<f64>,
    pub correlation_strength: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ReportMeta {
    pub tool_version: String,
    pub scenario: Option<ScenarioEcho>,
    pub target_layer_index: Option<usize>,
    pub channels: usize,
    pub num_classes: usize,
    pub histogram_bins: usize,
    pub min_class_size: usize,
    pub expansion_reference: String,
    pub sample_table: String,
}

#[derive(Debug, Clone, Copy, Default, Serialize)]
pub struct Exclusions {
    /// Degenerate (zero-norm) patterns among training samples.
    pub degenerate_train: usize,
    /// Degenerate test patterns dropped from records.
    pub degenerate_test: usize,
    /// Classes left out of the class-level fit for having too few test
    /// records.
    pub small_classes_in_fit: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct ClassRow {
    pub class: u32,
    pub n_train: usize,
    pub n_test: usize,
    pub dps_class: f64,
    pub gap_class: f64,
    pub train_mean_loss: f64,
    pub s_intra_train: Option<f64>,
    pub s_intra_test: Option<f64>,
    pub s_inter: Option<Confusability>,
    pub activation_s_intra: Option<f64>,
    pub activation_s_inter: Option<Confusability>,
}

#[derive(Debug, Clone, Serialize)]
pub struct DatasetAggregate {
    pub dps_dataset: f64,
    pub mean_gap: f64,
    pub n_test_records: usize,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    /// min-over-classes intra minus max-over-classes inter, decision side.
    pub decision_margin: Option<f64>,
    /// Same margin on the activation baseline; scenario runs only.
    pub activation_margin: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Fits {
    pub sample: Option<FitResult>,
    pub class: Option<FitResult>,
    pub dataset: Option<FitResult>,
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ShortcutContrast {
    pub correlated_dps: f64,
    pub decorrelated_dps: f64,
    pub ratio: f64,
    pub correlated_accuracy: f64,
    pub decorrelated_accuracy: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct NoiseDegradation {
    pub noise_ratio: f64,
    pub flipped: usize,
    pub r_clean: Option<f64>,
    pub r_noisy: Option<f64>,
    pub delta: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Report {
    pub meta: ReportMeta,
    pub exclusions: Exclusions,
    pub per_class: Vec<ClassRow>,
    pub dataset: DatasetAggregate,
    pub fits: Fits,
    pub taylor: Vec<TaylorDiagnostic>,
    pub spectrum: SpectrumHistogram,
    pub shortcut: Option<ShortcutContrast>,
    pub label_noise: Option<NoiseDegradation>,
}

/// Analysis output: the report plus the raw material other layers pool.
#[derive(Debug, Clone)]
pub struct Analysis {
    pub report: Report,
    pub records: Vec<DpsRecord>,
    /// (class, dps_class, gap_class, n_test) per class with test records.
    pub class_points: Vec<(u32, f64, f64, usize)>,
}

fn accuracy_of(patterns: &[DecisionPattern]) -> f64 {
    if patterns.is_empty() {
        return 0.0;
    }
    patterns
        .iter()
        .filter(|p| p.predicted_class == p.true_class)
        .count() as f64
        / patterns.len() as f64
}

/// Margin over the given (intra, inter) columns: min intra - max inter.
/// None unless every class has both statistics.
pub fn margin(rows: &[(Option<f64>, Option<f64>)]) -> Option<f64> {
    let mut min_intra = f64::INFINITY;
    let mut max_inter = f64::NEG_INFINITY;
    for (intra, inter) in rows {
        min_intra = min_intra.min((*intra)?);
        max_inter = max_inter.max((*inter)?);
    }
    if rows.is_empty() {
        return None;
    }
    Some(min_intra - max_inter)
}

/// Runs the full pattern-space analysis of one train/test pair.
pub fn analyze_patterns(
    train: &[DecisionPattern],
    test: &[DecisionPattern],
    bins: usize,
    min_class_size: usize,
) -> Result<Analysis> {
    if train.is_empty() {
        return Err(DpsError::EmptyInput("no training patterns"));
    }
    if test.is_empty() {
        return Err(DpsError::EmptyInput("no test patterns"));
    }
    let k = train[0].pattern.len();
    if test.iter().chain(train).any(|p| p.pattern.len() != k) {
        return Err(DpsError::Compatibility(
            "train and test stores disagree on channel count".into(),
        ));
    }
    let num_classes = train.iter().map(|p| p.true_class).max().unwrap() as usize + 1;
    if let Some(bad) = test.iter().find(|p| p.true_class as usize >= num_classes) {
        return Err(DpsError::Compatibility(format!(
            "test class {} has no training reference",
            bad.true_class
        )));
    }

    let (references, _) = class_references(train, num_classes, Split::Train)?;
    let degenerate_train = train.iter().filter(|p| p.is_degenerate()).count();

    let mut class_train_mean_loss = BTreeMap::new();
    let mut class_train_pattern_sum = BTreeMap::new();
    for c in 0..num_classes as u32 {
        let members: Vec<&DecisionPattern> = train.iter().filter(|p| p.true_class == c).collect();
        let mean_loss = members.iter().map(|p| p.loss).sum::<f64>() / members.len() as f64;
        class_train_mean_loss.insert(c, mean_loss);
        let valid: Vec<&&DecisionPattern> = members.iter().filter(|p| !p.is_degenerate()).collect();
        if !valid.is_empty() {
            let mean_sum = valid
                .iter()
                .map(|p| p.pattern.iter().sum::<f64>())
                .sum::<f64>()
                / valid.len() as f64;
            class_train_pattern_sum.insert(c, mean_sum);
        }
    }

    let (records, degenerate_test) = build_records(
        test,
        &references,
        &class_train_mean_loss,
        &class_train_pattern_sum,
    )?;
    if records.is_empty() {
        return Err(DpsError::EmptyInput("every test pattern was degenerate"));
    }

    let mut per_class = Vec::with_capacity(num_classes);
    let mut class_points = Vec::new();
    for c in 0..num_classes as u32 {
        let n_test = records.iter().filter(|r| r.class_index == c).count();
        let (dps_c, gap_c) = if n_test > 0 {
            let dps_c = dps_class(&records, c)?;
            let gap_c = records
                .iter()
                .filter(|r| r.class_index == c)
                .map(|r| r.gen_gap)
                .sum::<f64>()
                / n_test as f64;
            class_points.push((c, dps_c, gap_c, n_test));
            (dps_c, gap_c)
        } else {
            (f64::NAN, f64::NAN)
        };
        let s_intra_train = intra_class_consistency(train, c).ok();
        let s_intra_test = intra_class_consistency(test, c).ok();
        let s_inter = inter_class_confusability(&references, c).ok();
        per_class.push(ClassRow {
            class: c,
            n_train: references[c as usize].sample_count,
            n_test,
            dps_class: dps_c,
            gap_class: gap_c,
            train_mean_loss: class_train_mean_loss[&c],
            s_intra_train,
            s_intra_test,
            s_inter,
            activation_s_intra: None,
            activation_s_inter: None,
        });
    }

    let mut notes = Vec::new();
    let fit_sample = {
        let xs: Vec<f64> = records.iter().map(|r| r.dps).collect();
        let ys: Vec<f64> = records.iter().map(|r| r.gen_gap).collect();
        match pearson_fit(&xs, &ys) {
            Ok(fit) => Some(fit),
            Err(DpsError::DegenerateFit(msg)) => {
                notes.push(format!("sample-level fit skipped: {msg}"));
                None
            }
            Err(DpsError::InsufficientSamples { have, .. }) => {
                notes.push(format!("sample-level fit skipped: {have} records < 3"));
                None
            }
            Err(other) => return Err(other),
        }
    };
    let small_classes_in_fit = class_points
        .iter()
        .filter(|(_, _, _, n)| *n < min_class_size)
        .count();
    let fit_class = {
        let usable: Vec<&(u32, f64, f64, usize)> = class_points
            .iter()
            .filter(|(_, _, _, n)| *n >= min_class_size)
            .collect();
        let xs: Vec<f64> = usable.iter().map(|(_, d, _, _)| *d).collect();
        let ys: Vec<f64> = usable.iter().map(|(_, _, g, _)| *g).collect();
        match pearson_fit(&xs, &ys) {
            Ok(fit) => Some(fit),
            Err(DpsError::DegenerateFit(msg)) => {
                notes.push(format!("class-level fit skipped: {msg}"));
                None
            }
            Err(DpsError::InsufficientSamples { have, .. }) => {
                notes.push(format!("class-level fit skipped: {have} class points < 3"));
                None
            }
            Err(other) => return Err(other),
        }
    };
    notes.push("dataset-level fit needs multiple runs; see corruption sweeps".to_string());

    let mut taylor = Vec::with_capacity(num_classes);
    for c in 0..num_classes as u32 {
        taylor.push(taylor_diagnostic(train, test, c)?);
    }

    let spectrum = spectrum_histogram(&records, bins)?;
    let decision_margin = margin(
        &per_class
            .iter()
            .map(|row| (row.s_intra_train, row.s_inter.map(|c| c.value)))
            .collect::<Vec<_>>(),
    );

    let dataset = DatasetAggregate {
        dps_dataset: dps_dataset(&records)?,
        mean_gap: records.iter().map(|r| r.gen_gap).sum::<f64>() / records.len() as f64,
        n_test_records: records.len(),
        train_accuracy: accuracy_of(train),
        test_accuracy: accuracy_of(test),
        decision_margin,
        activation_margin: None,
    };

    let report = Report {
        meta: ReportMeta {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            scenario: None,
            target_layer_index: None,
            channels: k,
            num_classes,
            histogram_bins: bins,
            min_class_size,
            expansion_reference: EXPANSION_REFERENCE_NOTE.to_string(),
            sample_table: "dps_sample.csv".to_string(),
        },
        exclusions: Exclusions {
            degenerate_train,
            degenerate_test,
            small_classes_in_fit,
        },
        per_class,
        dataset,
        fits: Fits {
            sample: fit_sample,
            class: fit_class,
            dataset: None,
            notes,
        },
        taylor,
        spectrum,
        shortcut: None,
        label_noise: None,
    };

    Ok(Analysis {
        report,
        records,
        class_points,
    })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| DpsError::io(path.display().to_string(), e))
}

pub fn write_report_json(path: &Path, report: &Report) -> Result<()> {
    let mut text = serde_json::to_string_pretty(report)
        .map_err(|e| DpsError::Numeric(format!("report serialization failed: {e}")))?;
    text.push('\n');
    write_text(path, &text)
}

pub fn write_sample_csv(path: &Path, records: &[DpsRecord]) -> Result<()> {
    let mut out = String::from("sample_id,class,dps,gen_gap,loss,correct,sum_dev\n");
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.sample_id,
            r.class_index,
            r.dps,
            r.gen_gap,
            r.loss,
            u8::from(r.correct),
            r.sum_dev
        ));
    }
    write_text(path, &out)
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn write_class_csv(path: &Path, rows: &[ClassRow]) -> Result<()> {
    let mut out = String::from(
        "class,n_train,n_test,dps_class,gap_class,train_mean_loss,s_intra_train,s_intra_test,s_inter,nearest_class,activation_s_intra,activation_s_inter\n",
    );
    for row in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}\n",
            row.class,
            row.n_train,
            row.n_test,
            if row.dps_class.is_nan() {
                String::new()
            } else {
                row.dps_class.to_string()
            },
            if row.gap_class.is_nan() {
                String::new()
            } else {
                row.gap_class.to_string()
            },
            row.train_mean_loss,
            opt(row.s_intra_train),
            opt(row.s_intra_test),
            opt(row.s_inter.map(|c| c.value)),
            row.s_inter
                .map(|c| c.nearest_class.to_string())
                .unwrap_or_default(),
            opt(row.activation_s_intra),
            opt(row.activation_s_inter.map(|c| c.value)),
        ));
    }
    write_text(path, &out)
}

/// One row per evaluated split: label, dataset-level shift, mean gap, n.
pub fn write_dataset_csv(path: &Path, rows: &[(String, f64, f64, usize)]) -> Result<()> {
    let mut out = String::from("label,dps_dataset,mean_gap,n\n");
    for (label, dps, gap, n) in rows {
        out.push_str(&format!("{label},{dps},{gap},{n}\n"));
    }
    write_text(path, &out)
}

pub fn write_histogram_csv(path: &Path, hist: &SpectrumHistogram) -> Result<()> {
    let mut out = String::from("bin_lo,bin_hi,count\n");
    for (i, &count) in hist.counts.iter().enumerate() {
        out.push_str(&format!(
            "{},{},{}\n",
            hist.bin_edges[i],
            hist.bin_edges[i + 1],
            count
        ));
    }
    write_text(path, &out)
}
