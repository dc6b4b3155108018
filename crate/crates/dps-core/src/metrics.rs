//! Shift metrics, consistency statistics, regression fits, the loss
//! expansion diagnostic, and spectrum histograms.
//!
//! Aggregations accumulate in sorted key order so results do not depend on
//! input order.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::error::{DpsError, Result};
use crate::pattern::{ClassReference, DecisionPattern, DEGENERATE_NORM_EPS};

/// Cosine similarity of two raw vectors, clamped to [-1, 1] against float
/// drift. Errors when either vector has (near-)zero norm.
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(DpsError::ShapeMismatch {
            expected: format!("{} entries", a.len()),
            found: format!("{} entries", b.len()),
        });
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na <= DEGENERATE_NORM_EPS || nb <= DEGENERATE_NORM_EPS {
        return Err(DpsError::DegeneratePattern(DEGENERATE_NORM_EPS));
    }
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Mean pairwise cosine similarity over all unordered pairs of vectors.
pub fn intra_class_consistency_vectors(vectors: &[&[f64]]) -> Result<f64> {
    let n = vectors.len();
    if n < 2 {
        return Err(DpsError::InsufficientSamples {
            needed: 2,
            have: n,
            context: "intra-class consistency needs at least one pair",
        });
    }
    let mut sum = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            sum += cosine(vectors[i], vectors[j])?;
        }
    }
    Ok(sum / (n * (n - 1) / 2) as f64)
}

/// Consistency over the non-degenerate patterns of one class.
pub fn intra_class_consistency(patterns: &[DecisionPattern], class_index: u32) -> Result<f64> {
    let members: Vec<&[f64]> = patterns
        .iter()
        .filter(|p| p.true_class == class_index && !p.is_degenerate())
        .map(|p| p.pattern.as_slice())
        .collect();
    intra_class_consistency_vectors(&members)
}

/// Maximum similarity of one class reference to any other, with the
/// nearest class reported (smallest index on ties).
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Confusability {
    pub value: f64,
    pub nearest_class: u32,
}

pub fn inter_class_confusability_vectors(
    means: &[(u32, &[f64])],
    class_index: u32,
) -> Result<Confusability> {
    if means.len() < 2 {
        return Err(DpsError::InsufficientClasses(means.len()));
    }
    let own = means
        .iter()
        .find(|(c, _)| *c == class_index)
        .ok_or(DpsError::EmptyClass(class_index as usize))?;
    let mut best: Option<Confusability> = None;
    for (c, v) in means.iter().filter(|(c, _)| *c != class_index) {
        let value = cosine(own.1, v)?;
        let better = match &best {
            None => true,
            Some(b) => value > b.value || (value == b.value && *c < b.nearest_class),
        };
        if better {
            best = Some(Confusability {
                value,
                nearest_class: *c,
            });
        }
    }
    best.ok_or(DpsError::InsufficientClasses(1))
}

pub fn inter_class_confusability(
    refs: &[ClassReference],
    class_index: u32,
) -> Result<Confusability> {
    let means: Vec<(u32, &[f64])> = refs
        .iter()
        .map(|r| (r.class_index, r.mean_pattern.as_slice()))
        .collect();
    inter_class_confusability_vectors(&means, class_index)
}

/// One test sample joined with its shift and generalization gap.
/// `sum_dev` is the raw pattern-sum deviation from the class train mean,
/// exposed alongside the cosine shift for inspection.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DpsRecord {
    pub sample_id: u32,
    pub class_index: u32,
    pub dps: f64,
    pub gen_gap: f64,
    pub loss: f64,
    pub correct: bool,
    pub sum_dev: f64,
}

/// Sample-level shift: 1 - cosine(pattern, class reference mean), in [0, 2].
pub fn dps_sample(p: &DecisionPattern, reference: &ClassReference) -> Result<f64> {
    if p.class_used != reference.class_index {
        return Err(DpsError::ReferenceMismatch {
            pattern_class: p.class_used as usize,
            reference_class: reference.class_index as usize,
        });
    }
    let cos = cosine(&p.pattern, &reference.mean_pattern)?;
    Ok((1.0 - cos).clamp(0.0, 2.0))
}

/// Class-level shift: mean over the class's records.
pub fn dps_class(records: &[DpsRecord], class_index: u32) -> Result<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for r in records.iter().filter(|r| r.class_index == class_index) {
        sum += r.dps;
        n += 1;
    }
    if n == 0 {
        return Err(DpsError::EmptyClass(class_index as usize));
    }
    Ok(sum / n as f64)
}

/// Dataset-level shift: mean over all records.
pub fn dps_dataset(records: &[DpsRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(DpsError::EmptyInput("dataset shift over no records"));
    }
    Ok(records.iter().map(|r| r.dps).sum::<f64>() / records.len() as f64)
}

/// Per-sample generalization gap: test loss minus the class's mean
/// training loss. May be negative.
pub fn gen_gap_sample(loss: f64, class_train_mean_loss: f64) -> f64 {
    loss - class_train_mean_loss
}

/// Pearson correlation and least-squares line.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FitResult {
    pub pearson_r: f64,
    pub slope: f64,
    pub intercept: f64,
    pub n: usize,
    pub p_value_note: String,
}

/// Computes Pearson r, slope, and intercept with a single-pass online
/// co-moment accumulation (tests check it against the two-pass textbook
/// formula).
pub fn pearson_fit(xs: &[f64], ys: &[f64]) -> Result<FitResult> {
    if xs.len() != ys.len() {
        return Err(DpsError::ShapeMismatch {
            expected: format!("{} ys", xs.len()),
            found: format!("{} ys", ys.len()),
        });
    }
    if xs.len() < 3 {
        return Err(DpsError::InsufficientSamples {
            needed: 3,
            have: xs.len(),
            context: "regression fit",
        });
    }
    let mut mean_x = 0.0;
    let mut mean_y = 0.0;
    let mut m2x = 0.0;
    let mut m2y = 0.0;
    let mut cxy = 0.0;
    for (i, (&x, &y)) in xs.iter().zip(ys).enumerate() {
        let n = (i + 1) as f64;
        let dx = x - mean_x;
        mean_x += dx / n;
        let dy = y - mean_y;
        mean_y += dy / n;
        m2x += dx * (x - mean_x);
        m2y += dy * (y - mean_y);
        cxy += dx * (y - mean_y);
    }
    let n = xs.len() as f64;
    let var_x = m2x / n;
    let var_y = m2y / n;
    if var_x <= 1e-15 || var_y <= 1e-15 {
        return Err(DpsError::DegenerateFit(
            "zero variance in one of the variables",
        ));
    }
    let r = cxy / (m2x.sqrt() * m2y.sqrt());
    let slope = cxy / m2x;
    Ok(FitResult {
        pearson_r: r,
        slope,
        intercept: mean_y - slope * mean_x,
        n: xs.len(),
        p_value_note: format!("n={} r={:.6}; significance left to the reader", xs.len(), r),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TaylorSample {
    pub logit_dev: f64,
    pub loss_exact: f64,
    pub loss_taylor2: f64,
}

/// Second-order expansion of the cross-entropy along the true-class logit
/// coordinate, taken around the class's mean training logit.
///
/// Only the true-class logit and the loss are stored per pattern, so the
/// non-target context is folded into one effective logit per sample,
/// `log(sum_{k != c} exp(g_k))`, recovered exactly from (logit, loss). The
/// class reference uses the mean training logit together with the mean
/// effective non-target logit; the resulting reference probability defines
/// the expansion coefficients.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TaylorDiagnostic {
    pub class_index: u32,
    pub mean_logit: f64,
    pub mean_prob: f64,
    pub first_order_coeff: f64,
    pub second_order_coeff: f64,
    pub per_sample: Vec<TaylorSample>,
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Effective non-target logit of a sample: log of the softmax partition
/// excluding the true class, recovered from (logit, loss).
fn effective_rest_logit(logit: f64, loss: f64) -> Option<f64> {
    if loss <= 0.0 {
        return None; // true-class probability is exactly 1 at f64 resolution
    }
    Some(logit + loss.exp_m1().ln())
}

pub fn taylor_diagnostic(
    patterns_train: &[DecisionPattern],
    patterns_test: &[DecisionPattern],
    class_index: u32,
) -> Result<TaylorDiagnostic> {
    let train: Vec<&DecisionPattern> = patterns_train
        .iter()
        .filter(|p| p.true_class == class_index)
        .collect();
    if train.is_empty() {
        return Err(DpsError::EmptyClass(class_index as usize));
    }
    let mean_logit = train.iter().map(|p| p.logit_true_class).sum::<f64>() / train.len() as f64;
    let rest_logits: Vec<f64> = train
        .iter()
        .filter_map(|p| effective_rest_logit(p.logit_true_class, p.loss))
        .collect();
    if rest_logits.is_empty() {
        return Err(DpsError::DegenerateFit(
            "all training losses are zero; reference probability saturates",
        ));
    }
    let mean_rest = rest_logits.iter().sum::<f64>() / rest_logits.len() as f64;
    let diff = mean_rest - mean_logit;
    let neg_log_prob = softplus(diff);
    let mean_prob = (-neg_log_prob).exp();
    let first_order_coeff = mean_prob - 1.0;
    let second_order_coeff = 0.5 * mean_prob * (1.0 - mean_prob);

    let per_sample = patterns_test
        .iter()
        .filter(|p| p.true_class == class_index)
        .map(|p| {
            let dev = p.logit_true_class - mean_logit;
            TaylorSample {
                logit_dev: dev,
                loss_exact: p.loss,
                loss_taylor2: neg_log_prob
                    + first_order_coeff * dev
                    + second_order_coeff * dev * dev,
            }
        })
        .collect();

    Ok(TaylorDiagnostic {
        class_index,
        mean_logit,
        mean_prob,
        first_order_coeff,
        second_order_coeff,
        per_sample,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpectrumSummary {
    pub mean: f64,
    pub median: f64,
    pub fraction_below_0_05: f64,
}

/// Fixed-width histogram of shift values over [0, 2]. Values exactly at 2
/// land in the last bin. `mode_count` counts local maxima of the counts
/// after smoothing with a 3-bin window; it is reported, never asserted.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpectrumHistogram {
    pub bin_edges: Vec<f64>,
    pub counts: Vec<u64>,
    pub total: usize,
    pub summary: SpectrumSummary,
    pub mode_count: usize,
}

pub fn spectrum_histogram(records: &[DpsRecord], num_bins: usize) -> Result<SpectrumHistogram> {
    if records.is_empty() {
        return Err(DpsError::EmptyInput("spectrum over no records"));
    }
    if num_bins < 2 {
        return Err(DpsError::InvalidConfig(format!(
            "need at least 2 bins, got {num_bins}"
        )));
    }
    let bin_edges: Vec<f64> = (0..=num_bins)
        .map(|i| 2.0 * i as f64 / num_bins as f64)
        .collect();
    let mut counts = vec![0u64; num_bins];
    for r in records {
        let idx = ((r.dps / 2.0 * num_bins as f64) as usize).min(num_bins - 1);
        counts[idx] += 1;
    }
    let mut values: Vec<f64> = records.iter().map(|r| r.dps).collect();
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = values.len();
    let median = if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    };
    let summary = SpectrumSummary {
        mean: values.iter().sum::<f64>() / n as f64,
        median,
        fraction_below_0_05: values.iter().filter(|&&v| v < 0.05).count() as f64 / n as f64,
    };
    let smoothed: Vec<f64> = (0..num_bins)
        .map(|i| {
            let lo = i.saturating_sub(1);
            let hi = (i + 1).min(num_bins - 1);
            (lo..=hi).map(|j| counts[j] as f64).sum::<f64>() / (hi - lo + 1) as f64
        })
        .collect();
    let mut mode_count = 0;
    for i in 0..num_bins {
        if smoothed[i] <= 0.0 {
            continue;
        }
        let left_ok = i == 0 || smoothed[i] > smoothed[i - 1];
        let right_ok = i == num_bins - 1 || smoothed[i] > smoothed[i + 1];
        if left_ok && right_ok {
            mode_count += 1;
        }
    }
    Ok(SpectrumHistogram {
        bin_edges,
        counts,
        total: n,
        summary,
        mode_count,
    })
}

/// Joins test patterns with class references and per-class training-loss
/// baselines into shift records. Degenerate patterns are excluded and
/// counted. `train_pattern_sum` maps each class to the mean raw pattern
/// sum of its training samples (feeds `sum_dev`).
pub fn build_records(
    test_patterns: &[DecisionPattern],
    references: &[ClassReference],
    class_train_mean_loss: &BTreeMap<u32, f64>,
    train_pattern_sum: &BTreeMap<u32, f64>,
) -> Result<(Vec<DpsRecord>, usize)> {
    let by_class: BTreeMap<u32, &ClassReference> =
        references.iter().map(|r| (r.class_index, r)).collect();
    let mut ordered: Vec<&DecisionPattern> = test_patterns.iter().collect();
    ordered.sort_by_key(|p| p.sample_id);
    let mut records = Vec::with_capacity(ordered.len());
    let mut excluded = 0usize;
    for p in ordered {
        if p.is_degenerate() {
            excluded += 1;
            continue;
        }
        let reference = by_class.get(&p.class_used).ok_or_else(|| {
            DpsError::Compatibility(format!("no reference for class {}", p.class_used))
        })?;
        let base_loss = class_train_mean_loss.get(&p.true_class).ok_or_else(|| {
            DpsError::Compatibility(format!("no train loss baseline for class {}", p.true_class))
        })?;
        let base_sum = train_pattern_sum.get(&p.true_class).copied().unwrap_or(0.0);
        records.push(DpsRecord {
            sample_id: p.sample_id,
            class_index: p.true_class,
            dps: dps_sample(p, reference)?,
            gen_gap: gen_gap_sample(p.loss, *base_loss),
            loss: p.loss,
            correct: p.predicted_class == p.true_class,
            sum_dev: p.pattern.iter().sum::<f64>() - base_sum,
        });
    }
    Ok((records, excluded))
}
