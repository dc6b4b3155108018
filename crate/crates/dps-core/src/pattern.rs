//! Channel-contribution decision patterns.
//!
//! For a sample and class c, the pattern entry for channel k is
//! `w_k * gap_k`, where `gap_k` is the spatial mean of the target-layer
//! activation of channel k and `w_k` is the spatial mean of the gradient of
//! the class-c logit with respect to that activation map. No rectification
//! is applied to pattern entries: negative channel contributions are
//! evidence against the class and are kept. With a gap+linear head sitting
//! directly on the target layer, the pattern sums to (logit - bias) / Z
//! exactly, which `faithfulness_residual` checks.

use crate::engine::{argmax, cross_entropy, forward_trace, grad_wrt_activation};
use crate::error::{DpsError, Result};
use crate::model::ModelCheckpoint;
use crate::tensor::{Batch, Tensor};

/// Norm threshold below which a pattern is treated as degenerate.
pub const DEGENERATE_NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = DpsError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(DpsError::InvalidConfig(format!("unknown split '{other}'"))),
        }
    }
}

/// Per-sample channel-contribution vector with prediction metadata.
///
/// `normalized` is `None` when the raw pattern has (near-)zero norm; such
/// patterns are excluded from references and aggregates, with counts
/// surfaced wherever that happens.
#[derive(Debug, Clone, PartialEq)]
pub struct DecisionPattern {
    pub sample_id: u32,
    pub true_class: u32,
    pub predicted_class: u32,
    /// The class whose logit the pattern was extracted for.
    pub class_used: u32,
    pub pattern: Vec<f64>,
    pub normalized: Option<Vec<f64>>,
    /// Logit of `class_used`.
    pub logit_true_class: f64,
    /// Cross-entropy of the sample against `true_class`.
    pub loss: f64,
}

impl DecisionPattern {
    pub fn is_degenerate(&self) -> bool {
        self.normalized.is_none()
    }

    /// Recomputes the normalized field from the raw pattern.
    pub fn with_recomputed_normalization(mut self) -> Self {
        self.normalized = normalize_pattern(&self.pattern).ok();
        self
    }
}

/// Mean of the normalized patterns of one class, used as the reference
/// against which shifts are measured. Not re-normalized after averaging, so
/// its norm is at most 1.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassReference {
    pub class_index: u32,
    pub mean_pattern: Vec<f64>,
    pub sample_count: usize,
    pub source_split: Split,
}

/// Class-agnostic per-channel spatial means of the target activation.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationBaseline {
    pub sample_id: u32,
    pub vector: Vec<f64>,
}

/// l2-normalizes a pattern vector. Errors when the norm is below
/// `DEGENERATE_NORM_EPS`.
pub fn normalize_pattern(p: &[f64]) -> Result<Vec<f64>> {
    let norm = p.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm <= DEGENERATE_NORM_EPS {
        return Err(DpsError::DegeneratePattern(DEGENERATE_NORM_EPS));
    }
    Ok(p.iter().map(|v| v / norm).collect())
}

fn spatial_means(activation: &Tensor) -> Result<Vec<f64>> {
    let (k, h, w) = activation.dims3()?;
    let z = (h * w) as f64;
    Ok((0..k)
        .map(|ch| {
            activation.data()[ch * h * w..(ch + 1) * h * w]
                .iter()
                .sum::<f64>()
                / z
        })
        .collect())
}

/// Extracts the decision pattern of `x` for `class_index`. The class is
/// also recorded as the sample's true class; batch pipelines pass the
/// ground-truth label here and fix up `sample_id` themselves.
pub fn extract_pattern(
    model: &ModelCheckpoint,
    x: &Tensor,
    class_index: usize,
) -> Result<DecisionPattern> {
    model.check_class(class_index)?;
    let trace = forward_trace(model, x)?;
    let logits = trace.logits().data().to_vec();
    let activation = trace.layer_output(model.effective_target_index());
    let gap = spatial_means(activation)?;
    let grad = grad_wrt_activation(model, x, class_index)?;
    let channel_weights = spatial_means(&grad)?;
    let pattern: Vec<f64> = channel_weights
        .iter()
        .zip(&gap)
        .map(|(w, a)| w * a)
        .collect();
    let normalized = normalize_pattern(&pattern).ok();
    Ok(DecisionPattern {
        sample_id: 0,
        true_class: class_index as u32,
        predicted_class: argmax(&logits) as u32,
        class_used: class_index as u32,
        logit_true_class: logits[class_index],
        loss: cross_entropy(&logits, class_index)?,
        pattern,
        normalized,
    })
}

/// Extracts one pattern per batch sample using the ground-truth label as
/// the extraction class. Sample ids are batch positions.
pub fn extract_batch(model: &ModelCheckpoint, batch: &Batch) -> Result<Vec<DecisionPattern>> {
    if batch.is_empty() {
        return Err(DpsError::EmptyInput("pattern extraction over empty batch"));
    }
    if batch.num_classes() > model.num_classes() {
        return Err(DpsError::Compatibility(format!(
            "dataset has labels up to {} but model has {} classes",
            batch.num_classes() - 1,
            model.num_classes()
        )));
    }
    let mut out = Vec::with_capacity(batch.len());
    for i in 0..batch.len() {
        let mut dp = extract_pattern(model, &batch.sample(i), batch.labels[i] as usize)?;
        dp.sample_id = i as u32;
        out.push(dp);
    }
    Ok(out)
}

/// Builds the class reference from all non-degenerate patterns whose
/// `true_class` matches. Accumulation runs in sample_id order regardless of
/// input order. Returns the reference and the count of skipped degenerate
/// patterns.
pub fn class_reference(
    patterns: &[DecisionPattern],
    class_index: u32,
    source_split: Split,
) -> Result<(ClassReference, usize)> {
    let mut members: Vec<&DecisionPattern> = patterns
        .iter()
        .filter(|p| p.true_class == class_index)
        .collect();
    if members.is_empty() {
        return Err(DpsError::EmptyClass(class_index as usize));
    }
    members.sort_by_key(|p| p.sample_id);
    let skipped = members.iter().filter(|p| p.is_degenerate()).count();
    let valid: Vec<&DecisionPattern> = members.into_iter().filter(|p| !p.is_degenerate()).collect();
    if valid.is_empty() {
        return Err(DpsError::EmptyClass(class_index as usize));
    }
    let dim = valid[0].pattern.len();
    let mut mean = vec![0.0; dim];
    for p in &valid {
        let q = p.normalized.as_ref().expect("filtered to non-degenerate");
        for (m, v) in mean.iter_mut().zip(q) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= valid.len() as f64;
    }
    Ok((
        ClassReference {
            class_index,
            mean_pattern: mean,
            sample_count: valid.len(),
            source_split,
        },
        skipped,
    ))
}

/// References for classes 0..num_classes. Errors if any class is empty.
/// Returns the references and the total skipped-degenerate count.
pub fn class_references(
    patterns: &[DecisionPattern],
    num_classes: usize,
    source_split: Split,
) -> Result<(Vec<ClassReference>, usize)> {
    let mut refs = Vec::with_capacity(num_classes);
    let mut skipped = 0;
    for c in 0..num_classes {
        let (r, s) = class_reference(patterns, c as u32, source_split)?;
        refs.push(r);
        skipped += s;
    }
    Ok((refs, skipped))
}

/// Per-channel spatial means of the target activation; independent of any
/// class index.
pub fn activation_baseline(model: &ModelCheckpoint, x: &Tensor) -> Result<ActivationBaseline> {
    let trace = forward_trace(model, x)?;
    let vector = spatial_means(trace.layer_output(model.effective_target_index()))?;
    Ok(ActivationBaseline {
        sample_id: 0,
        vector,
    })
}

/// Rectified spatial saliency map: relu over the channel-weighted sum of
/// activation maps. Exported for inspection only; no metric consumes it.
pub fn gradcam_map(model: &ModelCheckpoint, x: &Tensor, class_index: usize) -> Result<Tensor> {
    model.check_class(class_index)?;
    let trace = forward_trace(model, x)?;
    let activation = trace.layer_output(model.effective_target_index());
    let grad = grad_wrt_activation(model, x, class_index)?;
    let channel_weights = spatial_means(&grad)?;
    let (_, h, w) = activation.dims3()?;
    let mut map = vec![0.0; h * w];
    for (ch, &wk) in channel_weights.iter().enumerate() {
        let plane = &activation.data()[ch * h * w..(ch + 1) * h * w];
        for (m, &a) in map.iter_mut().zip(plane) {
            *m += wk * a;
        }
    }
    for v in &mut map {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    Tensor::new(vec![h, w], map)
}

/// |Z * sum(pattern) + bias_c - logit_c|. Zero (to rounding) whenever the
/// target layer feeds the gap+linear head directly, because the logit is
/// then a linear function of the target activation.
pub fn faithfulness_residual(dp: &DecisionPattern, model: &ModelCheckpoint) -> Result<f64> {
    let z = model.target_spatial_size()? as f64;
    let bias = model.head_bias(dp.class_used as usize)?;
    let sum: f64 = dp.pattern.iter().sum();
    Ok((z * sum + bias - dp.logit_true_class).abs())
}
