//! Pattern store: magic "DPS1", u32 format version, u32 K, u32 N, then N
//! records of {u32 sample_id, u32 true_class, u32 predicted_class,
//! u32 class_used, f64 logit, f64 loss, f64xK pattern}. Normalized vectors
//! are recomputed on load, never stored. A text sidecar at `<path>.meta`
//! records provenance.

use std::path::{Path, PathBuf};

use crate::error::{DpsError, Result};
use crate::io::{read_f64_le, read_u32_le};
use crate::pattern::DecisionPattern;

const MAGIC: &[u8; 4] = b"DPS1";
const FORMAT_VERSION: u32 = 1;

/// Provenance recorded next to a pattern store.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StoreMeta {
    pub checkpoint_sha256: String,
    pub target_layer: usize,
    pub split: String,
    pub extraction_config: String,
}

pub fn sidecar_path(store_path: &Path) -> PathBuf {
    let mut name = store_path.file_name().unwrap_or_default().to_os_string();
    name.push(".meta");
    store_path.with_file_name(name)
}

pub fn write_store(path: &Path, patterns: &[DecisionPattern], meta: &StoreMeta) -> Result<()> {
    let display = path.display().to_string();
    if patterns.is_empty() {
        return Err(DpsError::EmptyInput(
            "writing a pattern store with no records",
        ));
    }
    let k = patterns[0].pattern.len();
    if patterns.iter().any(|p| p.pattern.len() != k) {
        return Err(DpsError::Compatibility(
            "patterns disagree on channel count".into(),
        ));
    }
    let mut buf = Vec::with_capacity(16 + patterns.len() * (16 + 16 + 8 * k));
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(k as u32).to_le_bytes());
    buf.extend_from_slice(&(patterns.len() as u32).to_le_bytes());
    for p in patterns {
        buf.extend_from_slice(&p.sample_id.to_le_bytes());
        buf.extend_from_slice(&p.true_class.to_le_bytes());
        buf.extend_from_slice(&p.predicted_class.to_le_bytes());
        buf.extend_from_slice(&p.class_used.to_le_bytes());
        buf.extend_from_slice(&p.logit_true_class.to_le_bytes());
        buf.extend_from_slice(&p.loss.to_le_bytes());
        for &v in &p.pattern {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::write(path, &buf).map_err(|e| DpsError::io(&display, e))?;

    let sidecar = format!(
        "checkpoint_sha256 = {}\ntarget_layer = {}\nsplit = {}\nextraction_config = {}\n",
        meta.checkpoint_sha256, meta.target_layer, meta.split, meta.extraction_config
    );
    let sc_path = sidecar_path(path);
    std::fs::write(&sc_path, sidecar).map_err(|e| DpsError::io(sc_path.display().to_string(), e))
}

/// Loads a store; returns the patterns (normalized fields recomputed) and
/// the channel count K.
pub fn read_store(path: &Path) -> Result<(Vec<DecisionPattern>, usize)> {
    let display = path.display().to_string();
    let buf = std::fs::read(path).map_err(|e| DpsError::io(&display, e))?;
    if buf.len() < 16 || &buf[..4] != MAGIC {
        return Err(DpsError::format(&display, "bad magic, not a pattern store"));
    }
    let mut off = 4;
    let version = read_u32_le(&buf, &mut off, &display)?;
    if version != FORMAT_VERSION {
        return Err(DpsError::format(
            &display,
            format!("unsupported store version {version}"),
        ));
    }
    let k = read_u32_le(&buf, &mut off, &display)? as usize;
    let n = read_u32_le(&buf, &mut off, &display)? as usize;
    let mut patterns = Vec::with_capacity(n);
    for _ in 0..n {
        let sample_id = read_u32_le(&buf, &mut off, &display)?;
        let true_class = read_u32_le(&buf, &mut off, &display)?;
        let predicted_class = read_u32_le(&buf, &mut off, &display)?;
        let class_used = read_u32_le(&buf, &mut off, &display)?;
        let logit_true_class = read_f64_le(&buf, &mut off, &display)?;
        let loss = read_f64_le(&buf, &mut off, &display)?;
        let mut pattern = Vec::with_capacity(k);
        for _ in 0..k {
            pattern.push(read_f64_le(&buf, &mut off, &display)?);
        }
        patterns.push(
            DecisionPattern {
                sample_id,
                true_class,
                predicted_class,
                class_used,
                pattern,
                normalized: None,
                logit_true_class,
                loss,
            }
            .with_recomputed_normalization(),
        );
    }
    if off != buf.len() {
        return Err(DpsError::format(&display, "trailing bytes after records"));
    }
    Ok((patterns, k))
}

pub fn read_store_meta(path: &Path) -> Result<StoreMeta> {
    let sc_path = sidecar_path(path);
    let display = sc_path.display().to_string();
    let text = std::fs::read_to_string(&sc_path).map_err(|e| DpsError::io(&display, e))?;
    let mut meta = StoreMeta {
        checkpoint_sha256: String::new(),
        target_layer: 0,
        split: String::new(),
        extraction_config: String::new(),
    };
    for line in text.lines() {
        let Some((key, value)) = line.split_once('=') else {
            continue;
        };
        let value = value.trim();
        match key.trim() {
            "checkpoint_sha256" => meta.checkpoint_sha256 = value.to_string(),
            "target_layer" => {
                meta.target_layer = value
                    .parse()
                    .map_err(|_| DpsError::format(&display, "bad target_layer"))?
            }
            "split" => meta.split = value.to_string(),
            "extraction_config" => meta.extraction_config = value.to_string(),
            _ => {}
        }
    }
    Ok(meta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn meta() -> StoreMeta {
        StoreMeta {
            checkpoint_sha256: "abc123".into(),
            target_layer: 4,
            split: "train".into(),
            extraction_config: "class=ground_truth".into(),
        }
    }

    fn random_patterns(n: usize, k: usize, seed: u64) -> Vec<DecisionPattern> {
        let mut rng = Rng::new(seed);
        (0..n)
            .map(|i| {
                DecisionPattern {
                    sample_id: i as u32,
                    true_class: rng.below(4) as u32,
                    predicted_class: rng.below(4) as u32,
                    class_used: rng.below(4) as u32,
                    pattern: (0..k).map(|_| rng.range(-1.0, 1.0)).collect(),
                    normalized: None,
                    logit_true_class: rng.range(-3.0, 3.0),
                    loss: rng.range(0.0, 2.0),
                }
                .with_recomputed_normalization()
            })
            .collect()
    }

    #[test]
    fn round_trip_is_bit_exact_and_recomputes_normalization() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("patterns.dps1");
        let patterns = random_patterns(17, 6, 5);
        write_store(&path, &patterns, &meta()).unwrap();
        let (loaded, k) = read_store(&path).unwrap();
        assert_eq!(k, 6);
        assert_eq!(loaded.len(), patterns.len());
        for (a, b) in loaded.iter().zip(&patterns) {
            assert_eq!(a.sample_id, b.sample_id);
            assert_eq!(a.true_class, b.true_class);
            assert_eq!(a.predicted_class, b.predicted_class);
            assert_eq!(a.class_used, b.class_used);
            assert_eq!(a.logit_true_class.to_bits(), b.logit_true_class.to_bits());
            assert_eq!(a.loss.to_bits(), b.loss.to_bits());
            for (x, y) in a.pattern.iter().zip(&b.pattern) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
            assert_eq!(a.normalized.is_some(), b.normalized.is_some());
        }

        let loaded_meta = read_store_meta(&path).unwrap();
        assert_eq!(loaded_meta, meta());
    }

    #[test]
    fn degenerate_patterns_survive_the_round_trip_flagged() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("patterns.dps1");
        let mut patterns = random_patterns(2, 3, 6);
        patterns[1].pattern = vec![0.0; 3];
        patterns[1].normalized = None;
        write_store(&path, &patterns, &meta()).unwrap();
        let (loaded, _) = read_store(&path).unwrap();
        assert!(loaded[0].normalized.is_some());
        assert!(loaded[1].normalized.is_none());
    }

    #[test]
    fn rejects_mixed_dims_truncation_and_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("patterns.dps1");
        let mut patterns = random_patterns(3, 4, 7);
        patterns[2].pattern.pop();
        assert!(write_store(&path, &patterns, &meta()).is_err());

        let patterns = random_patterns(3, 4, 7);
        write_store(&path, &patterns, &meta()).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
        assert!(matches!(read_store(&path), Err(DpsError::Format { .. })));

        std::fs::write(&path, b"XXXX0000").unwrap();
        assert!(matches!(read_store(&path), Err(DpsError::Format { .. })));
    }
}
