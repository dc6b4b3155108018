//! Dataset file: magic "DPSD", u32 N/C/H/W, N*C*H*W f64 pixels, N u32
//! labels. All fields little-endian.

use std::path::Path;

use crate::error::{DpsError, Result};
use crate::io::{read_f64_le, read_u32_le};
use crate::tensor::{Batch, Tensor};

const MAGIC: &[u8; 4] = b"DPSD";

pub fn write_dataset(path: &Path, batch: &Batch) -> Result<()> {
    let shape = batch.images.shape();
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let mut buf = Vec::with_capacity(20 + batch.images.len() * 8 + n * 4);
    buf.extend_from_slice(MAGIC);
    for dim in [n, c, h, w] {
        buf.extend_from_slice(&(dim as u32).to_le_bytes());
    }
    for &v in batch.images.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for &label in &batch.labels {
        buf.extend_from_slice(&label.to_le_bytes());
    }
    std::fs::write(path, &buf).map_err(|e| DpsError::io(path.display().to_string(), e))
}

pub fn read_dataset(path: &Path) -> Result<Batch> {
    let display = path.display().to_string();
    let buf = std::fs::read(path).map_err(|e| DpsError::io(&display, e))?;
    if buf.len() < 20 || &buf[..4] != MAGIC {
        return Err(DpsError::format(&display, "bad magic, not a dataset file"));
    }
    let mut off = 4;
    let n = read_u32_le(&buf, &mut off, &display)? as usize;
    let c = read_u32_le(&buf, &mut off, &display)? as usize;
    let h = read_u32_le(&buf, &mut off, &display)? as usize;
    let w = read_u32_le(&buf, &mut off, &display)? as usize;
    if n == 0 {
        return Err(DpsError::format(&display, "dataset holds zero samples"));
    }
    let count = n * c * h * w;
    let mut pixels = Vec::with_capacity(count);
    for _ in 0..count {
        let v = read_f64_le(&buf, &mut off, &display)?;
        if !v.is_finite() {
            return Err(DpsError::format(&display, "non-finite pixel value"));
        }
        pixels.push(v);
    }
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        labels.push(read_u32_le(&buf, &mut off, &display)?);
    }
    if off != buf.len() {
        return Err(DpsError::format(&display, "trailing bytes after labels"));
    }
    Batch::new(Tensor::new(vec![n, c, h, w], pixels)?, labels)
}
