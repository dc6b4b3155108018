//! File formats: datasets, checkpoints, pattern stores, run manifests.
//!
//! Bulk numerics are little-endian fixed-width binary so round trips are
//! bit-exact; configs and reports stay textual.

pub mod checkpoint;
pub mod dataset;
pub mod manifest;
pub mod store;

pub use checkpoint::{read_checkpoint, write_checkpoint};
pub use dataset::{read_dataset, write_dataset};
pub use manifest::{sha256_file, sha256_hex, RunManifest};
pub use store::{read_store, write_store, StoreMeta};

use crate::error::{DpsError, Result};

pub(crate) fn read_u32_le(buf: &[u8], off: &mut usize, path: &str) -> Result<u32> {
    let end = *off + 4;
    if end > buf.len() {
        return Err(DpsError::format(path, "truncated u32 field"));
    }
    let v = u32::from_le_bytes(buf[*off..end].try_into().unwrap());
    *off = end;
    Ok(v)
}

pub(crate) fn read_f64_le(buf: &[u8], off: &mut usize, path: &str) -> Result<f64> {
    let end = *off + 8;
    if end > buf.len() {
        return Err(DpsError::format(path, "truncated f64 field"));
    }
    let v = f64::from_le_bytes(buf[*off..end].try_into().unwrap());
    *off = end;
    Ok(v)
}
