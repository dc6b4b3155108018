//! Dense row-major tensors and labeled image batches.

use crate::error::{DpsError, Result};

/// Dense N-dimensional array of f64 with shape metadata, row-major layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(DpsError::ShapeMismatch {
                expected: format!("{expected} elements for shape {shape:?}"),
                found: format!("{} elements", data.len()),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; len],
        }
    }

    pub fn scalar_shape_1(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Expects shape [C, H, W] and returns (C, H, W).
    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        match self.shape.as_slice() {
            &[c, h, w] => Ok((c, h, w)),
            other => Err(DpsError::ShapeMismatch {
                expected: "[C, H, W]".to_string(),
                found: format!("{other:?}"),
            }),
        }
    }
}

/// Labeled image batch: images [N, C, H, W] plus one class index per image.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub images: Tensor,
    pub labels: Vec<u32>,
}

impl Batch {
    pub fn new(images: Tensor, labels: Vec<u32>) -> Result<Self> {
        let &[n, _, _, _] = images.shape() else {
            return Err(DpsError::ShapeMismatch {
                expected: "[N, C, H, W]".to_string(),
                found: format!("{:?}", images.shape()),
            });
        };
        if n == 0 {
            return Err(DpsError::EmptyInput("batch with zero samples"));
        }
        if labels.len() != n {
            return Err(DpsError::ShapeMismatch {
                expected: format!("{n} labels"),
                found: format!("{}", labels.len()),
            });
        }
        Ok(Batch { images, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// (C, H, W) of a single sample.
    pub fn sample_shape(&self) -> (usize, usize, usize) {
        let s = self.images.shape();
        (s[1], s[2], s[3])
    }

    /// Number of classes implied by the labels (max label + 1).
    pub fn num_classes(&self) -> usize {
        self.labels
            .iter()
            .copied()
            .max()
            .map_or(0, |m| m as usize + 1)
    }

    /// Copies sample `i` out as a [C, H, W] tensor.
    pub fn sample(&self, i: usize) -> Tensor {
        let (c, h, w) = self.sample_shape();
        let stride = c * h * w;
        let start = i * stride;
        Tensor {
            shape: vec![c, h, w],
            data: self.images.data()[start..start + stride].to_vec(),
        }
    }
}
