//! Model description, validation, and seeded initialization.
//!
//! Supported architectures are conv/relu/maxpool stacks that end in exactly
//! [global average pool, linear]. That tail makes the class logit a linear
//! function of whatever tensor feeds the pooling layer, which is what the
//! channel-contribution decomposition in `pattern` relies on.

use crate::error::{DpsError, Result};
use crate::layers::ConvDims;
use crate::rng::Rng;

/// One layer of the network. Conv kernels are square; maxpool is fixed 2x2
/// stride 2; linear is only valid as the final layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LayerSpec {
    Conv {
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    Relu,
    MaxPool,
    GlobalAvgPool,
    Linear {
        out_features: usize,
    },
}

impl LayerSpec {
    pub fn name(&self) -> &'static str {
        match self {
            LayerSpec::Conv { .. } => "conv",
            LayerSpec::Relu => "relu",
            LayerSpec::MaxPool => "maxpool",
            LayerSpec::GlobalAvgPool => "gap",
            LayerSpec::Linear { .. } => "linear",
        }
    }
}

/// A complete trainable model: layer list, parameters, and the index of the
/// conv layer whose output is read out as the attribution target.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelCheckpoint {
    pub input_shape: [usize; 3],
    pub layer_specs: Vec<LayerSpec>,
    /// One flat weight buffer per layer; empty for parameterless layers.
    pub weights: Vec<Vec<f64>>,
    /// One flat bias buffer per layer; empty for parameterless layers.
    pub biases: Vec<Vec<f64>>,
    pub rng_seed: u64,
    pub target_layer_index: usize,
}

impl ModelCheckpoint {
    /// Builds a model with Kaiming fan-in initialized weights and zero
    /// biases, drawn from a generator seeded with `seed`.
    pub fn init(
        input_shape: [usize; 3],
        layer_specs: Vec<LayerSpec>,
        target_layer_index: usize,
        seed: u64,
    ) -> Result<Self> {
        let mut model = ModelCheckpoint {
            input_shape,
            weights: vec![Vec::new(); layer_specs.len()],
            biases: vec![Vec::new(); layer_specs.len()],
            layer_specs,
            rng_seed: seed,
            target_layer_index,
        };
        let shapes = model.layer_output_shapes()?;
        let mut rng = Rng::new(seed);
        for (i, spec) in model.layer_specs.iter().enumerate() {
            let in_shape = if i == 0 {
                model.input_shape.to_vec()
            } else {
                shapes[i - 1].clone()
            };
            match spec {
                LayerSpec::Conv {
                    out_channels,
                    kernel,
                    ..
                } => {
                    let fan_in = in_shape[0] * kernel * kernel;
                    let std = (2.0 / fan_in as f64).sqrt();
                    let n = out_channels * in_shape[0] * kernel * kernel;
                    model.weights[i] = (0..n).map(|_| std * rng.normal()).collect();
                    model.biases[i] = vec![0.0; *out_channels];
                }
                LayerSpec::Linear { out_features } => {
                    let fan_in = in_shape[0];
                    let std = (2.0 / fan_in as f64).sqrt();
                    model.weights[i] = (0..out_features * fan_in)
                        .map(|_| std * rng.normal())
                        .collect();
                    model.biases[i] = vec![0.0; *out_features];
                }
                _ => {}
            }
        }
        model.validate()?;
        Ok(model)
    }

    /// Checks structural rules and parameter buffer lengths.
    pub fn validate(&self) -> Result<()> {
        let n = self.layer_specs.len();
        if n < 2 {
            return Err(DpsError::InvalidModel("need at least [gap, linear]".into()));
        }
        if !matches!(self.layer_specs[n - 2], LayerSpec::GlobalAvgPool) {
            return Err(DpsError::InvalidModel(format!(
                "second-to-last layer must be gap, found {}",
                self.layer_specs[n - 2].name()
            )));
        }
        if !matches!(self.layer_specs[n - 1], LayerSpec::Linear { .. }) {
            return Err(DpsError::InvalidModel(format!(
                "last layer must be linear, found {}",
                self.layer_specs[n - 1].name()
            )));
        }
        for (i, spec) in self.layer_specs.iter().enumerate() {
            let misplaced = match spec {
                LayerSpec::GlobalAvgPool => i != n - 2,
                LayerSpec::Linear { .. } => i != n - 1,
                _ => i >= n - 2,
            };
            if misplaced {
                return Err(DpsError::InvalidModel(format!(
                    "layer {i} ({}) misplaced; only conv/relu/maxpool may precede the gap+linear tail",
                    spec.name()
                )));
            }
        }
        if self.weights.len() != n || self.biases.len() != n {
            return Err(DpsError::InvalidModel(
                "parameter buffer count != layer count".into(),
            ));
        }
        match self.layer_specs.get(self.target_layer_index) {
            Some(LayerSpec::Conv { .. }) => {}
            _ => {
                return Err(DpsError::InvalidModel(format!(
                    "target layer {} is not a conv layer",
                    self.target_layer_index
                )))
            }
        }
        // Shape inference also rejects kernels larger than their input.
        let shapes = self.layer_output_shapes()?;
        for (i, spec) in self.layer_specs.iter().enumerate() {
            let in_shape = if i == 0 {
                self.input_shape.to_vec()
            } else {
                shapes[i - 1].clone()
            };
            let (want_w, want_b) = match spec {
                LayerSpec::Conv {
                    out_channels,
                    kernel,
                    ..
                } => (out_channels * in_shape[0] * kernel * kernel, *out_channels),
                LayerSpec::Linear { out_features } => (out_features * in_shape[0], *out_features),
                _ => (0, 0),
            };
            if self.weights[i].len() != want_w || self.biases[i].len() != want_b {
                return Err(DpsError::InvalidModel(format!(
                    "layer {i} ({}): expected {want_w} weights / {want_b} biases, found {} / {}",
                    spec.name(),
                    self.weights[i].len(),
                    self.biases[i].len()
                )));
            }
        }
        Ok(())
    }

    /// Output shape of every layer, in order. Conv/relu/pool shapes are
    /// [C, H, W]; gap and linear shapes are [C].
    pub fn layer_output_shapes(&self) -> Result<Vec<Vec<usize>>> {
        let mut cur = self.input_shape.to_vec();
        let mut shapes = Vec::with_capacity(self.layer_specs.len());
        for (i, spec) in self.layer_specs.iter().enumerate() {
            cur = match spec {
                LayerSpec::Conv {
                    out_channels,
                    kernel,
                    stride,
                    padding,
                } => {
                    if cur.len() != 3 {
                        return Err(DpsError::InvalidModel(format!(
                            "conv at layer {i} after flattening"
                        )));
                    }
                    let d = ConvDims {
                        in_c: cur[0],
                        in_h: cur[1],
                        in_w: cur[2],
                        out_c: *out_channels,
                        k: *kernel,
                        stride: *stride,
                        pad: *padding,
                    };
                    if *stride == 0 || *kernel == 0 {
                        return Err(DpsError::InvalidModel(format!(
                            "layer {i}: zero kernel or stride"
                        )));
                    }
                    if cur[1] + 2 * padding < *kernel || cur[2] + 2 * padding < *kernel {
                        return Err(DpsError::InvalidModel(format!(
                            "layer {i}: kernel {kernel} too large for input {}x{}",
                            cur[1], cur[2]
                        )));
                    }
                    vec![d.out_c, d.out_h(), d.out_w()]
                }
                LayerSpec::Relu => cur,
                LayerSpec::MaxPool => {
                    if cur.len() != 3 || cur[1] < 2 || cur[2] < 2 {
                        return Err(DpsError::InvalidModel(format!(
                            "maxpool at layer {i} on {cur:?}"
                        )));
                    }
                    vec![cur[0], cur[1] / 2, cur[2] / 2]
                }
                LayerSpec::GlobalAvgPool => {
                    if cur.len() != 3 {
                        return Err(DpsError::InvalidModel(format!(
                            "gap at layer {i} on {cur:?}"
                        )));
                    }
                    vec![cur[0]]
                }
                LayerSpec::Linear { out_features } => {
                    if cur.len() != 1 {
                        return Err(DpsError::InvalidModel(format!(
                            "linear at layer {i} on {cur:?}"
                        )));
                    }
                    vec![*out_features]
                }
            };
            shapes.push(cur.clone());
        }
        Ok(shapes)
    }

    /// Index of the layer whose output is read out as the target
    /// activation. Relu layers immediately following the target conv are
    /// absorbed: the activation map of a conv layer is its post-activation
    /// feature map, which is also what keeps the logit linear in the
    /// activation when the (relu'd) target feeds the pooling head.
    pub fn effective_target_index(&self) -> usize {
        let mut idx = self.target_layer_index;
        while matches!(self.layer_specs.get(idx + 1), Some(LayerSpec::Relu)) {
            idx += 1;
        }
        idx
    }

    /// Shape [K, H, W] of the attribution target activation.
    pub fn target_shape(&self) -> Result<(usize, usize, usize)> {
        let shapes = self.layer_output_shapes()?;
        let s = &shapes[self.effective_target_index()];
        Ok((s[0], s[1], s[2]))
    }

    /// Number of spatial positions H*W at the target layer.
    pub fn target_spatial_size(&self) -> Result<usize> {
        let (_, h, w) = self.target_shape()?;
        Ok(h * w)
    }

    pub fn num_classes(&self) -> usize {
        match self.layer_specs.last() {
            Some(LayerSpec::Linear { out_features }) => *out_features,
            _ => 0,
        }
    }

    /// Index of the final linear layer.
    pub fn head_index(&self) -> usize {
        self.layer_specs.len() - 1
    }

    /// Bias of the classification head for one class.
    pub fn head_bias(&self, class_index: usize) -> Result<f64> {
        let n = self.num_classes();
        if class_index >= n {
            return Err(DpsError::ClassRange {
                class: class_index,
                num_classes: n,
            });
        }
        Ok(self.biases[self.head_index()][class_index])
    }

    pub fn check_class(&self, class_index: usize) -> Result<()> {
        let n = self.num_classes();
        if class_index >= n {
            return Err(DpsError::ClassRange {
                class: class_index,
                num_classes: n,
            });
        }
        Ok(())
    }
}

/// Convenience builder for the standard stack used across the toolkit:
/// repeated [conv, relu, maxpool] blocks, a final [conv, relu] that feeds
/// gap, then the linear head. The final conv is the target layer; its
/// post-relu feature map is what pattern extraction reads.
pub fn conv_stack(
    input_shape: [usize; 3],
    conv_channels: &[usize],
    kernel: usize,
    num_classes: usize,
) -> (Vec<LayerSpec>, usize) {
    let mut specs = Vec::new();
    let pad = kernel / 2;
    let mut target = 0;
    for (i, &ch) in conv_channels.iter().enumerate() {
        specs.push(LayerSpec::Conv {
            out_channels: ch,
            kernel,
            stride: 1,
            padding: pad,
        });
        target = specs.len() - 1;
        specs.push(LayerSpec::Relu);
        if i + 1 < conv_channels.len() {
            specs.push(LayerSpec::MaxPool);
        }
    }
    specs.push(LayerSpec::GlobalAvgPool);
    specs.push(LayerSpec::Linear {
        out_features: num_classes,
    });
    let _ = input_shape;
    (specs, target)
}
