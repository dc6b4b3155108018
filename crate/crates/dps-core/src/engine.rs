//! Forward/backward execution of a model on single samples.
//!
//! All functions here are pure in (model, input); nothing is cached across
//! calls, so they can be invoked concurrently per sample.

use crate::error::{DpsError, Result};
use crate::layers;
use crate::model::{LayerSpec, ModelCheckpoint};
use crate::tensor::{Batch, Tensor};

/// Values flowing through the network: `values[0]` is the input,
/// `values[i + 1]` is the output of layer `i`.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub values: Vec<Tensor>,
}

impl ForwardTrace {
    pub fn logits(&self) -> &Tensor {
        self.values.last().expect("trace has at least the input")
    }

    pub fn layer_output(&self, layer_index: usize) -> &Tensor {
        &self.values[layer_index + 1]
    }
}

/// Per-layer parameter gradients, same buffer layout as the checkpoint.
#[derive(Debug, Clone)]
pub struct ParamGrads {
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

impl ParamGrads {
    pub fn zeros_like(model: &ModelCheckpoint) -> Self {
        ParamGrads {
            weights: model.weights.iter().map(|w| vec![0.0; w.len()]).collect(),
            biases: model.biases.iter().map(|b| vec![0.0; b.len()]).collect(),
        }
    }
}

fn check_input_shape(model: &ModelCheckpoint, x: &Tensor) -> Result<()> {
    if x.shape() != model.input_shape {
        return Err(DpsError::ShapeMismatch {
            expected: format!("{:?}", model.input_shape),
            found: format!("{:?}", x.shape()),
        });
    }
    Ok(())
}

fn conv_dims(spec: &LayerSpec, in_shape: &[usize]) -> layers::ConvDims {
    match spec {
        LayerSpec::Conv {
            out_channels,
            kernel,
            stride,
            padding,
        } => layers::ConvDims {
            in_c: in_shape[0],
            in_h: in_shape[1],
            in_w: in_shape[2],
            out_c: *out_channels,
            k: *kernel,
            stride: *stride,
            pad: *padding,
        },
        _ => unreachable!("conv_dims on non-conv layer"),
    }
}

fn apply_layer(model: &ModelCheckpoint, i: usize, input: &Tensor) -> Result<Tensor> {
    let spec = &model.layer_specs[i];
    let out = match spec {
        LayerSpec::Conv { .. } => {
            let d = conv_dims(spec, input.shape());
            let data = layers::conv_forward(input.data(), &model.weights[i], &model.biases[i], &d);
            Tensor::new(vec![d.out_c, d.out_h(), d.out_w()], data)?
        }
        LayerSpec::Relu => Tensor::new(input.shape().to_vec(), layers::relu_forward(input.data()))?,
        LayerSpec::MaxPool => {
            let (c, h, w) = input.dims3()?;
            Tensor::new(
                vec![c, h / 2, w / 2],
                layers::maxpool2_forward(input.data(), c, h, w),
            )?
        }
        LayerSpec::GlobalAvgPool => {
            let (c, h, w) = input.dims3()?;
            Tensor::new(vec![c], layers::gap_forward(input.data(), c, h, w))?
        }
        LayerSpec::Linear { out_features } => {
            let in_f = input.len();
            let data = layers::linear_forward(
                input.data(),
                &model.weights[i],
                &model.biases[i],
                in_f,
                *out_features,
            );
            Tensor::new(vec![*out_features], data)?
        }
    };
    debug_assert!(out.all_finite(), "non-finite output at layer {i}");
    Ok(out)
}

/// Runs the full network, keeping every intermediate tensor.
pub fn forward_trace(model: &ModelCheckpoint, x: &Tensor) -> Result<ForwardTrace> {
    check_input_shape(model, x)?;
    let mut values = Vec::with_capacity(model.layer_specs.len() + 1);
    values.push(x.clone());
    for i in 0..model.layer_specs.len() {
        let out = apply_layer(model, i, values.last().unwrap())?;
        values.push(out);
    }
    Ok(ForwardTrace { values })
}

/// Returns (logits, activation at the target layer). The activation is
/// the post-relu feature map of the target conv layer.
pub fn forward(model: &ModelCheckpoint, x: &Tensor) -> Result<(Tensor, Tensor)> {
    let trace = forward_trace(model, x)?;
    let activation = trace.layer_output(model.effective_target_index()).clone();
    Ok((trace.logits().clone(), activation))
}

/// Runs only the layers after `layer_index`, starting from a given
/// activation for that layer. Used to treat the network tail as a function
/// of the target activation.
pub fn forward_from(
    model: &ModelCheckpoint,
    layer_index: usize,
    activation: &Tensor,
) -> Result<Tensor> {
    let mut cur = activation.clone();
    for i in (layer_index + 1)..model.layer_specs.len() {
        cur = apply_layer(model, i, &cur)?;
    }
    Ok(cur)
}

/// Backpropagates `grad_logits` through the network. When `param_grads` is
/// given, accumulates parameter gradients into it. When `stop_layer` is
/// given, returns the gradient with respect to that layer's OUTPUT without
/// descending further; otherwise returns the gradient at the network input.
pub fn backprop(
    model: &ModelCheckpoint,
    trace: &ForwardTrace,
    grad_logits: &Tensor,
    mut param_grads: Option<&mut ParamGrads>,
    stop_layer: Option<usize>,
) -> Result<Tensor> {
    let mut grad = grad_logits.clone();
    let stop_after = stop_layer.map(|s| s + 1).unwrap_or(0);
    for i in (stop_after..model.layer_specs.len()).rev() {
        let input = &trace.values[i];
        let spec = &model.layer_specs[i];
        grad = match spec {
            LayerSpec::Conv { .. } => {
                let d = conv_dims(spec, input.shape());
                let (gx, gw, gb) =
                    layers::conv_backward(input.data(), &model.weights[i], &d, grad.data());
                if let Some(pg) = param_grads.as_deref_mut() {
                    for (a, b) in pg.weights[i].iter_mut().zip(&gw) {
                        *a += b;
                    }
                    for (a, b) in pg.biases[i].iter_mut().zip(&gb) {
                        *a += b;
                    }
                }
                Tensor::new(input.shape().to_vec(), gx)?
            }
            LayerSpec::Relu => Tensor::new(
                input.shape().to_vec(),
                layers::relu_backward(input.data(), grad.data()),
            )?,
            LayerSpec::MaxPool => {
                let (c, h, w) = input.dims3()?;
                Tensor::new(
                    input.shape().to_vec(),
                    layers::maxpool2_backward(input.data(), c, h, w, grad.data()),
                )?
            }
            LayerSpec::GlobalAvgPool => {
                let (c, h, w) = input.dims3()?;
                Tensor::new(
                    input.shape().to_vec(),
                    layers::gap_backward(grad.data(), c, h, w),
                )?
            }
            LayerSpec::Linear { out_features } => {
                let in_f = input.len();
                let (gx, gw, gb) = layers::linear_backward(
                    input.data(),
                    &model.weights[i],
                    in_f,
                    *out_features,
                    grad.data(),
                );
                if let Some(pg) = param_grads.as_deref_mut() {
                    for (a, b) in pg.weights[i].iter_mut().zip(&gw) {
                        *a += b;
                    }
                    for (a, b) in pg.biases[i].iter_mut().zip(&gb) {
                        *a += b;
                    }
                }
                Tensor::new(input.shape().to_vec(), gx)?
            }
        };
    }
    Ok(grad)
}

/// Gradient of the class logit (pre-softmax) with respect to the target
/// layer activation, shape [K, H, W].
pub fn grad_wrt_activation(
    model: &ModelCheckpoint,
    x: &Tensor,
    class_index: usize,
) -> Result<Tensor> {
    model.check_class(class_index)?;
    let trace = forward_trace(model, x)?;
    let mut seed = vec![0.0; model.num_classes()];
    seed[class_index] = 1.0;
    let grad_logits = Tensor::new(vec![model.num_classes()], seed)?;
    backprop(
        model,
        &trace,
        &grad_logits,
        None,
        Some(model.effective_target_index()),
    )
}

/// log(sum(exp(v))) evaluated stably.
pub fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(logits);
    logits.iter().map(|g| (g - lse).exp()).collect()
}

/// Cross-entropy of one sample: -log softmax(logits)[label].
pub fn cross_entropy(logits: &[f64], label: usize) -> Result<f64> {
    if label >= logits.len() {
        return Err(DpsError::ClassRange {
            class: label,
            num_classes: logits.len(),
        });
    }
    Ok(log_sum_exp(logits) - logits[label])
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Per-sample cross-entropy losses over a batch.
pub fn loss_per_sample(model: &ModelCheckpoint, batch: &Batch) -> Result<Vec<f64>> {
    if batch.is_empty() {
        return Err(DpsError::EmptyInput("loss over empty batch"));
    }
    let mut losses = Vec::with_capacity(batch.len());
    for i in 0..batch.len() {
        let (logits, _) = forward(model, &batch.sample(i))?;
        losses.push(cross_entropy(logits.data(), batch.labels[i] as usize)?);
    }
    Ok(losses)
}

/// Fraction of batch samples whose argmax logit matches the label.
pub fn accuracy(model: &ModelCheckpoint, batch: &Batch) -> Result<f64> {
    if batch.is_empty() {
        return Err(DpsError::EmptyInput("accuracy over empty batch"));
    }
    let mut correct = 0;
    for i in 0..batch.len() {
        let (logits, _) = forward(model, &batch.sample(i))?;
        if argmax(logits.data()) == batch.labels[i] as usize {
            correct += 1;
        }
    }
    Ok(correct as f64 / batch.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::conv_stack;
    use crate::rng::Rng;

    /// Straightforward re-implementation of the whole forward pass with an
    /// explicitly padded buffer, kept structurally different from the
    /// kernels in `layers` on purpose.
    fn naive_forward(model: &ModelCheckpoint, x: &Tensor) -> Vec<f64> {
        let mut cur = x.data().to_vec();
        let mut shape = model.input_shape.to_vec();
        for (i, spec) in model.layer_specs.iter().enumerate() {
            match spec {
                LayerSpec::Conv {
                    out_channels,
                    kernel,
                    stride,
                    padding,
                } => {
                    let (c, h, w) = (shape[0], shape[1], shape[2]);
                    let (ph, pw) = (h + 2 * padding, w + 2 * padding);
                    let mut padded = vec![0.0; c * ph * pw];
                    for ch in 0..c {
                        for y in 0..h {
                            for xx in 0..w {
                                padded[(ch * ph + y + padding) * pw + xx + padding] =
                                    cur[(ch * h + y) * w + xx];
                            }
                        }
                    }
                    let oh = (ph - kernel) / stride + 1;
                    let ow = (pw - kernel) / stride + 1;
                    let mut out = vec![0.0; out_channels * oh * ow];
                    for oc in 0..*out_channels {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let mut acc = model.biases[i][oc];
                                for ic in 0..c {
                                    for ky in 0..*kernel {
                                        for kx in 0..*kernel {
                                            let pv = padded[(ic * ph + oy * stride + ky) * pw
                                                + ox * stride
                                                + kx];
                                            let wv = model.weights[i]
                                                [((oc * c + ic) * kernel + ky) * kernel + kx];
                                            acc += pv * wv;
                                        }
                                    }
                                }
                                out[(oc * oh + oy) * ow + ox] = acc;
                            }
                        }
                    }
                    cur = out;
                    shape = vec![*out_channels, oh, ow];
                }
                LayerSpec::Relu => {
                    cur = cur.iter().map(|&v| v.max(0.0)).collect();
                }
                LayerSpec::MaxPool => {
                    let (c, h, w) = (shape[0], shape[1], shape[2]);
                    let (oh, ow) = (h / 2, w / 2);
                    let mut out = vec![0.0; c * oh * ow];
                    for ch in 0..c {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let vals = [
                                    cur[(ch * h + 2 * oy) * w + 2 * ox],
                                    cur[(ch * h + 2 * oy) * w + 2 * ox + 1],
                                    cur[(ch * h + 2 * oy + 1) * w + 2 * ox],
                                    cur[(ch * h + 2 * oy + 1) * w + 2 * ox + 1],
                                ];
                                out[(ch * oh + oy) * ow + ox] =
                                    vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                            }
                        }
                    }
                    cur = out;
                    shape = vec![c, oh, ow];
                }
                LayerSpec::GlobalAvgPool => {
                    let (c, h, w) = (shape[0], shape[1], shape[2]);
                    cur = (0..c)
                        .map(|ch| {
                            cur[ch * h * w..(ch + 1) * h * w].iter().sum::<f64>() / (h * w) as f64
                        })
                        .collect();
                    shape = vec![c];
                }
                LayerSpec::Linear { out_features } => {
                    let in_f = cur.len();
                    cur = (0..*out_features)
                        .map(|o| {
                            model.biases[i][o]
                                + (0..in_f)
                                    .map(|j| model.weights[i][o * in_f + j] * cur[j])
                                    .sum::<f64>()
                        })
                        .collect();
                    shape = vec![*out_features];
                }
            }
        }
        cur
    }

    fn one_by_one_model() -> ModelCheckpoint {
        let specs = vec![
            LayerSpec::Conv {
                out_channels: 1,
                kernel: 1,
                stride: 1,
                padding: 0,
            },
            LayerSpec::GlobalAvgPool,
            LayerSpec::Linear { out_features: 1 },
        ];
        let mut model = ModelCheckpoint::init([1, 1, 1], specs, 0, 0).unwrap();
        model.weights[0] = vec![1.0]; // identity kernel
        model.biases[0] = vec![0.0];
        model.weights[2] = vec![2.0];
        model.biases[2] = vec![0.0];
        model
    }

    fn random_model(rng: &mut Rng, input: [usize; 3], classes: usize) -> ModelCheckpoint {
        let channels = vec![1 + rng.below(3), 1 + rng.below(3), 1 + rng.below(4)];
        let (specs, target) = conv_stack(input, &channels, 3, classes);
        ModelCheckpoint::init(input, specs, target, rng.next_u64()).unwrap()
    }

    #[test]
    fn forward_hand_computed_linear_chain() {
        let model = one_by_one_model();
        let x = Tensor::new(vec![1, 1, 1], vec![3.0]).unwrap();
        let (logits, act) = forward(&model, &x).unwrap();
        assert_eq!(logits.data(), &[6.0]);
        assert_eq!(act.data(), &[3.0]);
    }

    #[test]
    fn forward_zero_input_zero_bias_gives_zero_logits() {
        let mut rng = Rng::new(5);
        let model = random_model(&mut rng, [1, 16, 16], 4);
        // biases are zero-initialized, weights random
        let x = Tensor::zeros(vec![1, 16, 16]);
        let (logits, _) = forward(&model, &x).unwrap();
        for &g in logits.data() {
            assert_eq!(g, 0.0);
        }
    }

    #[test]
    fn forward_matches_naive_reimplementation() {
        let mut rng = Rng::new(17);
        for _ in 0..10 {
            let model = random_model(&mut rng, [1, 16, 16], 4);
            let mut x = Tensor::zeros(vec![1, 16, 16]);
            for v in x.data_mut() {
                *v = rng.range(-1.0, 1.0);
            }
            let (logits, _) = forward(&model, &x).unwrap();
            let oracle = naive_forward(&model, &x);
            for (a, b) in logits.data().iter().zip(&oracle) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn forward_rejects_wrong_input_shape() {
        let model = one_by_one_model();
        let x = Tensor::zeros(vec![1, 2, 2]);
        assert!(matches!(
            forward(&model, &x),
            Err(DpsError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn grad_wrt_activation_closed_form_for_gap_linear_head() {
        // Head directly on the target layer: every spatial entry of the
        // gradient for channel k equals W[c,k] / Z.
        let specs = vec![
            LayerSpec::Conv {
                out_channels: 3,
                kernel: 3,
                stride: 1,
                padding: 1,
            },
            LayerSpec::GlobalAvgPool,
            LayerSpec::Linear { out_features: 2 },
        ];
        let model = ModelCheckpoint::init([1, 4, 4], specs, 0, 11).unwrap();
        let mut x = Tensor::zeros(vec![1, 4, 4]);
        let mut rng = Rng::new(12);
        for v in x.data_mut() {
            *v = rng.range(-1.0, 1.0);
        }
        let z = 16.0;
        for class in 0..2 {
            let grad = grad_wrt_activation(&model, &x, class).unwrap();
            let (k_ch, h, w) = grad.dims3().unwrap();
            for k in 0..k_ch {
                let expected = model.weights[2][class * k_ch + k] / z;
                for idx in 0..h * w {
                    let got = grad.data()[k * h * w + idx];
                    assert!((got - expected).abs() < 1e-15, "{got} vs {expected}");
                }
            }
        }
    }

    #[test]
    fn grad_wrt_activation_matches_finite_differences() {
        let mut rng = Rng::new(23);
        for _ in 0..5 {
            let model = random_model(&mut rng, [1, 12, 12], 3);
            let mut x = Tensor::zeros(vec![1, 12, 12]);
            for v in x.data_mut() {
                *v = rng.range(-1.0, 1.0);
            }
            let class = rng.below(3);
            let grad = grad_wrt_activation(&model, &x, class).unwrap();
            let (_, act) = forward(&model, &x).unwrap();
            let delta = 1e-6;
            for i in 0..act.len() {
                let mut plus = act.clone();
                plus.data_mut()[i] += delta;
                let mut minus = act.clone();
                minus.data_mut()[i] -= delta;
                let gp = forward_from(&model, model.effective_target_index(), &plus).unwrap();
                let gm = forward_from(&model, model.effective_target_index(), &minus).unwrap();
                let fd = (gp.data()[class] - gm.data()[class]) / (2.0 * delta);
                let a = grad.data()[i];
                let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1.0);
                assert!(rel < 1e-6, "entry {i}: {a} vs {fd}");
            }
        }
    }

    #[test]
    fn grad_wrt_activation_rejects_out_of_range_class() {
        let mut rng = Rng::new(31);
        let model = random_model(&mut rng, [1, 8, 8], 4);
        let x = Tensor::zeros(vec![1, 8, 8]);
        assert!(matches!(
            grad_wrt_activation(&model, &x, 999),
            Err(DpsError::ClassRange {
                class: 999,
                num_classes: 4
            })
        ));
    }

    #[test]
    fn cross_entropy_uniform_logits_is_log_n() {
        let loss = cross_entropy(&[0.0, 0.0, 0.0, 0.0], 2).unwrap();
        assert!((loss - 4.0_f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn cross_entropy_decreases_monotonically_in_true_logit() {
        let mut prev = f64::INFINITY;
        for step in 0..20 {
            let g = step as f64;
            let loss = cross_entropy(&[g, 1.0, -0.5], 0).unwrap();
            assert!(loss < prev);
            prev = loss;
        }
    }

    #[test]
    fn cross_entropy_matches_direct_summation_oracle() {
        let mut rng = Rng::new(77);
        for _ in 0..100 {
            let logits: Vec<f64> = (0..5).map(|_| rng.range(-4.0, 4.0)).collect();
            let label = rng.below(5);
            let stable = cross_entropy(&logits, label).unwrap();
            let naive = -(logits[label].exp() / logits.iter().map(|g| g.exp()).sum::<f64>()).ln();
            assert!((stable - naive).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_is_bit_deterministic() {
        let mut rng = Rng::new(41);
        let model = random_model(&mut rng, [1, 10, 10], 3);
        let mut x = Tensor::zeros(vec![1, 10, 10]);
        for v in x.data_mut() {
            *v = rng.range(-1.0, 1.0);
        }
        let (a, _) = forward(&model, &x).unwrap();
        let (b, _) = forward(&model, &x).unwrap();
        for (u, v) in a.data().iter().zip(b.data()) {
            assert_eq!(u.to_bits(), v.to_bits());
        }
    }
}
