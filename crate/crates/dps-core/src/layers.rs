//! Per-layer forward and backward kernels.
//!
//! Gradients are written out explicitly per layer instead of going through a
//! tape; each kernel is checked against central finite differences in the
//! tests below.

/// Dimensions of one conv application. Weights are [out_c, in_c, k, k]
/// row-major, bias is [out_c]. Zero padding, square kernel and stride.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvDims {
    pub in_c: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_c: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvDims {
    pub fn out_h(&self) -> usize {
        (self.in_h + 2 * self.pad - self.k) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.in_w + 2 * self.pad - self.k) / self.stride + 1
    }

    pub fn weight_len(&self) -> usize {
        self.out_c * self.in_c * self.k * self.k
    }
}

pub fn conv_forward(x: &[f64], w: &[f64], b: &[f64], d: &ConvDims) -> Vec<f64> {
    let (oh, ow) = (d.out_h(), d.out_w());
    let mut out = vec![0.0; d.out_c * oh * ow];
    for oc in 0..d.out_c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = b[oc];
                for ic in 0..d.in_c {
                    for ky in 0..d.k {
                        let iy = (oy * d.stride + ky) as isize - d.pad as isize;
                        if iy < 0 || iy >= d.in_h as isize {
                            continue;
                        }
                        for kx in 0..d.k {
                            let ix = (ox * d.stride + kx) as isize - d.pad as isize;
                            if ix < 0 || ix >= d.in_w as isize {
                                continue;
                            }
                            let xi = (ic * d.in_h + iy as usize) * d.in_w + ix as usize;
                            let wi = ((oc * d.in_c + ic) * d.k + ky) * d.k + kx;
                            acc += x[xi] * w[wi];
                        }
                    }
                }
                out[(oc * oh + oy) * ow + ox] = acc;
            }
        }
    }
    out
}

/// Returns (grad_input, grad_weights, grad_bias).
pub fn conv_backward(
    x: &[f64],
    w: &[f64],
    d: &ConvDims,
    grad_out: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (oh, ow) = (d.out_h(), d.out_w());
    let mut gx = vec![0.0; d.in_c * d.in_h * d.in_w];
    let mut gw = vec![0.0; d.weight_len()];
    let mut gb = vec![0.0; d.out_c];
    for oc in 0..d.out_c {
        for oy in 0..oh {
            for ox in 0..ow {
                let g = grad_out[(oc * oh + oy) * ow + ox];
                if g == 0.0 {
                    continue;
                }
                gb[oc] += g;
                for ic in 0..d.in_c {
                    for ky in 0..d.k {
                        let iy = (oy * d.stride + ky) as isize - d.pad as isize;
                        if iy < 0 || iy >= d.in_h as isize {
                            continue;
                        }
                        for kx in 0..d.k {
                            let ix = (ox * d.stride + kx) as isize - d.pad as isize;
                            if ix < 0 || ix >= d.in_w as isize {
                                continue;
                            }
                            let xi = (ic * d.in_h + iy as usize) * d.in_w + ix as usize;
                            let wi = ((oc * d.in_c + ic) * d.k + ky) * d.k + kx;
                            gx[xi] += g * w[wi];
                            gw[wi] += g * x[xi];
                        }
                    }
                }
            }
        }
    }
    (gx, gw, gb)
}

pub fn relu_forward(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect()
}

pub fn relu_backward(x: &[f64], grad_out: &[f64]) -> Vec<f64> {
    x.iter()
        .zip(grad_out)
        .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
        .collect()
}

/// 2x2 max pooling with stride 2; trailing odd rows/cols are dropped.
pub fn maxpool2_forward(x: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f64::NEG_INFINITY;
                for dy in 0..2 {
                    for dx in 0..2 {
                        let v = x[(ch * h + (2 * oy + dy)) * w + (2 * ox + dx)];
                        if v > best {
                            best = v;
                        }
                    }
                }
                out[(ch * oh + oy) * ow + ox] = best;
            }
        }
    }
    out
}

/// Routes each pooled gradient to the first-encountered maximum of its
/// window (row-major scan), which keeps ties deterministic.
pub fn maxpool2_backward(x: &[f64], c: usize, h: usize, w: usize, grad_out: &[f64]) -> Vec<f64> {
    let (oh, ow) = (h / 2, w / 2);
    let mut gx = vec![0.0; c * h * w];
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = 0;
                for dy in 0..2 {
                    for dx in 0..2 {
                        let idx = (ch * h + (2 * oy + dy)) * w + (2 * ox + dx);
                        if x[idx] > best {
                            best = x[idx];
                            best_idx = idx;
                        }
                    }
                }
                gx[best_idx] += grad_out[(ch * oh + oy) * ow + ox];
            }
        }
    }
    gx
}

/// Global average pooling: [C, H, W] -> [C].
pub fn gap_forward(x: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let z = (h * w) as f64;
    (0..c)
        .map(|ch| x[ch * h * w..(ch + 1) * h * w].iter().sum::<f64>() / z)
        .collect()
}

pub fn gap_backward(grad_out: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let z = (h * w) as f64;
    let mut gx = vec![0.0; c * h * w];
    for ch in 0..c {
        let g = grad_out[ch] / z;
        for v in &mut gx[ch * h * w..(ch + 1) * h * w] {
            *v = g;
        }
    }
    gx
}

/// Fully connected: weights [out_f, in_f], bias [out_f].
pub fn linear_forward(x: &[f64], w: &[f64], b: &[f64], in_f: usize, out_f: usize) -> Vec<f64> {
    (0..out_f)
        .map(|o| {
            let row = &w[o * in_f..(o + 1) * in_f];
            b[o] + row.iter().zip(x).map(|(wi, xi)| wi * xi).sum::<f64>()
        })
        .collect()
}

/// Returns (grad_input, grad_weights, grad_bias).
pub fn linear_backward(
    x: &[f64],
    w: &[f64],
    in_f: usize,
    out_f: usize,
    grad_out: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut gx = vec![0.0; in_f];
    let mut gw = vec![0.0; out_f * in_f];
    let gb = grad_out.to_vec();
    for o in 0..out_f {
        let g = grad_out[o];
        for i in 0..in_f {
            gx[i] += g * w[o * in_f + i];
            gw[o * in_f + i] = g * x[i];
        }
    }
    (gx, gw, gb)
}

#[cfg(test)]
#[allow(clippy::needless_range_loop)] // index loops mirror the finite-difference coordinates
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1.0)
    }

    /// Central finite difference of `f` along coordinate `i` of `point`.
    fn fd<F: Fn(&[f64]) -> f64>(f: &F, point: &[f64], i: usize, delta: f64) -> f64 {
        let mut p = point.to_vec();
        p[i] = point[i] + delta;
        let f_plus = f(&p);
        p[i] = point[i] - delta;
        let f_minus = f(&p);
        (f_plus - f_minus) / (2.0 * delta)
    }

    /// Fills a buffer with values bounded away from zero so ReLU kinks and
    /// pooling ties never sit inside a finite-difference step.
    fn fill_random(rng: &mut Rng, buf: &mut [f64]) {
        for v in buf.iter_mut() {
            let x = rng.range(-2.0, 2.0);
            *v = if x.abs() < 0.05 {
                x + 0.1_f64.copysign(x)
            } else {
                x
            };
        }
    }

    const DELTA: f64 = 1e-6;
    const TOL: f64 = 1e-6;

    #[test]
    fn conv_forward_identity_kernel() {
        // 1x1 kernel with weight 1 reproduces the input.
        let d = ConvDims {
            in_c: 1,
            in_h: 2,
            in_w: 2,
            out_c: 1,
            k: 1,
            stride: 1,
            pad: 0,
        };
        let x = [1.0, 2.0, 3.0, 4.0];
        let out = conv_forward(&x, &[1.0], &[0.0], &d);
        assert_eq!(out, x);
    }

    #[test]
    fn conv_forward_hand_computed_3x3() {
        // 3x3 input, 2x2 all-ones kernel, no pad: each output is a window sum.
        let d = ConvDims {
            in_c: 1,
            in_h: 3,
            in_w: 3,
            out_c: 1,
            k: 2,
            stride: 1,
            pad: 0,
        };
        let x = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0];
        let out = conv_forward(&x, &[1.0; 4], &[0.5], &d);
        assert_eq!(out, vec![12.5, 16.5, 24.5, 28.5]);
    }

    #[test]
    fn maxpool_drops_trailing_odd_edges() {
        let x = [
            1.0, 2.0, 9.0, //
            3.0, 4.0, 9.0, //
            9.0, 9.0, 9.0,
        ];
        let out = maxpool2_forward(&x, 1, 3, 3);
        assert_eq!(out, vec![4.0]);
    }

    #[test]
    fn gap_is_the_spatial_mean() {
        let x = [1.0, 2.0, 3.0, 4.0, 10.0, 10.0, 10.0, 10.0];
        assert_eq!(gap_forward(&x, 2, 2, 2), vec![2.5, 10.0]);
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let mut rng = Rng::new(101);
        for case in 0..130 {
            let d = ConvDims {
                in_c: 1 + rng.below(3),
                in_h: 3 + rng.below(4),
                in_w: 3 + rng.below(4),
                out_c: 1 + rng.below(3),
                k: 1 + rng.below(3),
                stride: 1 + rng.below(2),
                pad: rng.below(2),
            };
            if d.in_h + 2 * d.pad < d.k || d.in_w + 2 * d.pad < d.k {
                continue;
            }
            let mut x = vec![0.0; d.in_c * d.in_h * d.in_w];
            let mut w = vec![0.0; d.weight_len()];
            let mut b = vec![0.0; d.out_c];
            fill_random(&mut rng, &mut x);
            fill_random(&mut rng, &mut w);
            fill_random(&mut rng, &mut b);
            let mut probe = vec![0.0; d.out_c * d.out_h() * d.out_w()];
            fill_random(&mut rng, &mut probe);

            let objective_x = |xs: &[f64]| {
                conv_forward(xs, &w, &b, &d)
                    .iter()
                    .zip(&probe)
                    .map(|(o, p)| o * p)
                    .sum::<f64>()
            };
            let objective_w = |ws: &[f64]| {
                conv_forward(&x, ws, &b, &d)
                    .iter()
                    .zip(&probe)
                    .map(|(o, p)| o * p)
                    .sum::<f64>()
            };
            let objective_b = |bs: &[f64]| {
                conv_forward(&x, &w, bs, &d)
                    .iter()
                    .zip(&probe)
                    .map(|(o, p)| o * p)
                    .sum::<f64>()
            };

            let (gx, gw, gb) = conv_backward(&x, &w, &d, &probe);
            for i in 0..x.len() {
                assert!(
                    rel_err(gx[i], fd(&objective_x, &x, i, DELTA)) < TOL,
                    "case {case} gx[{i}]"
                );
            }
            for i in 0..w.len() {
                assert!(
                    rel_err(gw[i], fd(&objective_w, &w, i, DELTA)) < TOL,
                    "case {case} gw[{i}]"
                );
            }
            for i in 0..b.len() {
                assert!(
                    rel_err(gb[i], fd(&objective_b, &b, i, DELTA)) < TOL,
                    "case {case} gb[{i}]"
                );
            }
        }
    }

    #[test]
    fn relu_maxpool_gap_linear_gradients_match_finite_differences() {
        let mut rng = Rng::new(202);
        for case in 0..120 {
            let c = 1 + rng.below(3);
            let h = 2 + rng.below(4);
            let w = 2 + rng.below(4);
            let mut x = vec![0.0; c * h * w];
            fill_random(&mut rng, &mut x);

            // relu
            let mut probe = vec![0.0; x.len()];
            fill_random(&mut rng, &mut probe);
            let obj = |xs: &[f64]| {
                relu_forward(xs)
                    .iter()
                    .zip(&probe)
                    .map(|(o, p)| o * p)
                    .sum::<f64>()
            };
            let g = relu_backward(&x, &probe);
            for i in 0..x.len() {
                assert!(
                    rel_err(g[i], fd(&obj, &x, i, DELTA)) < TOL,
                    "case {case} relu[{i}]"
                );
            }

            // maxpool
            let (oh, ow) = (h / 2, w / 2);
            if oh > 0 && ow > 0 {
                let mut probe = vec![0.0; c * oh * ow];
                fill_random(&mut rng, &mut probe);
                let obj = |xs: &[f64]| {
                    maxpool2_forward(xs, c, h, w)
                        .iter()
                        .zip(&probe)
                        .map(|(o, p)| o * p)
                        .sum::<f64>()
                };
                let g = maxpool2_backward(&x, c, h, w, &probe);
                for i in 0..x.len() {
                    assert!(
                        rel_err(g[i], fd(&obj, &x, i, DELTA)) < TOL,
                        "case {case} pool[{i}]"
                    );
                }
            }

            // gap
            let mut probe = vec![0.0; c];
            fill_random(&mut rng, &mut probe);
            let obj = |xs: &[f64]| {
                gap_forward(xs, c, h, w)
                    .iter()
                    .zip(&probe)
                    .map(|(o, p)| o * p)
                    .sum::<f64>()
            };
            let g = gap_backward(&probe, c, h, w);
            for i in 0..x.len() {
                assert!(
                    rel_err(g[i], fd(&obj, &x, i, DELTA)) < TOL,
                    "case {case} gap[{i}]"
                );
            }

            // linear on the flattened tensor
            let in_f = x.len();
            let out_f = 1 + rng.below(4);
            let mut lw = vec![0.0; out_f * in_f];
            let mut lb = vec![0.0; out_f];
            fill_random(&mut rng, &mut lw);
            fill_random(&mut rng, &mut lb);
            let mut probe = vec![0.0; out_f];
            fill_random(&mut rng, &mut probe);
            let obj_x = |xs: &[f64]| {
                linear_forward(xs, &lw, &lb, in_f, out_f)
                    .iter()
                    .zip(&probe)
                    .map(|(o, p)| o * p)
                    .sum::<f64>()
            };
            let obj_w = |ws: &[f64]| {
                linear_forward(&x, ws, &lb, in_f, out_f)
                    .iter()
                    .zip(&probe)
                    .map(|(o, p)| o * p)
                    .sum::<f64>()
            };
            let (gx, gw, gb) = linear_backward(&x, &lw, in_f, out_f, &probe);
            for i in 0..in_f {
                assert!(
                    rel_err(gx[i], fd(&obj_x, &x, i, DELTA)) < TOL,
                    "case {case} lin_x[{i}]"
                );
            }
            for i in 0..lw.len() {
                assert!(
                    rel_err(gw[i], fd(&obj_w, &lw, i, DELTA)) < TOL,
                    "case {case} lin_w[{i}]"
                );
            }
            assert_eq!(gb, probe);
        }
    }
}
