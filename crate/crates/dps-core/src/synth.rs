//! Synthetic datasets and test-time corruptions.
//!
//! Shapes are rendered as soft parametric masks with per-sample jitter in
//! position, scale, and intensity. The variant kind redraws every class
//! with a different primitive of the same orientation/topology family,
//! giving a semantically matched out-of-distribution split. Colored
//! glyphs add a class-color channel correlation for shortcut studies.

use crate::error::{DpsError, Result};
use crate::rng::Rng;
use crate::tensor::{Batch, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Shapes,
    ColoredDigits,
    ShapesVariant,
}

impl std::str::FromStr for DatasetKind {
    type Err = DpsError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "shapes" => Ok(DatasetKind::Shapes),
            "colored_digits" => Ok(DatasetKind::ColoredDigits),
            "shapes_variant" => Ok(DatasetKind::ShapesVariant),
            other => Err(DpsError::InvalidConfig(format!(
                "unknown dataset kind '{other}'"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct SyntheticDatasetConfig {
    pub kind: DatasetKind,
    pub num_classes: usize,
    pub samples_per_class: usize,
    pub image_size: usize,
    pub channels: usize,
    /// Scales positional/scale/noise jitter; 1.0 is the default regime.
    pub jitter: f64,
}

impl Default for SyntheticDatasetConfig {
    fn default() -> Self {
        SyntheticDatasetConfig {
            kind: DatasetKind::Shapes,
            num_classes: 4,
            samples_per_class: 50,
            image_size: 16,
            channels: 1,
            jitter: 1.0,
        }
    }
}

impl SyntheticDatasetConfig {
    fn validate(&self) -> Result<()> {
        if self.num_classes < 2 || self.num_classes > 6 {
            return Err(DpsError::InvalidConfig(format!(
                "num_classes must be in 2..=6, got {}",
                self.num_classes
            )));
        }
        if self.image_size < 8 {
            return Err(DpsError::InvalidConfig(format!(
                "image_size must be >= 8, got {}",
                self.image_size
            )));
        }
        if self.samples_per_class == 0 {
            return Err(DpsError::InvalidConfig(
                "samples_per_class must be >= 1".into(),
            ));
        }
        if self.channels != 1 && self.channels != 3 {
            return Err(DpsError::InvalidConfig(format!(
                "channels must be 1 or 3, got {}",
                self.channels
            )));
        }
        if self.jitter.is_nan() || self.jitter < 0.0 {
            return Err(DpsError::InvalidConfig(format!(
                "jitter must be >= 0, got {}",
                self.jitter
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
enum Primitive {
    HBar,
    VBar,
    Cross,
    Disk,
    DiagStripe,
    Checker,
    DoubleHBar,
    DoubleVBar,
    XCross,
    Ring,
    AntiDiagStripe,
    Dots,
}

const STANDARD: [Primitive; 6] = [
    Primitive::HBar,
    Primitive::Cross,
    Primitive::Disk,
    Primitive::DiagStripe,
    Primitive::VBar,
    Primitive::Checker,
];

const VARIANT: [Primitive; 6] = [
    Primitive::DoubleHBar,
    Primitive::XCross,
    Primitive::Ring,
    Primitive::AntiDiagStripe,
    Primitive::DoubleVBar,
    Primitive::Dots,
];

/// Soft step: full intensity inside, linear half-pixel falloff at the edge.
fn soft(limit: f64, distance: f64) -> f64 {
    (limit + 0.5 - distance).clamp(0.0, 1.0)
}

fn render(p: Primitive, size: usize, cy: f64, cx: f64, scale: f64, out: &mut [f64]) {
    let s = size as f64;
    let thick = (0.075 * s).max(1.0) * scale;
    let radius = 0.24 * s * scale;
    let span = 0.34 * s * scale;
    for y in 0..size {
        for x in 0..size {
            let dy = y as f64 - cy;
            let dx = x as f64 - cx;
            let v = match p {
                Primitive::HBar => {
                    if dx.abs() <= span {
                        soft(thick, dy.abs())
                    } else {
                        0.0
                    }
                }
                Primitive::VBar => {
                    if dy.abs() <= span {
                        soft(thick, dx.abs())
                    } else {
                        0.0
                    }
                }
                Primitive::Cross => {
                    let h = if dx.abs() <= span {
                        soft(thick * 0.7, dy.abs())
                    } else {
                        0.0
                    };
                    let v = if dy.abs() <= span {
                        soft(thick * 0.7, dx.abs())
                    } else {
                        0.0
                    };
                    h.max(v)
                }
                Primitive::Disk => soft(radius, (dy * dy + dx * dx).sqrt()),
                Primitive::DiagStripe => {
                    let d = (dy - dx).abs() / 2.0_f64.sqrt();
                    if dy.abs().max(dx.abs()) <= span * 1.2 {
                        soft(thick, d)
                    } else {
                        0.0
                    }
                }
                Primitive::Checker => {
                    let inside = dy.abs() <= span && dx.abs() <= span;
                    if inside {
                        let cell = ((y / 2) + (x / 2)) % 2;
                        if cell == 0 {
                            1.0
                        } else {
                            0.0
                        }
                    } else {
                        0.0
                    }
                }
                Primitive::DoubleHBar => {
                    if dx.abs() <= span {
                        let gap = thick * 2.2;
                        soft(thick * 0.6, (dy - gap).abs()).max(soft(thick * 0.6, (dy + gap).abs()))
                    } else {
                        0.0
                    }
                }
                Primitive::DoubleVBar => {
                    if dy.abs() <= span {
                        let gap = thick * 2.2;
                        soft(thick * 0.6, (dx - gap).abs()).max(soft(thick * 0.6, (dx + gap).abs()))
                    } else {
                        0.0
                    }
                }
                Primitive::XCross => {
                    let d1 = (dy - dx).abs() / 2.0_f64.sqrt();
                    let d2 = (dy + dx).abs() / 2.0_f64.sqrt();
                    if dy.abs().max(dx.abs()) <= span {
                        soft(thick * 0.7, d1).max(soft(thick * 0.7, d2))
                    } else {
                        0.0
                    }
                }
                Primitive::Ring => {
                    let d = (dy * dy + dx * dx).sqrt();
                    soft(radius, d)
                        * soft(radius, d).min(
                            // carve the interior out
                            (d - radius * 0.55 + 0.5).clamp(0.0, 1.0),
                        )
                }
                Primitive::AntiDiagStripe => {
                    let d = (dy + dx).abs() / 2.0_f64.sqrt();
                    if dy.abs().max(dx.abs()) <= span * 1.2 {
                        soft(thick, d)
                    } else {
                        0.0
                    }
                }
                Primitive::Dots => {
                    let off = span * 0.8;
                    let r = radius * 0.45;
                    let centers = [(-off, -off), (-off, off), (off, -off), (off, off)];
                    centers
                        .iter()
                        .map(|(oy, ox)| soft(r, ((dy - oy).powi(2) + (dx - ox).powi(2)).sqrt()))
                        .fold(0.0, f64::max)
                }
            };
            if v > 0.0 {
                let idx = y * size + x;
                out[idx] = out[idx].max(v);
            }
        }
    }
}

struct GlyphJitter {
    cy: f64,
    cx: f64,
    scale: f64,
    intensity: f64,
}

fn draw_jitter(rng: &mut Rng, size: usize, jitter: f64) -> GlyphJitter {
    let center = (size as f64 - 1.0) / 2.0;
    let offset = 1.5 * jitter;
    GlyphJitter {
        cy: center + rng.range(-offset, offset),
        cx: center + rng.range(-offset, offset),
        scale: 1.0 + rng.range(-0.15, 0.15) * jitter,
        intensity: rng.range(0.65, 1.0),
    }
}

fn glyph_for(kind: DatasetKind, class: usize) -> Primitive {
    match kind {
        DatasetKind::ShapesVariant => VARIANT[class],
        _ => STANDARD[class],
    }
}

/// Faint class-independent distractor blobs. They sit under the glyph and
/// perturb raw activations without carrying label information.
fn render_clutter(rng: &mut Rng, size: usize, canvas: &mut [f64]) {
    let count = 2 + rng.below(3);
    let unit = size as f64 / 16.0;
    for _ in 0..count {
        let cy = rng.range(0.0, size as f64 - 1.0);
        let cx = rng.range(0.0, size as f64 - 1.0);
        let radius = rng.range(1.1, 2.3) * unit;
        let intensity = rng.range(0.12, 0.3);
        for y in 0..size {
            for x in 0..size {
                let d = ((y as f64 - cy).powi(2) + (x as f64 - cx).powi(2)).sqrt();
                let v = intensity * soft(radius, d);
                let idx = y * size + x;
                canvas[idx] = canvas[idx].max(v);
            }
        }
    }
}

/// Renders one grayscale glyph over clutter, with jitter and pixel noise,
/// into a fresh buffer in [0, 1].
fn render_sample(cfg: &SyntheticDatasetConfig, class: usize, rng: &mut Rng) -> Vec<f64> {
    let size = cfg.image_size;
    let j = draw_jitter(rng, size, cfg.jitter);
    let mut canvas = vec![0.0; size * size];
    render_clutter(rng, size, &mut canvas);
    let mut glyph = vec![0.0; size * size];
    render(
        glyph_for(cfg.kind, class),
        size,
        j.cy,
        j.cx,
        j.scale,
        &mut glyph,
    );
    let sigma = 0.02 * cfg.jitter;
    for (v, g) in canvas.iter_mut().zip(&glyph) {
        *v = (v.max(g * j.intensity) + sigma * rng.normal()).clamp(0.0, 1.0);
    }
    canvas
}

/// Balanced grayscale (or channel-replicated) shape dataset. Samples are
/// laid out class-major: sample index = class * samples_per_class + i.
pub fn gen_shapes(cfg: &SyntheticDatasetConfig, seed: u64) -> Result<Batch> {
    cfg.validate()?;
    if cfg.kind == DatasetKind::ColoredDigits {
        return Err(DpsError::InvalidConfig(
            "colored_digits datasets come from gen_colored_digits".into(),
        ));
    }
    let n = cfg.num_classes * cfg.samples_per_class;
    let (c, hw) = (cfg.channels, cfg.image_size * cfg.image_size);
    let mut images = Tensor::zeros(vec![n, c, cfg.image_size, cfg.image_size]);
    let mut labels = Vec::with_capacity(n);
    let mut rng = Rng::new(seed);
    for class in 0..cfg.num_classes {
        for i in 0..cfg.samples_per_class {
            let canvas = render_sample(cfg, class, &mut rng);
            let sample = class * cfg.samples_per_class + i;
            for ch in 0..c {
                images.data_mut()[(sample * c + ch) * hw..(sample * c + ch + 1) * hw]
                    .copy_from_slice(&canvas);
            }
            labels.push(class as u32);
        }
    }
    Batch::new(images, labels)
}

/// Saturated, well-separated tint per class.
pub fn class_palette(num_classes: usize) -> Vec<[f64; 3]> {
    const PALETTE: [[f64; 3]; 6] = [
        [1.0, 0.12, 0.12],
        [0.12, 1.0, 0.12],
        [0.15, 0.35, 1.0],
        [1.0, 0.9, 0.1],
        [1.0, 0.15, 1.0],
        [0.1, 1.0, 1.0],
    ];
    PALETTE[..num_classes].to_vec()
}

/// RGB glyph dataset with a controllable color-label correlation. With
/// probability `correlation_strength` a sample is tinted its class color,
/// otherwise a uniformly random class color. Glyph jitter runs hot (2x) so
/// color is the easy feature.
pub fn gen_colored_digits(
    cfg: &SyntheticDatasetConfig,
    correlation_strength: f64,
    seed: u64,
) -> Result<Batch> {
    cfg.validate()?;
    if cfg.channels != 3 {
        return Err(DpsError::InvalidConfig(format!(
            "colored datasets need channels=3, got {}",
            cfg.channels
        )));
    }
    if !(0.0..=1.0).contains(&correlation_strength) {
        return Err(DpsError::InvalidConfig(format!(
            "correlation_strength must be in [0,1], got {correlation_strength}"
        )));
    }
    let palette = class_palette(cfg.num_classes);
    let glyph_cfg = SyntheticDatasetConfig {
        kind: DatasetKind::Shapes,
        channels: 1,
        jitter: cfg.jitter * 2.0,
        ..cfg.clone()
    };
    let n = cfg.num_classes * cfg.samples_per_class;
    let hw = cfg.image_size * cfg.image_size;
    let mut images = Tensor::zeros(vec![n, 3, cfg.image_size, cfg.image_size]);
    let mut labels = Vec::with_capacity(n);
    let mut rng = Rng::new(seed);
    for class in 0..cfg.num_classes {
        for i in 0..cfg.samples_per_class {
            let canvas = render_sample(&glyph_cfg, class, &mut rng);
            let tint = if rng.next_f64() < correlation_strength {
                palette[class]
            } else {
                palette[rng.below(cfg.num_classes)]
            };
            let sample = class * cfg.samples_per_class + i;
            for (ch, &tint_value) in tint.iter().enumerate() {
                let dst =
                    &mut images.data_mut()[(sample * 3 + ch) * hw..(sample * 3 + ch + 1) * hw];
                for (d, &g) in dst.iter_mut().zip(&canvas) {
                    *d = g * tint_value;
                }
            }
            labels.push(class as u32);
        }
    }
    Batch::new(images, labels)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionKind {
    Blur,
    Contrast,
    Noise,
}

impl CorruptionKind {
    pub const ALL: [CorruptionKind; 3] = [
        CorruptionKind::Blur,
        CorruptionKind::Contrast,
        CorruptionKind::Noise,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            CorruptionKind::Blur => "blur",
            CorruptionKind::Contrast => "contrast",
            CorruptionKind::Noise => "noise",
        }
    }
}

impl std::str::FromStr for CorruptionKind {
    type Err = DpsError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "blur" => Ok(CorruptionKind::Blur),
            "contrast" => Ok(CorruptionKind::Contrast),
            "noise" => Ok(CorruptionKind::Noise),
            other => Err(DpsError::InvalidConfig(format!(
                "unknown corruption kind '{other}'"
            ))),
        }
    }
}

/// Applies one corruption at severity 1..=3. Labels are untouched; pixel
/// values are clamped back to the original batch range.
///
/// blur: box filter of radius = severity (in-bounds normalized).
/// contrast: rescale toward the per-image mean by factor {0.7, 0.4, 0.15}.
/// noise: additive Gaussian, sigma = {0.05, 0.15, 0.3} of the batch range.
pub fn corrupt(batch: &Batch, kind: CorruptionKind, severity: u32, seed: u64) -> Result<Batch> {
    if !(1..=3).contains(&severity) {
        return Err(DpsError::InvalidConfig(format!(
            "severity must be in 1..=3, got {severity}"
        )));
    }
    let (c, h, w) = batch.sample_shape();
    let hw = h * w;
    let lo = batch
        .images
        .data()
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min);
    let hi = batch
        .images
        .data()
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);
    let mut out = batch.images.clone();
    let mut rng = Rng::new(seed);
    for i in 0..batch.len() {
        let base = i * c * hw;
        match kind {
            CorruptionKind::Blur => {
                let r = severity as isize;
                for ch in 0..c {
                    let src: Vec<f64> =
                        batch.images.data()[base + ch * hw..base + (ch + 1) * hw].to_vec();
                    let dst = &mut out.data_mut()[base + ch * hw..base + (ch + 1) * hw];
                    for y in 0..h as isize {
                        for x in 0..w as isize {
                            let mut acc = 0.0;
                            let mut cnt = 0.0;
                            for dy in -r..=r {
                                let yy = y + dy;
                                if yy < 0 || yy >= h as isize {
                                    continue;
                                }
                                for dx in -r..=r {
                                    let xx = x + dx;
                                    if xx < 0 || xx >= w as isize {
                                        continue;
                                    }
                                    acc += src[(yy * w as isize + xx) as usize];
                                    cnt += 1.0;
                                }
                            }
                            dst[(y * w as isize + x) as usize] = acc / cnt;
                        }
                    }
                }
            }
            CorruptionKind::Contrast => {
                let factor = [0.7, 0.4, 0.15][severity as usize - 1];
                let img = &batch.images.data()[base..base + c * hw];
                let mean = img.iter().sum::<f64>() / img.len() as f64;
                for (d, &s) in out.data_mut()[base..base + c * hw].iter_mut().zip(img) {
                    *d = mean + factor * (s - mean);
                }
            }
            CorruptionKind::Noise => {
                let sigma = [0.05, 0.15, 0.3][severity as usize - 1] * (hi - lo);
                for d in &mut out.data_mut()[base..base + c * hw] {
                    *d += sigma * rng.normal();
                }
            }
        }
    }
    for v in out.data_mut() {
        *v = v.clamp(lo, hi);
    }
    Batch::new(out, batch.labels.clone())
}

/// Relabels exactly round(ratio * N) samples with a uniformly random WRONG
/// class. Returns the noisy batch and the flip mask.
pub fn inject_label_noise(batch: &Batch, ratio: f64, seed: u64) -> Result<(Batch, Vec<bool>)> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(DpsError::InvalidConfig(format!(
            "ratio must be in [0,1], got {ratio}"
        )));
    }
    let n = batch.len();
    let num_classes = batch.num_classes();
    let flips = (ratio * n as f64).round() as usize;
    if flips > 0 && num_classes < 2 {
        return Err(DpsError::InvalidConfig(
            "label noise needs at least 2 classes".into(),
        ));
    }
    let mut rng = Rng::new(seed);
    let mut order: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut order);
    let mut mask = vec![false; n];
    let mut labels = batch.labels.clone();
    for &idx in order.iter().take(flips) {
        let original = labels[idx] as usize;
        let mut pick = rng.below(num_classes - 1);
        if pick >= original {
            pick += 1;
        }
        labels[idx] = pick as u32;
        mask[idx] = true;
    }
    Ok((Batch::new(batch.images.clone(), labels)?, mask))
}
