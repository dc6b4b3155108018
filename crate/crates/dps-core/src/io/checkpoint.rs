//! Checkpoint file: a line-oriented text header (format version, input
//! shape, seed, target layer, layer list) terminated by an `end` line,
//! followed by a binary blob of little-endian f64 parameters in layer
//! order, weights then biases per layer.

use std::path::Path;

use crate::error::{DpsError, Result};
use crate::model::{LayerSpec, ModelCheckpoint};

fn header_text(model: &ModelCheckpoint) -> String {
    let mut out = String::new();
    out.push_str("DPSC 1\n");
    out.push_str(&format!(
        "input {} {} {}\n",
        model.input_shape[0], model.input_shape[1], model.input_shape[2]
    ));
    out.push_str(&format!("seed {}\n", model.rng_seed));
    out.push_str(&format!("target {}\n", model.target_layer_index));
    out.push_str(&format!("layers {}\n", model.layer_specs.len()));
    for spec in &model.layer_specs {
        match spec {
            LayerSpec::Conv {
                out_channels,
                kernel,
                stride,
                padding,
            } => {
                out.push_str(&format!(
                    "conv {out_channels} {kernel} {stride} {padding}\n"
                ));
            }
            LayerSpec::Relu => out.push_str("relu\n"),
            LayerSpec::MaxPool => out.push_str("maxpool\n"),
            LayerSpec::GlobalAvgPool => out.push_str("gap\n"),
            LayerSpec::Linear { out_features } => out.push_str(&format!("linear {out_features}\n")),
        }
    }
    out.push_str("end\n");
    out
}

pub fn write_checkpoint(path: &Path, model: &ModelCheckpoint) -> Result<()> {
    model.validate()?;
    let mut buf = header_text(model).into_bytes();
    for i in 0..model.layer_specs.len() {
        for &v in &model.weights[i] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for &v in &model.biases[i] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::write(path, &buf).map_err(|e| DpsError::io(path.display().to_string(), e))
}

pub fn read_checkpoint(path: &Path) -> Result<ModelCheckpoint> {
    let display = path.display().to_string();
    let buf = std::fs::read(path).map_err(|e| DpsError::io(&display, e))?;

    // split header from blob at the `end` line
    let marker: &[u8] = b"\nend\n";
    let header_end = buf
        .windows(marker.len())
        .position(|w| w == marker)
        .ok_or_else(|| DpsError::format(&display, "missing end-of-header marker"))?;
    let header = std::str::from_utf8(&buf[..header_end])
        .map_err(|_| DpsError::format(&display, "header is not utf-8"))?;
    let blob = &buf[header_end + marker.len()..];

    let mut lines = header.lines();
    let version_line = lines.next().unwrap_or_default();
    if version_line != "DPSC 1" {
        return Err(DpsError::format(
            &display,
            format!("unsupported header '{version_line}'"),
        ));
    }

    let mut input_shape = None;
    let mut seed = None;
    let mut target = None;
    let mut layer_count = None;
    let mut specs: Vec<LayerSpec> = Vec::new();

    let parse_usize = |tok: &str, what: &str| -> Result<usize> {
        tok.parse::<usize>()
            .map_err(|_| DpsError::format(&display, format!("bad {what} '{tok}'")))
    };

    for line in lines {
        let mut parts = line.split_whitespace();
        let Some(key) = parts.next() else { continue };
        let rest: Vec<&str> = parts.collect();
        match key {
            "input" => {
                if rest.len() != 3 {
                    return Err(DpsError::format(&display, "input line needs C H W"));
                }
                input_shape = Some([
                    parse_usize(rest[0], "input C")?,
                    parse_usize(rest[1], "input H")?,
                    parse_usize(rest[2], "input W")?,
                ]);
            }
            "seed" => {
                let v = rest
                    .first()
                    .and_then(|t| t.parse::<u64>().ok())
                    .ok_or_else(|| DpsError::format(&display, "bad seed line"))?;
                seed = Some(v);
            }
            "target" => target = Some(parse_usize(rest.first().unwrap_or(&""), "target")?),
            "layers" => {
                layer_count = Some(parse_usize(rest.first().unwrap_or(&""), "layer count")?)
            }
            "conv" => {
                if rest.len() != 4 {
                    return Err(DpsError::format(
                        &display,
                        "conv line needs out kernel stride pad",
                    ));
                }
                specs.push(LayerSpec::Conv {
                    out_channels: parse_usize(rest[0], "conv out")?,
                    kernel: parse_usize(rest[1], "conv kernel")?,
                    stride: parse_usize(rest[2], "conv stride")?,
                    padding: parse_usize(rest[3], "conv pad")?,
                });
            }
            "relu" => specs.push(LayerSpec::Relu),
            "maxpool" => specs.push(LayerSpec::MaxPool),
            "gap" => specs.push(LayerSpec::GlobalAvgPool),
            "linear" => specs.push(LayerSpec::Linear {
                out_features: parse_usize(rest.first().unwrap_or(&""), "linear out")?,
            }),
            other => {
                return Err(DpsError::format(
                    &display,
                    format!("unknown header key '{other}'"),
                ))
            }
        }
    }

    let input_shape =
        input_shape.ok_or_else(|| DpsError::format(&display, "missing input line"))?;
    let seed = seed.ok_or_else(|| DpsError::format(&display, "missing seed line"))?;
    let target = target.ok_or_else(|| DpsError::format(&display, "missing target line"))?;
    let layer_count =
        layer_count.ok_or_else(|| DpsError::format(&display, "missing layers line"))?;
    if specs.len() != layer_count {
        return Err(DpsError::format(
            &display,
            format!("header claims {layer_count} layers, found {}", specs.len()),
        ));
    }

    let mut model = ModelCheckpoint {
        input_shape,
        weights: vec![Vec::new(); specs.len()],
        biases: vec![Vec::new(); specs.len()],
        layer_specs: specs,
        rng_seed: seed,
        target_layer_index: target,
    };

    // structural validation before sizing the blob
    let shapes = model.layer_output_shapes().map_err(|e| match e {
        DpsError::InvalidModel(msg) => DpsError::format(&display, msg),
        other => other,
    })?;
    let mut off = 0usize;
    for (i, spec) in model.layer_specs.clone().iter().enumerate() {
        let in_c = if i == 0 {
            model.input_shape[0]
        } else {
            shapes[i - 1][0]
        };
        let (n_w, n_b) = match spec {
            LayerSpec::Conv {
                out_channels,
                kernel,
                ..
            } => (out_channels * in_c * kernel * kernel, *out_channels),
            LayerSpec::Linear { out_features } => (out_features * in_c, *out_features),
            _ => (0, 0),
        };
        let need = (n_w + n_b) * 8;
        if off + need > blob.len() {
            return Err(DpsError::format(&display, "parameter blob truncated"));
        }
        let mut take = |count: usize| -> Vec<f64> {
            let mut out = Vec::with_capacity(count);
            for _ in 0..count {
                out.push(f64::from_le_bytes(blob[off..off + 8].try_into().unwrap()));
                off += 8;
            }
            out
        };
        model.weights[i] = take(n_w);
        model.biases[i] = take(n_b);
    }
    if off != blob.len() {
        return Err(DpsError::format(
            &display,
            "trailing bytes in parameter blob",
        ));
    }
    model.validate().map_err(|e| match e {
        DpsError::InvalidModel(msg) => DpsError::format(&display, msg),
        other => other,
    })?;
    Ok(model)
}
