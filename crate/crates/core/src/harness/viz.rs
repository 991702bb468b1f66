//! Sampling-location traces of final-stage tokens.
//!
//! Each agglomeration fuses four samples per output token, so a token after
//! three agglomerations descends from `4³ = 64` sample locations on the stem
//! grid. A fractional sample location inherits its own four samples by
//! bilinearly interpolating those of its neighbouring tokens.

use std::fmt::Write as _;
use std::path::Path;

use numcore::Tensor;
use serde::Serialize;

use crate::model::Model;
use crate::params::Session;
use crate::sampler::taps;
use crate::windowing::OffsetField;
use crate::{contract, Result};

/// Pixels per stem-grid cell.
pub const STEM_STRIDE: f64 = 4.0;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TokenTrace {
    /// `(row, column)` in the final token grid.
    pub grid: (usize, usize),
    /// Image `(x, y)` of the token's regular footprint centre.
    pub location: (f64, f64),
    /// Image `(x, y)` of every ancestor sample.
    pub ancestors: Vec<(f64, f64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct WindowTrace {
    pub image_size: (usize, usize),
    pub tokens: Vec<TokenTrace>,
    /// Upper bound on any ancestor's displacement from its regular position,
    /// in pixels, implied by the offset magnitudes.
    pub max_displacement: f64,
}

/// Image coordinate of a stem-grid coordinate.
pub fn stem_to_image(v: f64) -> f64 {
    STEM_STRIDE * v + (STEM_STRIDE - 1.0) / 2.0
}

const CORNERS: [(f64, f64); 4] = [(0.0, 0.0), (1.0, 0.0), (0.0, 1.0), (1.0, 1.0)];

/// Four samples of a point `(x, y)` on the output grid of an agglomeration
/// whose input map has the given offsets.
fn children(p: (f64, f64), offsets: &OffsetField, out_h: usize, out_w: usize) -> [(f64, f64); 4] {
    CORNERS.map(|(dx, dy)| {
        let (mut x, mut y) = (2.0 * p.0 + dx, 2.0 * p.1 + dy);
        for (cell, wt) in taps(p.0, p.1, out_h, out_w) {
            let (ay, ax) = (2 * (cell / out_w) + dy as usize, 2 * (cell % out_w) + dx as usize);
            if ay < offsets.height() && ax < offsets.width() {
                let (ox, oy) = offsets.at(ay, ax);
                x += wt * ox;
                y += wt * oy;
            }
        }
        (x, y)
    })
}

/// Traces every final token given the three agglomeration offset fields,
/// ordered from the first stage.
pub fn trace(fields: &[OffsetField], image_size: (usize, usize)) -> Result<WindowTrace> {
    if fields.len() != 3 {
        return Err(contract(format!("expected 3 offset fields, got {}", fields.len())));
    }
    let mut grids = vec![(fields[0].height(), fields[0].width())];
    for f in fields {
        let (h, w) = (f.height(), f.width());
        grids.push((h.div_ceil(2), w.div_ceil(2)));
    }
    for (i, f) in fields.iter().enumerate().skip(1) {
        if (f.height(), f.width()) != grids[i] {
            return Err(contract("offset fields do not form an agglomeration chain"));
        }
    }
    let (fh, fw) = grids[3];
    let mut tokens = Vec::with_capacity(fh * fw);
    for r in 0..fh {
        for c in 0..fw {
            let mut points = vec![(c as f64, r as f64)];
            for level in (0..3).rev() {
                let (oh, ow) = grids[level + 1];
                points = points.iter().flat_map(|&p| children(p, &fields[level], oh, ow)).collect();
            }
            let span = 8.0;
            let centre = |v: usize| stem_to_image(span * v as f64 + (span - 1.0) / 2.0);
            tokens.push(TokenTrace {
                grid: (r, c),
                location: (centre(c), centre(r)),
                ancestors: points
                    .into_iter()
                    .map(|(x, y)| (stem_to_image(x), stem_to_image(y)))
                    .collect(),
            });
        }
    }
    let max_displacement = fields
        .iter()
        .enumerate()
        .map(|(i, f)| STEM_STRIDE * (1 << i) as f64 * f.max_abs())
        .sum();
    Ok(WindowTrace {
        image_size,
        tokens,
        max_displacement,
    })
}

/// Runs `image: [3, H, W]` through the model and traces its final tokens.
/// Regular (offset-free) models trace with zero offsets.
pub fn viz_windows(model: &Model, image: &Tensor) -> Result<WindowTrace> {
    let (h, w) = model.cfg.image_size;
    if image.shape() != [3, h, w] {
        return Err(contract(format!(
            "model expects a [3, {h}, {w}] image, got {:?}",
            image.shape()
        )));
    }
    let mut s = Session::inference(&model.store);
    let x = s.constant(image.clone().reshape([1, 3, h, w])?);
    let f = model.forward(&mut s, x)?;
    let fields = f
        .encoded
        .agglomeration_offsets
        .iter()
        .zip(&f.encoded.stage_tokens)
        .map(|(o, &(gh, gw))| match o {
            Some(v) => {
                let t = s.value(*v);
                OffsetField::from_tensor(&t.clone().reshape([gh, gw, 2])?)
            }
            None => Ok(OffsetField::zeros(gh, gw)),
        })
        .collect::<Result<Vec<_>>>()?;
    trace(&fields, (h, w))
}

/// Writes the image upscaled by `scale` with ancestors in red and token
/// locations in blue, as a binary portable pixmap.
pub fn write_ppm(path: impl AsRef<Path>, image: &Tensor, trace: &WindowTrace, scale: usize) -> Result<()> {
    let &[3, h, w] = image.shape() else {
        return Err(contract(format!("expected a [3, H, W] image, got {:?}", image.shape())));
    };
    let (sh, sw) = (h * scale, w * scale);
    let mut px = vec![[0u8; 3]; sh * sw];
    for y in 0..sh {
        for x in 0..sw {
            for c in 0..3 {
                let v = image.data()[c * h * w + (y / scale) * w + x / scale];
                px[y * sw + x][c] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            }
        }
    }
    let mut dot = |(x, y): (f64, f64), colour: [u8; 3]| {
        let (cx, cy) = ((x + 0.5) * scale as f64, (y + 0.5) * scale as f64);
        for dy in -1i64..=1 {
            for dx in -1i64..=1 {
                let (px_, py_) = (cx.floor() as i64 + dx, cy.floor() as i64 + dy);
                if px_ >= 0 && py_ >= 0 && (px_ as usize) < sw && (py_ as usize) < sh {
                    px[py_ as usize * sw + px_ as usize] = colour;
                }
            }
        }
    };
    for t in &trace.tokens {
        for &a in &t.ancestors {
            dot(a, [230, 30, 30]);
        }
    }
    for t in &trace.tokens {
        dot(t.location, [40, 80, 255]);
    }
    let mut header = String::new();
    write!(header, "P6\n{sw} {sh}\n255\n").expect("string write");
    let mut bytes = header.into_bytes();
    bytes.extend(px.iter().flatten());
    std::fs::write(path, bytes)?;
    Ok(())
}
