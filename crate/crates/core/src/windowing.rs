//! Regular and irregular window partition.
//!
//! A map of `H × W` cells is tiled by `S × S` windows after conceptually
//! padding the bottom and right edges to multiples of `S`. Slots are
//! numbered window-major (windows row-major over the window grid), then
//! row-major inside a window. An irregular window samples each slot at its
//! regular anchor plus the offset predicted at that anchor.

use std::sync::Arc;

use numcore::{Graph, Tensor, Var};

use crate::sampler::{bilinear_gather, bilinear_sample, SamplePoint};
use crate::{contract, FeatureMap, Result};

/// Per-cell displacements `(Δx, Δy)` in cells.
#[derive(Clone, Debug, PartialEq)]
pub struct OffsetField {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl OffsetField {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0.0; 2 * height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> (f64, f64)) -> Self {
        let mut o = Self::zeros(height, width);
        for y in 0..height {
            for x in 0..width {
                let (dx, dy) = f(y, x);
                o.data[2 * (y * width + x)] = dx;
                o.data[2 * (y * width + x) + 1] = dy;
            }
        }
        o
    }

    /// From a `[H, W, 2]` or `[1, H, W, 2]` tensor, as produced by
    /// [`predict_offsets`].
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (h, w) = match *t.shape() {
            [h, w, 2] | [1, h, w, 2] => (h, w),
            _ => return Err(contract(format!("offset field must be [H,W,2], got {:?}", t.shape()))),
        };
        if !t.is_finite() {
            return Err(contract("offset field holds non-finite values"));
        }
        Ok(Self {
            height: h,
            width: w,
            data: t.data().to_vec(),
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// `(Δx, Δy)` at cell `(y, x)`.
    pub fn at(&self, y: usize, x: usize) -> (f64, f64) {
        let i = 2 * (y * self.width + x);
        (self.data[i], self.data[i + 1])
    }

    /// Interleaved `(Δx, Δy)` pairs, row-major over cells.
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Offset prediction: a 3×3, stride-1, padding-1 convolution from `C` to 2
/// channels over `z: [B, H, W, C]`, giving `[B, H, W, 2]`.
pub fn predict_offsets(g: &mut Graph, z: Var, weight: Var, bias: Var) -> Result<Var> {
    let ws = g.shape(weight);
    if ws.len() != 4 || ws[0] != 3 || ws[1] != 3 || ws[3] != 2 {
        return Err(contract(format!("offset predictor weights must be [3,3,C,2], got {ws:?}")));
    }
    Ok(g.conv2d(z, weight, bias, 1, 1)?)
}

/// Index bookkeeping for tiling an `H × W` map with `S × S` windows.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WindowGeometry {
    pub height: usize,
    pub width: usize,
    pub size: usize,
}

impl WindowGeometry {
    pub fn new(height: usize, width: usize, size: usize) -> Result<Self> {
        if size == 0 {
            return Err(contract("window size must be at least 1"));
        }
        if height == 0 || width == 0 {
            return Err(contract(format!("window size {size} exceeds empty {height}×{width} map")));
        }
        Ok(Self { height, width, size })
    }

    pub fn windows_y(&self) -> usize {
        self.height.div_ceil(self.size)
    }

    pub fn windows_x(&self) -> usize {
        self.width.div_ceil(self.size)
    }

    pub fn num_windows(&self) -> usize {
        self.windows_y() * self.windows_x()
    }

    pub fn window_len(&self) -> usize {
        self.size * self.size
    }

    pub fn num_slots(&self) -> usize {
        self.num_windows() * self.window_len()
    }

    /// Rows and columns of padding added at the bottom and right.
    pub fn pad_spec(&self) -> (usize, usize) {
        (
            self.windows_y() * self.size - self.height,
            self.windows_x() * self.size - self.width,
        )
    }

    /// Anchor cell `(y, x)` of a slot; may lie in the padding.
    pub fn anchor(&self, slot: usize) -> (usize, usize) {
        let (win, n) = (slot / self.window_len(), slot % self.window_len());
        let (wr, wc) = (win / self.windows_x(), win % self.windows_x());
        (wr * self.size + n / self.size, wc * self.size + n % self.size)
    }

    pub fn is_valid(&self, slot: usize) -> bool {
        let (y, x) = self.anchor(slot);
        y < self.height && x < self.width
    }

    /// Slot → flattened cell row over a batch, `None` for padding.
    pub fn anchor_rows(&self, batch: usize) -> Arc<[Option<usize>]> {
        let hw = self.height * self.width;
        (0..batch)
            .flat_map(|b| {
                (0..self.num_slots()).map(move |s| {
                    let (y, x) = self.anchor(s);
                    self.is_valid(s).then(|| b * hw + y * self.width + x)
                })
            })
            .collect()
    }

    /// Cell → slot row over a batch; the inverse of [`Self::anchor_rows`].
    pub fn scatter_rows(&self, batch: usize) -> Arc<[Option<usize>]> {
        let mut idx = vec![None; batch * self.height * self.width];
        for b in 0..batch {
            for s in 0..self.num_slots() {
                let (y, x) = self.anchor(s);
                if self.is_valid(s) {
                    idx[(b * self.height + y) * self.width + x] = Some(b * self.num_slots() + s);
                }
            }
        }
        idx.into()
    }

    pub fn valid_mask(&self, batch: usize) -> Arc<[bool]> {
        (0..batch)
            .flat_map(|_| (0..self.num_slots()).map(|s| self.is_valid(s)))
            .collect()
    }

    /// `[batch · slots, 2]` anchor coordinates as `(x, y)` rows.
    pub fn anchor_points(&self, batch: usize) -> Tensor {
        let one: Vec<f64> = (0..self.num_slots())
            .flat_map(|s| {
                let (y, x) = self.anchor(s);
                [x as f64, y as f64]
            })
            .collect();
        Tensor::from_parts([batch * self.num_slots(), 2], one.repeat(batch))
    }
}

/// Plain-value description of a window partition.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowSet {
    pub window_size: usize,
    /// Sample points, `S²` per window.
    pub windows: Vec<Vec<SamplePoint>>,
    /// Regular anchors `(y, x)`, `S²` per window.
    pub origin_grid: Vec<Vec<(usize, usize)>>,
    /// False for anchors in the padding.
    pub valid: Vec<Vec<bool>>,
    /// Padding rows (bottom) and columns (right).
    pub pad_spec: (usize, usize),
    height: usize,
    width: usize,
}

/// Partitions `z` into (possibly irregular) windows of size `s`. Offsets,
/// when given, are read at each valid anchor; padded anchors stay regular.
pub fn partition(z: &FeatureMap, offsets: Option<&OffsetField>, s: usize) -> Result<WindowSet> {
    let geom = WindowGeometry::new(z.height(), z.width(), s)?;
    if let Some(o) = offsets {
        if (o.height(), o.width()) != (z.height(), z.width()) {
            return Err(contract(format!(
                "offset field {}×{} does not match map {}×{}",
                o.height(),
                o.width(),
                z.height(),
                z.width()
            )));
        }
    }
    let (mut windows, mut origin_grid, mut valid) = (Vec::new(), Vec::new(), Vec::new());
    for w in 0..geom.num_windows() {
        let slots = w * geom.window_len()..(w + 1) * geom.window_len();
        let anchors: Vec<(usize, usize)> = slots.clone().map(|i| geom.anchor(i)).collect();
        let ok: Vec<bool> = slots.map(|i| geom.is_valid(i)).collect();
        windows.push(
            anchors
                .iter()
                .zip(&ok)
                .map(|(&(y, x), &v)| {
                    let (dx, dy) = match offsets {
                        Some(o) if v => o.at(y, x),
                        _ => (0.0, 0.0),
                    };
                    SamplePoint::new(x as f64 + dx, y as f64 + dy)
                })
                .collect(),
        );
        origin_grid.push(anchors);
        valid.push(ok);
    }
    Ok(WindowSet {
        window_size: s,
        windows,
        origin_grid,
        valid,
        pad_spec: geom.pad_spec(),
        height: z.height(),
        width: z.width(),
    })
}

impl WindowSet {
    pub fn num_windows(&self) -> usize {
        self.windows.len()
    }
}

/// `[num_windows, S², C]` features at the window sample points; padded
/// slots are zero.
pub fn gather_windows(z: &FeatureMap, ws: &WindowSet) -> Result<Tensor> {
    if (ws.height, ws.width) != (z.height(), z.width()) {
        return Err(contract("window set was built for a different map"));
    }
    let c = z.channels();
    let n = ws.window_size * ws.window_size;
    let mut data = Vec::with_capacity(ws.num_windows() * n * c);
    for (pts, ok) in ws.windows.iter().zip(&ws.valid) {
        for (&p, &v) in pts.iter().zip(ok) {
            if v {
                data.extend(bilinear_sample(z, p));
            } else {
                data.extend(std::iter::repeat_n(0.0, c));
            }
        }
    }
    Ok(Tensor::from_parts([ws.num_windows(), n, c], data))
}

/// Graph form of partition + gather over `z: [B, H, W, C]`, with optional
/// offsets `[B, H, W, 2]`. Returns `[B · num_windows, S², C]`.
pub fn gather(g: &mut Graph, z: Var, offsets: Option<Var>, geom: &WindowGeometry) -> Result<Var> {
    let &[b, h, w, c] = g.shape(z) else {
        return Err(contract(format!("map must be [B,H,W,C], got {:?}", g.shape(z))));
    };
    if (h, w) != (geom.height, geom.width) {
        return Err(contract(format!(
            "geometry {}×{} does not match map {h}×{w}",
            geom.height, geom.width
        )));
    }
    let rows = geom.anchor_rows(b);
    let tokens = match offsets {
        None => {
            let flat = g.reshape(z, [b * h * w, c])?;
            g.index_rows(flat, rows)?
        }
        Some(o) => {
            if g.shape(o) != [b, h, w, 2] {
                return Err(contract(format!("offsets must be [{b},{h},{w},2], got {:?}", g.shape(o))));
            }
            let flat = g.reshape(o, [b * h * w, 2])?;
            let picked = g.index_rows(flat, rows)?;
            let anchors = g.constant(geom.anchor_points(b));
            let pts = g.add(picked, anchors)?;
            bilinear_gather(g, z, pts)?
        }
    };
    Ok(g.reshape(tokens, [b * geom.num_windows(), geom.window_len(), c])?)
}

/// Writes each valid slot back to its anchor cell: the inverse of a
/// zero-offset [`gather`]. `windows: [B · num_windows, S², C]` →
/// `[B, H, W, C]`.
pub fn scatter(g: &mut Graph, windows: Var, geom: &WindowGeometry, batch: usize) -> Result<Var> {
    let c = *g.shape(windows).last().unwrap_or(&0);
    if g.value(windows).numel() != batch * geom.num_slots() * c {
        return Err(contract(format!(
            "{:?} windows do not fit geometry {geom:?}",
            g.shape(windows)
        )));
    }
    let flat = g.reshape(windows, [batch * geom.num_slots(), c])?;
    let cells = g.index_rows(flat, geom.scatter_rows(batch))?;
    Ok(g.reshape(cells, [batch, geom.height, geom.width, c])?)
}
