//! Bilinear sampling at fractional coordinates.
//!
//! Coordinates are in feature-map cells with cell centres at integers:
//! `x` is the column, `y` the row. Cells outside the map read as zero.

use numcore::{Graph, Tensor, Var};

use crate::{contract, FeatureMap, Result};

/// One-dimensional interpolation kernel `max(0, 1 − |a − b|)`.
pub fn kernel_k(a: f64, b: f64) -> f64 {
    (1.0 - (a - b).abs()).max(0.0)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SamplePoint {
    pub x: f64,
    pub y: f64,
}

impl SamplePoint {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }
}

/// The cells with nonzero weight for a sample at `(x, y)` on an `h × w`
/// grid, as `(row-major cell index, weight)`. Out-of-map cells and zero
/// weights are omitted, so an integer point yields its own cell with weight
/// exactly one.
pub fn taps(x: f64, y: f64, h: usize, w: usize) -> impl Iterator<Item = (usize, f64)> {
    let (x0, y0) = (x.floor(), y.floor());
    let (fx, fy) = (x - x0, y - y0);
    let corners = [
        (y0, x0, (1.0 - fx) * (1.0 - fy)),
        (y0, x0 + 1.0, fx * (1.0 - fy)),
        (y0 + 1.0, x0, (1.0 - fx) * fy),
        (y0 + 1.0, x0 + 1.0, fx * fy),
    ];
    corners.into_iter().filter_map(move |(cy, cx, wt)| {
        let inside = cy >= 0.0 && cx >= 0.0 && cy < h as f64 && cx < w as f64;
        (wt != 0.0 && inside).then(|| (cy as usize * w + cx as usize, wt))
    })
}

/// Feature vector at a fractional point.
pub fn bilinear_sample(z: &FeatureMap, p: SamplePoint) -> Vec<f64> {
    let c = z.channels();
    let mut out = vec![0.0; c];
    for (cell, wt) in taps(p.x, p.y, z.height(), z.width()) {
        for (o, v) in out.iter_mut().zip(&z.data()[cell * c..][..c]) {
            *o += wt * v;
        }
    }
    out
}

/// Graph operation sampling `z: [B, H, W, C]` at `points: [R, 2]` rows of
/// `(x, y)`. Rows are split evenly over the batch: row `r` reads image
/// `r / (R / B)`. Output is `[R, C]`, differentiable w.r.t. both inputs.
///
/// The coordinate gradient is the right derivative at integer coordinates.
pub fn bilinear_gather(g: &mut Graph, z: Var, points: Var) -> Result<Var> {
    let &[b, h, w, c] = g.shape(z) else {
        return Err(contract(format!("sampled map must be [B,H,W,C], got {:?}", g.shape(z))));
    };
    let &[r, 2] = g.shape(points) else {
        return Err(contract(format!("sample points must be [R,2], got {:?}", g.shape(points))));
    };
    if b == 0 || r % b != 0 {
        return Err(contract(format!("{r} sample rows do not split over batch {b}")));
    }
    let per = r / b;
    let (zs, ps) = (g.value(z).data(), g.value(points).data());
    let mut out = vec![0.0; r * c];
    for row in 0..r {
        let base = (row / per) * h * w;
        let o = &mut out[row * c..][..c];
        for (cell, wt) in taps(ps[2 * row], ps[2 * row + 1], h, w) {
            for (o, v) in o.iter_mut().zip(&zs[(base + cell) * c..][..c]) {
                *o += wt * v;
            }
        }
    }
    Ok(g.push_op(
        "bilinear_gather",
        Tensor::from_parts([r, c], out),
        &[z, points],
        Box::new(move |vals, _, gout, grads| {
            let ps = vals.get(points).data();
            if let Some(gz) = grads.acc(z) {
                for row in 0..r {
                    let base = (row / per) * h * w;
                    let go = &gout[row * c..][..c];
                    for (cell, wt) in taps(ps[2 * row], ps[2 * row + 1], h, w) {
                        for (d, gv) in gz[(base + cell) * c..][..c].iter_mut().zip(go) {
                            *d += wt * gv;
                        }
                    }
                }
            }
            if grads.wants(points) {
                let zs = vals.get(z).data();
                let mut gp = vec![0.0; 2 * r];
                for row in 0..r {
                    let base = (row / per) * h * w;
                    let (x, y) = (ps[2 * row], ps[2 * row + 1]);
                    let (x0, y0) = (x.floor(), y.floor());
                    let (fx, fy) = (x - x0, y - y0);
                    let cell = |dy: f64, dx: f64| -> Option<&[f64]> {
                        let (cy, cx) = (y0 + dy, x0 + dx);
                        (cy >= 0.0 && cx >= 0.0 && cy < h as f64 && cx < w as f64)
                            .then(|| &zs[(base + cy as usize * w + cx as usize) * c..][..c])
                    };
                    let corners = [cell(0.0, 0.0), cell(0.0, 1.0), cell(1.0, 0.0), cell(1.0, 1.0)];
                    let go = &gout[row * c..][..c];
                    let at = |k: usize, ch: usize| corners[k].map_or(0.0, |v| v[ch]);
                    let (mut dx, mut dy) = (0.0, 0.0);
                    for (ch, gv) in go.iter().enumerate() {
                        let (z00, z01, z10, z11) = (at(0, ch), at(1, ch), at(2, ch), at(3, ch));
                        dx += gv * ((1.0 - fy) * (z01 - z00) + fy * (z11 - z10));
                        dy += gv * ((1.0 - fx) * (z10 - z00) + fx * (z11 - z01));
                    }
                    gp[2 * row] = dx;
                    gp[2 * row + 1] = dy;
                }
                let acc = grads.acc(points).expect("wanted");
                for (a, v) in acc.iter_mut().zip(&gp) {
                    *a += v;
                }
            }
        }),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square() -> FeatureMap {
        // rows y, columns x: [[0, 1], [2, 3]]
        FeatureMap::from_fn(1, 2, 2, |_, y, x| (2 * y + x) as f64)
    }

    #[test]
    fn kernel_values() {
        assert_eq!(kernel_k(1.0, 1.0), 1.0);
        assert_eq!(kernel_k(0.0, 2.0), 0.0);
        assert_eq!(kernel_k(2.0, 1.25), 0.25);
    }

    #[test]
    fn hand_samples() {
        let z = square();
        assert_eq!(bilinear_sample(&z, SamplePoint::new(0.0, 0.0)), vec![0.0]);
        assert_eq!(bilinear_sample(&z, SamplePoint::new(0.5, 0.5)), vec![1.5]);
        assert_eq!(bilinear_sample(&z, SamplePoint::new(0.5, 1.0)), vec![2.5]);
    }

    #[test]
    fn outside_reads_zero() {
        let z = square();
        assert_eq!(bilinear_sample(&z, SamplePoint::new(-3.0, 0.5)), vec![0.0]);
        assert_eq!(bilinear_sample(&z, SamplePoint::new(1.5, 1.0)), vec![1.5]);
    }

    #[test]
    fn at_most_four_taps() {
        assert_eq!(taps(0.3, 0.6, 4, 4).count(), 4);
        assert_eq!(taps(1.0, 0.6, 4, 4).count(), 2);
        assert_eq!(taps(1.0, 2.0, 4, 4).collect::<Vec<_>>(), vec![(9, 1.0)]);
    }

    #[test]
    fn gather_matches_pointwise_sampling() {
        let z = FeatureMap::from_fn(3, 4, 5, |c, y, x| (c * 31 + y * 7 + x) as f64 * 0.1);
        let pts = [(0.2, 0.7), (3.9, 2.1), (-0.4, 1.5), (2.0, 3.0)];
        let mut g = Graph::new();
        let zv = g.constant(Tensor::from_parts([2, 4, 5, 3], [z.data(), z.data()].concat()));
        let flat: Vec<f64> = pts.iter().flat_map(|&(x, y)| [x, y]).collect();
        let pv = g.constant(Tensor::from_parts([4, 2], flat));
        let out = bilinear_gather(&mut g, zv, pv).unwrap();
        for (i, &(x, y)) in pts.iter().enumerate() {
            let want = bilinear_sample(&z, SamplePoint::new(x, y));
            assert_eq!(&g.value(out).data()[i * 3..][..3], &want[..]);
        }
    }
}
