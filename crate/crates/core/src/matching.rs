//! Set-prediction matching: pair costs, optimal assignment and the set loss.
//!
//! Boxes are `(cx, cy, w, h)` normalised to the image. The human head has
//! two classes (`0` = human, `1` = background); object and interaction
//! heads use their last class as background.

use std::ops::{Add, Div, Mul, Sub};

use numcore::{Graph, Tensor, Var};

use crate::model::HeadOutputs;
use crate::{contract, Result};

pub type BoxCxcywh = [f64; 4];

pub const HUMAN: usize = 0;
pub const HUMAN_BACKGROUND: usize = 1;

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct GroundTruthInstance {
    pub human_box: BoxCxcywh,
    pub object_box: BoxCxcywh,
    pub object_class: usize,
    pub interaction_class: usize,
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct HoiPrediction {
    pub human_box: BoxCxcywh,
    pub object_box: BoxCxcywh,
    /// Two logits: human, background.
    pub human_logits: Vec<f64>,
    /// `K_o + 1` logits, background last.
    pub object_logits: Vec<f64>,
    /// `K_r + 1` logits, background last.
    pub interaction_logits: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossWeights {
    /// Weight of the classification terms.
    pub beta1: f64,
    /// Per-head classification weights (human, object, interaction).
    pub alpha: [f64; 3],
    /// Weight of the box terms.
    pub beta2: f64,
    pub lambda_giou: f64,
    pub lambda_l1: f64,
    /// Relative weight of the background targets of unmatched queries.
    pub background_weight: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            beta1: 1.0,
            alpha: [1.0; 3],
            beta2: 2.5,
            lambda_giou: 2.0,
            lambda_l1: 5.0,
            background_weight: 0.1,
        }
    }
}

/// Arithmetic needed by [`giou_xyxy`], so the same code yields values and
/// derivatives.
pub trait Scalar: Copy + Add<Output = Self> + Sub<Output = Self> + Mul<Output = Self> + Div<Output = Self> {
    fn lit(v: f64) -> Self;
    fn value(self) -> f64;

    fn max(self, o: Self) -> Self {
        if o.value() > self.value() {
            o
        } else {
            self
        }
    }

    fn min(self, o: Self) -> Self {
        if o.value() < self.value() {
            o
        } else {
            self
        }
    }
}

impl Scalar for f64 {
    fn lit(v: f64) -> Self {
        v
    }

    fn value(self) -> f64 {
        self
    }
}

/// Forward-mode dual number carrying four partial derivatives.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Dual4 {
    pub v: f64,
    pub d: [f64; 4],
}

impl Dual4 {
    pub fn var(v: f64, i: usize) -> Self {
        let mut d = [0.0; 4];
        d[i] = 1.0;
        Self { v, d }
    }
}

impl Add for Dual4 {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self {
            v: self.v + o.v,
            d: std::array::from_fn(|i| self.d[i] + o.d[i]),
        }
    }
}

impl Sub for Dual4 {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        Self {
            v: self.v - o.v,
            d: std::array::from_fn(|i| self.d[i] - o.d[i]),
        }
    }
}

#[allow(clippy::suspicious_arithmetic_impl)]
impl Mul for Dual4 {
    type Output = Self;
    fn mul(self, o: Self) -> Self {
        Self {
            v: self.v * o.v,
            d: std::array::from_fn(|i| self.d[i] * o.v + self.v * o.d[i]),
        }
    }
}

#[allow(clippy::suspicious_arithmetic_impl)]
impl Div for Dual4 {
    type Output = Self;
    fn div(self, o: Self) -> Self {
        Self {
            v: self.v / o.v,
            d: std::array::from_fn(|i| (self.d[i] * o.v - self.v * o.d[i]) / (o.v * o.v)),
        }
    }
}

impl Scalar for Dual4 {
    fn lit(v: f64) -> Self {
        Self { v, d: [0.0; 4] }
    }

    fn value(self) -> f64 {
        self.v
    }
}

pub fn cxcywh_to_xyxy<T: Scalar>(b: [T; 4]) -> [T; 4] {
    let half = T::lit(0.5);
    [b[0] - half * b[2], b[1] - half * b[3], b[0] + half * b[2], b[1] + half * b[3]]
}

/// Generalised IoU of two `(x0, y0, x1, y1)` boxes. A zero-area box has IoU
/// zero; the enclosing-box penalty still applies.
pub fn giou_xyxy<T: Scalar>(a: [T; 4], b: [T; 4]) -> T {
    let zero = T::lit(0.0);
    let area = |r: [T; 4]| (r[2] - r[0]).max(zero) * (r[3] - r[1]).max(zero);
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(zero);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(zero);
    let inter = iw * ih;
    let union = area(a) + area(b) - inter;
    let iou = if union.value() > 0.0 { inter / union } else { zero };
    let ew = a[2].max(b[2]) - a[0].min(b[0]);
    let eh = a[3].max(b[3]) - a[1].min(b[1]);
    let enclose = ew.max(zero) * eh.max(zero);
    if enclose.value() > 0.0 {
        iou - (enclose - union) / enclose
    } else {
        iou
    }
}

pub fn giou(a: BoxCxcywh, b: BoxCxcywh) -> f64 {
    giou_xyxy(cxcywh_to_xyxy(a), cxcywh_to_xyxy(b))
}

pub fn iou_xyxy(a: [f64; 4], b: [f64; 4]) -> f64 {
    let area = |r: [f64; 4]| (r[2] - r[0]).max(0.0) * (r[3] - r[1]).max(0.0);
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let union = area(a) + area(b) - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

pub fn iou(a: BoxCxcywh, b: BoxCxcywh) -> f64 {
    iou_xyxy(cxcywh_to_xyxy(a), cxcywh_to_xyxy(b))
}

/// `−log softmax(logits)[target]`.
pub fn cross_entropy(logits: &[f64], target: usize) -> Result<f64> {
    if target >= logits.len() {
        return Err(contract(format!("class {target} outside {} logits", logits.len())));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    Ok(lse - logits[target])
}

/// `λ_giou·(1 − giou) + λ_L1·‖a − b‖₁`.
pub fn box_cost(p: BoxCxcywh, g: BoxCxcywh, w: &LossWeights) -> f64 {
    let l1: f64 = p.iter().zip(&g).map(|(a, b)| (a - b).abs()).sum();
    w.lambda_giou * (1.0 - giou(p, g)) + w.lambda_l1 * l1
}

/// Matching cost of one prediction against one ground truth.
pub fn pair_cost(g: &GroundTruthInstance, p: &HoiPrediction, w: &LossWeights) -> Result<f64> {
    let cls = w.alpha[0] * cross_entropy(&p.human_logits, HUMAN)?
        + w.alpha[1] * cross_entropy(&p.object_logits, g.object_class)?
        + w.alpha[2] * cross_entropy(&p.interaction_logits, g.interaction_class)?;
    if g.object_class + 1 >= p.object_logits.len() || g.interaction_class + 1 >= p.interaction_logits.len() {
        return Err(contract("ground-truth class collides with the background class"));
    }
    let boxes = box_cost(p.human_box, g.human_box, w) + box_cost(p.object_box, g.object_box, w);
    Ok(w.beta1 * cls + w.beta2 * boxes)
}

/// Background classification loss of an unmatched prediction.
pub fn background_cost(p: &HoiPrediction, w: &LossWeights) -> Result<f64> {
    let cls = w.alpha[0] * cross_entropy(&p.human_logits, HUMAN_BACKGROUND)?
        + w.alpha[1] * cross_entropy(&p.object_logits, p.object_logits.len() - 1)?
        + w.alpha[2] * cross_entropy(&p.interaction_logits, p.interaction_logits.len() - 1)?;
    Ok(w.background_weight * w.beta1 * cls)
}

/// `N × M` costs, predictions by ground truths.
#[derive(Clone, Debug, PartialEq)]
pub struct CostMatrix {
    pub predictions: usize,
    pub ground_truths: usize,
    pub values: Vec<f64>,
}

impl CostMatrix {
    pub fn new(predictions: usize, ground_truths: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != predictions * ground_truths {
            return Err(contract(format!(
                "{} costs for a {predictions}×{ground_truths} matrix",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(contract("cost matrix holds non-finite values"));
        }
        Ok(Self {
            predictions,
            ground_truths,
            values,
        })
    }

    pub fn from_fn(predictions: usize, ground_truths: usize, mut f: impl FnMut(usize, usize) -> f64) -> Result<Self> {
        let values = (0..predictions)
            .flat_map(|p| (0..ground_truths).map(move |g| (p, g)))
            .map(|(p, g)| f(p, g))
            .collect();
        Self::new(predictions, ground_truths, values)
    }

    pub fn at(&self, pred: usize, gt: usize) -> f64 {
        self.values[pred * self.ground_truths + gt]
    }

    pub fn build(preds: &[HoiPrediction], gts: &[GroundTruthInstance], w: &LossWeights) -> Result<Self> {
        let mut values = Vec::with_capacity(preds.len() * gts.len());
        for p in preds {
            for g in gts {
                values.push(pair_cost(g, p, w)?);
            }
        }
        Self::new(preds.len(), gts.len(), values)
    }
}

/// One-to-one matching: `gt_to_pred[i]` is the prediction assigned to
/// ground truth `i`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Assignment {
    pub gt_to_pred: Vec<usize>,
}

impl Assignment {
    pub fn total(&self, cost: &CostMatrix) -> f64 {
        self.gt_to_pred.iter().enumerate().map(|(g, &p)| cost.at(p, g)).sum()
    }

    /// The ground truth matched to each prediction, if any.
    pub fn pred_to_gt(&self, predictions: usize) -> Vec<Option<usize>> {
        let mut out = vec![None; predictions];
        for (g, &p) in self.gt_to_pred.iter().enumerate() {
            out[p] = Some(g);
        }
        out
    }
}

/// Minimum-cost assignment of every ground truth to a distinct prediction
/// (Hungarian method with row/column potentials, `O(M²N)`).
pub fn hungarian(cost: &CostMatrix) -> Result<Assignment> {
    let (m, n) = (cost.ground_truths, cost.predictions);
    if m > n {
        return Err(contract(format!("{m} ground truths exceed {n} predictions")));
    }
    if m == 0 {
        return Ok(Assignment { gt_to_pred: Vec::new() });
    }
    // 1-based rows (ground truths) and columns (predictions); column 0 is a
    // sentinel.
    let a = |i: usize, j: usize| cost.at(j - 1, i - 1);
    let mut u = vec![0.0; m + 1];
    let mut v = vec![0.0; n + 1];
    let mut row_of = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=m {
        row_of[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = row_of[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = a(i0, j) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[row_of[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if row_of[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of[j0] = row_of[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut gt_to_pred = vec![0; m];
    for j in 1..=n {
        if row_of[j] != 0 {
            gt_to_pred[row_of[j] - 1] = j - 1;
        }
    }
    Ok(Assignment { gt_to_pred })
}

/// Matched pair costs plus the background loss of unmatched predictions.
pub fn set_loss(preds: &[HoiPrediction], gts: &[GroundTruthInstance], w: &LossWeights) -> Result<f64> {
    let cost = CostMatrix::build(preds, gts, w)?;
    let assignment = hungarian(&cost)?;
    let matched = assignment.pred_to_gt(preds.len());
    let mut total = assignment.total(&cost);
    for (p, m) in preds.iter().zip(&matched) {
        if m.is_none() {
            total += background_cost(p, w)?;
        }
    }
    Ok(total)
}

/// Graph form of [`set_loss`] summed over a batch. Head outputs hold
/// `batch · n` image-major rows. Assignments are computed from the current
/// values and held fixed in the backward pass.
pub fn set_loss_graph(
    g: &mut Graph,
    o: &HeadOutputs,
    n: usize,
    gts: &[Vec<GroundTruthInstance>],
    w: &LossWeights,
) -> Result<(Var, Vec<Assignment>)> {
    let batch = gts.len();
    let rows = g.shape(o.human_logits)[0];
    if rows != batch * n {
        return Err(contract(format!("{rows} prediction rows for {batch} images of {n} queries")));
    }
    let (ko, kr) = (g.shape(o.object_logits)[1], g.shape(o.interaction_logits)[1]);
    let preds = crate::model::read_predictions(g, o, batch, n);
    let mut human_t = vec![HUMAN_BACKGROUND; rows];
    let mut obj_t = vec![ko - 1; rows];
    let mut int_t = vec![kr - 1; rows];
    let mut cls_w = vec![w.background_weight * w.beta1; rows];
    let mut human_boxes = Vec::new();
    let mut object_boxes = Vec::new();
    let mut assignments = Vec::with_capacity(batch);
    for (b, (p, gt)) in preds.iter().zip(gts).enumerate() {
        let cost = CostMatrix::build(p, gt, w)?;
        let a = hungarian(&cost)?;
        for (gi, &pi) in a.gt_to_pred.iter().enumerate() {
            let r = b * n + pi;
            human_t[r] = HUMAN;
            obj_t[r] = gt[gi].object_class;
            int_t[r] = gt[gi].interaction_class;
            cls_w[r] = w.beta1;
            human_boxes.push((r, gt[gi].human_box));
            object_boxes.push((r, gt[gi].object_box));
        }
        assignments.push(a);
    }
    let weights = |alpha: f64| cls_w.iter().map(|c| c * alpha).collect::<Vec<_>>();
    let terms = [
        g.cross_entropy(o.human_logits, &human_t, &weights(w.alpha[0]))?,
        g.cross_entropy(o.object_logits, &obj_t, &weights(w.alpha[1]))?,
        g.cross_entropy(o.interaction_logits, &int_t, &weights(w.alpha[2]))?,
        box_loss(g, o.human_box, human_boxes, w)?,
        box_loss(g, o.object_box, object_boxes, w)?,
    ];
    Ok((g.add_n(&terms)?, assignments))
}

/// `β₂ Σ λ_giou·(1 − giou) + λ_L1·‖p − t‖₁` over `(row, target)` pairs of a
/// `[R, 4]` box tensor.
pub fn box_loss(g: &mut Graph, boxes: Var, targets: Vec<(usize, BoxCxcywh)>, w: &LossWeights) -> Result<Var> {
    let &[rows, 4] = g.shape(boxes) else {
        return Err(contract(format!("boxes must be [R,4], got {:?}", g.shape(boxes))));
    };
    if let Some((r, _)) = targets.iter().find(|(r, _)| *r >= rows) {
        return Err(contract(format!("box row {r} outside {rows}")));
    }
    let (lg, ll, beta2) = (w.lambda_giou, w.lambda_l1, w.beta2);
    let data = g.value(boxes).data();
    let total: f64 = targets
        .iter()
        .map(|(r, t)| box_cost(data[4 * r..4 * r + 4].try_into().unwrap(), *t, w))
        .sum();
    Ok(g.push_op(
        "box_loss",
        Tensor::scalar(beta2 * total),
        &[boxes],
        Box::new(move |vals, _, gout, grads| {
            let Some(gb) = grads.acc(boxes) else { return };
            let data = vals.get(boxes).data();
            for (r, t) in &targets {
                let p: [Dual4; 4] = std::array::from_fn(|i| Dual4::var(data[4 * r + i], i));
                let tt = t.map(Dual4::lit);
                let gi = giou_xyxy(cxcywh_to_xyxy(p), cxcywh_to_xyxy(tt));
                for i in 0..4 {
                    let diff = data[4 * r + i] - t[i];
                    let sign = if diff > 0.0 {
                        1.0
                    } else if diff < 0.0 {
                        -1.0
                    } else {
                        0.0
                    };
                    gb[4 * r + i] += gout[0] * beta2 * (-lg * gi.d[i] + ll * sign);
                }
            }
        }),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn giou_hand_values() {
        let a = [0.0, 0.0, 1.0, 1.0];
        assert_eq!(giou_xyxy(a, a), 1.0);
        assert!((giou_xyxy(a, [1.0, 1.0, 2.0, 2.0]) + 0.5).abs() < 1e-12);
        assert!((giou_xyxy([0.0, 0.0, 2.0, 2.0], [1.0, 1.0, 2.0, 2.0]) - 0.25).abs() < 1e-12);
    }

    #[test]
    fn degenerate_box_keeps_enclosing_penalty() {
        let v = giou_xyxy([0.0, 0.0, 0.0, 1.0], [1.0, 0.0, 2.0, 1.0]);
        assert!((v - (0.0 - (2.0 - 1.0) / 2.0)).abs() < 1e-12);
    }

    #[test]
    fn hungarian_small_cases() {
        let c = CostMatrix::from_fn(3, 3, |p, g| if p == g { 0.0 } else { 1.0 }).unwrap();
        assert_eq!(hungarian(&c).unwrap().gt_to_pred, vec![0, 1, 2]);
        let c = CostMatrix::new(2, 2, vec![1.0, 2.0, 2.0, 4.0]).unwrap();
        let a = hungarian(&c).unwrap();
        assert_eq!(a.gt_to_pred, vec![1, 0]);
        assert_eq!(a.total(&c), 4.0);
    }

    #[test]
    fn more_ground_truths_than_predictions_is_an_error() {
        let c = CostMatrix::new(1, 2, vec![0.0, 0.0]).unwrap();
        assert!(hungarian(&c).is_err());
    }

    #[test]
    fn uniform_logits_cost_log_k() {
        assert!((cross_entropy(&[0.0; 5], 3).unwrap() - 5f64.ln()).abs() < 1e-12);
        assert!(cross_entropy(&[0.0; 2], 2).is_err());
    }

    #[test]
    fn dual_gradient_matches_differences() {
        let t = cxcywh_to_xyxy([0.5, 0.45, 0.3, 0.2]);
        let p = [0.42, 0.5, 0.25, 0.33];
        let d: [Dual4; 4] = std::array::from_fn(|i| Dual4::var(p[i], i));
        let gd = giou_xyxy(cxcywh_to_xyxy(d), t.map(Dual4::lit));
        for i in 0..4 {
            let (mut a, mut b) = (p, p);
            a[i] += 1e-6;
            b[i] -= 1e-6;
            let num = (giou_xyxy(cxcywh_to_xyxy(a), t) - giou_xyxy(cxcywh_to_xyxy(b), t)) / 2e-6;
            assert!((gd.d[i] - num).abs() < 1e-7, "{i}: {} vs {num}", gd.d[i]);
        }
    }
}
