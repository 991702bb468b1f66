//! HOI mean average precision.
//!
//! A detection is a true positive when its interaction and object labels
//! match an unclaimed ground truth of the same image whose human and object
//! boxes both overlap the predicted ones with IoU > 0.5.

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;

use crate::matching::{iou, BoxCxcywh, GroundTruthInstance, HoiPrediction, HUMAN};

pub const IOU_THRESHOLD: f64 = 0.5;
pub const RARE_THRESHOLD: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Setting {
    Default,
    KnownObject,
}

/// `(object class, interaction class)`.
pub type HoiClass = (usize, usize);

/// One scored triplet read from one query.
#[derive(Clone, Debug, PartialEq)]
pub struct Detection {
    pub image: usize,
    pub query: usize,
    pub score: f64,
    pub human_box: BoxCxcywh,
    pub object_box: BoxCxcywh,
    pub object_class: usize,
    pub interaction_class: usize,
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Most probable non-background label and its probability.
fn best_foreground(logits: &[f64]) -> (usize, f64) {
    let p = softmax(logits);
    let fg = &p[..p.len() - 1];
    fg.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
}

/// Scores a prediction as `P(human) · P(object) · P(interaction)` with the
/// foreground argmax labels.
pub fn detection(image: usize, query: usize, p: &HoiPrediction) -> Detection {
    let human = softmax(&p.human_logits)[HUMAN];
    let (object_class, po) = best_foreground(&p.object_logits);
    let (interaction_class, pi) = best_foreground(&p.interaction_logits);
    Detection {
        image,
        query,
        score: human * po * pi,
        human_box: p.human_box,
        object_box: p.object_box,
        object_class,
        interaction_class,
    }
}

pub fn detections(preds: &[Vec<HoiPrediction>]) -> Vec<Detection> {
    preds
        .iter()
        .enumerate()
        .flat_map(|(i, ps)| ps.iter().enumerate().map(move |(q, p)| detection(i, q, p)))
        .collect()
}

/// Area under the monotone precision envelope. `hits` is in ranked order.
pub fn average_precision(hits: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let mut tp = 0usize;
    let mut points = Vec::with_capacity(hits.len());
    for (k, &h) in hits.iter().enumerate() {
        tp += h as usize;
        points.push((tp as f64 / num_gt as f64, tp as f64 / (k + 1) as f64));
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for k in 0..points.len() {
        let (r, _) = points[k];
        if r > prev_recall {
            let envelope = points[k..].iter().map(|p| p.1).fold(0.0, f64::max);
            ap += (r - prev_recall) * envelope;
            prev_recall = r;
        }
    }
    ap
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClassAp {
    pub object_class: usize,
    pub interaction_class: usize,
    pub ap: f64,
    pub num_gt: usize,
    pub training_instances: usize,
    pub rare: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub setting: Setting,
    pub per_class: Vec<ClassAp>,
    pub map_full: f64,
    /// `None` when no evaluated class is rare.
    pub map_rare: Option<f64>,
    pub map_nonrare: Option<f64>,
}

/// Instance counts per HOI class.
pub fn class_counts(gts: &[Vec<GroundTruthInstance>]) -> BTreeMap<HoiClass, usize> {
    let mut counts = BTreeMap::new();
    for g in gts.iter().flatten() {
        *counts.entry((g.object_class, g.interaction_class)).or_insert(0) += 1;
    }
    counts
}

fn mean(v: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

/// Evaluates every HOI class with at least one ground truth in `gts`.
/// Classes with fewer than [`RARE_THRESHOLD`] instances in `training` are
/// rare; without `training` the evaluated split's own counts are used.
/// Ranking is by score, then image index, then query index.
pub fn evaluate(
    preds: &[Vec<HoiPrediction>],
    gts: &[Vec<GroundTruthInstance>],
    setting: Setting,
    training: Option<&BTreeMap<HoiClass, usize>>,
) -> EvalReport {
    let mut dets = detections(preds);
    dets.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(a.image.cmp(&b.image))
            .then(a.query.cmp(&b.query))
    });
    let counts = class_counts(gts);
    let training = training.unwrap_or(&counts);
    let objects_in_image: Vec<BTreeSet<usize>> = gts.iter().map(|g| g.iter().map(|i| i.object_class).collect()).collect();
    let mut per_class = Vec::with_capacity(counts.len());
    for (&(obj, int), &num_gt) in &counts {
        let mut claimed: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
        let mut hits = Vec::new();
        for d in dets.iter().filter(|d| d.object_class == obj && d.interaction_class == int) {
            if d.image >= gts.len() {
                hits.push(false);
                continue;
            }
            if setting == Setting::KnownObject && !objects_in_image[d.image].contains(&obj) {
                continue;
            }
            let mut best: Option<(usize, f64)> = None;
            for (j, g) in gts[d.image].iter().enumerate() {
                if claimed[d.image][j] || g.object_class != obj || g.interaction_class != int {
                    continue;
                }
                let overlap = iou(d.human_box, g.human_box).min(iou(d.object_box, g.object_box));
                if overlap > IOU_THRESHOLD && best.is_none_or(|(_, o)| overlap > o) {
                    best = Some((j, overlap));
                }
            }
            if let Some((j, _)) = best {
                claimed[d.image][j] = true;
            }
            hits.push(best.is_some());
        }
        let training_instances = training.get(&(obj, int)).copied().unwrap_or(0);
        per_class.push(ClassAp {
            object_class: obj,
            interaction_class: int,
            ap: average_precision(&hits, num_gt),
            num_gt,
            training_instances,
            rare: training_instances < RARE_THRESHOLD,
        });
    }
    EvalReport {
        setting,
        map_full: mean(per_class.iter().map(|c| c.ap)).unwrap_or(0.0),
        map_rare: mean(per_class.iter().filter(|c| c.rare).map(|c| c.ap)),
        map_nonrare: mean(per_class.iter().filter(|c| !c.rare).map(|c| c.ap)),
        per_class,
    }
}
