//! Track-level evaluation: spatio-temporal IoU, average precision over a
//! threshold sweep, average recall at prediction budgets, and identity
//! switch counting.

use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::maps::IdentityMap;
use crate::{Error, Result};

/// The standard threshold sweep: 0.50 to 0.95 in steps of 0.05.
pub const IOU_THRESHOLDS: [f64; 10] = [0.50, 0.55, 0.60, 0.65, 0.70, 0.75, 0.80, 0.85, 0.90, 0.95];

/// One track: a stable id, a class, a detection score, and a pixel set per
/// frame it appears in.
#[derive(Debug, Clone, PartialEq)]
pub struct Track {
    pub global_id: u32,
    pub class_index: usize,
    pub score: f64,
    masks: BTreeMap<usize, Vec<u32>>,
}

impl Track {
    /// Masks are sorted and deduplicated; every listed frame must have at
    /// least one pixel.
    pub fn new(
        global_id: u32,
        class_index: usize,
        score: f64,
        masks: BTreeMap<usize, Vec<u32>>,
    ) -> Result<Self> {
        if !score.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "track {global_id} has a non-finite score"
            )));
        }
        if masks.is_empty() {
            return Err(Error::InvalidParameter(format!(
                "track {global_id} has no masks"
            )));
        }
        let mut sorted = BTreeMap::new();
        for (frame, mut pixels) in masks {
            if pixels.is_empty() {
                return Err(Error::InvalidParameter(format!(
                    "track {global_id} has an empty mask at frame {frame}"
                )));
            }
            pixels.sort_unstable();
            pixels.dedup();
            sorted.insert(frame, pixels);
        }
        Ok(Self {
            global_id,
            class_index,
            score,
            masks: sorted,
        })
    }

    pub fn masks(&self) -> &BTreeMap<usize, Vec<u32>> {
        &self.masks
    }

    pub fn frames(&self) -> impl Iterator<Item = usize> + '_ {
        self.masks.keys().copied()
    }
}

/// Builds tracks from per-frame identity maps. `labels` supplies each id's
/// class and score; ids present in the maps but missing from `labels` are an
/// error, while labeled ids that never show up are skipped.
pub fn tracks_from_maps(
    frames: &[IdentityMap],
    labels: &BTreeMap<u32, (usize, f64)>,
) -> Result<Vec<Track>> {
    if let Some(first) = frames.first() {
        for f in frames {
            if f.height() != first.height() || f.width() != first.width() {
                return Err(Error::DimensionMismatch(
                    "identity maps in a sequence must share dimensions".into(),
                ));
            }
        }
    }
    let mut masks: BTreeMap<u32, BTreeMap<usize, Vec<u32>>> = BTreeMap::new();
    for (t, map) in frames.iter().enumerate() {
        for (p, &id) in map.data().iter().enumerate() {
            if id != 0 {
                masks
                    .entry(id)
                    .or_default()
                    .entry(t)
                    .or_default()
                    .push(p as u32);
            }
        }
    }
    masks
        .into_iter()
        .map(|(id, m)| {
            let &(class_index, score) = labels.get(&id).ok_or(Error::UnknownInstance(id))?;
            Track::new(id, class_index, score, m)
        })
        .collect()
}

fn intersection_size(a: &[u32], b: &[u32]) -> usize {
    let (mut i, mut j, mut n) = (0, 0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                n += 1;
                i += 1;
                j += 1;
            }
        }
    }
    n
}

/// Spatio-temporal IoU: intersections and unions are accumulated over all
/// frames (absent masks count as empty) before dividing; 0/0 is 0.
pub fn st_iou(a: &Track, b: &Track) -> f64 {
    let mut inter = 0usize;
    let mut union = 0usize;
    for (frame, mask_a) in &a.masks {
        match b.masks.get(frame) {
            Some(mask_b) => {
                let i = intersection_size(mask_a, mask_b);
                inter += i;
                union += mask_a.len() + mask_b.len() - i;
            }
            None => union += mask_a.len(),
        }
    }
    for (frame, mask_b) in &b.masks {
        if !a.masks.contains_key(frame) {
            union += mask_b.len();
        }
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// The headline numbers of a track-level evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VisMetrics {
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
    pub ar1: f64,
    pub ar10: f64,
}

/// Prediction indices sorted for matching: descending score, ties to the
/// smaller global id.
fn score_order(preds: &[Track], indices: &mut [usize]) {
    indices.sort_by(|&a, &b| {
        preds[b]
            .score
            .total_cmp(&preds[a].score)
            .then(preds[a].global_id.cmp(&preds[b].global_id))
    });
}

/// Greedy matching at one threshold: predictions in score order each take
/// the unmatched ground truth with the highest IoU at or above the
/// threshold (ties to the earlier ground truth). Returns a true-positive
/// flag per prediction, in the given order.
fn greedy_flags(
    order: &[usize],
    gt_count: usize,
    iou: &BTreeMap<(usize, usize), f64>,
    tau: f64,
) -> Vec<bool> {
    let mut gt_taken = vec![false; gt_count];
    order
        .iter()
        .map(|&pi| {
            let mut best: Option<(usize, f64)> = None;
            for (gi, taken) in gt_taken.iter().enumerate() {
                if *taken {
                    continue;
                }
                let value = iou.get(&(pi, gi)).copied().unwrap_or(0.0);
                if value >= tau && best.is_none_or(|(_, b)| value > b) {
                    best = Some((gi, value));
                }
            }
            match best {
                Some((gi, _)) => {
                    gt_taken[gi] = true;
                    true
                }
                None => false,
            }
        })
        .collect()
}

/// Area under the precision-recall curve with 101-point interpolation.
fn interpolated_ap(flags: &[bool], gt_count: usize) -> f64 {
    if gt_count == 0 {
        return 0.0;
    }
    let mut points = Vec::with_capacity(flags.len());
    let (mut tp, mut fp) = (0usize, 0usize);
    for &hit in flags {
        if hit {
            tp += 1;
        } else {
            fp += 1;
        }
        points.push((tp as f64 / gt_count as f64, tp as f64 / (tp + fp) as f64));
    }
    let mut sum = 0.0;
    for i in 0..=100 {
        let r = i as f64 / 100.0;
        let p = points
            .iter()
            .filter(|(recall, _)| *recall >= r)
            .map(|(_, precision)| *precision)
            .fold(0.0f64, f64::max);
        sum += p;
    }
    sum / 101.0
}

fn recall(flags: &[bool], gt_count: usize) -> f64 {
    if gt_count == 0 {
        return 0.0;
    }
    flags.iter().filter(|&&hit| hit).count() as f64 / gt_count as f64
}

struct ClassEval {
    ap_mean: f64,
    ap50: f64,
    ap75: f64,
    ar1: f64,
    ar10: f64,
}

/// Evaluates predictions against ground truth. AP is the mean, over classes
/// with at least one ground-truth track and over `thresholds`, of the
/// 101-point interpolated area under the precision-recall curve; AP50 and
/// AP75 use those fixed thresholds regardless of the sweep. AR keeps only
/// the top 1 or 10 scoring predictions overall and averages recall over the
/// same classes and thresholds.
pub fn average_precision(preds: &[Track], gts: &[Track], thresholds: &[f64]) -> VisMetrics {
    let mut classes: Vec<usize> = gts.iter().map(|t| t.class_index).collect();
    classes.sort_unstable();
    classes.dedup();
    if classes.is_empty() {
        return VisMetrics {
            ap: 0.0,
            ap50: 0.0,
            ap75: 0.0,
            ar1: 0.0,
            ar10: 0.0,
        };
    }

    let top = |k: usize| -> Vec<usize> {
        let mut order: Vec<usize> = (0..preds.len()).collect();
        score_order(preds, &mut order);
        order.truncate(k);
        order
    };
    let top1 = top(1);
    let top10 = top(10);

    let per_class: Vec<ClassEval> = classes
        .par_iter()
        .map(|&class| {
            let gt_idx: Vec<usize> = (0..gts.len())
                .filter(|&g| gts[g].class_index == class)
                .collect();
            let mut pred_idx: Vec<usize> = (0..preds.len())
                .filter(|&p| preds[p].class_index == class)
                .collect();
            score_order(preds, &mut pred_idx);

            let mut iou = BTreeMap::new();
            for &pi in &pred_idx {
                for (slot, &gi) in gt_idx.iter().enumerate() {
                    iou.insert((pi, slot), st_iou(&preds[pi], &gts[gi]));
                }
            }

            let ap_at = |tau: f64, order: &[usize]| -> f64 {
                interpolated_ap(&greedy_flags(order, gt_idx.len(), &iou, tau), gt_idx.len())
            };
            let recall_at = |tau: f64, kept: &[usize]| -> f64 {
                let order: Vec<usize> = kept
                    .iter()
                    .copied()
                    .filter(|p| preds[*p].class_index == class)
                    .collect();
                recall(&greedy_flags(&order, gt_idx.len(), &iou, tau), gt_idx.len())
            };

            let ap_mean = if thresholds.is_empty() {
                0.0
            } else {
                thresholds.iter().map(|&t| ap_at(t, &pred_idx)).sum::<f64>()
                    / thresholds.len() as f64
            };
            let mean_recall = |kept: &[usize]| -> f64 {
                if thresholds.is_empty() {
                    0.0
                } else {
                    thresholds.iter().map(|&t| recall_at(t, kept)).sum::<f64>()
                        / thresholds.len() as f64
                }
            };
            ClassEval {
                ap_mean,
                ap50: ap_at(0.50, &pred_idx),
                ap75: ap_at(0.75, &pred_idx),
                ar1: mean_recall(&top1),
                ar10: mean_recall(&top10),
            }
        })
        .collect();

    let n = per_class.len() as f64;
    VisMetrics {
        ap: per_class.iter().map(|c| c.ap_mean).sum::<f64>() / n,
        ap50: per_class.iter().map(|c| c.ap50).sum::<f64>() / n,
        ap75: per_class.iter().map(|c| c.ap75).sum::<f64>() / n,
        ar1: per_class.iter().map(|c| c.ar1).sum::<f64>() / n,
        ar10: per_class.iter().map(|c| c.ar10).sum::<f64>() / n,
    }
}

/// Counts identity switches: each ground-truth track is assigned, per frame,
/// the predicted id with the largest pixel overlap (ties to the smaller id,
/// no overlap drops the frame), and every change along the surviving
/// sequence counts as one switch.
pub fn identity_switches(preds: &[Track], gts: &[Track]) -> usize {
    gts.iter()
        .map(|gt| {
            let mut assigned = Vec::new();
            for (frame, mask) in &gt.masks {
                let mut best: Option<(usize, u32)> = None;
                for pred in preds {
                    let Some(pred_mask) = pred.masks.get(frame) else {
                        continue;
                    };
                    let overlap = intersection_size(mask, pred_mask);
                    if overlap == 0 {
                        continue;
                    }
                    let better = match best {
                        None => true,
                        Some((n, id)) => overlap > n || (overlap == n && pred.global_id < id),
                    };
                    if better {
                        best = Some((overlap, pred.global_id));
                    }
                }
                if let Some((_, id)) = best {
                    assigned.push(id);
                }
            }
            assigned.windows(2).filter(|w| w[0] != w[1]).count()
        })
        .sum()
}
