//! Prior/ground-truth assignment and the box offset encoding.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use super::priors::PriorBoxSet;
use crate::boxes::{iou_unchecked, BBox, CenterBox};
use crate::error::{Error, Result};

/// Center-offset variance.
pub const VARIANCE_CENTER: f64 = 0.1;
/// Log-size variance.
pub const VARIANCE_SIZE: f64 = 0.2;
pub const DEFAULT_MATCH_IOU: f64 = 0.5;

/// Ground-truth object: 1-based class id and a normalized corner box.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub class_id: usize,
    pub bbox: BBox,
}

/// Per-prior assignment: `Some(truth index)` or background.
pub type Assignment = Vec<Option<usize>>;

fn canonical_cmp(a: &Annotation, b: &Annotation) -> Ordering {
    a.bbox
        .xmin
        .total_cmp(&b.bbox.xmin)
        .then(a.bbox.ymin.total_cmp(&b.bbox.ymin))
        .then(a.bbox.xmax.total_cmp(&b.bbox.xmax))
        .then(a.bbox.ymax.total_cmp(&b.bbox.ymax))
        .then(a.class_id.cmp(&b.class_id))
}

/// Assigns priors to truths.
///
/// Each truth first claims its highest-IoU prior (lowest prior index on
/// ties). When two truths want the same prior, the truth with the higher
/// best IoU claims first and the other falls back to its best unclaimed prior,
/// so every truth keeps at least one positive. Remaining priors are matched to
/// their best truth when that IoU reaches `threshold`.
///
/// Truths are processed in a canonical (coordinate) order, so the result does
/// not depend on the order of `truths`; returned indices refer to `truths`.
pub fn match_priors(
    priors: &PriorBoxSet,
    truths: &[Annotation],
    threshold: f64,
) -> Result<Assignment> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::invalid(format!(
            "match threshold must be in (0,1), got {threshold}"
        )));
    }
    let p = priors.len();
    let mut assign = vec![None; p];
    if truths.is_empty() {
        return Ok(assign);
    }
    if truths.len() > p {
        return Err(Error::invalid(format!(
            "{} truths but only {p} priors",
            truths.len()
        )));
    }
    for t in truths {
        t.bbox.validate()?;
    }
    let mut order: Vec<usize> = (0..truths.len()).collect();
    order.sort_by(|&i, &j| canonical_cmp(&truths[i], &truths[j]));

    let prior_boxes: Vec<BBox> = priors.boxes.iter().map(CenterBox::to_corners).collect();
    // overlaps[r][j]: canonical rank r against prior j
    let overlaps: Vec<Vec<f64>> = order
        .iter()
        .map(|&t| {
            prior_boxes
                .iter()
                .map(|pb| iou_unchecked(&truths[t].bbox, pb))
                .collect()
        })
        .collect();

    let argmax = |row: &[f64], taken: &[bool]| -> Option<usize> {
        let mut best: Option<usize> = None;
        for (j, &v) in row.iter().enumerate() {
            if taken[j] {
                continue;
            }
            if best.is_none_or(|b| v > row[b]) {
                best = Some(j);
            }
        }
        best
    };

    let none_taken = vec![false; p];
    let best_iou: Vec<f64> = overlaps
        .iter()
        .map(|row| row[argmax(row, &none_taken).expect("priors non-empty")])
        .collect();
    let mut claim_order: Vec<usize> = (0..order.len()).collect();
    claim_order.sort_by(|&a, &b| best_iou[b].total_cmp(&best_iou[a]).then(a.cmp(&b)));

    let mut forced = vec![false; p];
    for r in claim_order {
        let j = argmax(&overlaps[r], &forced).expect("more priors than truths");
        forced[j] = true;
        assign[j] = Some(order[r]);
    }
    for j in 0..p {
        if forced[j] {
            continue;
        }
        let mut best: Option<usize> = None;
        for r in 0..order.len() {
            if best.is_none_or(|b| overlaps[r][j] > overlaps[b][j]) {
                best = Some(r);
            }
        }
        let r = best.expect("truths non-empty");
        if overlaps[r][j] >= threshold {
            assign[j] = Some(order[r]);
        }
    }
    Ok(assign)
}

/// Offsets of `truth` relative to `prior`, scaled by the variances.
pub fn encode(truth: &BBox, prior: &CenterBox) -> [f64; 4] {
    let t = truth.to_center();
    [
        (t.cx - prior.cx) / (prior.w * VARIANCE_CENTER),
        (t.cy - prior.cy) / (prior.h * VARIANCE_CENTER),
        (t.w / prior.w).ln() / VARIANCE_SIZE,
        (t.h / prior.h).ln() / VARIANCE_SIZE,
    ]
}

/// Inverse of [`encode`].
pub fn decode(offsets: [f64; 4], prior: &CenterBox) -> CenterBox {
    CenterBox {
        cx: prior.cx + offsets[0] * VARIANCE_CENTER * prior.w,
        cy: prior.cy + offsets[1] * VARIANCE_CENTER * prior.h,
        w: prior.w * (offsets[2] * VARIANCE_SIZE).exp(),
        h: prior.h * (offsets[3] * VARIANCE_SIZE).exp(),
    }
}
