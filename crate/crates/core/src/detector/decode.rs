//! Inference post-processing: offset decoding, per-class NMS, top-k.

use serde::{Deserialize, Serialize};

use super::matching::decode;
use super::priors::PriorBoxSet;
use crate::boxes::{iou_unchecked, BBox};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    /// 1-based; background is never reported.
    pub class_id: usize,
    pub score: f64,
    pub bbox: BBox,
    /// Prior the box was decoded from.
    pub prior: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub score_threshold: f64,
    pub nms_iou: f64,
    pub top_k: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            score_threshold: 0.05,
            nms_iou: 0.45,
            top_k: 100,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        let open = |v: f64| v > 0.0 && v < 1.0;
        if !open(self.score_threshold) || !open(self.nms_iou) {
            return Err(Error::invalid(format!(
                "score threshold and NMS IoU must be in (0,1), got {} and {}",
                self.score_threshold, self.nms_iou
            )));
        }
        Ok(())
    }
}

/// Greedy non-maximum suppression. Returns kept indices, best first.
///
/// The highest remaining score wins (lower index on ties); boxes overlapping a
/// kept box with IoU above `iou_threshold` are discarded.
pub fn nms(boxes: &[BBox], scores: &[f64], iou_threshold: f64) -> Vec<usize> {
    nms_limited(boxes, scores, iou_threshold, usize::MAX)
}

/// [`nms`] that stops after `limit` boxes are kept.
fn nms_limited(boxes: &[BBox], scores: &[f64], iou_threshold: f64, limit: usize) -> Vec<usize> {
    assert_eq!(
        boxes.len(),
        scores.len(),
        "nms: boxes and scores differ in length"
    );
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        if kept.len() >= limit {
            break;
        }
        if kept
            .iter()
            .all(|&k| iou_unchecked(&boxes[k], &boxes[i]) <= iou_threshold)
        {
            kept.push(i);
        }
    }
    kept
}

/// Decodes one image's predictions.
///
/// `loc` is `[P, 4]` and `conf` is `[P, classes + 1]` logits. Boxes are
/// clipped to the unit square and discarded when clipping leaves no area.
/// The result is sorted by descending score, ties by (class, prior).
pub fn decode_detections(
    loc: &[f64],
    conf: &[f64],
    priors: &PriorBoxSet,
    classes: usize,
    config: &DecodeConfig,
) -> Result<Vec<Detection>> {
    config.validate()?;
    let p = priors.len();
    let width = classes + 1;
    if loc.len() != p * 4 || conf.len() != p * width {
        return Err(Error::shape(
            "decode_detections",
            format!(
                "expected {p}×4 offsets and {p}×{width} logits, got {} and {}",
                loc.len(),
                conf.len()
            ),
        ));
    }

    let mut boxes: Vec<Option<BBox>> = Vec::with_capacity(p);
    for (j, prior) in priors.boxes.iter().enumerate() {
        let o = [loc[j * 4], loc[j * 4 + 1], loc[j * 4 + 2], loc[j * 4 + 3]];
        let b = decode(o, prior).to_corners().clip_unit();
        boxes.push(b.validate().ok().map(|_| b));
    }
    let mut probs = vec![0.0; p * width];
    for j in 0..p {
        let row = &conf[j * width..(j + 1) * width];
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let out = &mut probs[j * width..(j + 1) * width];
        let mut s = 0.0;
        for (o, &v) in out.iter_mut().zip(row) {
            *o = (v - m).exp();
            s += *o;
        }
        out.iter_mut().for_each(|o| *o /= s);
    }

    let mut dets = Vec::new();
    for c in 1..=classes {
        let cand: Vec<usize> = (0..p)
            .filter(|&j| boxes[j].is_some() && probs[j * width + c] >= config.score_threshold)
            .collect();
        if cand.is_empty() {
            continue;
        }
        let cb: Vec<BBox> = cand.iter().map(|&j| boxes[j].expect("filtered")).collect();
        let cs: Vec<f64> = cand.iter().map(|&j| probs[j * width + c]).collect();
        // a class never contributes more than top_k boxes to the final list
        for k in nms_limited(&cb, &cs, config.nms_iou, config.top_k) {
            dets.push(Detection {
                class_id: c,
                score: cs[k],
                bbox: cb[k],
                prior: cand[k],
            });
        }
    }
    dets.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(a.class_id.cmp(&b.class_id))
            .then(a.prior.cmp(&b.prior))
    });
    dets.truncate(config.top_k);
    Ok(dets)
}
