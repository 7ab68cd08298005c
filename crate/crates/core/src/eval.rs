//! Average precision, mAP and size-bucketed AP.

use serde::{Deserialize, Serialize};

use crate::boxes::{iou_unchecked, BBox};
use crate::data::Dataset;
use crate::detector::{
    decode_detections, generate_priors, predict, Annotation, DecodeConfig, Detection, GraphSpec,
    Params,
};
use crate::error::{Error, Result};

pub const SMALL_MAX_AREA: f64 = 32.0 * 32.0;
pub const MEDIUM_MAX_AREA: f64 = 96.0 * 96.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SizeBucket {
    Small,
    Medium,
    Large,
}

impl SizeBucket {
    /// Bucket of a box with the given pixel area (small < 32², large ≥ 96²).
    pub fn of_area(area: f64) -> Self {
        // integer-pixel boxes pass through normalized coordinates
        let a = (area * 1e6).round() / 1e6;
        if a < SMALL_MAX_AREA {
            SizeBucket::Small
        } else if a < MEDIUM_MAX_AREA {
            SizeBucket::Medium
        } else {
            SizeBucket::Large
        }
    }
}

/// One scored box for a single class.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScoredBox {
    pub image: usize,
    pub score: f64,
    pub bbox: BBox,
}

/// A ground truth for a single class. `counted = false` truths can absorb a
/// detection (which is then neither TP nor FP) but do not count toward recall.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TruthBox {
    pub image: usize,
    pub bbox: BBox,
    pub counted: bool,
}

/// All-points interpolated AP for one class; `None` with no counted truths.
///
/// Detections are visited by descending score (ties: image, then input
/// order); each takes the highest-IoU unmatched truth of its image with
/// IoU ≥ `iou_threshold`.
pub fn average_precision(
    dets: &[ScoredBox],
    truths: &[TruthBox],
    iou_threshold: f64,
) -> Option<f64> {
    let npos = truths.iter().filter(|t| t.counted).count();
    if npos == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        dets[b]
            .score
            .total_cmp(&dets[a].score)
            .then(dets[a].image.cmp(&dets[b].image))
            .then(a.cmp(&b))
    });
    let mut used = vec![false; truths.len()];
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut curve: Vec<(f64, f64)> = Vec::new();
    for i in order {
        let d = &dets[i];
        let mut best: Option<(usize, f64)> = None;
        for (j, t) in truths.iter().enumerate() {
            if used[j] || t.image != d.image {
                continue;
            }
            let v = iou_unchecked(&d.bbox, &t.bbox);
            if v >= iou_threshold && best.is_none_or(|(_, b)| v > b) {
                best = Some((j, v));
            }
        }
        match best {
            Some((j, _)) => {
                used[j] = true;
                if truths[j].counted {
                    tp += 1;
                } else {
                    continue;
                }
            }
            None => fp += 1,
        }
        curve.push((tp as f64 / npos as f64, tp as f64 / (tp + fp) as f64));
    }
    Some(area_under_pr(&curve))
}

/// Area under a PR curve given as (recall, precision) points in visiting
/// order, after making precision non-increasing from the right.
fn area_under_pr(curve: &[(f64, f64)]) -> f64 {
    let mut rec = vec![0.0];
    let mut pre = vec![0.0];
    for &(r, p) in curve {
        rec.push(r);
        pre.push(p);
    }
    rec.push(1.0);
    pre.push(0.0);
    for i in (0..pre.len() - 1).rev() {
        pre[i] = pre[i].max(pre[i + 1]);
    }
    let mut ap = 0.0;
    for i in 1..rec.len() {
        if rec[i] != rec[i - 1] {
            ap += (rec[i] - rec[i - 1]) * pre[i];
        }
    }
    ap
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassResult {
    pub class_id: usize,
    pub name: String,
    pub ap: Option<f64>,
    pub truths: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BucketCounts {
    pub small: usize,
    pub medium: usize,
    pub large: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub map: f64,
    pub per_class: Vec<ClassResult>,
    pub ap_small: Option<f64>,
    pub ap_medium: Option<f64>,
    pub ap_large: Option<f64>,
    pub iou_threshold: f64,
    pub truths_per_bucket: BucketCounts,
    pub images: usize,
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Per-class AP, mAP over classes with truths, and bucketed mAP. Buckets use
/// ground-truth pixel areas at `image_size`; detections matched to a truth
/// outside the bucket are ignored.
pub fn evaluate_map(
    detections: &[Vec<Detection>],
    truths: &[Vec<Annotation>],
    class_names: &[String],
    image_size: usize,
    iou_threshold: f64,
) -> Result<EvalResult> {
    if truths.is_empty() {
        return Err(Error::invalid("empty test set"));
    }
    if detections.len() != truths.len() {
        return Err(Error::invalid(format!(
            "{} detection lists for {} images",
            detections.len(),
            truths.len()
        )));
    }
    if !(iou_threshold > 0.0 && iou_threshold < 1.0) {
        return Err(Error::invalid(format!(
            "IoU threshold must be in (0,1), got {iou_threshold}"
        )));
    }
    let px = (image_size * image_size) as f64;
    let bucket_of = |a: &Annotation| SizeBucket::of_area(a.bbox.area() * px);
    let mut counts = BucketCounts {
        small: 0,
        medium: 0,
        large: 0,
    };
    for a in truths.iter().flatten() {
        match bucket_of(a) {
            SizeBucket::Small => counts.small += 1,
            SizeBucket::Medium => counts.medium += 1,
            SizeBucket::Large => counts.large += 1,
        }
    }

    let classes = class_names.len();
    let mut per_class = Vec::with_capacity(classes);
    let mut bucket_aps: [Vec<f64>; 3] = Default::default();
    for c in 1..=classes {
        let dets: Vec<ScoredBox> = detections
            .iter()
            .enumerate()
            .flat_map(|(image, ds)| {
                ds.iter()
                    .filter(|d| d.class_id == c)
                    .map(move |d| ScoredBox {
                        image,
                        score: d.score,
                        bbox: d.bbox,
                    })
            })
            .collect();
        let class_truths: Vec<(usize, &Annotation)> = truths
            .iter()
            .enumerate()
            .flat_map(|(image, ts)| {
                ts.iter()
                    .filter(|a| a.class_id == c)
                    .map(move |a| (image, a))
            })
            .collect();
        let all: Vec<TruthBox> = class_truths
            .iter()
            .map(|&(image, a)| TruthBox {
                image,
                bbox: a.bbox,
                counted: true,
            })
            .collect();
        per_class.push(ClassResult {
            class_id: c,
            name: class_names[c - 1].clone(),
            ap: average_precision(&dets, &all, iou_threshold),
            truths: all.len(),
        });
        for (slot, bucket) in
            bucket_aps
                .iter_mut()
                .zip([SizeBucket::Small, SizeBucket::Medium, SizeBucket::Large])
        {
            let restricted: Vec<TruthBox> = class_truths
                .iter()
                .map(|&(image, a)| TruthBox {
                    image,
                    bbox: a.bbox,
                    counted: bucket_of(a) == bucket,
                })
                .collect();
            if let Some(ap) = average_precision(&dets, &restricted, iou_threshold) {
                slot.push(ap);
            }
        }
    }
    let aps: Vec<f64> = per_class.iter().filter_map(|c| c.ap).collect();
    let map = mean(&aps).ok_or_else(|| Error::invalid("test set has no ground truths"))?;
    let [s, m, l] = bucket_aps;
    Ok(EvalResult {
        map,
        per_class,
        ap_small: mean(&s),
        ap_medium: mean(&m),
        ap_large: mean(&l),
        iou_threshold,
        truths_per_bucket: counts,
        images: truths.len(),
    })
}

/// Runs inference over a dataset in batches and decodes every image.
pub fn detect_dataset(
    graph: &GraphSpec,
    params: &Params<f32>,
    dataset: &Dataset,
    config: &DecodeConfig,
    batch_size: usize,
) -> Result<Vec<Vec<Detection>>> {
    let priors = generate_priors(&graph.priors)?;
    let p = priors.len();
    let width = graph.num_classes + 1;
    let mut out = Vec::with_capacity(dataset.len());
    let idx: Vec<usize> = (0..dataset.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let (loc, conf) = predict(graph, params, &dataset.batch(chunk)?)?;
        for i in 0..chunk.len() {
            let l: Vec<f64> = loc.data()[i * p * 4..(i + 1) * p * 4]
                .iter()
                .map(|&v| v as f64)
                .collect();
            let c: Vec<f64> = conf.data()[i * p * width..(i + 1) * p * width]
                .iter()
                .map(|&v| v as f64)
                .collect();
            out.push(decode_detections(
                &l,
                &c,
                &priors,
                graph.num_classes,
                config,
            )?);
        }
    }
    Ok(out)
}

/// Inference plus [`evaluate_map`] over a whole dataset.
pub fn evaluate_model(
    graph: &GraphSpec,
    params: &Params<f32>,
    dataset: &Dataset,
    config: &DecodeConfig,
    iou_threshold: f64,
) -> Result<EvalResult> {
    let dets = detect_dataset(graph, params, dataset, config, 32)?;
    let truths: Vec<Vec<Annotation>> = dataset
        .samples
        .iter()
        .map(|s| s.annotations.clone())
        .collect();
    evaluate_map(
        &dets,
        &truths,
        &dataset.manifest.classes,
        dataset.image_size(),
        iou_threshold,
    )
}
