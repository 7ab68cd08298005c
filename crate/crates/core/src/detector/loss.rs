//! Multibox loss: smooth-L1 box regression plus softmax cross-entropy with
//! hard-negative mining, computed in double precision.

use super::matching::{encode, Annotation, Assignment};
use super::priors::PriorBoxSet;
use crate::error::{Error, Result};
use crate::tensor::{Element, Tape, Tensor, Var};

pub const DEFAULT_NEG_POS_RATIO: f64 = 3.0;

#[derive(Clone, Debug, PartialEq)]
pub struct LossOutput {
    /// (loc + conf) / matched.
    pub value: f64,
    pub loc: f64,
    pub conf: f64,
    pub matched: usize,
    /// d value / d loc, laid out like the loc input.
    pub grad_loc: Vec<f64>,
    /// d value / d conf, laid out like the conf input.
    pub grad_conf: Vec<f64>,
}

fn smooth_l1(x: f64) -> (f64, f64) {
    if x.abs() < 1.0 {
        (0.5 * x * x, x)
    } else {
        (x.abs() - 0.5, x.signum())
    }
}

/// Log-softmax pieces of one logit row: (logsumexp, softmax).
fn softmax_row(row: &[f64], probs: &mut [f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for (p, &v) in probs.iter_mut().zip(row) {
        *p = (v - m).exp();
        s += *p;
    }
    for p in probs.iter_mut() {
        *p /= s;
    }
    m + s.ln()
}

/// Loss over a batch.
///
/// `loc` is `[N, P, 4]` and `conf` is `[N, P, classes + 1]` (flat, row-major,
/// background at index 0). `assignments[i]` and `truths[i]` describe image i.
/// Negatives are ranked by background cross-entropy (lower prior index first
/// on ties) and at most `neg_pos_ratio` per positive enter the confidence term.
/// The sum is divided by the total number of matched priors; with no matches
/// the loss and all gradients are zero.
#[allow(clippy::too_many_arguments)]
pub fn multibox_loss(
    loc: &[f64],
    conf: &[f64],
    batch: usize,
    classes: usize,
    priors: &PriorBoxSet,
    assignments: &[Assignment],
    truths: &[Vec<Annotation>],
    neg_pos_ratio: f64,
) -> Result<LossOutput> {
    let p = priors.len();
    let width = classes + 1;
    if loc.len() != batch * p * 4 || conf.len() != batch * p * width {
        return Err(Error::shape(
            "multibox_loss",
            format!(
                "expected {batch}×{p}×4 offsets and {batch}×{p}×{width} logits, got {} and {}",
                loc.len(),
                conf.len()
            ),
        ));
    }
    if assignments.len() != batch || truths.len() != batch {
        return Err(Error::shape(
            "multibox_loss",
            format!(
                "{} assignments and {} truth lists for a batch of {batch}",
                assignments.len(),
                truths.len()
            ),
        ));
    }
    if !(neg_pos_ratio >= 0.0) {
        return Err(Error::invalid(
            "negative/positive ratio must be non-negative",
        ));
    }
    if let Some(i) = conf.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            context: "confidence logits".into(),
            index: i,
        });
    }
    if let Some(i) = loc.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            context: "box offsets".into(),
            index: i,
        });
    }

    let mut grad_loc = vec![0.0; loc.len()];
    let mut grad_conf = vec![0.0; conf.len()];
    let mut loc_sum = 0.0;
    let mut conf_sum = 0.0;
    let mut matched = 0usize;
    let mut probs = vec![0.0; width];

    for img in 0..batch {
        let assign = &assignments[img];
        if assign.len() != p {
            return Err(Error::shape(
                "multibox_loss",
                format!(
                    "assignment for image {img} has {} entries, expected {p}",
                    assign.len()
                ),
            ));
        }
        let pos = assign.iter().filter(|a| a.is_some()).count();
        if pos == 0 {
            continue;
        }
        matched += pos;
        let mut neg_losses: Vec<(f64, usize)> = Vec::new();
        for (j, a) in assign.iter().enumerate() {
            let row0 = (img * p + j) * width;
            let row = &conf[row0..row0 + width];
            match a {
                Some(t) => {
                    let truth = truths[img].get(*t).ok_or_else(|| {
                        Error::invalid(format!(
                            "image {img}: assignment refers to missing truth {t}"
                        ))
                    })?;
                    if truth.class_id == 0 || truth.class_id > classes {
                        return Err(Error::invalid(format!(
                            "class id {} outside 1..={classes}",
                            truth.class_id
                        )));
                    }
                    let target = encode(&truth.bbox, &priors.boxes[j]);
                    let l0 = (img * p + j) * 4;
                    for d in 0..4 {
                        let (v, g) = smooth_l1(loc[l0 + d] - target[d]);
                        loc_sum += v;
                        grad_loc[l0 + d] = g;
                    }
                    let lse = softmax_row(row, &mut probs);
                    conf_sum += lse - row[truth.class_id];
                    for c in 0..width {
                        grad_conf[row0 + c] =
                            probs[c] - if c == truth.class_id { 1.0 } else { 0.0 };
                    }
                }
                None => {
                    let lse = softmax_row(row, &mut probs);
                    neg_losses.push((lse - row[0], j));
                }
            }
        }
        let take = ((neg_pos_ratio * pos as f64).floor() as usize).min(neg_losses.len());
        if take > 0 {
            neg_losses.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            for &(l, j) in &neg_losses[..take] {
                conf_sum += l;
                let row0 = (img * p + j) * width;
                softmax_row(&conf[row0..row0 + width], &mut probs);
                for c in 0..width {
                    grad_conf[row0 + c] = probs[c] - if c == 0 { 1.0 } else { 0.0 };
                }
            }
        }
    }

    if matched == 0 {
        return Ok(LossOutput {
            value: 0.0,
            loc: 0.0,
            conf: 0.0,
            matched: 0,
            grad_loc: vec![0.0; loc.len()],
            grad_conf: vec![0.0; conf.len()],
        });
    }
    let scale = 1.0 / matched as f64;
    grad_loc.iter_mut().for_each(|g| *g *= scale);
    grad_conf.iter_mut().for_each(|g| *g *= scale);
    Ok(LossOutput {
        value: (loc_sum + conf_sum) * scale,
        loc: loc_sum * scale,
        conf: conf_sum * scale,
        matched,
        grad_loc,
        grad_conf,
    })
}

fn to_f64<T: Element>(t: &Tensor<T>) -> Vec<f64> {
    t.data()
        .iter()
        .map(|v| v.to_f64().unwrap_or(f64::NAN))
        .collect()
}

/// Records the loss of tape outputs `loc` (`[N,P,4]`) and `conf`
/// (`[N,P,classes+1]`) as a scalar node that backpropagates into both.
pub fn multibox_loss_on_tape<T: Element>(
    tape: &mut Tape<T>,
    loc: Var,
    conf: Var,
    priors: &PriorBoxSet,
    assignments: &[Assignment],
    truths: &[Vec<Annotation>],
    neg_pos_ratio: f64,
) -> Result<(Var, LossOutput)> {
    let lv = tape.value(loc);
    let cv = tape.value(conf);
    if lv.rank() != 3 || cv.rank() != 3 || lv.shape()[2] != 4 || cv.shape()[2] < 2 {
        return Err(Error::shape(
            "multibox_loss",
            format!(
                "loc {:?} / conf {:?} must be [N,P,4] / [N,P,C+1]",
                lv.shape(),
                cv.shape()
            ),
        ));
    }
    let batch = lv.shape()[0];
    let classes = cv.shape()[2] - 1;
    let out = multibox_loss(
        &to_f64(lv),
        &to_f64(cv),
        batch,
        classes,
        priors,
        assignments,
        truths,
        neg_pos_ratio,
    )?;
    let cast = |g: &[f64]| g.iter().map(|&v| T::from_f64_lossy(v)).collect::<Vec<T>>();
    let var = tape.custom_scalar(
        T::from_f64_lossy(out.value),
        vec![(loc, cast(&out.grad_loc)), (conf, cast(&out.grad_conf))],
    )?;
    Ok((var, out))
}
