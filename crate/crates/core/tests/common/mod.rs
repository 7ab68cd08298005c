#![allow(dead_code)]

use std::collections::BTreeMap;

use mfssd::boxes::BBox;
use mfssd::detector::{
    decode_detections, fuse_features, generate_priors, match_priors, multibox_loss_on_tape, nms,
    predict, Annotation, DecodeConfig, FusionParams, FusionSpec, GraphSpec, HeadPair, Mode, Node,
    NodeId, NodeKind, Params, PriorBoxSet, PriorConfig,
};
use mfssd::eval::{average_precision, ScoredBox, TruthBox};
use mfssd::layers::{batchnorm_forward_train, BatchNormParams};
use mfssd::rng::Rng;
use mfssd::slimming::{apply_prune, count_params, PrunePlan};
use mfssd::tensor::{finite_diff_check, Tape, Tensor, Var};
use mfssd::Result;

pub const GRAD_TOL: f64 = 1e-4;
const H: f64 = 1e-5;

pub fn randn(rng: &mut Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.uniform_range(-scale, scale)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Values of magnitude in [lo, 1] with random sign.
fn away_from_zero(rng: &mut Rng, shape: &[usize], lo: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.uniform_range(lo, 1.0);
            if rng.below(2) == 0 {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// A random permutation of evenly spaced values, so every pooling window has a
/// unique maximum with a wide margin.
fn spaced(rng: &mut Rng, shape: &[usize], gap: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut data: Vec<f64> = (0..n)
        .map(|i| i as f64 * gap - 0.5 * n as f64 * gap)
        .collect();
    rng.shuffle(&mut data);
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn check<F>(f: F, x: &Tensor<f64>) -> f64
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    finite_diff_check(f, x, H).unwrap().max_rel_error
}

/// Max relative error of the tape gradient of `<op(x), w>` for every primitive
/// and for the multibox loss over a two-level head.
pub fn gradient_suite() -> Vec<(&'static str, f64)> {
    let mut rng = Rng::new(2024);
    let mut out = Vec::new();

    // conv2d: input, weight, bias; padded stride 1 and stride 2
    let x = randn(&mut rng, &[2, 3, 5, 5], 1.0);
    let w = randn(&mut rng, &[4, 3, 3, 3], 0.5);
    let b = randn(&mut rng, &[4], 0.5);
    for (name, stride) in [("conv2d s1", 1), ("conv2d s2", 2)] {
        let ho = (5 + 2 - 3) / stride + 1;
        let proj = randn(&mut rng, &[2, 4, ho, ho], 1.0);
        let (w1, b1, p1) = (w.clone(), b.clone(), proj.clone());
        out.push((
            name,
            check(
                |t, v| {
                    let w = t.constant(w1.clone());
                    let b = t.constant(b1.clone());
                    let y = t.conv2d(v, w, b, stride, 1)?;
                    t.dot(y, &p1)
                },
                &x,
            ),
        ));
        let (x1, b1, p1) = (x.clone(), b.clone(), proj.clone());
        out.push((
            "conv2d weight",
            check(
                |t, v| {
                    let x = t.constant(x1.clone());
                    let b = t.constant(b1.clone());
                    let y = t.conv2d(x, v, b, stride, 1)?;
                    t.dot(y, &p1)
                },
                &w,
            ),
        ));
        let (x1, w1) = (x.clone(), w.clone());
        out.push((
            "conv2d bias",
            check(
                |t, v| {
                    let x = t.constant(x1.clone());
                    let w = t.constant(w1.clone());
                    let y = t.conv2d(x, w, v, stride, 1)?;
                    t.dot(y, &proj)
                },
                &b,
            ),
        ));
    }

    // batch norm in train mode: input, gamma, beta
    let x = randn(&mut rng, &[4, 3, 3, 3], 2.0);
    let g = away_from_zero(&mut rng, &[3], 0.5);
    let be = randn(&mut rng, &[3], 0.5);
    let proj = randn(&mut rng, &[4, 3, 3, 3], 1.0);
    let bn = |t: &mut Tape<f64>, x: Var, g: Var, b: Var| -> Result<Var> {
        let (y, _) = t.batchnorm_train(x, g, b, 1e-5)?;
        // square keeps the input gradient from vanishing identically
        let y2 = t.square(y);
        t.dot(y2, &proj)
    };
    out.push((
        "batchnorm input",
        check(
            |t, v| {
                let (g, b) = (t.constant(g.clone()), t.constant(be.clone()));
                bn(t, v, g, b)
            },
            &x,
        ),
    ));
    out.push((
        "batchnorm gamma",
        check(
            |t, v| {
                let (x, b) = (t.constant(x.clone()), t.constant(be.clone()));
                bn(t, x, v, b)
            },
            &g,
        ),
    ));
    out.push((
        "batchnorm beta",
        check(
            |t, v| {
                let (x, g) = (t.constant(x.clone()), t.constant(g.clone()));
                bn(t, x, g, v)
            },
            &be,
        ),
    ));

    let x = randn(&mut rng, &[2, 2, 3, 3], 1.0);
    let proj = randn(&mut rng, &[2, 2, 7, 7], 1.0);
    out.push((
        "upsample_bilinear",
        check(
            |t, v| {
                let y = t.upsample_bilinear(v, 7, 7)?;
                t.dot(y, &proj)
            },
            &x,
        ),
    ));

    let other = randn(&mut rng, &[2, 3, 4, 4], 1.0);
    let x = randn(&mut rng, &[2, 2, 4, 4], 1.0);
    let proj = randn(&mut rng, &[2, 7, 4, 4], 1.0);
    out.push((
        "concat",
        check(
            |t, v| {
                let o = t.constant(other.clone());
                let y = t.concat_channels(&[o, v, v])?;
                t.dot(y, &proj)
            },
            &x,
        ),
    ));

    let x = away_from_zero(&mut rng, &[2, 3, 4, 4], 100.0 * H);
    let proj = randn(&mut rng, &[2, 3, 4, 4], 1.0);
    out.push((
        "relu",
        check(
            |t, v| {
                let y = t.relu(v);
                t.dot(y, &proj)
            },
            &x,
        ),
    ));

    let x = spaced(&mut rng, &[2, 2, 6, 6], 0.01);
    let proj = randn(&mut rng, &[2, 2, 3, 3], 1.0);
    out.push((
        "maxpool",
        check(
            |t, v| {
                let y = t.maxpool2d(v, 2, 2)?;
                t.dot(y, &proj)
            },
            &x,
        ),
    ));

    let head = ToyHead::new(&mut rng);
    out.push((
        "multibox_loss features",
        check(|t, v| head.loss(t, Slot::Features(v)), &head.features),
    ));
    out.push((
        "multibox_loss conf weight",
        check(|t, v| head.loss(t, Slot::Conf0(v)), &head.conf_w[0]),
    ));
    out.push((
        "multibox_loss loc weight",
        check(|t, v| head.loss(t, Slot::Loc1(v)), &head.loc_w[1]),
    ));
    out
}

enum Slot {
    Features(Var),
    Conf0(Var),
    Loc1(Var),
}

/// Features [2,4,4,4] → level 0; 2×2 max-pool → level 1; 3×3 loc/conf convs on
/// both levels; multibox loss against fixed truths.
struct ToyHead {
    features: Tensor<f64>,
    loc_w: [Tensor<f64>; 2],
    conf_w: [Tensor<f64>; 2],
    priors: PriorBoxSet,
    truths: Vec<Vec<Annotation>>,
}

const TOY_CLASSES: usize = 2;

impl ToyHead {
    fn new(rng: &mut Rng) -> Self {
        let cfg = PriorConfig::new(vec![4, 2], vec![4, 4], 0.2, 0.6).unwrap();
        let priors = generate_priors(&cfg).unwrap();
        let ann = |c, a, b, x, y| Annotation {
            class_id: c,
            bbox: BBox::new(a, b, x, y).unwrap(),
        };
        let truths = vec![
            vec![ann(1, 0.1, 0.1, 0.35, 0.4), ann(2, 0.5, 0.45, 0.95, 0.9)],
            vec![ann(2, 0.3, 0.2, 0.6, 0.5)],
        ];
        Self {
            features: spaced(rng, &[2, 4, 4, 4], 0.02),
            loc_w: [
                randn(rng, &[16, 4, 3, 3], 0.3),
                randn(rng, &[16, 4, 3, 3], 0.3),
            ],
            conf_w: [
                randn(rng, &[4 * (TOY_CLASSES + 1), 4, 3, 3], 0.3),
                randn(rng, &[4 * (TOY_CLASSES + 1), 4, 3, 3], 0.3),
            ],
            priors,
            truths,
        }
    }

    fn loss(&self, t: &mut Tape<f64>, slot: Slot) -> Result<Var> {
        let mut pick = |v: Option<Var>, w: &Tensor<f64>| v.unwrap_or_else(|| t.constant(w.clone()));
        let (f, c0, l1) = match slot {
            Slot::Features(v) => (Some(v), None, None),
            Slot::Conf0(v) => (None, Some(v), None),
            Slot::Loc1(v) => (None, None, Some(v)),
        };
        let f = pick(f, &self.features);
        let conf0 = pick(c0, &self.conf_w[0]);
        let loc1 = pick(l1, &self.loc_w[1]);
        let loc0 = t.constant(self.loc_w[0].clone());
        let conf1 = t.constant(self.conf_w[1].clone());
        let f1 = t.maxpool2d(f, 2, 2)?;
        let zeros = |t: &mut Tape<f64>, n| t.constant(Tensor::zeros(vec![n]).unwrap());
        let width = TOY_CLASSES + 1;
        let mut locs = Vec::new();
        let mut confs = Vec::new();
        for (x, lw, cw) in [(f, loc0, conf0), (f1, loc1, conf1)] {
            let lb = zeros(t, 16);
            let cb = zeros(t, 4 * width);
            locs.push(t.conv2d(x, lw, lb, 1, 1)?);
            confs.push(t.conv2d(x, cw, cb, 1, 1)?);
        }
        let loc = t.flatten_heads(&locs, &[4, 4], 4)?;
        let conf = t.flatten_heads(&confs, &[4, 4], width)?;
        let assignments = self
            .truths
            .iter()
            .map(|tr| match_priors(&self.priors, tr, 0.5))
            .collect::<Result<Vec<_>>>()?;
        let (root, _) =
            multibox_loss_on_tape(t, loc, conf, &self.priors, &assignments, &self.truths, 3.0)?;
        Ok(root)
    }
}

pub fn random_box(rng: &mut Rng, grid: u64) -> BBox {
    // coarse coordinates make ties and exact overlaps common
    loop {
        let mut c = [0.0; 4];
        for v in &mut c {
            *v = rng.below(grid + 1) as f64 / grid as f64;
        }
        let (x0, x1) = (c[0].min(c[2]), c[0].max(c[2]));
        let (y0, y1) = (c[1].min(c[3]), c[1].max(c[3]));
        if x0 < x1 && y0 < y1 {
            return BBox::new(x0, y0, x1, y1).unwrap();
        }
    }
}

pub fn iou_ref(a: &BBox, b: &BBox) -> f64 {
    let w = (a.xmax.min(b.xmax) - a.xmin.max(b.xmin)).max(0.0);
    let h = (a.ymax.min(b.ymax) - a.ymin.max(b.ymin)).max(0.0);
    let i = w * h;
    i / ((a.xmax - a.xmin) * (a.ymax - a.ymin) + (b.xmax - b.xmin) * (b.ymax - b.ymin) - i)
}

/// Indices ordered by descending score, lower index first on ties, by repeated
/// selection of the best remaining entry.
fn rank(scores: &[f64]) -> Vec<usize> {
    let mut left: Vec<usize> = (0..scores.len()).collect();
    let mut out = Vec::new();
    while !left.is_empty() {
        let mut best = 0;
        for k in 1..left.len() {
            let (i, j) = (left[k], left[best]);
            if scores[i] > scores[j] || (scores[i] == scores[j] && i < j) {
                best = k;
            }
        }
        out.push(left.remove(best));
    }
    out
}

/// A box survives when no higher-ranked survivor overlaps it above the
/// threshold.
pub fn nms_ref(boxes: &[BBox], scores: &[f64], thr: f64, limit: usize) -> Vec<usize> {
    let order = rank(scores);
    let mut alive = vec![false; boxes.len()];
    let mut out = Vec::new();
    for (pos, &i) in order.iter().enumerate() {
        let suppressed = order[..pos]
            .iter()
            .any(|&j| alive[j] && iou_ref(&boxes[i], &boxes[j]) > thr);
        if !suppressed && out.len() < limit {
            alive[i] = true;
            out.push(i);
        }
    }
    out
}

/// (class_id, score, bbox, prior) per detection.
pub fn decode_ref(
    loc: &[f64],
    conf: &[f64],
    priors: &PriorBoxSet,
    classes: usize,
    score_thr: f64,
    nms_thr: f64,
    top_k: usize,
) -> Vec<(usize, f64, BBox, usize)> {
    let width = classes + 1;
    let mut all = Vec::new();
    for c in 1..=classes {
        let mut idx = Vec::new();
        let mut bx = Vec::new();
        let mut sc = Vec::new();
        for (j, p) in priors.boxes.iter().enumerate() {
            let row = &conf[j * width..(j + 1) * width];
            let denom: f64 = row.iter().map(|v| (v - row[c]).exp()).sum();
            let prob = 1.0 / denom;
            let l = &loc[j * 4..j * 4 + 4];
            let cx = p.cx + l[0] * 0.1 * p.w;
            let cy = p.cy + l[1] * 0.1 * p.h;
            let w = p.w * (l[2] * 0.2).exp();
            let h = p.h * (l[3] * 0.2).exp();
            let cl = |v: f64| v.clamp(0.0, 1.0);
            let b = (
                cl(cx - w / 2.0),
                cl(cy - h / 2.0),
                cl(cx + w / 2.0),
                cl(cy + h / 2.0),
            );
            if b.2 > b.0 && b.3 > b.1 && prob >= score_thr {
                idx.push(j);
                bx.push(BBox::new(b.0, b.1, b.2, b.3).unwrap());
                sc.push(prob);
            }
        }
        for k in nms_ref(&bx, &sc, nms_thr, top_k) {
            all.push((c, sc[k], bx[k], idx[k]));
        }
    }
    all.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)).then(a.3.cmp(&b.3)));
    all.truncate(top_k);
    all
}

/// AP as a sum over true positives of (1/npos)·max precision at or below
/// their rank. `truths` are (image, box, counted).
pub fn ap_ref(
    dets: &[(usize, f64, BBox)],
    truths: &[(usize, BBox, bool)],
    thr: f64,
) -> Option<f64> {
    let npos = truths.iter().filter(|t| t.2).count();
    if npos == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        dets[b]
            .1
            .total_cmp(&dets[a].1)
            .then(dets[a].0.cmp(&dets[b].0))
            .then(a.cmp(&b))
    });
    let mut used = vec![false; truths.len()];
    // (is_tp, precision) at every counted rank
    let mut ranks: Vec<(bool, f64)> = Vec::new();
    let (mut tp, mut fp) = (0.0, 0.0);
    for i in order {
        let d = &dets[i];
        let mut best: Option<usize> = None;
        for (j, t) in truths.iter().enumerate() {
            if used[j] || t.0 != d.0 || iou_ref(&d.2, &t.1) < thr {
                continue;
            }
            if best.is_none_or(|b| iou_ref(&d.2, &t.1) > iou_ref(&d.2, &truths[b].1)) {
                best = Some(j);
            }
        }
        let hit = match best {
            Some(j) => {
                used[j] = true;
                if !truths[j].2 {
                    continue;
                }
                tp += 1.0;
                true
            }
            None => {
                fp += 1.0;
                false
            }
        };
        ranks.push((hit, tp / (tp + fp)));
    }
    let mut ap = 0.0;
    for (k, &(hit, _)) in ranks.iter().enumerate() {
        if hit {
            let best = ranks[k..].iter().map(|r| r.1).fold(0.0, f64::max);
            ap += best / npos as f64;
        }
    }
    Some(ap)
}

fn node(id: NodeId, name: &str, kind: NodeKind, inputs: Vec<NodeId>) -> Node {
    Node {
        id,
        name: name.into(),
        kind,
        inputs,
    }
}

fn conv(cin: usize, cout: usize, k: usize) -> NodeKind {
    NodeKind::Conv {
        in_channels: cin,
        out_channels: cout,
        kernel: k,
        stride: 1,
        pad: k / 2,
    }
}

/// conv(3→8, 3×3) → BN(8) → ReLU → conv(8→4, 3×3) → one 1×1 head pair on 6×6.
pub fn chain_graph() -> GraphSpec {
    let priors = PriorConfig::new(vec![6], vec![4], 0.3, 0.6).unwrap();
    GraphSpec {
        num_classes: 1,
        priors,
        nodes: vec![
            node(
                0,
                "input",
                NodeKind::Input {
                    channels: 3,
                    size: 6,
                },
                vec![],
            ),
            node(1, "c1", conv(3, 8, 3), vec![0]),
            node(
                2,
                "bn1",
                NodeKind::BatchNorm {
                    channels: 8,
                    eps: 1e-5,
                    momentum: 0.1,
                },
                vec![1],
            ),
            node(3, "r1", NodeKind::Relu, vec![2]),
            node(4, "c2", conv(8, 4, 3), vec![3]),
            node(
                5,
                "loc",
                NodeKind::HeadLoc {
                    level: 0,
                    in_channels: 4,
                    priors: 4,
                    kernel: 1,
                },
                vec![4],
            ),
            node(
                6,
                "conf",
                NodeKind::HeadConf {
                    level: 0,
                    in_channels: 4,
                    priors: 4,
                    classes: 1,
                    kernel: 1,
                },
                vec![4],
            ),
        ],
        heads: vec![HeadPair { loc: 5, conf: 6 }],
    }
}

/// Trainable parameters counted from the actual tensor shapes, node by node.
pub fn recount(params: &Params<f32>) -> usize {
    params
        .tensors()
        .iter()
        .filter(|(_, role, _)| role.is_trainable())
        .map(|(_, _, t)| t.shape().iter().product::<usize>())
        .sum()
}

pub struct Equivalence {
    pub zeroed: usize,
    pub total: usize,
    pub max_abs_diff: f64,
    pub before: usize,
    pub after: usize,
    /// `count_params` on the pruned graph.
    pub counted: usize,
}

/// Zeroes γ and β on a `frac` share of every prunable batch norm's channels
/// (at least one kept per node), prunes exactly those channels, and compares
/// eval-mode outputs on `inputs` random images.
///
/// A projection channel feeding the fused concat reaches the post-concat batch
/// norm, which is not prunable; its shift and running mean are zeroed on those
/// channels too so a closed channel is exactly zero after it.
pub fn prune_equivalence(
    graph: &GraphSpec,
    params: &Params<f32>,
    frac: f64,
    inputs: usize,
    seed: u64,
) -> Equivalence {
    let mut rng = Rng::new(seed);
    let mut p = params.clone();
    let mut masks = BTreeMap::new();
    let mut zeroed = 0;
    let mut total = 0;
    for id in graph.prunable_batchnorms() {
        let c = p.bn(id).unwrap().channels();
        let k = ((c as f64 * frac).round() as usize).min(c - 1);
        let mut idx: Vec<usize> = (0..c).collect();
        rng.shuffle(&mut idx);
        let mut keep = vec![true; c];
        for &i in &idx[..k] {
            keep[i] = false;
        }
        let bn = p.bn_mut(id).unwrap();
        for (i, &kp) in keep.iter().enumerate() {
            if !kp {
                bn.gamma.data_mut()[i] = 0.0;
                bn.beta.data_mut()[i] = 0.0;
            }
        }
        zeroed += k;
        total += c;
        masks.insert(id, keep);
    }
    if let (Some(cat), Some(post)) = (graph.find("fuse.concat"), graph.find("fuse.bn")) {
        let mut offset = 0;
        for &relu in &graph.node(cat).inputs {
            let bn = graph.node(relu).inputs[0];
            let c = p.bn(bn).unwrap().channels();
            if let Some(keep) = masks.get(&bn).cloned() {
                let post_bn = p.bn_mut(post).unwrap();
                for (i, kp) in keep.iter().enumerate() {
                    if !kp {
                        post_bn.beta.data_mut()[offset + i] = 0.0;
                        post_bn.running_mean.data_mut()[offset + i] = 0.0;
                    }
                }
            }
            offset += c;
        }
    }
    let plan = PrunePlan::from_masks(graph, masks).unwrap();
    let (g2, p2) = apply_prune(graph, &p, &plan).unwrap();
    g2.infer_shapes().unwrap();
    let shape = graph.input_shape().unwrap();
    let mut max_abs_diff: f64 = 0.0;
    for _ in 0..inputs {
        let n = shape.channels * shape.height * shape.width;
        let data: Vec<f32> = (0..n).map(|_| rng.uniform() as f32).collect();
        let x = Tensor::new(vec![1, shape.channels, shape.height, shape.width], data).unwrap();
        let (l1, c1) = predict(graph, &p, &x).unwrap();
        let (l2, c2) = predict(&g2, &p2, &x).unwrap();
        for (a, b) in l1
            .data()
            .iter()
            .chain(c1.data())
            .zip(l2.data().iter().chain(c2.data()))
        {
            max_abs_diff = max_abs_diff.max((a - b).abs() as f64);
        }
    }
    Equivalence {
        zeroed,
        total,
        max_abs_diff,
        before: recount(params),
        after: recount(&p2),
        counted: count_params(&g2).unwrap().trainable_total,
    }
}

pub fn uniform_tensor(shape: Vec<usize>, seed: u64, lo: f64, hi: f64) -> Tensor<f64> {
    let mut rng = Rng::new(seed);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.uniform_range(lo, hi)).collect()).unwrap()
}

/// Worst per-channel |mean| and |var − 1| of train-mode batch norm output
/// with γ = 1, β = 0.
pub fn bn_standardization(x: &Tensor<f32>) -> (f64, f64) {
    let (n, c, h, w) = x.dims4("test").unwrap();
    let mut bn = BatchNormParams::<f32>::new(c).unwrap();
    let y = batchnorm_forward_train(x, &mut bn).unwrap();
    let plane = h * w;
    let (mut worst_mean, mut worst_var) = (0.0f64, 0.0f64);
    for ch in 0..c {
        let vals: Vec<f64> = (0..n)
            .flat_map(|b| {
                y.data()[(b * c + ch) * plane..(b * c + ch + 1) * plane]
                    .iter()
                    .map(|&v| v as f64)
            })
            .collect();
        let m = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / vals.len() as f64;
        worst_mean = worst_mean.max(m.abs());
        worst_var = worst_var.max((var - 1.0).abs());
    }
    (worst_mean, worst_var)
}

/// Runs the fusion block with projection `i` reduced to the constant `i + 1`
/// and checks that the output splits into 2:1:1 blocks holding the shallow,
/// middle and deep projections in that order.
pub fn check_fusion(
    b: usize,
    cins: [usize; 3],
    sizes: [usize; 3],
    seed: u64,
) -> std::result::Result<(), String> {
    let spec = FusionSpec {
        sources: [0, 1, 2],
        proj_channels: [2 * b, b, b],
        target_size: sizes[0],
    };
    spec.validate().map_err(|e| e.to_string())?;
    let mut fp = FusionParams::<f64>::init(&spec, cins, seed).map_err(|e| e.to_string())?;
    for (i, p) in fp.proj.iter_mut().enumerate() {
        p.conv.weight.data_mut().iter_mut().for_each(|w| *w = 0.0);
        p.conv
            .bias
            .data_mut()
            .iter_mut()
            .for_each(|v| *v = (i + 1) as f64);
    }
    let mut tape = Tape::<f64>::new();
    let mut src = Vec::new();
    for i in 0..3 {
        let t = uniform_tensor(
            vec![1, cins[i], sizes[i], sizes[i]],
            seed + i as u64,
            -1.0,
            1.0,
        );
        src.push(tape.constant(t));
    }
    let y = fuse_features(&mut tape, [src[0], src[1], src[2]], &spec, &fp, Mode::Eval)
        .map_err(|e| e.to_string())?;
    let out = tape.value(y);
    let s = sizes[0];
    if out.shape() != [1, 4 * b, s, s] {
        return Err(format!("fused shape {:?}", out.shape()));
    }
    let blocks = spec.blocks();
    if blocks[0].len() != 2 * blocks[1].len()
        || blocks[1].len() != blocks[2].len()
        || blocks[2].end != 4 * b
    {
        return Err(format!("blocks {blocks:?} not 2:1:1"));
    }
    let mut level = Vec::new();
    for (i, r) in blocks.iter().enumerate() {
        let v = out.narrow_channels(r.start, r.end).unwrap();
        let first = v.data()[0];
        if v.data().iter().any(|&x| x != first) {
            return Err(format!("block {i} mixes sources"));
        }
        level.push(first);
    }
    // the marker grows with the source index
    if !(level[0] < level[1] && level[1] < level[2]) {
        return Err(format!("blocks out of source order: {level:?}"));
    }
    Ok(())
}

/// Checks `nms` against the brute-force reference; panics on the first mismatch.
pub fn nms_oracle(instances: usize) {
    let mut rng = Rng::new(7);
    for case in 0..instances {
        let n = 1 + rng.below(200) as usize;
        let boxes: Vec<BBox> = (0..n).map(|_| random_box(&mut rng, 10)).collect();
        // few distinct scores so ties are frequent
        let scores: Vec<f64> = (0..n).map(|_| rng.below(20) as f64 / 20.0).collect();
        let thr = [0.3, 0.45, 0.5, 0.7][case % 4];
        assert_eq!(
            nms(&boxes, &scores, thr),
            nms_ref(&boxes, &scores, thr, usize::MAX),
            "case {case}"
        );
    }
}

pub fn decode_oracle(instances: usize) {
    let mut rng = Rng::new(8);
    let layouts = [
        PriorConfig::new(vec![4, 2], vec![4, 4], 0.2, 0.6).unwrap(),
        PriorConfig::new(vec![5, 3, 1], vec![6, 4, 4], 0.15, 0.8).unwrap(),
    ];
    for case in 0..instances {
        let priors = generate_priors(&layouts[case % 2]).unwrap();
        let p = priors.len();
        assert!(p <= 200);
        let classes = 1 + rng.below(3) as usize;
        let loc: Vec<f64> = (0..p * 4).map(|_| rng.uniform_range(-3.0, 3.0)).collect();
        let conf: Vec<f64> = (0..p * (classes + 1))
            .map(|_| rng.uniform_range(-2.0, 4.0))
            .collect();
        let cfg = DecodeConfig {
            score_threshold: [0.05, 0.2, 0.4][case % 3],
            nms_iou: [0.3, 0.45, 0.6][case % 3],
            top_k: [5, 20, 100][(case / 3) % 3],
        };
        let got = decode_detections(&loc, &conf, &priors, classes, &cfg).unwrap();
        let want = decode_ref(
            &loc,
            &conf,
            &priors,
            classes,
            cfg.score_threshold,
            cfg.nms_iou,
            cfg.top_k,
        );
        assert_eq!(got.len(), want.len(), "case {case}");
        for (g, w) in got.iter().zip(&want) {
            assert_eq!((g.class_id, g.prior), (w.0, w.3), "case {case}");
            assert!((g.score - w.1).abs() < 1e-12, "case {case}");
            for (a, b) in [
                (g.bbox.xmin, w.2.xmin),
                (g.bbox.ymin, w.2.ymin),
                (g.bbox.xmax, w.2.xmax),
                (g.bbox.ymax, w.2.ymax),
            ] {
                assert!((a - b).abs() < 1e-12, "case {case}");
            }
            assert!(g.bbox.area() > 0.0);
        }
    }
}

pub fn ap_oracle(instances: usize) {
    let mut rng = Rng::new(9);
    for case in 0..instances {
        let images = 1 + rng.below(4) as usize;
        let nt = rng.below(30) as usize;
        let truths: Vec<(usize, BBox, bool)> = (0..nt)
            .map(|_| {
                (
                    rng.below(images as u64) as usize,
                    random_box(&mut rng, 6),
                    rng.below(5) != 0,
                )
            })
            .collect();
        let nd = rng.below(150) as usize;
        let dets: Vec<(usize, f64, BBox)> = (0..nd)
            .map(|_| {
                let image = rng.below(images as u64) as usize;
                // half the detections are jittered copies of truths
                let b = match truths.get(rng.below(2 * nt as u64 + 1) as usize) {
                    Some(t) if t.0 == image => t.1,
                    _ => random_box(&mut rng, 6),
                };
                (image, rng.below(10) as f64 / 10.0, b)
            })
            .collect();
        let thr = [0.5, 0.3, 0.75][case % 3];
        let d: Vec<ScoredBox> = dets
            .iter()
            .map(|&(image, score, bbox)| ScoredBox { image, score, bbox })
            .collect();
        let t: Vec<TruthBox> = truths
            .iter()
            .map(|&(image, bbox, counted)| TruthBox {
                image,
                bbox,
                counted,
            })
            .collect();
        let got = average_precision(&d, &t, thr);
        let want = ap_ref(&dets, &truths, thr);
        match (got, want) {
            (Some(a), Some(b)) => assert!((a - b).abs() < 1e-12, "case {case}: {a} vs {b}"),
            (a, b) => assert_eq!(a, b, "case {case}"),
        }
    }
}

/// The hand case: one false positive ranked above the only true positive.
pub fn fp_above_tp_ap() -> Option<f64> {
    let t = BBox::new(0.1, 0.1, 0.3, 0.3).unwrap();
    let far = BBox::new(0.6, 0.6, 0.9, 0.9).unwrap();
    let dets = [
        ScoredBox {
            image: 0,
            score: 0.9,
            bbox: far,
        },
        ScoredBox {
            image: 0,
            score: 0.8,
            bbox: t,
        },
    ];
    let truths = [TruthBox {
        image: 0,
        bbox: t,
        counted: true,
    }];
    average_precision(&dets, &truths, 0.5)
}
