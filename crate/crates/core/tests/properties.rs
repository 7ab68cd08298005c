mod common;

use proptest::prelude::*;

use common::{chain_graph, recount};
use mfssd::boxes::{iou, BBox};
use mfssd::checkpoint::{Checkpoint, WEIGHTS_FILE};
use mfssd::data::generate_dataset;
use mfssd::detector::{
    build_mfssd, decode_box, encode_box, fusion_spec, generate_priors, match_priors, multibox_loss,
    Annotation, ArchConfig, Params, PriorConfig,
};
use mfssd::eval::{average_precision, evaluate_map, ScoredBox, TruthBox};
use mfssd::layers::{batchnorm_forward_eval, batchnorm_forward_train, BatchNormParams};
use mfssd::optim::{lr_at, TrainConfig};
use mfssd::rng::Rng;
use mfssd::slimming::{apply_prune, count_params, plan_prune};
use mfssd::tensor::{Tape, Tensor};

fn unit_box() -> impl Strategy<Value = BBox> {
    (0.0..0.9f64, 0.0..0.9f64, 0.02..0.6f64, 0.02..0.6f64)
        .prop_map(|(x, y, w, h)| BBox::new(x, y, (x + w).min(1.0), (y + h).min(1.0)).unwrap())
}

use common::uniform_tensor as tensor;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn iou_symmetric_and_bounded(a in unit_box(), b in unit_box()) {
        let x = iou(&a, &b).unwrap();
        prop_assert_eq!(x, iou(&b, &a).unwrap());
        prop_assert!((0.0..=1.0).contains(&x));
        prop_assert!((iou(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn concat_then_split_is_exact(
        n in 1usize..3, c in prop::collection::vec(1usize..4, 1..4), h in 1usize..5, seed in any::<u64>()
    ) {
        let mut tape = Tape::<f64>::new();
        let parts: Vec<Tensor<f64>> =
            c.iter().enumerate().map(|(i, &ci)| tensor(vec![n, ci, h, h], seed ^ i as u64, -3.0, 3.0)).collect();
        let vars: Vec<_> = parts.iter().map(|t| tape.constant(t.clone())).collect();
        let cat = tape.concat_channels(&vars).unwrap();
        let out = tape.value(cat);
        let mut at = 0;
        for p in &parts {
            let c = p.shape()[1];
            prop_assert_eq!(&out.narrow_channels(at, at + c).unwrap(), p);
            at += c;
        }
    }

    #[test]
    fn same_padding_preserves_extent(k in prop::sample::select(vec![1usize, 3, 5]), h in 5usize..9, w in 5usize..9) {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(tensor(vec![1, 2, h, w], 1, -1.0, 1.0));
        let wt = tape.constant(tensor(vec![3, 2, k, k], 2, -1.0, 1.0));
        let b = tape.constant(Tensor::zeros(vec![3]).unwrap());
        let y = tape.conv2d(x, wt, b, 1, (k - 1) / 2).unwrap();
        prop_assert_eq!(tape.value(y).shape(), &[1, 3, h, w]);
    }

    #[test]
    fn upsample_stays_in_range(h in 1usize..6, oh in 1usize..13, seed in any::<u64>()) {
        let x = tensor(vec![1, 2, h, h], seed, -5.0, 5.0);
        let mut tape = Tape::<f64>::new();
        let v = tape.constant(x.clone());
        let y = tape.upsample_bilinear(v, oh.max(h), oh.max(h)).unwrap();
        for ch in 0..2 {
            let src = x.narrow_channels(ch, ch + 1).unwrap();
            let dst = tape.value(y).narrow_channels(ch, ch + 1).unwrap();
            prop_assert!(dst.min() >= src.min() - 1e-12 && dst.max() <= src.max() + 1e-12);
        }
    }

    #[test]
    fn batchnorm_standardizes(
        n in 1usize..5, c in 1usize..4, h in 4usize..9, seed in any::<u64>(), offset in -10.0..10.0f64, scale in 0.5..10.0f64
    ) {
        // eps shifts the variance by eps/σ², negligible at this spread
        prop_assume!(n * h * h >= 64);
        let x = tensor(vec![n, c, h, h], seed, offset - scale, offset + scale).cast::<f32>();
        let (m, v) = common::bn_standardization(&x);
        prop_assert!(m < 1e-5, "mean {}", m);
        prop_assert!(v < 1e-3, "var {}", v);
    }

    #[test]
    fn closed_gate_channel_is_zero(c in 2usize..5, seed in any::<u64>(), shut in 0usize..5) {
        let shut = shut % c;
        let x = tensor(vec![2, c, 3, 3], seed, -50.0, 50.0);
        let mut bn = BatchNormParams::<f64>::new(c).unwrap();
        bn.gamma.data_mut()[shut] = 0.0;
        bn.beta.data_mut()[shut] = 0.0;
        bn.running_mean = tensor(vec![c], seed + 1, -3.0, 3.0);
        bn.running_var = tensor(vec![c], seed + 2, 0.1, 3.0);
        let e = batchnorm_forward_eval(&x, &bn).unwrap();
        let t = batchnorm_forward_train(&x, &mut bn).unwrap();
        for y in [e, t] {
            prop_assert!(y.narrow_channels(shut, shut + 1).unwrap().data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn prior_count_identity(
        levels in prop::collection::vec((1usize..12, prop::sample::select(vec![4usize, 6])), 1..6),
        smin in 0.05..0.4f64, span in 0.1..0.5f64
    ) {
        let (sizes, counts): (Vec<usize>, Vec<usize>) = levels.iter().copied().unzip();
        let cfg = PriorConfig::new(sizes.clone(), counts.clone(), smin, smin + span).unwrap();
        let set = generate_priors(&cfg).unwrap();
        let closed: usize = sizes.iter().zip(&counts).map(|(f, n)| f * f * n).sum();
        let mut explicit = 0;
        for (k, (&f, &n)) in sizes.iter().zip(&counts).enumerate() {
            prop_assert_eq!(set.level_offsets[k], explicit);
            for i in 0..f {
                for j in 0..f {
                    for a in 0..n {
                        let b = set.boxes[explicit];
                        prop_assert!((b.cx - (j as f64 + 0.5) / f as f64).abs() < 1e-12, "anchor {}", a);
                        prop_assert!((b.cy - (i as f64 + 0.5) / f as f64).abs() < 1e-12);
                        explicit += 1;
                    }
                }
            }
        }
        prop_assert_eq!(set.len(), closed);
        prop_assert_eq!(explicit, closed);
    }

    #[test]
    fn encode_decode_inverse(t in unit_box(), cx in 0.05..0.95f64, cy in 0.05..0.95f64, w in 0.02..0.9f64, h in 0.02..0.9f64) {
        let prior = mfssd::boxes::CenterBox { cx, cy, w, h };
        let back = decode_box(encode_box(&t, &prior), &prior).to_corners();
        for (a, b) in [(back.xmin, t.xmin), (back.ymin, t.ymin), (back.xmax, t.xmax), (back.ymax, t.ymax)] {
            prop_assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn force_match_covers_every_truth(truths in prop::collection::vec(unit_box(), 1..12)) {
        let priors = generate_priors(&PriorConfig::new(vec![4, 2], vec![4, 4], 0.2, 0.6).unwrap()).unwrap();
        let anns: Vec<Annotation> = truths.iter().map(|&bbox| Annotation { class_id: 1, bbox }).collect();
        let a = match_priors(&priors, &anns, 0.5).unwrap();
        for t in 0..anns.len() {
            prop_assert!(a.contains(&Some(t)), "truth {} unmatched", t);
        }
    }

    #[test]
    fn loss_ignores_truth_order(truths in prop::collection::vec(unit_box(), 1..6), seed in any::<u64>()) {
        let priors = generate_priors(&PriorConfig::new(vec![4, 2], vec![4, 4], 0.2, 0.6).unwrap()).unwrap();
        let p = priors.len();
        let anns: Vec<Annotation> =
            truths.iter().enumerate().map(|(i, &bbox)| Annotation { class_id: 1 + i % 2, bbox }).collect();
        let loc = tensor(vec![p * 4], seed, -1.0, 1.0).into_data();
        let conf = tensor(vec![p * 3], seed + 1, -2.0, 2.0).into_data();
        let loss = |anns: &[Annotation]| {
            let a = match_priors(&priors, anns, 0.5).unwrap();
            multibox_loss(&loc, &conf, 1, 2, &priors, &[a], &[anns.to_vec()], 3.0).unwrap().value
        };
        let mut rev = anns.clone();
        rev.reverse();
        let mut rng = Rng::new(seed);
        let mut shuffled = anns.clone();
        rng.shuffle(&mut shuffled);
        let base = loss(&anns);
        prop_assert!((loss(&rev) - base).abs() <= 1e-12 * base.abs().max(1.0));
        prop_assert!((loss(&shuffled) - base).abs() <= 1e-12 * base.abs().max(1.0));
    }

    #[test]
    fn lr_schedule_piecewise_monotone(
        base in 1e-4..1.0f64, warm in 0usize..4, steps in 1usize..6,
        bounds in prop::collection::btree_set(1usize..12, 0..3), factor in 0.05..1.0f64
    ) {
        let cfg = TrainConfig {
            base_lr: base,
            warmup_epochs: warm,
            lr_step_epochs: bounds.into_iter().filter(|&b| b >= warm).collect(),
            lr_step_factor: factor,
            ..TrainConfig::default()
        };
        let seq: Vec<f64> = (0..14).flat_map(|e| (0..steps).map(move |s| (e, s))).map(|(e, s)| lr_at(&cfg, e, s, steps)).collect();
        let warm_steps = warm * steps;
        for i in 1..seq.len() {
            if i < warm_steps {
                prop_assert!(seq[i] >= seq[i - 1]);
            } else if i > warm_steps {
                prop_assert!(seq[i] <= seq[i - 1]);
            }
        }
    }

    #[test]
    fn ap_depends_only_on_ranking(seed in any::<u64>(), n in 1usize..40) {
        let mut rng = Rng::new(seed);
        let truths: Vec<TruthBox> = (0..5)
            .map(|i| TruthBox { image: i % 2, bbox: common::random_box(&mut rng, 5), counted: true })
            .collect();
        let dets: Vec<ScoredBox> = (0..n)
            .map(|_| ScoredBox { image: rng.below(2) as usize, score: rng.uniform(), bbox: common::random_box(&mut rng, 5) })
            .collect();
        let mapped: Vec<ScoredBox> = dets.iter().map(|d| ScoredBox { score: (3.0 * d.score).exp() - 7.0, ..*d }).collect();
        prop_assert_eq!(average_precision(&dets, &truths, 0.5), average_precision(&mapped, &truths, 0.5));

        // a trailing detection can only hurt as a FP and only help as a TP
        let base = average_precision(&dets, &truths, 0.5).unwrap();
        let mut fp = dets.clone();
        fp.push(ScoredBox { image: 0, score: -1.0, bbox: BBox::new(0.0, 0.0, 1e-3, 1e-3).unwrap() });
        prop_assert!(average_precision(&fp, &truths, 0.5).unwrap() <= base + 1e-12);
        let mut tp = dets.clone();
        tp.push(ScoredBox { image: truths[0].image, score: -1.0, bbox: truths[0].bbox });
        prop_assert!(average_precision(&tp, &truths, 0.5).unwrap() >= base - 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn fusion_blocks_follow_ratio_and_order(
        b in 1usize..5, cins in prop::array::uniform3(1usize..5), s in 2usize..8,
        mid in 1usize..8, deep in 1usize..8, seed in any::<u64>()
    ) {
        let mid = mid.min(s);
        let res = common::check_fusion(b, cins, [s, mid, deep.min(mid)], seed);
        prop_assert!(res.is_ok(), "{:?}", res);
    }

    #[test]
    fn built_graphs_fuse_two_one_one(b in 2usize..24) {
        let arch = ArchConfig { fusion_channels: [2 * b, b, b], ..ArchConfig::default() };
        let g = build_mfssd(&arch).unwrap();
        let spec = fusion_spec(&g).unwrap();
        prop_assert_eq!(spec.proj_channels, [2 * b, b, b]);
        let shapes = g.infer_shapes().unwrap();
        let sizes: Vec<usize> = spec.sources.iter().map(|&i| shapes[i].height).collect();
        prop_assert!(spec.sources[0] < spec.sources[1] && spec.sources[1] < spec.sources[2]);
        prop_assert!(sizes[0] > sizes[1] && sizes[1] >= sizes[2], "sources not shallow→deep: {:?}", sizes);
        prop_assert_eq!(sizes[0], spec.target_size);
    }

    #[test]
    fn larger_ratio_never_keeps_more(r1 in 0.05..0.9f64, dr in 0.0..0.09f64, seed in any::<u64>()) {
        let g = build_mfssd(&ArchConfig::default()).unwrap();
        let mut p = Params::<f32>::init(&g, seed).unwrap();
        let mut rng = Rng::new(seed);
        for id in g.prunable_batchnorms() {
            p.bn_mut(id).unwrap().gamma.data_mut().iter_mut().for_each(|v| *v = rng.uniform() as f32);
        }
        let count = |r: f64| {
            let plan = plan_prune(&g, &p, r).unwrap();
            let (g2, p2) = apply_prune(&g, &p, &plan).unwrap();
            g2.infer_shapes().unwrap();
            let c = count_params(&g2).unwrap().trainable_total;
            assert_eq!(c, recount(&p2));
            // only the keep-one rule separates realized from requested
            let restored = plan.masks.values().filter(|m| m.iter().filter(|k| **k).count() == 1).count();
            assert!(plan.pruned_channels <= (r * plan.total_channels as f64).floor() as usize);
            assert!(plan.pruned_channels + restored >= (r * plan.total_channels as f64).floor() as usize);
            c
        };
        prop_assert!(count(r1) >= count(r1 + dr));
    }

    #[test]
    fn corrupted_weights_always_rejected(pos in any::<prop::sample::Index>(), bit in 0u8..8) {
        let dir = tempfile::tempdir().unwrap();
        let g = chain_graph();
        let p = Params::<f32>::init(&g, 1).unwrap();
        Checkpoint::new(g, p, serde_json::Value::Null).unwrap().save(dir.path()).unwrap();
        let path = dir.path().join(WEIGHTS_FILE);
        let mut w = std::fs::read(&path).unwrap();
        let i = pos.index(w.len());
        w[i] ^= 1 << bit;
        std::fs::write(&path, &w).unwrap();
        prop_assert!(Checkpoint::load(dir.path()).is_err());
    }
}

#[test]
fn empty_detector_scores_zero() {
    let ds = generate_dataset(5, 20, 96, 0.5).unwrap();
    let truths: Vec<Vec<Annotation>> = ds.samples.iter().map(|s| s.annotations.clone()).collect();
    let dets = vec![Vec::new(); truths.len()];
    let r = evaluate_map(&dets, &truths, &ds.manifest.classes, 96, 0.5).unwrap();
    assert_eq!(r.map, 0.0);
}

#[test]
fn single_bucket_matches_unbucketed() {
    // all objects small
    let ds = generate_dataset(6, 30, 96, 1.0).unwrap();
    let truths: Vec<Vec<Annotation>> = ds.samples.iter().map(|s| s.annotations.clone()).collect();
    let mut rng = Rng::new(1);
    let dets: Vec<Vec<mfssd::detector::Detection>> = truths
        .iter()
        .map(|ts| {
            let mut out = Vec::new();
            for (k, a) in ts.iter().enumerate() {
                if rng.below(3) != 0 {
                    let score = rng.uniform();
                    out.push(mfssd::detector::Detection {
                        class_id: a.class_id,
                        score,
                        bbox: a.bbox,
                        prior: k,
                    });
                }
            }
            out
        })
        .collect();
    let r = evaluate_map(&dets, &truths, &ds.manifest.classes, 96, 0.5).unwrap();
    assert!(r.truths_per_bucket.medium == 0 && r.truths_per_bucket.large == 0);
    assert_eq!(r.ap_small, Some(r.map));
    assert_eq!((r.ap_medium, r.ap_large), (None, None));
}

#[test]
fn class_balance_within_twenty_percent() {
    let ds = generate_dataset(21, 1000, 96, 0.5).unwrap();
    let mut counts = [0usize; 3];
    for a in ds.samples.iter().flat_map(|s| &s.annotations) {
        counts[a.class_id - 1] += 1;
    }
    let total: usize = counts.iter().sum();
    let uniform = total as f64 / 3.0;
    for c in counts {
        assert!((c as f64 - uniform).abs() <= 0.2 * uniform, "{counts:?}");
    }
}

#[test]
fn dataset_resave_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let ds = generate_dataset(2, 12, 64, 0.5).unwrap();
    ds.save(dir.path()).unwrap();
    let back = mfssd::data::load_dataset(dir.path()).unwrap();
    assert_eq!(back.to_bytes().unwrap(), ds.to_bytes().unwrap());
}

#[test]
fn chain_prune_counts() {
    let g = chain_graph();
    assert_eq!(
        count_params(&g)
            .unwrap()
            .nodes
            .iter()
            .filter(|n| n.id <= 4)
            .map(|n| n.trainable)
            .sum::<usize>(),
        532
    );
}
