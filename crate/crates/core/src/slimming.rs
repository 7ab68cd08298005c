//! Channel pruning driven by batch-norm scaling factors.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::Dataset;
use crate::detector::{GraphSpec, NodeId, NodeKind, NodeParams, Params};
use crate::error::{Error, Result};
use crate::layers::Conv2dParams;
use crate::optim::{train, EpochLog, TrainConfig};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrunePlan {
    /// |γ| of the first kept entry in global order; channels below it are dropped.
    pub threshold: f64,
    /// Keep mask per prunable batch-norm node.
    pub masks: BTreeMap<NodeId, Vec<bool>>,
    pub requested_ratio: f64,
    pub realized_ratio: f64,
    /// Nodes whose output channels are never pruned.
    pub protected: Vec<NodeId>,
    pub total_channels: usize,
    pub pruned_channels: usize,
}

fn protected_nodes(graph: &GraphSpec, prunable: &[NodeId]) -> Vec<NodeId> {
    graph
        .nodes
        .iter()
        .filter(|n| match n.kind {
            NodeKind::HeadLoc { .. } | NodeKind::HeadConf { .. } => true,
            NodeKind::BatchNorm { .. } => !prunable.contains(&n.id),
            _ => false,
        })
        .map(|n| n.id)
        .collect()
}

fn abs_gamma<T: Element>(params: &Params<T>, id: NodeId) -> Result<Vec<f64>> {
    let bn = params
        .bn(id)
        .ok_or_else(|| Error::graph(format!("node {id} has no batch-norm parameters")))?;
    Ok(bn
        .gamma
        .data()
        .iter()
        .map(|g| g.abs().to_f64().unwrap_or(f64::NAN))
        .collect())
}

impl PrunePlan {
    /// A plan with explicit keep masks (`true` = keep) for some prunable nodes;
    /// unlisted prunable nodes keep everything.
    pub fn from_masks(graph: &GraphSpec, masks: BTreeMap<NodeId, Vec<bool>>) -> Result<Self> {
        let prunable = graph.prunable_batchnorms();
        let mut full = BTreeMap::new();
        for &id in &prunable {
            let c = match graph.node(id).kind {
                NodeKind::BatchNorm { channels, .. } => channels,
                _ => unreachable!("prunable nodes are batch norms"),
            };
            full.insert(id, vec![true; c]);
        }
        for (id, m) in masks {
            let slot = full
                .get_mut(&id)
                .ok_or_else(|| Error::invalid(format!("node {id} is not a prunable batch norm")))?;
            if slot.len() != m.len() {
                return Err(Error::invalid(format!(
                    "mask for node {id} has {} entries, node has {} channels",
                    m.len(),
                    slot.len()
                )));
            }
            *slot = m;
        }
        let total: usize = full.values().map(Vec::len).sum();
        let pruned: usize = full
            .values()
            .map(|m| m.iter().filter(|k| !**k).count())
            .sum();
        let ratio = pruned as f64 / total.max(1) as f64;
        Ok(Self {
            threshold: f64::NAN,
            masks: full,
            requested_ratio: ratio,
            realized_ratio: ratio,
            protected: protected_nodes(graph, &prunable),
            total_channels: total,
            pruned_channels: pruned,
        })
    }

    pub fn kept(&self, id: NodeId) -> Option<Vec<usize>> {
        self.masks.get(&id).map(|m| {
            m.iter()
                .enumerate()
                .filter(|(_, k)| **k)
                .map(|(i, _)| i)
                .collect()
        })
    }
}

/// Global |γ| ranking over all prunable batch norms. The ⌊ratio·M⌋ smallest
/// entries are dropped (on equal |γ| the earlier channel goes first, so the
/// later one is kept); a node that would lose every channel keeps its largest.
pub fn plan_prune<T: Element>(
    graph: &GraphSpec,
    params: &Params<T>,
    ratio: f64,
) -> Result<PrunePlan> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::invalid(format!(
            "prune ratio must be in (0,1), got {ratio}"
        )));
    }
    plan_prune_count(graph, params, ratio, None)
}

fn plan_prune_count<T: Element>(
    graph: &GraphSpec,
    params: &Params<T>,
    ratio: f64,
    count: Option<usize>,
) -> Result<PrunePlan> {
    let prunable = graph.prunable_batchnorms();
    let mut entries: Vec<(f64, usize, NodeId, usize)> = Vec::new();
    let mut gammas = BTreeMap::new();
    for &id in &prunable {
        let g = abs_gamma(params, id)?;
        if let Some(i) = g.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: format!("scaling factors of node {id}"),
                index: i,
            });
        }
        for (c, &v) in g.iter().enumerate() {
            entries.push((v, entries.len(), id, c));
        }
        gammas.insert(id, g);
    }
    let total = entries.len();
    let k = count
        .unwrap_or((ratio * total as f64).floor() as usize)
        .min(total);
    entries.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let threshold = entries.get(k).map_or(f64::INFINITY, |e| e.0);

    let mut masks: BTreeMap<NodeId, Vec<bool>> = gammas
        .iter()
        .map(|(&id, g)| (id, vec![true; g.len()]))
        .collect();
    for &(_, _, id, c) in &entries[..k] {
        masks.get_mut(&id).expect("known node")[c] = false;
    }
    for (id, m) in masks.iter_mut() {
        if m.iter().all(|k| !*k) {
            let g = &gammas[id];
            let mut best = 0;
            for c in 1..g.len() {
                if g[c] >= g[best] {
                    best = c;
                }
            }
            m[best] = true;
        }
    }
    let pruned: usize = masks
        .values()
        .map(|m| m.iter().filter(|k| !**k).count())
        .sum();
    Ok(PrunePlan {
        threshold,
        masks,
        requested_ratio: ratio,
        realized_ratio: pruned as f64 / total.max(1) as f64,
        protected: protected_nodes(graph, &prunable),
        total_channels: total,
        pruned_channels: pruned,
    })
}

/// Output channels (original indices) that survive at every node.
fn surviving_channels(graph: &GraphSpec, plan: &PrunePlan) -> Result<Vec<Vec<usize>>> {
    let shapes = graph.infer_shapes()?;
    let prunable = graph.prunable_batchnorms();
    for (&id, m) in &plan.masks {
        if !prunable.contains(&id) {
            return Err(Error::invalid(format!("plan masks non-prunable node {id}")));
        }
        if m.len() != shapes[id].channels {
            return Err(Error::invalid(format!(
                "mask for node {id} has {} entries, node has {} channels",
                m.len(),
                shapes[id].channels
            )));
        }
        if !m.iter().any(|k| *k) {
            return Err(Error::invalid(format!(
                "mask for node {id} removes every channel"
            )));
        }
    }
    // conv feeding a masked BN → that BN's id
    let mut gated: BTreeMap<NodeId, NodeId> = BTreeMap::new();
    for &id in plan.masks.keys() {
        gated.insert(graph.node(id).inputs[0], id);
    }
    let mut keep: Vec<Vec<usize>> = Vec::with_capacity(graph.nodes.len());
    for node in &graph.nodes {
        let all = || (0..shapes[node.id].channels).collect::<Vec<_>>();
        let k = match &node.kind {
            NodeKind::Input { .. } | NodeKind::HeadLoc { .. } | NodeKind::HeadConf { .. } => all(),
            NodeKind::Conv { .. } => match gated.get(&node.id) {
                Some(&bn) => plan.kept(bn).expect("mask exists"),
                None => all(),
            },
            NodeKind::BatchNorm { .. }
            | NodeKind::Relu
            | NodeKind::MaxPool { .. }
            | NodeKind::Upsample { .. } => keep[node.inputs[0]].clone(),
            NodeKind::Concat => {
                let mut out = Vec::new();
                let mut offset = 0;
                for &i in &node.inputs {
                    if keep[i].is_empty() {
                        return Err(Error::invalid(format!(
                            "pruning would empty block from node {i} of concat {}",
                            node.id
                        )));
                    }
                    out.extend(keep[i].iter().map(|c| c + offset));
                    offset += shapes[i].channels;
                }
                out
            }
        };
        if k.is_empty() {
            return Err(Error::invalid(format!(
                "pruning would leave node {} without channels",
                node.id
            )));
        }
        keep.push(k);
    }
    Ok(keep)
}

fn slice_conv<T: Element>(
    c: &Conv2dParams<T>,
    outs: &[usize],
    ins: &[usize],
) -> Result<Conv2dParams<T>> {
    let [_, cin, k, _] = c.weight.shape() else {
        return Err(Error::shape("apply_prune", "conv weight must be rank 4"));
    };
    let (cin, kk) = (*cin, k * k);
    let w = c.weight.data();
    let mut data = Vec::with_capacity(outs.len() * ins.len() * kk);
    for &o in outs {
        for &i in ins {
            let base = (o * cin + i) * kk;
            data.extend_from_slice(&w[base..base + kk]);
        }
    }
    Conv2dParams::from_tensors(
        Tensor::new(vec![outs.len(), ins.len(), *k, *k], data)?,
        Tensor::new(
            vec![outs.len()],
            outs.iter().map(|&o| c.bias.data()[o]).collect(),
        )?,
        c.stride,
        c.pad,
    )
}

/// Rewrites graph and parameters, removing pruned channels everywhere they
/// appear. The inputs are left untouched; nothing is built when the plan is
/// inconsistent with the graph.
pub fn apply_prune<T: Element>(
    graph: &GraphSpec,
    params: &Params<T>,
    plan: &PrunePlan,
) -> Result<(GraphSpec, Params<T>)> {
    params.validate(graph)?;
    let keep = surviving_channels(graph, plan)?;
    let mut g = graph.clone();
    let mut nodes = Vec::with_capacity(params.nodes.len());
    for (node, slot) in g.nodes.iter_mut().zip(&params.nodes) {
        let own = &keep[node.id];
        let new = match slot {
            Some(NodeParams::Conv(c)) => {
                let ins = &keep[node.inputs[0]];
                node.kind.set_in_channels(ins.len());
                if let NodeKind::Conv { out_channels, .. } = &mut node.kind {
                    *out_channels = own.len();
                }
                Some(NodeParams::Conv(slice_conv(c, own, ins)?))
            }
            Some(NodeParams::BatchNorm(b)) => {
                if let NodeKind::BatchNorm { channels, .. } = &mut node.kind {
                    *channels = own.len();
                }
                Some(NodeParams::BatchNorm(b.select_channels(own)?))
            }
            None => None,
        };
        nodes.push(new);
    }
    let p = Params { nodes };
    g.infer_shapes()?;
    p.validate(&g)?;
    Ok((g, p))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeCount {
    pub id: NodeId,
    pub name: String,
    pub kind: String,
    pub trainable: usize,
    pub buffers: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamReport {
    pub nodes: Vec<NodeCount>,
    pub trainable_total: usize,
    pub buffer_total: usize,
    /// `weights.bin` size: (trainable + buffers) × 4.
    pub weights_bytes: usize,
    /// `manifest.json` size for these parameters without metadata.
    pub manifest_bytes: usize,
    pub serialized_bytes: usize,
}

/// Closed-form counts: conv `Cout·Cin·K² + Cout`, batch norm `2C` trainable
/// plus `2C` buffers.
pub fn count_params(graph: &GraphSpec) -> Result<ParamReport> {
    let mut nodes = Vec::new();
    for n in &graph.nodes {
        let (trainable, buffers) = match n.kind {
            NodeKind::BatchNorm { channels, .. } => (2 * channels, 2 * channels),
            ref k => match k.conv_geometry() {
                Some((cin, cout, kk, _, _)) => (cout * cin * kk * kk + cout, 0),
                None => continue,
            },
        };
        nodes.push(NodeCount {
            id: n.id,
            name: n.name.clone(),
            kind: n.kind.name().into(),
            trainable,
            buffers,
        });
    }
    let trainable_total = nodes.iter().map(|n| n.trainable).sum();
    let buffer_total: usize = nodes.iter().map(|n| n.buffers).sum();
    let weights_bytes = 4 * (trainable_total + buffer_total);
    let template = Params::<f32>::init(graph, 0)?;
    let manifest_bytes = Checkpoint::new(graph.clone(), template, serde_json::Value::Null)?
        .to_bytes()?
        .0
        .len();
    Ok(ParamReport {
        nodes,
        trainable_total,
        buffer_total,
        weights_bytes,
        manifest_bytes,
        serialized_bytes: weights_bytes + manifest_bytes,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodePruneSummary {
    pub id: NodeId,
    pub name: String,
    pub kept: usize,
    pub dropped: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruneReport {
    pub requested_ratio: f64,
    pub realized_ratio: f64,
    pub threshold: f64,
    pub iterations: usize,
    pub nodes: Vec<NodePruneSummary>,
    pub before: ParamReport,
    pub after: ParamReport,
    /// Percent drop in trainable parameters.
    pub param_reduction_pct: f64,
    /// Percent drop in serialized checkpoint bytes.
    pub byte_reduction_pct: f64,
}

pub fn reduction_pct(before: usize, after: usize) -> f64 {
    100.0 * (before as f64 - after as f64) / before as f64
}

/// `iterations` rounds of plan + rewrite at `ratio`, each over the channels
/// that survived the previous round. The report's node table, threshold and
/// ratios describe the original graph against the final one.
pub fn prune<T: Element>(
    graph: &GraphSpec,
    params: &Params<T>,
    ratio: f64,
    iterations: usize,
) -> Result<(GraphSpec, Params<T>, PruneReport)> {
    if iterations == 0 {
        return Err(Error::invalid("iterations must be at least 1"));
    }
    let mut g = graph.clone();
    let mut p = params.clone();
    let mut threshold = f64::NAN;
    for _ in 0..iterations {
        let plan = plan_prune(&g, &p, ratio)?;
        threshold = plan.threshold;
        (g, p) = apply_prune(&g, &p, &plan)?;
    }
    let report = build_report(graph, &g, ratio, threshold, iterations)?;
    Ok((g, p, report))
}

/// Prunes the smallest number of globally ranked channels whose removal cuts
/// trainable parameters by at least `min_pct` percent.
pub fn prune_to_reduction<T: Element>(
    graph: &GraphSpec,
    params: &Params<T>,
    min_pct: f64,
) -> Result<(GraphSpec, Params<T>, PruneReport)> {
    if !(min_pct > 0.0 && min_pct < 100.0) {
        return Err(Error::invalid(format!(
            "target reduction must be in (0,100), got {min_pct}"
        )));
    }
    let before = count_params(graph)?.trainable_total;
    let total: usize = graph
        .prunable_batchnorms()
        .iter()
        .filter_map(|&id| params.bn(id))
        .map(|b| b.channels())
        .sum();
    let trial = |k: usize| -> Result<(PrunePlan, GraphSpec, Params<T>, f64)> {
        let plan = plan_prune_count(graph, params, k as f64 / total as f64, Some(k))?;
        let (g, p) = apply_prune(graph, params, &plan)?;
        let pct = reduction_pct(before, count_params(&g)?.trainable_total);
        Ok((plan, g, p, pct))
    };
    // the parameter count falls monotonically with k
    let (mut lo, mut hi) = (0usize, total);
    if trial(hi)?.3 < min_pct {
        return Err(Error::invalid(format!(
            "no prune ratio reaches a {min_pct}% reduction"
        )));
    }
    while lo + 1 < hi {
        let mid = (lo + hi) / 2;
        if trial(mid)?.3 >= min_pct {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    let (plan, g, p, _) = trial(hi)?;
    let mut report = build_report(graph, &g, plan.realized_ratio, plan.threshold, 1)?;
    report.requested_ratio = plan.requested_ratio;
    Ok((g, p, report))
}

fn build_report(
    before_g: &GraphSpec,
    after_g: &GraphSpec,
    ratio: f64,
    threshold: f64,
    iterations: usize,
) -> Result<PruneReport> {
    let before = count_params(before_g)?;
    let after = count_params(after_g)?;
    let channels = |g: &GraphSpec, id: NodeId| match g.node(id).kind {
        NodeKind::BatchNorm { channels, .. } => channels,
        _ => 0,
    };
    let prunable = before_g.prunable_batchnorms();
    let nodes: Vec<NodePruneSummary> = prunable
        .iter()
        .map(|&id| {
            let (b, a) = (channels(before_g, id), channels(after_g, id));
            NodePruneSummary {
                id,
                name: before_g.node(id).name.clone(),
                kept: a,
                dropped: b - a,
            }
        })
        .collect();
    let total: usize = nodes.iter().map(|n| n.kept + n.dropped).sum();
    let dropped: usize = nodes.iter().map(|n| n.dropped).sum();
    Ok(PruneReport {
        requested_ratio: ratio,
        realized_ratio: dropped as f64 / total.max(1) as f64,
        threshold,
        iterations,
        nodes,
        param_reduction_pct: reduction_pct(before.trainable_total, after.trainable_total),
        byte_reduction_pct: reduction_pct(before.serialized_bytes, after.serialized_bytes),
        before,
        after,
    })
}

/// Fine-tuning after pruning: no sparsity penalty, a tenth of the learning
/// rate, fresh momentum.
pub fn finetune_config(config: &TrainConfig) -> TrainConfig {
    TrainConfig {
        sparsity_lambda: 0.0,
        base_lr: config.base_lr / 10.0,
        ..config.clone()
    }
}

pub fn finetune(
    graph: &GraphSpec,
    params: &mut Params<f32>,
    dataset: &Dataset,
    config: &TrainConfig,
    on_epoch: impl FnMut(&EpochLog, &Params<f32>),
) -> Result<Vec<EpochLog>> {
    graph.infer_shapes()?;
    train(graph, params, dataset, &finetune_config(config), on_epoch)
}
