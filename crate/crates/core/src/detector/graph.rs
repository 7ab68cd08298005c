//! The detector as a DAG of typed layer nodes.

use serde::{Deserialize, Serialize};

use super::priors::PriorConfig;
use crate::error::{Error, Result};
use crate::tensor::kernels::window_extent;

pub type NodeId = usize;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum NodeKind {
    /// The image batch fed to the network.
    Input {
        channels: usize,
        size: usize,
    },
    Conv {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    #[serde(rename = "batchnorm")]
    BatchNorm {
        channels: usize,
        eps: f64,
        momentum: f64,
    },
    Relu,
    #[serde(rename = "maxpool")]
    MaxPool {
        kernel: usize,
        stride: usize,
    },
    Upsample {
        height: usize,
        width: usize,
    },
    Concat,
    /// 3×3 (or `kernel`) box-offset predictor: `priors·4` output channels.
    HeadLoc {
        level: usize,
        in_channels: usize,
        priors: usize,
        kernel: usize,
    },
    /// Class-logit predictor: `priors·(classes+1)` output channels.
    HeadConf {
        level: usize,
        in_channels: usize,
        priors: usize,
        classes: usize,
        kernel: usize,
    },
}

impl NodeKind {
    pub fn name(&self) -> &'static str {
        match self {
            NodeKind::Input { .. } => "input",
            NodeKind::Conv { .. } => "conv",
            NodeKind::BatchNorm { .. } => "batchnorm",
            NodeKind::Relu => "relu",
            NodeKind::MaxPool { .. } => "maxpool",
            NodeKind::Upsample { .. } => "upsample",
            NodeKind::Concat => "concat",
            NodeKind::HeadLoc { .. } => "head_loc",
            NodeKind::HeadConf { .. } => "head_conf",
        }
    }

    /// Convolution geometry `(cin, cout, k, stride, pad)` for conv-like nodes.
    pub fn conv_geometry(&self) -> Option<(usize, usize, usize, usize, usize)> {
        match *self {
            NodeKind::Conv {
                in_channels,
                out_channels,
                kernel,
                stride,
                pad,
            } => Some((in_channels, out_channels, kernel, stride, pad)),
            NodeKind::HeadLoc {
                in_channels,
                priors,
                kernel,
                ..
            } => Some((in_channels, priors * 4, kernel, 1, kernel / 2)),
            NodeKind::HeadConf {
                in_channels,
                priors,
                classes,
                kernel,
                ..
            } => Some((in_channels, priors * (classes + 1), kernel, 1, kernel / 2)),
            _ => None,
        }
    }

    pub fn is_conv_like(&self) -> bool {
        self.conv_geometry().is_some()
    }

    pub(crate) fn set_in_channels(&mut self, c: usize) {
        match self {
            NodeKind::Conv { in_channels, .. }
            | NodeKind::HeadLoc { in_channels, .. }
            | NodeKind::HeadConf { in_channels, .. } => *in_channels = c,
            _ => {}
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub id: NodeId,
    pub name: String,
    pub kind: NodeKind,
    pub inputs: Vec<NodeId>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadPair {
    pub loc: NodeId,
    pub conf: NodeId,
}

/// Activation extent of a node output (batch excluded).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ActShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphSpec {
    pub num_classes: usize,
    pub priors: PriorConfig,
    pub nodes: Vec<Node>,
    /// One loc/conf head pair per pyramid level, finest first.
    pub heads: Vec<HeadPair>,
}

impl GraphSpec {
    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id]
    }

    pub fn input_shape(&self) -> Result<ActShape> {
        match self.nodes.first().map(|n| &n.kind) {
            Some(&NodeKind::Input { channels, size }) => Ok(ActShape {
                channels,
                height: size,
                width: size,
            }),
            _ => Err(Error::graph("first node must be the input")),
        }
    }

    /// Nodes consuming each node's output.
    pub fn consumers(&self) -> Vec<Vec<NodeId>> {
        let mut out = vec![Vec::new(); self.nodes.len()];
        for n in &self.nodes {
            for &i in &n.inputs {
                if i < out.len() && !out[i].contains(&n.id) {
                    out[i].push(n.id);
                }
            }
        }
        out
    }

    pub fn find(&self, name: &str) -> Option<NodeId> {
        self.nodes.iter().position(|n| n.name == name)
    }

    /// Full shape propagation. Fails on the first structural violation:
    /// ordering, arity, channel agreement, window arithmetic, head layout.
    pub fn infer_shapes(&self) -> Result<Vec<ActShape>> {
        let mut shapes: Vec<ActShape> = Vec::with_capacity(self.nodes.len());
        for (pos, node) in self.nodes.iter().enumerate() {
            let ctx =
                |msg: String| Error::graph(format!("node {} ({}): {msg}", node.id, node.name));
            if node.id != pos {
                return Err(ctx(format!("id does not match position {pos}")));
            }
            if let Some(&bad) = node.inputs.iter().find(|&&i| i >= pos) {
                return Err(ctx(format!("input {bad} does not precede its consumer")));
            }
            let ins: Vec<ActShape> = node.inputs.iter().map(|&i| shapes[i]).collect();
            let single = || -> Result<ActShape> {
                match ins[..] {
                    [s] => Ok(s),
                    _ => Err(ctx(format!("expects exactly one input, has {}", ins.len()))),
                }
            };
            let shape = match &node.kind {
                NodeKind::Input { channels, size } => {
                    if pos != 0 || !node.inputs.is_empty() {
                        return Err(ctx("input node must be first and have no inputs".into()));
                    }
                    ActShape {
                        channels: *channels,
                        height: *size,
                        width: *size,
                    }
                }
                NodeKind::Conv { .. } | NodeKind::HeadLoc { .. } | NodeKind::HeadConf { .. } => {
                    let s = single()?;
                    let (cin, cout, k, stride, pad) = node.kind.conv_geometry().expect("conv-like");
                    if s.channels != cin {
                        return Err(ctx(format!(
                            "declares {cin} input channels but receives {}",
                            s.channels
                        )));
                    }
                    if cout == 0 || cin == 0 {
                        return Err(ctx("zero channel count".into()));
                    }
                    let h = window_extent(s.height, k, stride, pad);
                    let w = window_extent(s.width, k, stride, pad);
                    match (h, w) {
                        (Some(height), Some(width)) => ActShape {
                            channels: cout,
                            height,
                            width,
                        },
                        _ => return Err(ctx("non-integral output extent".into())),
                    }
                }
                NodeKind::BatchNorm { channels, .. } => {
                    let s = single()?;
                    if s.channels != *channels {
                        return Err(ctx(format!(
                            "normalizes {channels} channels but receives {}",
                            s.channels
                        )));
                    }
                    s
                }
                NodeKind::Relu => single()?,
                NodeKind::MaxPool { kernel, stride } => {
                    let s = single()?;
                    match (
                        window_extent(s.height, *kernel, *stride, 0),
                        window_extent(s.width, *kernel, *stride, 0),
                    ) {
                        (Some(height), Some(width)) => ActShape {
                            channels: s.channels,
                            height,
                            width,
                        },
                        _ => return Err(ctx("non-integral pooling extent".into())),
                    }
                }
                NodeKind::Upsample { height, width } => {
                    let s = single()?;
                    if *height < s.height || *width < s.width {
                        return Err(ctx("upsample target smaller than source".into()));
                    }
                    ActShape {
                        channels: s.channels,
                        height: *height,
                        width: *width,
                    }
                }
                NodeKind::Concat => {
                    let first = *ins
                        .first()
                        .ok_or_else(|| ctx("concat without inputs".into()))?;
                    if ins
                        .iter()
                        .any(|s| (s.height, s.width) != (first.height, first.width))
                    {
                        return Err(ctx("concat inputs differ in spatial size".into()));
                    }
                    ActShape {
                        channels: ins.iter().map(|s| s.channels).sum(),
                        ..first
                    }
                }
            };
            shapes.push(shape);
        }
        self.check_heads(&shapes)?;
        Ok(shapes)
    }

    fn check_heads(&self, shapes: &[ActShape]) -> Result<()> {
        self.priors.validate()?;
        if self.heads.len() != self.priors.levels() {
            return Err(Error::graph(format!(
                "{} head pairs for {} prior levels",
                self.heads.len(),
                self.priors.levels()
            )));
        }
        for (lvl, pair) in self.heads.iter().enumerate() {
            let f = self.priors.feature_sizes[lvl];
            let n = self.priors.priors_per_cell[lvl];
            let get = |id: NodeId| {
                self.nodes
                    .get(id)
                    .ok_or_else(|| Error::graph(format!("head node {id} does not exist")))
            };
            match get(pair.loc)?.kind {
                NodeKind::HeadLoc { level, priors, .. } if level == lvl && priors == n => {}
                _ => {
                    return Err(Error::graph(format!(
                        "level {lvl}: loc head must be head_loc with {n} priors"
                    )))
                }
            }
            match get(pair.conf)?.kind {
                NodeKind::HeadConf {
                    level,
                    priors,
                    classes,
                    ..
                } if level == lvl && priors == n && classes == self.num_classes => {}
                _ => {
                    return Err(Error::graph(format!(
                        "level {lvl}: conf head must be head_conf with {n} priors and {} classes",
                        self.num_classes
                    )))
                }
            }
            for id in [pair.loc, pair.conf] {
                let s = shapes[id];
                if s.height != f || s.width != f {
                    return Err(Error::graph(format!(
                        "level {lvl}: head {id} produces {}×{} maps, priors expect {f}×{f}",
                        s.height, s.width
                    )));
                }
            }
        }
        Ok(())
    }

    /// Batch-norm nodes whose scaling factors may be pruned: those fed directly
    /// by a plain convolution.
    pub fn prunable_batchnorms(&self) -> Vec<NodeId> {
        self.nodes
            .iter()
            .filter(|n| {
                matches!(n.kind, NodeKind::BatchNorm { .. })
                    && n.inputs.len() == 1
                    && matches!(self.nodes[n.inputs[0]].kind, NodeKind::Conv { .. })
            })
            .map(|n| n.id)
            .collect()
    }
}
