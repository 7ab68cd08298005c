//! Builder for the desk-scale fused-feature detector.
//!
//! Topology (default widths, 96×96 input):
//!
//! ```text
//! A: conv8, conv16 @96 → pool → 48
//! B: conv32 @48 → pool → 24                      = source a
//! C: conv64 @24 → pool → 12                      = source b
//! D: conv64 @12                                  = source c
//! fuse: proj_a(a) | proj_b(up(b)) | proj_c(up(c)) → concat → BN → ReLU   (64|32|32 @24)
//! pyramid: 1×1 block @24, then pool + 3×3 block @12, 6, 3
//! heads: 3×3 loc / conf convs per level
//! ```
//!
//! Every "conv" above is a conv-BN-ReLU block.

use serde::{Deserialize, Serialize};

use super::graph::{GraphSpec, HeadPair, Node, NodeId, NodeKind};
use super::priors::PriorConfig;
use crate::error::{Error, Result};
use crate::layers::{DEFAULT_BN_EPS, DEFAULT_BN_MOMENTUM};

/// Channel plan of the fusion block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionSpec {
    /// Node ids of the three fused sources (shallow, middle, deep).
    pub sources: [NodeId; 3],
    /// 1×1 projection widths, in ratio 2:1:1.
    pub proj_channels: [usize; 3],
    /// Spatial side of the fused map (that of the shallow source).
    pub target_size: usize,
}

impl FusionSpec {
    pub fn validate(&self) -> Result<()> {
        let [a, b, c] = self.proj_channels;
        if b == 0 || a != b + c || b != c {
            return Err(Error::invalid(format!(
                "fusion projections must be in ratio 2:1:1, got {a}:{b}:{c}"
            )));
        }
        if self.target_size == 0 {
            return Err(Error::invalid("fusion target size must be positive"));
        }
        Ok(())
    }

    pub fn fused_channels(&self) -> usize {
        self.proj_channels.iter().sum()
    }

    /// Channel range each source occupies in the fused tensor, in source order.
    pub fn blocks(&self) -> [std::ops::Range<usize>; 3] {
        let [a, b, c] = self.proj_channels;
        [0..a, a..a + b, a + b..a + b + c]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ArchConfig {
    pub input_size: usize,
    pub input_channels: usize,
    pub num_classes: usize,
    pub stage_a: Vec<usize>,
    pub stage_b: Vec<usize>,
    pub stage_c: Vec<usize>,
    pub stage_d: Vec<usize>,
    /// Projection widths for the shallow/middle/deep sources (2:1:1).
    pub fusion_channels: [usize; 3],
    /// Width of each pyramid level's block, finest first.
    pub pyramid_channels: Vec<usize>,
    pub head_kernel: usize,
    pub bn_eps: f64,
    pub bn_momentum: f64,
    pub priors: PriorConfig,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            input_size: 96,
            input_channels: 3,
            num_classes: 3,
            stage_a: vec![8, 16],
            stage_b: vec![32],
            stage_c: vec![64],
            stage_d: vec![64],
            fusion_channels: [64, 32, 32],
            pyramid_channels: vec![48, 64, 64, 64],
            head_kernel: 3,
            bn_eps: DEFAULT_BN_EPS,
            bn_momentum: DEFAULT_BN_MOMENTUM,
            priors: PriorConfig::toy(),
        }
    }
}

struct Builder {
    nodes: Vec<Node>,
    eps: f64,
    momentum: f64,
}

impl Builder {
    fn push(&mut self, name: impl Into<String>, kind: NodeKind, inputs: Vec<NodeId>) -> NodeId {
        let id = self.nodes.len();
        self.nodes.push(Node {
            id,
            name: name.into(),
            kind,
            inputs,
        });
        id
    }

    /// conv → BN → ReLU; returns the ReLU node.
    fn block(&mut self, prefix: &str, input: NodeId, cin: usize, cout: usize, k: usize) -> NodeId {
        let conv = self.push(
            format!("{prefix}.conv"),
            NodeKind::Conv {
                in_channels: cin,
                out_channels: cout,
                kernel: k,
                stride: 1,
                pad: k / 2,
            },
            vec![input],
        );
        let bn = self.push(
            format!("{prefix}.bn"),
            NodeKind::BatchNorm {
                channels: cout,
                eps: self.eps,
                momentum: self.momentum,
            },
            vec![conv],
        );
        self.push(format!("{prefix}.relu"), NodeKind::Relu, vec![bn])
    }

    fn pool(&mut self, name: String, input: NodeId) -> NodeId {
        self.push(
            name,
            NodeKind::MaxPool {
                kernel: 2,
                stride: 2,
            },
            vec![input],
        )
    }

    fn stage(
        &mut self,
        name: &str,
        mut x: NodeId,
        mut cin: usize,
        widths: &[usize],
    ) -> (NodeId, usize) {
        for (i, &w) in widths.iter().enumerate() {
            x = self.block(&format!("{name}{}", i + 1), x, cin, w, 3);
            cin = w;
        }
        (x, cin)
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        self.priors.validate()?;
        FusionSpec {
            sources: [0; 3],
            proj_channels: self.fusion_channels,
            target_size: self.input_size / 4,
        }
        .validate()?;
        if !self.input_size.is_multiple_of(8) || self.input_size == 0 {
            return Err(Error::invalid(format!(
                "input size must be a positive multiple of 8, got {}",
                self.input_size
            )));
        }
        for (name, s) in [
            ("stage_a", &self.stage_a),
            ("stage_b", &self.stage_b),
            ("stage_c", &self.stage_c),
            ("stage_d", &self.stage_d),
        ] {
            if s.is_empty() || s.contains(&0) {
                return Err(Error::invalid(format!(
                    "{name} needs at least one positive width"
                )));
            }
        }
        if self.num_classes == 0 || self.input_channels == 0 {
            return Err(Error::invalid(
                "class and input channel counts must be positive",
            ));
        }
        if self.head_kernel.is_multiple_of(2) {
            return Err(Error::invalid("head kernel must be odd"));
        }
        let levels = self.priors.levels();
        if self.pyramid_channels.len() != levels || self.pyramid_channels.contains(&0) {
            return Err(Error::invalid(format!(
                "{} pyramid widths for {levels} prior levels",
                self.pyramid_channels.len()
            )));
        }
        let mut side = self.input_size / 4;
        for (k, &f) in self.priors.feature_sizes.iter().enumerate() {
            if f != side {
                return Err(Error::invalid(format!(
                    "prior level {k} expects {f}×{f} maps but the pyramid produces {side}×{side}"
                )));
            }
            if k + 1 < levels {
                if !side.is_multiple_of(2) {
                    return Err(Error::invalid(format!(
                        "pyramid level {k} side {side} cannot be halved"
                    )));
                }
                side /= 2;
            }
        }
        Ok(())
    }
}

/// Builds the detector graph. The fusion block concatenates 1×1 projections of
/// the three sources (deeper ones upsampled first), then normalizes the result.
pub fn build_mfssd(config: &ArchConfig) -> Result<GraphSpec> {
    config.validate()?;
    let mut b = Builder {
        nodes: Vec::new(),
        eps: config.bn_eps,
        momentum: config.bn_momentum,
    };
    let input = b.push(
        "input",
        NodeKind::Input {
            channels: config.input_channels,
            size: config.input_size,
        },
        vec![],
    );
    let (x, c) = b.stage("a", input, config.input_channels, &config.stage_a);
    let x = b.pool("a.pool".into(), x);
    let (x, c) = b.stage("b", x, c, &config.stage_b);
    let src_a = b.pool("b.pool".into(), x);
    let c_a = c;
    let (x, c) = b.stage("c", src_a, c, &config.stage_c);
    let src_b = b.pool("c.pool".into(), x);
    let c_b = c;
    let (src_c, c_c) = b.stage("d", src_b, c, &config.stage_d);

    let side = config.input_size / 4;
    let up_b = b.push(
        "fuse.up_b",
        NodeKind::Upsample {
            height: side,
            width: side,
        },
        vec![src_b],
    );
    let up_c = b.push(
        "fuse.up_c",
        NodeKind::Upsample {
            height: side,
            width: side,
        },
        vec![src_c],
    );
    let [ua, ub, uc] = config.fusion_channels;
    let pa = b.block("fuse.proj_a", src_a, c_a, ua, 1);
    let pb = b.block("fuse.proj_b", up_b, c_b, ub, 1);
    let pc = b.block("fuse.proj_c", up_c, c_c, uc, 1);
    let cat = b.push("fuse.concat", NodeKind::Concat, vec![pa, pb, pc]);
    let fused = ua + ub + uc;
    let bn = b.push(
        "fuse.bn",
        NodeKind::BatchNorm {
            channels: fused,
            eps: config.bn_eps,
            momentum: config.bn_momentum,
        },
        vec![cat],
    );
    let mut level_in = b.push("fuse.relu", NodeKind::Relu, vec![bn]);
    let mut cin = fused;

    let mut heads = Vec::new();
    for (k, &width) in config.pyramid_channels.iter().enumerate() {
        let feat = if k == 0 {
            b.block("p0", level_in, cin, width, 1)
        } else {
            let pooled = b.pool(format!("p{k}.pool"), level_in);
            b.block(&format!("p{k}"), pooled, cin, width, 3)
        };
        let n = config.priors.priors_per_cell[k];
        let loc = b.push(
            format!("head{k}.loc"),
            NodeKind::HeadLoc {
                level: k,
                in_channels: width,
                priors: n,
                kernel: config.head_kernel,
            },
            vec![feat],
        );
        let conf = b.push(
            format!("head{k}.conf"),
            NodeKind::HeadConf {
                level: k,
                in_channels: width,
                priors: n,
                classes: config.num_classes,
                kernel: config.head_kernel,
            },
            vec![feat],
        );
        heads.push(HeadPair { loc, conf });
        level_in = feat;
        cin = width;
    }

    let graph = GraphSpec {
        num_classes: config.num_classes,
        priors: config.priors.clone(),
        nodes: b.nodes,
        heads,
    };
    graph.infer_shapes()?;
    Ok(graph)
}

/// Reads the fusion block of a graph produced by [`build_mfssd`] back as a
/// [`FusionSpec`] (projection widths as currently present in the graph).
pub fn fusion_spec(graph: &GraphSpec) -> Result<FusionSpec> {
    let sources = fusion_sources(graph)?;
    let shapes = graph.infer_shapes()?;
    let cat = graph
        .find("fuse.concat")
        .expect("checked by fusion_sources");
    let mut proj_channels = [0; 3];
    for (slot, &i) in proj_channels.iter_mut().zip(&graph.node(cat).inputs) {
        *slot = shapes[i].channels;
    }
    Ok(FusionSpec {
        sources,
        proj_channels,
        target_size: shapes[cat].height,
    })
}

/// Source node ids of the fusion block in a graph produced by [`build_mfssd`].
pub fn fusion_sources(graph: &GraphSpec) -> Result<[NodeId; 3]> {
    let cat = graph
        .find("fuse.concat")
        .ok_or_else(|| Error::graph("graph has no fusion block"))?;
    let mut out = [0; 3];
    for (slot, &proj_relu) in out.iter_mut().zip(&graph.node(cat).inputs) {
        // relu ← bn ← conv ← source (possibly via upsample)
        let bn = graph.node(proj_relu).inputs[0];
        let conv = graph.node(bn).inputs[0];
        let mut src = graph.node(conv).inputs[0];
        if matches!(graph.node(src).kind, NodeKind::Upsample { .. }) {
            src = graph.node(src).inputs[0];
        }
        *slot = src;
    }
    Ok(out)
}
