use super::graph::{GraphSpec, NodeId, NodeKind};
use crate::error::{Error, Result};
use crate::layers::{BatchNormParams, Conv2dParams};
use crate::rng::Rng;
use crate::tensor::{Element, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub enum NodeParams<T: Element = f32> {
    Conv(Conv2dParams<T>),
    BatchNorm(BatchNormParams<T>),
}

/// Trainable tensors and buffers, aligned with the graph's node list.
#[derive(Clone, Debug, PartialEq)]
pub struct Params<T: Element = f32> {
    pub nodes: Vec<Option<NodeParams<T>>>,
}

/// Which part of a node a tensor is.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TensorRole {
    Weight,
    Bias,
    Gamma,
    Beta,
    RunningMean,
    RunningVar,
}

impl TensorRole {
    pub fn suffix(self) -> &'static str {
        match self {
            TensorRole::Weight => "weight",
            TensorRole::Bias => "bias",
            TensorRole::Gamma => "gamma",
            TensorRole::Beta => "beta",
            TensorRole::RunningMean => "running_mean",
            TensorRole::RunningVar => "running_var",
        }
    }

    pub fn is_trainable(self) -> bool {
        !matches!(self, TensorRole::RunningMean | TensorRole::RunningVar)
    }

    pub fn is_batchnorm(self) -> bool {
        matches!(
            self,
            TensorRole::Gamma | TensorRole::Beta | TensorRole::RunningMean | TensorRole::RunningVar
        )
    }
}

impl<T: Element> Params<T> {
    /// Fresh parameters for every conv-like and batch-norm node, drawn in node order.
    pub fn init(graph: &GraphSpec, seed: u64) -> Result<Self> {
        let mut rng = Rng::derive(seed, 0x1417);
        let nodes = graph
            .nodes
            .iter()
            .map(|n| -> Result<Option<NodeParams<T>>> {
                Ok(match &n.kind {
                    NodeKind::BatchNorm {
                        channels,
                        eps,
                        momentum,
                    } => Some(NodeParams::BatchNorm(BatchNormParams::with_hyper(
                        *channels, *eps, *momentum,
                    )?)),
                    k => match k.conv_geometry() {
                        Some((cin, cout, kk, stride, pad)) => Some(NodeParams::Conv(
                            Conv2dParams::init(cin, cout, kk, stride, pad, &mut rng)?,
                        )),
                        None => None,
                    },
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { nodes })
    }

    pub fn conv(&self, id: NodeId) -> Option<&Conv2dParams<T>> {
        match self.nodes.get(id)? {
            Some(NodeParams::Conv(c)) => Some(c),
            _ => None,
        }
    }

    pub fn conv_mut(&mut self, id: NodeId) -> Option<&mut Conv2dParams<T>> {
        match self.nodes.get_mut(id)? {
            Some(NodeParams::Conv(c)) => Some(c),
            _ => None,
        }
    }

    pub fn bn(&self, id: NodeId) -> Option<&BatchNormParams<T>> {
        match self.nodes.get(id)? {
            Some(NodeParams::BatchNorm(b)) => Some(b),
            _ => None,
        }
    }

    pub fn bn_mut(&mut self, id: NodeId) -> Option<&mut BatchNormParams<T>> {
        match self.nodes.get_mut(id)? {
            Some(NodeParams::BatchNorm(b)) => Some(b),
            _ => None,
        }
    }

    /// Checks every tensor against the extents the graph declares.
    pub fn validate(&self, graph: &GraphSpec) -> Result<()> {
        if self.nodes.len() != graph.nodes.len() {
            return Err(Error::graph(format!(
                "{} parameter slots for {} nodes",
                self.nodes.len(),
                graph.nodes.len()
            )));
        }
        for (node, slot) in graph.nodes.iter().zip(&self.nodes) {
            let ctx = |m: String| Error::graph(format!("node {} ({}): {m}", node.id, node.name));
            match (&node.kind, slot) {
                (NodeKind::BatchNorm { channels, .. }, Some(NodeParams::BatchNorm(b))) => {
                    b.validate()?;
                    if b.channels() != *channels {
                        return Err(ctx(format!(
                            "{} BN channels, graph says {channels}",
                            b.channels()
                        )));
                    }
                }
                (k, Some(NodeParams::Conv(c))) if k.is_conv_like() => {
                    let (cin, cout, kk, stride, pad) = k.conv_geometry().expect("conv-like");
                    if c.weight.shape() != [cout, cin, kk, kk] || c.bias.shape() != [cout] {
                        return Err(ctx(format!(
                            "weight {:?} / bias {:?} do not match {cout}×{cin}×{kk}×{kk}",
                            c.weight.shape(),
                            c.bias.shape()
                        )));
                    }
                    if c.stride != stride || c.pad != pad {
                        return Err(ctx("stride/pad disagree with graph".into()));
                    }
                }
                (k, None) if !k.is_conv_like() && !matches!(k, NodeKind::BatchNorm { .. }) => {}
                _ => return Err(ctx("parameters missing or of the wrong kind".into())),
            }
        }
        Ok(())
    }

    /// Every tensor in canonical order: node order, then weight, bias /
    /// gamma, beta, running_mean, running_var.
    pub fn tensors(&self) -> Vec<(NodeId, TensorRole, &Tensor<T>)> {
        let mut out = Vec::new();
        for (id, slot) in self.nodes.iter().enumerate() {
            match slot {
                Some(NodeParams::Conv(c)) => {
                    out.push((id, TensorRole::Weight, &c.weight));
                    out.push((id, TensorRole::Bias, &c.bias));
                }
                Some(NodeParams::BatchNorm(b)) => {
                    out.push((id, TensorRole::Gamma, &b.gamma));
                    out.push((id, TensorRole::Beta, &b.beta));
                    out.push((id, TensorRole::RunningMean, &b.running_mean));
                    out.push((id, TensorRole::RunningVar, &b.running_var));
                }
                None => {}
            }
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(NodeId, TensorRole, &mut Tensor<T>)> {
        let mut out = Vec::new();
        for (id, slot) in self.nodes.iter_mut().enumerate() {
            match slot {
                Some(NodeParams::Conv(c)) => {
                    out.push((id, TensorRole::Weight, &mut c.weight));
                    out.push((id, TensorRole::Bias, &mut c.bias));
                }
                Some(NodeParams::BatchNorm(b)) => {
                    out.push((id, TensorRole::Gamma, &mut b.gamma));
                    out.push((id, TensorRole::Beta, &mut b.beta));
                    out.push((id, TensorRole::RunningMean, &mut b.running_mean));
                    out.push((id, TensorRole::RunningVar, &mut b.running_var));
                }
                None => {}
            }
        }
        out
    }

    pub fn trainable_count(&self) -> usize {
        self.tensors()
            .iter()
            .filter(|(_, r, _)| r.is_trainable())
            .map(|(_, _, t)| t.numel())
            .sum()
    }

    pub fn cast<U: Element>(&self) -> Params<U> {
        Params {
            nodes: self
                .nodes
                .iter()
                .map(|slot| {
                    slot.as_ref().map(|p| match p {
                        NodeParams::Conv(c) => NodeParams::Conv(Conv2dParams {
                            weight: c.weight.cast(),
                            bias: c.bias.cast(),
                            stride: c.stride,
                            pad: c.pad,
                        }),
                        NodeParams::BatchNorm(b) => NodeParams::BatchNorm(BatchNormParams {
                            gamma: b.gamma.cast(),
                            beta: b.beta.cast(),
                            running_mean: b.running_mean.cast(),
                            running_var: b.running_var.cast(),
                            eps: b.eps,
                            momentum: b.momentum,
                        }),
                    })
                })
                .collect(),
        }
    }
}
