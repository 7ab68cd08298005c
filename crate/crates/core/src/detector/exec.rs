//! Runs a [`GraphSpec`] on a tape.

use super::graph::{GraphSpec, NodeKind};
use super::params::{NodeParams, Params};
use crate::error::{Error, Result};
use crate::layers::{BoundBatchNorm, BoundConv};
use crate::tensor::{BatchStats, Element, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in every batch norm.
    Train,
    /// Running statistics; no state changes.
    Eval,
}

#[derive(Clone, Copy, Debug)]
pub enum Bound {
    Conv(BoundConv),
    BatchNorm(BoundBatchNorm),
}

pub struct ForwardPass<T> {
    /// `[N, P, 4]` box offsets in prior order.
    pub loc: Var,
    /// `[N, P, classes + 1]` logits, background first.
    pub conf: Var,
    /// Output of every node.
    pub outputs: Vec<Var>,
    pub bound: Vec<Option<Bound>>,
    /// Train mode only: batch statistics per batch-norm node, not yet applied.
    pub batch_stats: Vec<Option<BatchStats<T>>>,
}

pub fn forward<T: Element>(
    graph: &GraphSpec,
    params: &Params<T>,
    tape: &mut Tape<T>,
    input: Var,
    mode: Mode,
    trainable: bool,
) -> Result<ForwardPass<T>> {
    if params.nodes.len() != graph.nodes.len() {
        return Err(Error::graph("parameter list does not match graph"));
    }
    let expect = graph.input_shape()?;
    let (_, c, h, w) = tape.value(input).dims4("forward")?;
    if (c, h, w) != (expect.channels, expect.height, expect.width) {
        return Err(Error::shape(
            "forward",
            format!(
                "input is {c}×{h}×{w}, graph expects {}×{}×{}",
                expect.channels, expect.height, expect.width
            ),
        ));
    }

    let mut outputs: Vec<Var> = Vec::with_capacity(graph.nodes.len());
    let mut bound: Vec<Option<Bound>> = Vec::with_capacity(graph.nodes.len());
    let mut batch_stats: Vec<Option<BatchStats<T>>> = Vec::with_capacity(graph.nodes.len());

    for node in &graph.nodes {
        let arg = |i: usize| outputs[node.inputs[i]];
        let mut b = None;
        let mut stats = None;
        let out = match (&node.kind, &params.nodes[node.id]) {
            (NodeKind::Input { .. }, _) => input,
            (k, Some(NodeParams::Conv(p))) if k.is_conv_like() => {
                let handles = p.bind(tape, trainable);
                b = Some(Bound::Conv(handles));
                p.forward(tape, arg(0), handles)?
            }
            (NodeKind::BatchNorm { .. }, Some(NodeParams::BatchNorm(p))) => {
                let handles = p.bind(tape, trainable);
                b = Some(Bound::BatchNorm(handles));
                match mode {
                    Mode::Train => {
                        let (v, s) = p.forward_train_deferred(tape, arg(0), handles)?;
                        stats = Some(s);
                        v
                    }
                    Mode::Eval => p.forward_eval(tape, arg(0), handles)?,
                }
            }
            (NodeKind::Relu, None) => tape.relu(arg(0)),
            (NodeKind::MaxPool { kernel, stride }, None) => {
                tape.maxpool2d(arg(0), *kernel, *stride)?
            }
            (NodeKind::Upsample { height, width }, None) => {
                tape.upsample_bilinear(arg(0), *height, *width)?
            }
            (NodeKind::Concat, None) => {
                let ins: Vec<Var> = node.inputs.iter().map(|&i| outputs[i]).collect();
                tape.concat_channels(&ins)?
            }
            _ => {
                return Err(Error::graph(format!(
                    "node {} ({}) has missing or mismatched parameters",
                    node.id, node.name
                )))
            }
        };
        outputs.push(out);
        bound.push(b);
        batch_stats.push(stats);
    }

    let counts = &graph.priors.priors_per_cell;
    let locs: Vec<Var> = graph.heads.iter().map(|h| outputs[h.loc]).collect();
    let confs: Vec<Var> = graph.heads.iter().map(|h| outputs[h.conf]).collect();
    let loc = tape.flatten_heads(&locs, counts, 4)?;
    let conf = tape.flatten_heads(&confs, counts, graph.num_classes + 1)?;
    Ok(ForwardPass {
        loc,
        conf,
        outputs,
        bound,
        batch_stats,
    })
}

impl<T: Element> Params<T> {
    /// Folds training-mode batch statistics into the running averages.
    pub fn apply_batch_stats(&mut self, stats: &[Option<BatchStats<T>>]) {
        for (slot, s) in self.nodes.iter_mut().zip(stats) {
            if let (Some(NodeParams::BatchNorm(bn)), Some(s)) = (slot, s) {
                bn.update_running(s);
            }
        }
    }
}

/// Inference-mode predictions for a batch: (`[N, P, 4]`, `[N, P, classes+1]`).
pub fn predict<T: Element>(
    graph: &GraphSpec,
    params: &Params<T>,
    images: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let mut tape = Tape::new();
    let x = tape.constant(images.clone());
    let pass = forward(graph, params, &mut tape, x, Mode::Eval, false)?;
    Ok((tape.value(pass.loc).clone(), tape.value(pass.conf).clone()))
}
