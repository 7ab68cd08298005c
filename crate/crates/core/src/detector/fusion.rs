//! The feature-fusion block as a standalone operation.

use super::build::FusionSpec;
use super::exec::Mode;
use super::graph::GraphSpec;
use super::params::Params;
use crate::error::{Error, Result};
use crate::layers::{BatchNormParams, Conv2dParams};
use crate::rng::Rng;
use crate::tensor::{Element, Tape, Var};

/// 1×1 conv → BN → ReLU.
#[derive(Clone, Debug, PartialEq)]
pub struct Projection<T: Element = f32> {
    pub conv: Conv2dParams<T>,
    pub bn: BatchNormParams<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusionParams<T: Element = f32> {
    pub proj: [Projection<T>; 3],
    /// Normalization applied to the concatenated map.
    pub post_bn: BatchNormParams<T>,
}

impl<T: Element> FusionParams<T> {
    pub fn init(spec: &FusionSpec, in_channels: [usize; 3], seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = Rng::derive(seed, 0xf05e);
        let mut mk = |i: usize| -> Result<Projection<T>> {
            Ok(Projection {
                conv: Conv2dParams::init(in_channels[i], spec.proj_channels[i], 1, 1, 0, &mut rng)?,
                bn: BatchNormParams::new(spec.proj_channels[i])?,
            })
        };
        Ok(Self {
            proj: [mk(0)?, mk(1)?, mk(2)?],
            post_bn: BatchNormParams::new(spec.fused_channels())?,
        })
    }

    /// Copies the fusion block's parameters out of a built detector.
    pub fn from_graph(graph: &GraphSpec, params: &Params<T>) -> Result<Self> {
        let get = |name: &str| {
            graph
                .find(name)
                .ok_or_else(|| Error::graph(format!("missing node {name}")))
        };
        let proj = |s: &str| -> Result<Projection<T>> {
            let conv = params
                .conv(get(&format!("fuse.proj_{s}.conv"))?)
                .ok_or_else(|| Error::graph("projection conv has no parameters"))?;
            let bn = params
                .bn(get(&format!("fuse.proj_{s}.bn"))?)
                .ok_or_else(|| Error::graph("projection BN has no parameters"))?;
            Ok(Projection {
                conv: conv.clone(),
                bn: bn.clone(),
            })
        };
        let post_bn = params
            .bn(get("fuse.bn")?)
            .ok_or_else(|| Error::graph("fusion BN has no parameters"))?
            .clone();
        Ok(Self {
            proj: [proj("a")?, proj("b")?, proj("c")?],
            post_bn,
        })
    }
}

/// `concat(proj_a(a), proj_b(up(b)), proj_c(up(c)))` followed by BN and ReLU.
///
/// `a` must already have the target size; `b` and `c` are bilinearly
/// upsampled to it. Train mode normalizes with batch statistics without
/// touching the running averages.
pub fn fuse_features<T: Element>(
    tape: &mut Tape<T>,
    sources: [Var; 3],
    spec: &FusionSpec,
    params: &FusionParams<T>,
    mode: Mode,
) -> Result<Var> {
    let s = spec.target_size;
    let mut parts = Vec::with_capacity(3);
    for (i, &src) in sources.iter().enumerate() {
        let (_, _, h, w) = tape.value(src).dims4("fuse_features")?;
        let x = if i == 0 {
            if (h, w) != (s, s) {
                return Err(Error::shape(
                    "fuse_features",
                    format!("shallow source is {h}×{w}, target is {s}×{s}"),
                ));
            }
            src
        } else {
            if h > s || w > s {
                return Err(Error::shape(
                    "fuse_features",
                    format!("source {i} is {h}×{w}, larger than the {s}×{s} target"),
                ));
            }
            tape.upsample_bilinear(src, s, s)?
        };
        let p = &params.proj[i];
        if p.conv.out_channels() != spec.proj_channels[i] {
            return Err(Error::shape(
                "fuse_features",
                format!(
                    "projection {i} has {} filters, spec says {}",
                    p.conv.out_channels(),
                    spec.proj_channels[i]
                ),
            ));
        }
        let conv = p.conv.bind(tape, true);
        let y = p.conv.forward(tape, x, conv)?;
        let bn = p.bn.bind(tape, true);
        let y = match mode {
            Mode::Train => p.bn.forward_train_deferred(tape, y, bn)?.0,
            Mode::Eval => p.bn.forward_eval(tape, y, bn)?,
        };
        parts.push(tape.relu(y));
    }
    let cat = tape.concat_channels(&parts)?;
    let bn = params.post_bn.bind(tape, true);
    let y = match mode {
        Mode::Train => params.post_bn.forward_train_deferred(tape, cat, bn)?.0,
        Mode::Eval => params.post_bn.forward_eval(tape, cat, bn)?,
    };
    Ok(tape.relu(y))
}
