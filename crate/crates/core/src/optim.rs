//! SGD with momentum, the warmup/step learning-rate schedule, the L1 penalty
//! on batch-norm scaling factors, and the training loop.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::detector::exec::{forward, Bound, Mode};
use crate::detector::loss::{multibox_loss_on_tape, DEFAULT_NEG_POS_RATIO};
use crate::detector::matching::{match_priors, DEFAULT_MATCH_IOU};
use crate::detector::{generate_priors, GraphSpec, NodeId, Params, PriorBoxSet};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Element, Tape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr_step_epochs: Vec<usize>,
    pub lr_step_factor: f64,
    pub warmup_epochs: usize,
    /// Weight λ of the L1 penalty on prunable batch-norm scaling factors.
    pub sparsity_lambda: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Stop after this many optimizer steps, even mid-epoch.
    pub max_steps: Option<usize>,
    pub match_iou: f64,
    pub neg_pos_ratio: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            base_lr: 0.01,
            momentum: 0.9,
            weight_decay: 5e-4,
            lr_step_epochs: vec![30, 45],
            lr_step_factor: 0.1,
            warmup_epochs: 5,
            sparsity_lambda: 0.0,
            epochs: 60,
            batch_size: 16,
            seed: 0,
            max_steps: None,
            match_iou: DEFAULT_MATCH_IOU,
            neg_pos_ratio: DEFAULT_NEG_POS_RATIO,
        }
    }
}

/// Default λ for sparse training.
pub const DEFAULT_SPARSITY_LAMBDA: f64 = 1e-4;

impl TrainConfig {
    /// The large-batch VOC schedule: lr 0.4, steps at 150/200/250.
    pub fn large_batch() -> Self {
        Self {
            base_lr: 0.4,
            lr_step_epochs: vec![150, 200, 250],
            epochs: 250,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::invalid(m));
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return fail(format!("base_lr must be positive, got {}", self.base_lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return fail(format!("momentum must be in [0,1), got {}", self.momentum));
        }
        if !(self.lr_step_factor > 0.0 && self.lr_step_factor < 1.0) {
            return fail(format!(
                "lr_step_factor must be in (0,1), got {}",
                self.lr_step_factor
            ));
        }
        if !(self.sparsity_lambda >= 0.0 && self.sparsity_lambda.is_finite()) {
            return fail(format!(
                "sparsity_lambda must be non-negative, got {}",
                self.sparsity_lambda
            ));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return fail(format!(
                "weight_decay must be non-negative, got {}",
                self.weight_decay
            ));
        }
        if self.batch_size == 0 {
            return fail("batch_size must be positive".into());
        }
        if !(self.match_iou > 0.0 && self.match_iou < 1.0) || !(self.neg_pos_ratio >= 0.0) {
            return fail("match_iou must be in (0,1) and neg_pos_ratio non-negative".into());
        }
        Ok(())
    }
}

/// Learning rate for a step: a linear ramp from base/100 over the warmup
/// steps, then base · factor^(boundaries passed).
pub fn lr_at(
    config: &TrainConfig,
    epoch: usize,
    step_in_epoch: usize,
    steps_per_epoch: usize,
) -> f64 {
    let base = config.base_lr;
    let warm = config.warmup_epochs * steps_per_epoch;
    let t = epoch * steps_per_epoch + step_in_epoch;
    if t < warm {
        let start = base / 100.0;
        return start + (base - start) * t as f64 / warm as f64;
    }
    let passed = config
        .lr_step_epochs
        .iter()
        .filter(|&&e| e <= epoch)
        .count();
    base * config.lr_step_factor.powi(passed as i32)
}

/// One SGD-with-momentum update of a flat parameter slice:
/// `v ← μ·v + (g + wd·p)`, `p ← p − lr·v`.
pub fn sgd_step<T: Element>(
    param: &mut [T],
    grad: &[T],
    velocity: &mut [T],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if param.len() != grad.len() || param.len() != velocity.len() {
        return Err(Error::shape(
            "sgd_step",
            format!(
                "param {}, grad {}, velocity {} elements",
                param.len(),
                grad.len(),
                velocity.len()
            ),
        ));
    }
    if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite {
            context: "gradient".into(),
            index: i,
        });
    }
    let lr = T::from_f64_lossy(lr);
    let mu = T::from_f64_lossy(momentum);
    let wd = T::from_f64_lossy(weight_decay);
    for ((p, &g), v) in param.iter_mut().zip(grad).zip(velocity.iter_mut()) {
        *v = mu * *v + (g + wd * *p);
        *p = *p - lr * *v;
    }
    Ok(())
}

/// Subgradient of λ·Σ|γ|: λ·sign(γ) with sign(0) = 0.
pub fn sparsity_subgradient<T: Element>(gamma: &Tensor<T>, lambda: f64) -> Tensor<T> {
    let l = T::from_f64_lossy(lambda);
    let data = gamma
        .data()
        .iter()
        .map(|&g| {
            if g > T::zero() {
                l
            } else if g < T::zero() {
                -l
            } else {
                T::zero()
            }
        })
        .collect();
    Tensor::new(gamma.shape().to_vec(), data).expect("same shape")
}

/// λ·Σ|γ|.
pub fn sparsity_penalty<T: Element>(gamma: &Tensor<T>, lambda: f64) -> f64 {
    lambda
        * gamma
            .data()
            .iter()
            .map(|g| g.abs().to_f64().unwrap_or(f64::NAN))
            .sum::<f64>()
}

/// Summary of |γ| over the prunable batch norms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GammaSummary {
    pub min: f64,
    pub median: f64,
    pub max: f64,
    pub frac_below_0p01: f64,
    pub count: usize,
}

pub fn gamma_summary<T: Element>(graph: &GraphSpec, params: &Params<T>) -> GammaSummary {
    let mut v: Vec<f64> = graph
        .prunable_batchnorms()
        .into_iter()
        .filter_map(|id| params.bn(id))
        .flat_map(|bn| {
            bn.gamma
                .data()
                .iter()
                .map(|g| g.abs().to_f64().unwrap_or(f64::NAN))
        })
        .collect();
    if v.is_empty() {
        return GammaSummary {
            min: 0.0,
            median: 0.0,
            max: 0.0,
            frac_below_0p01: 0.0,
            count: 0,
        };
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    let median = if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    };
    GammaSummary {
        min: v[0],
        median,
        max: v[n - 1],
        frac_below_0p01: v.iter().filter(|&&g| g < 0.01).count() as f64 / n as f64,
        count: n,
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean multibox loss over the epoch's steps.
    pub loss: f64,
    /// λ·Σ|γ| at the end of the epoch.
    pub penalty: f64,
    /// Rate used by the epoch's last step.
    pub lr: f64,
    pub gamma_min: f64,
    pub gamma_median: f64,
    pub gamma_max: f64,
    pub gamma_frac_below_0p01: f64,
    pub steps: usize,
}

/// Momentum buffers aligned with [`Params::tensors`].
#[derive(Clone, Debug, PartialEq)]
pub struct Sgd<T: Element> {
    velocity: Vec<Vec<T>>,
}

impl<T: Element> Sgd<T> {
    pub fn new(params: &Params<T>) -> Self {
        Self {
            velocity: params
                .tensors()
                .iter()
                .map(|(_, _, t)| vec![T::zero(); t.numel()])
                .collect(),
        }
    }
}

pub struct StepOutput {
    pub loss: f64,
    pub matched: usize,
}

/// One optimizer step on a batch. Parameters are left untouched when any
/// gradient is non-finite.
#[allow(clippy::too_many_arguments)]
pub fn train_step<T: Element>(
    graph: &GraphSpec,
    params: &mut Params<T>,
    sgd: &mut Sgd<T>,
    priors: &PriorBoxSet,
    images: Tensor<T>,
    truths: &[Vec<crate::detector::Annotation>],
    config: &TrainConfig,
    lr: f64,
    prunable: &[NodeId],
) -> Result<StepOutput> {
    let mut tape = Tape::new();
    let x = tape.constant(images);
    let pass = forward(graph, params, &mut tape, x, Mode::Train, true)?;
    let assignments = truths
        .iter()
        .map(|t| match_priors(priors, t, config.match_iou))
        .collect::<Result<Vec<_>>>()?;
    let (root, out) = multibox_loss_on_tape(
        &mut tape,
        pass.loc,
        pass.conf,
        priors,
        &assignments,
        truths,
        config.neg_pos_ratio,
    )?;
    if !out.value.is_finite() {
        return Err(Error::NonFinite {
            context: "loss".into(),
            index: 0,
        });
    }
    let mut grads = tape.backward(root)?;

    // gradient per tensor, in Params::tensors order
    let mut flat: Vec<Vec<T>> = Vec::new();
    for (id, b) in pass.bound.iter().enumerate() {
        match b {
            Some(Bound::Conv(h)) => {
                for v in [h.weight, h.bias] {
                    flat.push(
                        grads
                            .take(v)
                            .map(Tensor::into_data)
                            .ok_or_else(|| Error::graph("missing gradient"))?,
                    );
                }
            }
            Some(Bound::BatchNorm(h)) => {
                let mut gg = grads
                    .take(h.gamma)
                    .ok_or_else(|| Error::graph("missing gradient"))?;
                if config.sparsity_lambda > 0.0 && prunable.contains(&id) {
                    let bn = params.bn(id).expect("bound BN has params");
                    let sub = sparsity_subgradient(&bn.gamma, config.sparsity_lambda);
                    for (g, s) in gg.data_mut().iter_mut().zip(sub.data()) {
                        *g = *g + *s;
                    }
                }
                flat.push(gg.into_data());
                flat.push(
                    grads
                        .take(h.beta)
                        .ok_or_else(|| Error::graph("missing gradient"))?
                        .into_data(),
                );
                flat.push(Vec::new());
                flat.push(Vec::new());
            }
            None => {}
        }
    }
    for g in &flat {
        if let Some(i) = g.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: "gradient".into(),
                index: i,
            });
        }
    }
    for (((_, role, t), g), v) in params
        .tensors_mut()
        .into_iter()
        .zip(&flat)
        .zip(&mut sgd.velocity)
    {
        if !role.is_trainable() {
            continue;
        }
        let wd = if role.is_batchnorm() {
            0.0
        } else {
            config.weight_decay
        };
        sgd_step(t.data_mut(), g, v, lr, config.momentum, wd)?;
    }
    params.apply_batch_stats(&pass.batch_stats);
    Ok(StepOutput {
        loss: out.value,
        matched: out.matched,
    })
}

/// Trains in place. `on_epoch` receives every log record as it is produced,
/// together with the parameters at that point.
pub fn train(
    graph: &GraphSpec,
    params: &mut Params<f32>,
    dataset: &Dataset,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog, &Params<f32>),
) -> Result<Vec<EpochLog>> {
    config.validate()?;
    params.validate(graph)?;
    if dataset.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    if config.batch_size > dataset.len() {
        return Err(Error::invalid(format!(
            "batch size {} exceeds dataset size {}",
            config.batch_size,
            dataset.len()
        )));
    }
    if dataset.num_classes() != graph.num_classes {
        return Err(Error::invalid(format!(
            "dataset has {} classes, model {}",
            dataset.num_classes(),
            graph.num_classes
        )));
    }
    let priors = generate_priors(&graph.priors)?;
    let prunable = graph.prunable_batchnorms();
    let mut sgd = Sgd::new(params);
    let mut rng = Rng::derive(config.seed, 0x5eed);
    let steps_per_epoch = dataset.len() / config.batch_size;
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut logs = Vec::new();
    let mut total_steps = 0usize;

    'epochs: for epoch in 0..config.epochs {
        rng.shuffle(&mut order);
        let mut loss_sum = 0.0;
        let mut steps = 0;
        let mut lr = 0.0;
        for s in 0..steps_per_epoch {
            if config.max_steps.is_some_and(|m| total_steps >= m) {
                break;
            }
            let idx = &order[s * config.batch_size..(s + 1) * config.batch_size];
            lr = lr_at(config, epoch, s, steps_per_epoch);
            let out = train_step(
                graph,
                params,
                &mut sgd,
                &priors,
                dataset.batch(idx)?,
                &dataset.annotations(idx),
                config,
                lr,
                &prunable,
            )
            .map_err(|e| match e {
                Error::NonFinite { context, index } => Error::NonFinite {
                    context: format!("{context} (element {index}) at step {total_steps}"),
                    index: total_steps,
                },
                e => e,
            })?;
            loss_sum += out.loss;
            steps += 1;
            total_steps += 1;
        }
        if steps > 0 {
            let g = gamma_summary(graph, params);
            let penalty = prunable
                .iter()
                .filter_map(|&id| params.bn(id))
                .map(|bn| sparsity_penalty(&bn.gamma, config.sparsity_lambda))
                .sum();
            let log = EpochLog {
                epoch,
                loss: loss_sum / steps as f64,
                penalty,
                lr,
                gamma_min: g.min,
                gamma_median: g.median,
                gamma_max: g.max,
                gamma_frac_below_0p01: g.frac_below_0p01,
                steps,
            };
            on_epoch(&log, params);
            logs.push(log);
        }
        if config.max_steps.is_some_and(|m| total_steps >= m) {
            break 'epochs;
        }
    }
    Ok(logs)
}
