//! Parameterized layers: convolution and batch normalization, plus the
//! functional ReLU. Each binds its tensors onto a [`Tape`] for one pass.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{BatchStats, Element, Tape, Tensor, Var};

pub const DEFAULT_BN_EPS: f64 = 1e-5;
pub const DEFAULT_BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Debug, PartialEq)]
pub struct Conv2dParams<T: Element = f32> {
    /// `[Cout, Cin, K, K]`
    pub weight: Tensor<T>,
    /// `[Cout]`
    pub bias: Tensor<T>,
    pub stride: usize,
    pub pad: usize,
}

/// Tape handles for a bound convolution.
#[derive(Clone, Copy, Debug)]
pub struct BoundConv {
    pub weight: Var,
    pub bias: Var,
}

impl<T: Element> Conv2dParams<T> {
    /// Weights uniform in ±1/sqrt(Cin·K²), zero bias.
    pub fn init(
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        if k.is_multiple_of(2) {
            return Err(Error::invalid(format!("kernel size must be odd, got {k}")));
        }
        let bound = 1.0 / ((cin * k * k) as f64).sqrt();
        let weight: Vec<T> = (0..cout * cin * k * k)
            .map(|_| T::from_f64_lossy(rng.uniform_range(-bound, bound)))
            .collect();
        Ok(Self {
            weight: Tensor::new(vec![cout, cin, k, k], weight)?,
            bias: Tensor::zeros(vec![cout])?,
            stride,
            pad,
        })
    }

    pub fn from_tensors(
        weight: Tensor<T>,
        bias: Tensor<T>,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        let (cout, _, kh, kw) = weight.dims4("conv2d params")?;
        if kh != kw {
            return Err(Error::shape(
                "conv2d params",
                format!("kernel {kh}×{kw} is not square"),
            ));
        }
        if bias.shape() != [cout] {
            return Err(Error::shape(
                "conv2d params",
                format!("bias shape {:?} for Cout = {cout}", bias.shape()),
            ));
        }
        Ok(Self {
            weight,
            bias,
            stride,
            pad,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape()[2]
    }

    /// Cout·Cin·K² + Cout
    pub fn param_count(&self) -> usize {
        self.weight.numel() + self.bias.numel()
    }

    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> BoundConv {
        let (w, b) = (self.weight.clone(), self.bias.clone());
        if trainable {
            BoundConv {
                weight: tape.param(w),
                bias: tape.param(b),
            }
        } else {
            BoundConv {
                weight: tape.constant(w),
                bias: tape.constant(b),
            }
        }
    }

    pub fn forward(&self, tape: &mut Tape<T>, input: Var, bound: BoundConv) -> Result<Var> {
        tape.conv2d(input, bound.weight, bound.bias, self.stride, self.pad)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormParams<T: Element = f32> {
    /// Per-channel scaling factors; their magnitudes rank channel importance.
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub eps: f64,
    pub momentum: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct BoundBatchNorm {
    pub gamma: Var,
    pub beta: Var,
}

impl<T: Element> BatchNormParams<T> {
    /// gamma = 1, beta = 0, running mean 0, running var 1.
    pub fn new(channels: usize) -> Result<Self> {
        Self::with_hyper(channels, DEFAULT_BN_EPS, DEFAULT_BN_MOMENTUM)
    }

    pub fn with_hyper(channels: usize, eps: f64, momentum: f64) -> Result<Self> {
        if !(eps > 0.0) {
            return Err(Error::invalid(format!(
                "batch norm eps must be positive, got {eps}"
            )));
        }
        if !(momentum > 0.0 && momentum < 1.0) {
            return Err(Error::invalid(format!(
                "batch norm momentum must lie in (0,1), got {momentum}"
            )));
        }
        Ok(Self {
            gamma: Tensor::ones(vec![channels])?,
            beta: Tensor::zeros(vec![channels])?,
            running_mean: Tensor::zeros(vec![channels])?,
            running_var: Tensor::ones(vec![channels])?,
            eps,
            momentum,
        })
    }

    pub fn channels(&self) -> usize {
        self.gamma.numel()
    }

    /// 2·C (gamma, beta)
    pub fn param_count(&self) -> usize {
        self.gamma.numel() + self.beta.numel()
    }

    /// 2·C (running mean, running var)
    pub fn buffer_count(&self) -> usize {
        self.running_mean.numel() + self.running_var.numel()
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.channels();
        for (name, t) in [
            ("beta", &self.beta),
            ("running_mean", &self.running_mean),
            ("running_var", &self.running_var),
        ] {
            if t.shape() != [c] {
                return Err(Error::shape(
                    "batchnorm params",
                    format!("{name} has shape {:?}, gamma has {c} channels", t.shape()),
                ));
            }
        }
        if let Some(i) = self.running_var.data().iter().position(|&v| v < T::zero()) {
            return Err(Error::invalid(format!("running_var[{i}] is negative")));
        }
        Ok(())
    }

    /// running ← (1 − momentum)·running + momentum·batch
    pub fn update_running(&mut self, stats: &BatchStats<T>) {
        let m = T::from_f64_lossy(self.momentum);
        let keep = T::one() - m;
        for (r, &b) in self.running_mean.data_mut().iter_mut().zip(&stats.mean) {
            *r = keep * *r + m * b;
        }
        for (r, &b) in self.running_var.data_mut().iter_mut().zip(&stats.var) {
            *r = keep * *r + m * b;
        }
    }

    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> BoundBatchNorm {
        let (g, b) = (self.gamma.clone(), self.beta.clone());
        if trainable {
            BoundBatchNorm {
                gamma: tape.param(g),
                beta: tape.param(b),
            }
        } else {
            BoundBatchNorm {
                gamma: tape.constant(g),
                beta: tape.constant(b),
            }
        }
    }

    /// Normalizes with batch statistics and folds them into the running averages.
    pub fn forward_train(
        &mut self,
        tape: &mut Tape<T>,
        input: Var,
        bound: BoundBatchNorm,
    ) -> Result<Var> {
        let (out, stats) =
            tape.batchnorm_train(input, bound.gamma, bound.beta, T::from_f64_lossy(self.eps))?;
        self.update_running(&stats);
        Ok(out)
    }

    /// Like [`forward_train`](Self::forward_train) but hands back the batch
    /// statistics instead of applying them.
    pub fn forward_train_deferred(
        &self,
        tape: &mut Tape<T>,
        input: Var,
        bound: BoundBatchNorm,
    ) -> Result<(Var, BatchStats<T>)> {
        tape.batchnorm_train(input, bound.gamma, bound.beta, T::from_f64_lossy(self.eps))
    }

    pub fn forward_eval(
        &self,
        tape: &mut Tape<T>,
        input: Var,
        bound: BoundBatchNorm,
    ) -> Result<Var> {
        tape.batchnorm_eval(
            input,
            bound.gamma,
            bound.beta,
            self.running_mean.data(),
            self.running_var.data(),
            T::from_f64_lossy(self.eps),
        )
    }

    /// Keeps only the listed channels.
    pub fn select_channels(&self, keep: &[usize]) -> Result<Self> {
        let pick = |t: &Tensor<T>| {
            Tensor::new(
                vec![keep.len()],
                keep.iter().map(|&i| t.data()[i]).collect(),
            )
        };
        Ok(Self {
            gamma: pick(&self.gamma)?,
            beta: pick(&self.beta)?,
            running_mean: pick(&self.running_mean)?,
            running_var: pick(&self.running_var)?,
            eps: self.eps,
            momentum: self.momentum,
        })
    }
}

/// Training-mode batch norm on a plain tensor; updates the running statistics.
pub fn batchnorm_forward_train<T: Element>(
    input: &Tensor<T>,
    params: &mut BatchNormParams<T>,
) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let x = tape.constant(input.clone());
    let bound = params.bind(&mut tape, false);
    let y = params.forward_train(&mut tape, x, bound)?;
    Ok(tape.value(y).clone())
}

/// Inference-mode batch norm on a plain tensor; no state is touched.
pub fn batchnorm_forward_eval<T: Element>(
    input: &Tensor<T>,
    params: &BatchNormParams<T>,
) -> Result<Tensor<T>> {
    params.validate()?;
    let mut tape = Tape::new();
    let x = tape.constant(input.clone());
    let bound = params.bind(&mut tape, false);
    let y = params.forward_eval(&mut tape, x, bound)?;
    Ok(tape.value(y).clone())
}

pub fn relu<T: Element>(input: &Tensor<T>) -> Tensor<T> {
    let mut tape = Tape::new();
    let x = tape.constant(input.clone());
    let y = tape.relu(x);
    tape.value(y).clone()
}
