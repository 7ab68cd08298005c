use crate::error::{Error, Result};

use super::kernels::{self, ConvGeom};
use super::{Element, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Batch statistics produced by a training-mode batch norm.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        geom: ConvGeom,
    },
    MaxPool {
        input: Var,
        argmax: Vec<u32>,
    },
    Upsample {
        input: Var,
    },
    Concat {
        inputs: Vec<Var>,
    },
    Relu {
        input: Var,
    },
    BatchNormTrain {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    BatchNormEval {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Sum {
        input: Var,
    },
    Square {
        input: Var,
    },
    Dot {
        input: Var,
        weights: Vec<T>,
    },
    FlattenHeads {
        inputs: Vec<Var>,
        priors: Vec<usize>,
        width: usize,
    },
    /// Scalar whose local derivatives were computed during the forward pass.
    Scalar {
        inputs: Vec<Var>,
        grads: Vec<Vec<T>>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records primitive operations in execution order for reverse-mode differentiation.
///
/// A tape is a single-threaded unit; build one per forward/backward pass.
pub struct Tape<T: Element = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of the leaves that asked for them.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Element> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

fn add_into<T: Element>(slot: &mut Option<Vec<T>>, g: Vec<T>) {
    match slot {
        Some(acc) => {
            for (a, b) in acc.iter_mut().zip(g) {
                *a = *a + b;
            }
        }
        None => *slot = Some(g),
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Leaf honoring the tensor's own `requires_grad` flag.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> Var {
        let rg = tensor.requires_grad();
        self.push(tensor, Op::Leaf, rg)
    }

    pub fn param(&mut self, tensor: Tensor<T>) -> Var {
        self.push(tensor.with_grad(true), Op::Leaf, true)
    }

    pub fn constant(&mut self, tensor: Tensor<T>) -> Var {
        self.push(tensor.with_grad(false), Op::Leaf, false)
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (n, cin, h, w) = self.value(input).dims4("conv2d")?;
        let (cout, wcin, kh, kw) = self.value(weight).dims4("conv2d")?;
        if wcin != cin {
            return Err(Error::shape(
                "conv2d",
                format!("input channels (dim 1) = {cin} but weight expects Cin = {wcin}"),
            ));
        }
        if kh != kw {
            return Err(Error::shape(
                "conv2d",
                format!("kernel must be square, got {kh}×{kw}"),
            ));
        }
        if self.value(bias).shape() != [cout] {
            return Err(Error::shape(
                "conv2d",
                format!(
                    "bias shape {:?} does not match Cout = {cout}",
                    self.value(bias).shape()
                ),
            ));
        }
        let ho = kernels::window_extent(h, kh, stride, pad).ok_or_else(|| {
            Error::shape(
                "conv2d",
                format!("height {h} with k={kh}, stride={stride}, pad={pad} gives a non-integral output extent"),
            )
        })?;
        let wo = kernels::window_extent(w, kw, stride, pad).ok_or_else(|| {
            Error::shape(
                "conv2d",
                format!("width {w} with k={kw}, stride={stride}, pad={pad} gives a non-integral output extent"),
            )
        })?;
        let geom = ConvGeom {
            cin,
            h,
            w,
            cout,
            k: kh,
            stride,
            pad,
            ho,
            wo,
        };
        let out = kernels::conv2d_forward(
            self.value(input).data(),
            n,
            &geom,
            self.value(weight).data(),
            self.value(bias).data(),
        );
        let rg = self.needs(&[input, weight, bias]);
        Ok(self.push(
            Tensor::new(vec![n, cout, ho, wo], out)?,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            },
            rg,
        ))
    }

    pub fn maxpool2d(&mut self, input: Var, k: usize, stride: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(input).dims4("maxpool2d")?;
        let (ho, wo) = match (
            kernels::window_extent(h, k, stride, 0),
            kernels::window_extent(w, k, stride, 0),
        ) {
            (Some(a), Some(b)) => (a, b),
            _ => {
                return Err(Error::shape(
                    "maxpool2d",
                    format!(
                    "{h}×{w} input with k={k}, stride={stride} gives a non-integral output extent"
                ),
                ))
            }
        };
        let (out, argmax) =
            kernels::maxpool_forward(self.value(input).data(), n * c, h, w, k, stride, ho, wo);
        let rg = self.needs(&[input]);
        Ok(self.push(
            Tensor::new(vec![n, c, ho, wo], out)?,
            Op::MaxPool { input, argmax },
            rg,
        ))
    }

    pub fn upsample_bilinear(&mut self, input: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(input).dims4("upsample_bilinear")?;
        if out_h == 0 || out_w == 0 {
            return Err(Error::shape(
                "upsample_bilinear",
                "target extent must be positive",
            ));
        }
        if out_h < h || out_w < w {
            return Err(Error::shape(
                "upsample_bilinear",
                format!("target {out_h}×{out_w} is smaller than source {h}×{w}"),
            ));
        }
        let out = kernels::upsample_forward(self.value(input).data(), n * c, h, w, out_h, out_w);
        let rg = self.needs(&[input]);
        Ok(self.push(
            Tensor::new(vec![n, c, out_h, out_w], out)?,
            Op::Upsample { input },
            rg,
        ))
    }

    pub fn concat_channels(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = *inputs
            .first()
            .ok_or_else(|| Error::shape("concat_channels", "no inputs"))?;
        let (n, _, h, w) = self.value(first).dims4("concat_channels")?;
        let mut total = 0;
        for (i, &v) in inputs.iter().enumerate() {
            let (ni, ci, hi, wi) = self.value(v).dims4("concat_channels")?;
            if ni != n {
                return Err(Error::shape(
                    "concat_channels",
                    format!("input {i} has batch {ni}, expected {n}"),
                ));
            }
            if (hi, wi) != (h, w) {
                return Err(Error::shape(
                    "concat_channels",
                    format!("input {i} is {hi}×{wi}, expected {h}×{w}"),
                ));
            }
            total += ci;
        }
        let plane = h * w;
        let mut out = Vec::with_capacity(n * total * plane);
        for b in 0..n {
            for &v in inputs {
                let t = self.value(v);
                let c = t.shape()[1];
                out.extend_from_slice(&t.data()[b * c * plane..(b + 1) * c * plane]);
            }
        }
        let rg = self.needs(inputs);
        Ok(self.push(
            Tensor::new(vec![n, total, h, w], out)?,
            Op::Concat {
                inputs: inputs.to_vec(),
            },
            rg,
        ))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let t = self.value(input);
        let out: Vec<T> = t.data().iter().map(|&v| v.max(T::zero())).collect();
        let shape = t.shape().to_vec();
        let rg = self.needs(&[input]);
        self.push(
            Tensor::new(shape, out).expect("same shape"),
            Op::Relu { input },
            rg,
        )
    }

    fn check_bn(
        &self,
        op: &'static str,
        input: Var,
        gamma: Var,
        beta: Var,
    ) -> Result<(usize, usize, usize)> {
        let (n, c, h, w) = self.value(input).dims4(op)?;
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.value(v).shape() != [c] {
                return Err(Error::shape(
                    op,
                    format!(
                        "{name} shape {:?} does not match C = {c}",
                        self.value(v).shape()
                    ),
                ));
            }
        }
        Ok((n, c, h * w))
    }

    /// Batch norm with batch statistics (population variance).
    pub fn batchnorm_train(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        eps: T,
    ) -> Result<(Var, BatchStats<T>)> {
        let (n, c, plane) = self.check_bn("batchnorm_train", input, gamma, beta)?;
        if n * plane < 2 {
            return Err(Error::shape(
                "batchnorm_train",
                format!("N·H·W = {} < 2, batch statistics undefined", n * plane),
            ));
        }
        let x = self.value(input).data();
        let (mean, var) = kernels::channel_moments(x, n, c, plane);
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let shift: Vec<T> = mean.iter().zip(&inv_std).map(|(&m, &s)| -m * s).collect();
        let xhat = kernels::channel_affine(x, n, c, plane, &inv_std, &shift);
        let out = kernels::channel_affine(
            &xhat,
            n,
            c,
            plane,
            self.value(gamma).data(),
            self.value(beta).data(),
        );
        let shape = self.value(input).shape().to_vec();
        let rg = self.needs(&[input, gamma, beta]);
        let var_out = self.push(
            Tensor::new(shape, out)?,
            Op::BatchNormTrain {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        );
        Ok((var_out, BatchStats { mean, var }))
    }

    /// Batch norm with fixed statistics.
    pub fn batchnorm_eval(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        mean: &[T],
        var: &[T],
        eps: T,
    ) -> Result<Var> {
        let (n, c, plane) = self.check_bn("batchnorm_eval", input, gamma, beta)?;
        if mean.len() != c || var.len() != c {
            return Err(Error::shape(
                "batchnorm_eval",
                format!(
                    "running stats have {} / {} entries, expected {c}",
                    mean.len(),
                    var.len()
                ),
            ));
        }
        if let Some(i) = var.iter().position(|&v| v < T::zero()) {
            return Err(Error::invalid(format!(
                "batchnorm_eval: running_var[{i}] is negative"
            )));
        }
        let x = self.value(input).data();
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let shift: Vec<T> = mean.iter().zip(&inv_std).map(|(&m, &s)| -m * s).collect();
        let xhat = kernels::channel_affine(x, n, c, plane, &inv_std, &shift);
        let out = kernels::channel_affine(
            &xhat,
            n,
            c,
            plane,
            self.value(gamma).data(),
            self.value(beta).data(),
        );
        let shape = self.value(input).shape().to_vec();
        let rg = self.needs(&[input, gamma, beta]);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::BatchNormEval {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let s = self.value(input).data().iter().copied().sum::<T>();
        let rg = self.needs(&[input]);
        self.push(Tensor::scalar(s), Op::Sum { input }, rg)
    }

    pub fn square(&mut self, input: Var) -> Var {
        let t = self.value(input);
        let out: Vec<T> = t.data().iter().map(|&v| v * v).collect();
        let shape = t.shape().to_vec();
        let rg = self.needs(&[input]);
        self.push(
            Tensor::new(shape, out).expect("same shape"),
            Op::Square { input },
            rg,
        )
    }

    /// Inner product with a fixed weight tensor of the same shape.
    pub fn dot(&mut self, input: Var, weights: &Tensor<T>) -> Result<Var> {
        if self.value(input).shape() != weights.shape() {
            return Err(Error::shape(
                "dot",
                format!("{:?} vs {:?}", self.value(input).shape(), weights.shape()),
            ));
        }
        let s = self
            .value(input)
            .data()
            .iter()
            .zip(weights.data())
            .map(|(&a, &b)| a * b)
            .sum::<T>();
        let rg = self.needs(&[input]);
        Ok(self.push(
            Tensor::scalar(s),
            Op::Dot {
                input,
                weights: weights.data().to_vec(),
            },
            rg,
        ))
    }

    /// Gathers per-level head maps `[N, n_k·width, f_k, f_k]` into `[N, P, width]`
    /// with prior order level → row-major cell → anchor.
    pub fn flatten_heads(&mut self, inputs: &[Var], priors: &[usize], width: usize) -> Result<Var> {
        if inputs.len() != priors.len() || inputs.is_empty() {
            return Err(Error::shape(
                "flatten_heads",
                format!("{} maps for {} prior counts", inputs.len(), priors.len()),
            ));
        }
        let n = self.value(inputs[0]).dims4("flatten_heads")?.0;
        let mut total = 0;
        for (lvl, (&v, &a)) in inputs.iter().zip(priors).enumerate() {
            let (ni, c, h, w) = self.value(v).dims4("flatten_heads")?;
            if ni != n || c != a * width {
                return Err(Error::shape(
                    "flatten_heads",
                    format!(
                        "level {lvl}: got {ni}×{c} channels, expected {n}×{}",
                        a * width
                    ),
                ));
            }
            total += h * w * a;
        }
        let mut out = vec![T::zero(); n * total * width];
        let mut offset = 0;
        for (&v, &a) in inputs.iter().zip(priors) {
            let t = self.value(v);
            let (_, c, h, w) = t.dims4("flatten_heads")?;
            let plane = h * w;
            for b in 0..n {
                let src = &t.data()[b * c * plane..(b + 1) * c * plane];
                for cell in 0..plane {
                    for anchor in 0..a {
                        let p = offset + cell * a + anchor;
                        for d in 0..width {
                            out[(b * total + p) * width + d] =
                                src[(anchor * width + d) * plane + cell];
                        }
                    }
                }
            }
            offset += plane * a;
        }
        let rg = self.needs(inputs);
        Ok(self.push(
            Tensor::new(vec![n, total, width], out)?,
            Op::FlattenHeads {
                inputs: inputs.to_vec(),
                priors: priors.to_vec(),
                width,
            },
            rg,
        ))
    }

    /// Records a scalar computed outside the tape along with its local gradients.
    pub fn custom_scalar(&mut self, value: T, inputs: Vec<(Var, Vec<T>)>) -> Result<Var> {
        for (v, g) in &inputs {
            if g.len() != self.value(*v).numel() {
                return Err(Error::shape(
                    "custom_scalar",
                    format!(
                        "gradient has {} entries for a {}-element input",
                        g.len(),
                        self.value(*v).numel()
                    ),
                ));
            }
        }
        let (vars, grads): (Vec<Var>, Vec<Vec<T>>) = inputs.into_iter().unzip();
        let rg = self.needs(&vars);
        Ok(self.push(
            Tensor::scalar(value),
            Op::Scalar {
                inputs: vars,
                grads,
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar root. Consumes the tape.
    pub fn backward(self, root: Var) -> Result<Gradients<T>> {
        if self.value(root).numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!(
                    "root must be a scalar, got shape {:?}",
                    self.value(root).shape()
                ),
            ));
        }
        let mut nodes = self.nodes;
        let mut grads: Vec<Option<Vec<T>>> = (0..nodes.len()).map(|_| None).collect();
        let mut out: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(vec![T::one()]);

        for i in (0..=root.0).rev() {
            if !nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            let rg = |v: &Var| nodes[v.0].requires_grad;
            match &node.op {
                Op::Leaf => {
                    out[i] = Some(Tensor::new(node.value.shape().to_vec(), g)?);
                }
                Op::Conv2d {
                    input,
                    weight,
                    bias,
                    geom,
                } => {
                    let n = node.value.shape()[0];
                    let r = kernels::conv2d_backward(
                        nodes[input.0].value.data(),
                        n,
                        geom,
                        nodes[weight.0].value.data(),
                        &g,
                        rg(input),
                        rg(weight),
                        rg(bias),
                    );
                    if let Some(dx) = r.input {
                        add_into(&mut grads[input.0], dx);
                    }
                    if let Some(dw) = r.weight {
                        add_into(&mut grads[weight.0], dw);
                    }
                    if let Some(db) = r.bias {
                        add_into(&mut grads[bias.0], db);
                    }
                }
                Op::MaxPool { input, argmax } => {
                    let mut dx = vec![T::zero(); nodes[input.0].value.numel()];
                    for (&idx, &gv) in argmax.iter().zip(&g) {
                        dx[idx as usize] = dx[idx as usize] + gv;
                    }
                    add_into(&mut grads[input.0], dx);
                }
                Op::Upsample { input } => {
                    let (n, c, h, w) = nodes[input.0].value.dims4("upsample_bilinear")?;
                    let (_, _, oh, ow) = node.value.dims4("upsample_bilinear")?;
                    add_into(
                        &mut grads[input.0],
                        kernels::upsample_backward(&g, n * c, h, w, oh, ow),
                    );
                }
                Op::Concat { inputs } => {
                    let (n, total, h, w) = node.value.dims4("concat_channels")?;
                    let plane = h * w;
                    let mut offset = 0;
                    for v in inputs {
                        let c = nodes[v.0].value.shape()[1];
                        if rg(v) {
                            let mut dx = Vec::with_capacity(n * c * plane);
                            for b in 0..n {
                                let start = (b * total + offset) * plane;
                                dx.extend_from_slice(&g[start..start + c * plane]);
                            }
                            add_into(&mut grads[v.0], dx);
                        }
                        offset += c;
                    }
                }
                Op::Relu { input } => {
                    let dx = nodes[input.0]
                        .value
                        .data()
                        .iter()
                        .zip(&g)
                        .map(|(&x, &gv)| if x > T::zero() { gv } else { T::zero() })
                        .collect();
                    add_into(&mut grads[input.0], dx);
                }
                Op::BatchNormTrain {
                    input,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                }
                | Op::BatchNormEval {
                    input,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let train = matches!(node.op, Op::BatchNormTrain { .. });
                    let (n, c, h, w) = node.value.dims4("batchnorm")?;
                    let plane = h * w;
                    let m = T::from_usize(n * plane).expect("count fits");
                    let mut sum_g = vec![T::zero(); c];
                    let mut sum_gx = vec![T::zero(); c];
                    for b in 0..n {
                        for ch in 0..c {
                            let base = (b * c + ch) * plane;
                            let gs = &g[base..base + plane];
                            let xs = &xhat[base..base + plane];
                            sum_g[ch] = sum_g[ch] + gs.iter().copied().sum::<T>();
                            sum_gx[ch] =
                                sum_gx[ch] + gs.iter().zip(xs).map(|(&a, &b)| a * b).sum::<T>();
                        }
                    }
                    if rg(input) {
                        let gam = nodes[gamma.0].value.data();
                        let mut dx = Vec::with_capacity(g.len());
                        for b in 0..n {
                            for ch in 0..c {
                                let base = (b * c + ch) * plane;
                                let scale = gam[ch] * inv_std[ch];
                                if train {
                                    let mg = sum_g[ch] / m;
                                    let mgx = sum_gx[ch] / m;
                                    dx.extend((0..plane).map(|p| {
                                        scale * (g[base + p] - mg - xhat[base + p] * mgx)
                                    }));
                                } else {
                                    dx.extend(g[base..base + plane].iter().map(|&gv| scale * gv));
                                }
                            }
                        }
                        add_into(&mut grads[input.0], dx);
                    }
                    if rg(gamma) {
                        add_into(&mut grads[gamma.0], sum_gx);
                    }
                    if rg(beta) {
                        add_into(&mut grads[beta.0], sum_g);
                    }
                }
                Op::Sum { input } => {
                    let n = nodes[input.0].value.numel();
                    add_into(&mut grads[input.0], vec![g[0]; n]);
                }
                Op::Square { input } => {
                    let two = T::one() + T::one();
                    let dx = nodes[input.0]
                        .value
                        .data()
                        .iter()
                        .zip(&g)
                        .map(|(&x, &gv)| two * x * gv)
                        .collect();
                    add_into(&mut grads[input.0], dx);
                }
                Op::Dot { input, weights } => {
                    let dx = weights.iter().map(|&w| w * g[0]).collect();
                    add_into(&mut grads[input.0], dx);
                }
                Op::FlattenHeads {
                    inputs,
                    priors,
                    width,
                } => {
                    let (n, total, _) = match node.value.shape() {
                        &[a, b, c] => (a, b, c),
                        _ => unreachable!("flatten_heads output is rank 3"),
                    };
                    let mut offset = 0;
                    for (v, &a) in inputs.iter().zip(priors) {
                        let (_, c, h, w) = nodes[v.0].value.dims4("flatten_heads")?;
                        let plane = h * w;
                        if rg(v) {
                            let mut dx = vec![T::zero(); n * c * plane];
                            for b in 0..n {
                                for cell in 0..plane {
                                    for anchor in 0..a {
                                        let p = offset + cell * a + anchor;
                                        for d in 0..*width {
                                            dx[(b * c + anchor * width + d) * plane + cell] =
                                                g[(b * total + p) * width + d];
                                        }
                                    }
                                }
                            }
                            add_into(&mut grads[v.0], dx);
                        }
                        offset += plane * a;
                    }
                }
                Op::Scalar {
                    inputs,
                    grads: local,
                } => {
                    for (v, lg) in inputs.iter().zip(local) {
                        if rg(v) {
                            add_into(&mut grads[v.0], lg.iter().map(|&x| x * g[0]).collect());
                        }
                    }
                }
            }
            // free activations that are no longer needed
            if !matches!(nodes[i].op, Op::Leaf) {
                nodes[i].op = Op::Leaf;
            }
        }
        Ok(Gradients { grads: out })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), v).unwrap()
    }

    #[test]
    fn conv_identity_kernel() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[1, 1, 2, 2], &[1., 2., 3., 4.]));
        let w = tape.constant(t(&[1, 1, 1, 1], &[1.]));
        let b = tape.constant(t(&[1], &[0.]));
        let y = tape.conv2d(x, w, b, 1, 0).unwrap();
        assert_eq!(tape.value(y).data(), &[1., 2., 3., 4.]);
    }

    #[test]
    fn conv_full_window_sums() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[1, 1, 2, 2], &[1., 2., 3., 4.]));
        let w = tape.constant(t(&[1, 1, 2, 2], &[1., 1., 1., 1.]));
        let b = tape.constant(t(&[1], &[0.]));
        let y = tape.conv2d(x, w, b, 1, 0).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 1, 1, 1]);
        assert_eq!(tape.value(y).data(), &[10.]);
    }

    #[test]
    fn conv_zero_input_gives_bias() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros(vec![2, 3, 5, 5]).unwrap());
        let w = tape.constant(Tensor::full(vec![2, 3, 3, 3], 0.7).unwrap());
        let b = tape.constant(Tensor::from_f64(vec![2], &[1.5, -2.0]).unwrap());
        let y = tape.conv2d(x, w, b, 1, 1).unwrap();
        let out = tape.value(y);
        assert_eq!(out.shape(), &[2, 2, 5, 5]);
        for (i, v) in out.data().iter().enumerate() {
            let c = (i / 25) % 2;
            assert_eq!(*v, if c == 0 { 1.5 } else { -2.0 });
        }
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros(vec![1, 3, 4, 4]).unwrap());
        let w = tape.constant(Tensor::zeros(vec![2, 4, 3, 3]).unwrap());
        let b = tape.constant(Tensor::zeros(vec![2]).unwrap());
        let err = tape.conv2d(x, w, b, 1, 1).unwrap_err().to_string();
        assert!(err.contains("Cin"), "{err}");
    }

    #[test]
    fn conv_rejects_fractional_extent() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros(vec![1, 1, 4, 4]).unwrap());
        let w = tape.constant(Tensor::zeros(vec![1, 1, 3, 3]).unwrap());
        let b = tape.constant(Tensor::zeros(vec![1]).unwrap());
        assert!(tape.conv2d(x, w, b, 2, 0).is_err());
    }

    #[test]
    fn maxpool_window_and_routing() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[1, 1, 2, 2], &[1., 2., 3., 4.]).with_grad(true));
        let y = tape.maxpool2d(x, 2, 2).unwrap();
        assert_eq!(tape.value(y).data(), &[4.]);
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0., 0., 0., 1.]);
    }

    #[test]
    fn maxpool_constant_and_ties() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::full(vec![1, 1, 4, 4], 7.0).unwrap().with_grad(true));
        let y = tape.maxpool2d(x, 2, 2).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 7.0));
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap();
        // first element of each window gets the gradient
        let d = g.get(x).unwrap().data();
        assert_eq!(d[0], 1.0);
        assert_eq!(d[1], 0.0);
        assert_eq!(d[2], 1.0);
        assert_eq!(d[4], 0.0);
    }

    #[test]
    fn maxpool_rejects_fractional() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(vec![1, 1, 5, 5]).unwrap());
        assert!(tape.maxpool2d(x, 2, 2).is_err());
    }

    #[test]
    fn upsample_single_sample_and_constant() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[1, 1, 1, 1], &[3.5]));
        let y = tape.upsample_bilinear(x, 2, 2).unwrap();
        assert_eq!(tape.value(y).data(), &[3.5; 4]);
        let c = tape.constant(Tensor::full(vec![1, 2, 3, 3], -1.25).unwrap());
        let y = tape.upsample_bilinear(c, 7, 5).unwrap();
        assert!(tape
            .value(y)
            .data()
            .iter()
            .all(|&v| (v + 1.25).abs() < 1e-15));
        assert!(tape.upsample_bilinear(c, 0, 4).is_err());
    }

    #[test]
    fn concat_layout() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::full(vec![1, 2, 2, 2], 1.0).unwrap());
        let b = tape.constant(Tensor::full(vec![1, 3, 2, 2], 2.0).unwrap());
        let y = tape.concat_channels(&[a, b]).unwrap();
        let v = tape.value(y);
        assert_eq!(v.shape(), &[1, 5, 2, 2]);
        assert!(v.data()[..8].iter().all(|&x| x == 1.0));
        assert!(v.data()[8..].iter().all(|&x| x == 2.0));
        let single = tape.concat_channels(&[a]).unwrap();
        assert_eq!(tape.value(single), tape.value(a));
        let bad = tape.constant(Tensor::zeros(vec![1, 1, 3, 2]).unwrap());
        assert!(tape.concat_channels(&[a, bad]).is_err());
        let bad_batch = tape.constant(Tensor::zeros(vec![2, 1, 2, 2]).unwrap());
        assert!(tape.concat_channels(&[a, bad_batch]).is_err());
    }

    #[test]
    fn fusion_shaped_concat() {
        let mut tape = Tape::<f32>::new();
        let vars: Vec<Var> = [64, 32, 32]
            .iter()
            .map(|&c| tape.constant(Tensor::zeros(vec![1, c, 24, 24]).unwrap()))
            .collect();
        let y = tape.concat_channels(&vars).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 128, 24, 24]);
    }

    #[test]
    fn relu_values_and_grads() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[3], &[-1., 0., 2.]).with_grad(true));
        let y = tape.relu(x);
        assert_eq!(tape.value(y).data(), &[0., 0., 2.]);
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0., 0., 1.]);
    }

    #[test]
    fn square_sum_grad() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[2], &[1., 2.]).with_grad(true));
        let y = tape.square(x);
        let s = tape.sum(y);
        assert_eq!(tape.value(s).data(), &[5.]);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2., 4.]);
    }

    #[test]
    fn backward_requires_scalar_root() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[2], &[1., 2.]).with_grad(true));
        let y = tape.square(x);
        assert!(tape.backward(y).is_err());
    }

    #[test]
    fn gradient_accumulates_over_fanout() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[1, 1, 1, 2], &[1., -3.]).with_grad(true));
        let y = tape.concat_channels(&[x, x]).unwrap();
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2., 2.]);
    }
}
