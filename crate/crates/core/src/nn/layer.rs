//! Layer kinds and their forward/backward kernels.
//!
//! Activations are row-major with the batch as the leading dimension:
//! `[b, features]` for dense layers and `[b, c, h, w]` for spatial ones.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::nn::param::Parameter;
use crate::scalar::Scalar;
use crate::tensor::{matmul_a_bt_into, matmul_at_b_into, matmul_into, Tensor};

pub const BATCHNORM_MOMENTUM: f64 = 0.1;
pub const BATCHNORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Mode {
    Inference,
    Train,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LayerKind {
    Dense,
    Conv2d,
    Relu,
    MaxPool2d,
    BatchNorm,
    Flatten,
}

impl LayerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            LayerKind::Dense => "dense",
            LayerKind::Conv2d => "conv2d",
            LayerKind::Relu => "relu",
            LayerKind::MaxPool2d => "maxpool2d",
            LayerKind::BatchNorm => "batchnorm",
            LayerKind::Flatten => "flatten",
        }
    }
}

#[derive(Debug, Clone)]
pub(crate) enum Op<T> {
    /// `y = x · weight + bias`, weight `[in, out]`.
    Dense {
        weight: Parameter<T>,
        bias: Parameter<T>,
    },
    /// Stride-1 convolution, weight `[c_out, c_in, k, k]`, zero padding on each side.
    Conv2d {
        weight: Parameter<T>,
        bias: Parameter<T>,
        kernel: usize,
        padding: usize,
    },
    Relu,
    /// 2×2 window, stride 2.
    MaxPool2d,
    BatchNorm {
        gamma: Parameter<T>,
        beta: Parameter<T>,
        running_mean: Tensor<T>,
        running_var: Tensor<T>,
    },
    Flatten,
}

#[derive(Debug, Clone)]
enum Saved<T> {
    Input(Tensor<T>),
    Argmax {
        input_shape: Vec<usize>,
        argmax: Vec<usize>,
    },
    BatchNormTrain {
        xhat: Tensor<T>,
        inv_std: Vec<T>,
    },
    BatchNormInference {
        x: Tensor<T>,
    },
    Shape(Vec<usize>),
}

#[derive(Debug, Clone)]
pub struct Layer<T> {
    name: String,
    op: Op<T>,
    mode: Mode,
    saved: Option<Saved<T>>,
}

fn he_normal<T: Scalar, R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<T> {
    let std = (2.0 / fan_in.max(1) as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("valid normal");
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::lit(normal.sample(rng))).collect();
    Tensor::new(shape.to_vec(), data).expect("shape product matches")
}

impl<T: Scalar> Layer<T> {
    fn with_op(name: impl Into<String>, op: Op<T>) -> Self {
        Layer {
            name: name.into(),
            op,
            mode: Mode::Train,
            saved: None,
        }
    }

    pub fn dense<R: Rng + ?Sized>(name: &str, inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let weight = he_normal(&[inputs, outputs], inputs, rng);
        let bias = Tensor::zeros(&[outputs]);
        Self::dense_from(name, weight, bias).expect("consistent dense shapes")
    }

    pub fn dense_from(name: &str, weight: Tensor<T>, bias: Tensor<T>) -> Result<Self> {
        if weight.rank() != 2 || bias.shape() != [weight.shape()[1]] {
            return Err(Error::shape(
                format!("{name} bias"),
                &[weight.shape().get(1).copied().unwrap_or(0)],
                bias.shape(),
            ));
        }
        Ok(Self::with_op(
            name,
            Op::Dense {
                weight: Parameter::new(format!("{name}.weight"), weight),
                bias: Parameter::new(format!("{name}.bias"), bias),
            },
        ))
    }

    pub fn conv2d<R: Rng + ?Sized>(
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        padding: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        let weight = he_normal(&[out_channels, in_channels, kernel, kernel], fan_in, rng);
        let bias = Tensor::zeros(&[out_channels]);
        Self::conv2d_from(name, weight, bias, padding).expect("consistent conv shapes")
    }

    pub fn conv2d_from(
        name: &str,
        weight: Tensor<T>,
        bias: Tensor<T>,
        padding: usize,
    ) -> Result<Self> {
        let ws = weight.shape();
        if ws.len() != 4 || ws[2] != ws[3] {
            return Err(Error::invalid(format!(
                "{name}: conv weight must be [c_out, c_in, k, k], got {ws:?}"
            )));
        }
        if !matches!(ws[2], 1 | 3) {
            return Err(Error::invalid(format!(
                "{name}: only 1x1 and 3x3 kernels are supported"
            )));
        }
        if bias.shape() != [ws[0]] {
            return Err(Error::shape(format!("{name} bias"), &[ws[0]], bias.shape()));
        }
        let kernel = ws[2];
        Ok(Self::with_op(
            name,
            Op::Conv2d {
                weight: Parameter::new(format!("{name}.weight"), weight),
                bias: Parameter::new(format!("{name}.bias"), bias),
                kernel,
                padding,
            },
        ))
    }

    pub fn relu(name: &str) -> Self {
        Self::with_op(name, Op::Relu)
    }

    pub fn maxpool2d(name: &str) -> Self {
        Self::with_op(name, Op::MaxPool2d)
    }

    pub fn batchnorm(name: &str, channels: usize) -> Self {
        Self::with_op(
            name,
            Op::BatchNorm {
                gamma: Parameter::new(format!("{name}.gamma"), Tensor::full(&[channels], T::one())),
                beta: Parameter::new(format!("{name}.beta"), Tensor::zeros(&[channels])),
                running_mean: Tensor::zeros(&[channels]),
                running_var: Tensor::full(&[channels], T::one()),
            },
        )
    }

    pub fn flatten(name: &str) -> Self {
        Self::with_op(name, Op::Flatten)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn kind(&self) -> LayerKind {
        match self.op {
            Op::Dense { .. } => LayerKind::Dense,
            Op::Conv2d { .. } => LayerKind::Conv2d,
            Op::Relu => LayerKind::Relu,
            Op::MaxPool2d => LayerKind::MaxPool2d,
            Op::BatchNorm { .. } => LayerKind::BatchNorm,
            Op::Flatten => LayerKind::Flatten,
        }
    }

    pub(crate) fn op(&self) -> &Op<T> {
        &self.op
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    /// Sets the persistent mode. A layer in inference mode ignores train-mode forward
    /// requests, so batchnorm keeps using its running statistics.
    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    pub fn parameters(&self) -> Vec<&Parameter<T>> {
        match &self.op {
            Op::Dense { weight, bias } | Op::Conv2d { weight, bias, .. } => vec![weight, bias],
            Op::BatchNorm { gamma, beta, .. } => vec![gamma, beta],
            _ => Vec::new(),
        }
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Parameter<T>> {
        match &mut self.op {
            Op::Dense { weight, bias } | Op::Conv2d { weight, bias, .. } => vec![weight, bias],
            Op::BatchNorm { gamma, beta, .. } => vec![gamma, beta],
            _ => Vec::new(),
        }
    }

    /// Non-trainable state tensors (batchnorm running statistics), with stable names.
    pub fn buffers(&self) -> Vec<(String, &Tensor<T>)> {
        match &self.op {
            Op::BatchNorm {
                running_mean,
                running_var,
                ..
            } => vec![
                (format!("{}.running_mean", self.name), running_mean),
                (format!("{}.running_var", self.name), running_var),
            ],
            _ => Vec::new(),
        }
    }

    pub fn buffers_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let name = self.name.clone();
        match &mut self.op {
            Op::BatchNorm {
                running_mean,
                running_var,
                ..
            } => vec![
                (format!("{name}.running_mean"), running_mean),
                (format!("{name}.running_var"), running_var),
            ],
            _ => Vec::new(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.parameters().iter().map(|p| p.numel()).sum()
    }

    pub fn has_saved_state(&self) -> bool {
        self.saved.is_some()
    }

    pub fn clear_saved(&mut self) {
        self.saved = None;
    }

    /// Output shape for a batched input shape, validating the input.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match &self.op {
            Op::Dense { weight, .. } => {
                let ws = weight.value().shape();
                if input.len() != 2 || input[1] != ws[0] {
                    return Err(Error::shape(
                        &self.name,
                        &[input.first().copied().unwrap_or(0), ws[0]],
                        input,
                    ));
                }
                Ok(vec![input[0], ws[1]])
            }
            Op::Conv2d {
                weight,
                kernel,
                padding,
                ..
            } => {
                let ws = weight.value().shape();
                if input.len() != 4 || input[1] != ws[1] {
                    return Err(Error::shape(
                        &self.name,
                        &[input.first().copied().unwrap_or(0), ws[1], 0, 0],
                        input,
                    ));
                }
                let (h, w) = (input[2] + 2 * padding, input[3] + 2 * padding);
                if h < *kernel || w < *kernel {
                    return Err(Error::invalid(format!(
                        "{}: input smaller than kernel",
                        self.name
                    )));
                }
                Ok(vec![input[0], ws[0], h - kernel + 1, w - kernel + 1])
            }
            Op::Relu => Ok(input.to_vec()),
            Op::MaxPool2d => {
                if input.len() != 4 || input[2] < 2 || input[3] < 2 {
                    return Err(Error::invalid(format!(
                        "{}: maxpool needs [b, c, h>=2, w>=2], got {input:?}",
                        self.name
                    )));
                }
                Ok(vec![input[0], input[1], input[2] / 2, input[3] / 2])
            }
            Op::BatchNorm { gamma, .. } => {
                let c = gamma.value().len();
                if !(input.len() == 2 || input.len() == 4) || input[1] != c {
                    return Err(Error::shape(
                        &self.name,
                        &[input.first().copied().unwrap_or(0), c],
                        input,
                    ));
                }
                Ok(input.to_vec())
            }
            Op::Flatten => {
                if input.is_empty() {
                    return Err(Error::invalid(format!(
                        "{}: flatten of rank-0 input",
                        self.name
                    )));
                }
                Ok(vec![input[0], input[1..].iter().product()])
            }
        }
    }

    /// Analytic forward FLOPs for a batched input shape. Only the matmul-dominated
    /// kinds are counted.
    pub fn forward_flops(&self, input: &[usize]) -> Result<u64> {
        let out = self.output_shape(input)?;
        Ok(match &self.op {
            Op::Dense { weight, .. } => {
                let ws = weight.value().shape();
                2 * (ws[0] * ws[1] * input[0]) as u64
            }
            Op::Conv2d { weight, kernel, .. } => {
                let ws = weight.value().shape();
                2 * (kernel * kernel * ws[1] * ws[0] * out[2] * out[3] * input[0]) as u64
            }
            _ => 0,
        })
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        // Backward state is kept for any train-mode request; the effective mode
        // decides which statistics batchnorm uses.
        let record = mode == Mode::Train;
        let effective = mode.min(self.mode);
        if effective == Mode::Train && matches!(self.op, Op::BatchNorm { .. }) {
            self.output_shape(x.shape())?;
            if let Op::BatchNorm {
                gamma,
                beta,
                running_mean,
                running_var,
            } = &mut self.op
            {
                let (y, xhat, inv_std) =
                    batchnorm_train(x, gamma.value(), beta.value(), running_mean, running_var);
                y.ensure_finite(&self.name)?;
                self.saved = Some(Saved::BatchNormTrain { xhat, inv_std });
                return Ok(y);
            }
        }
        let (y, saved) = self.compute(x, record)?;
        if record {
            self.saved = saved;
        }
        Ok(y)
    }

    /// Inference-mode forward pass without touching any layer state.
    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.compute(x, false).map(|(y, _)| y)
    }

    /// Stateless forward; batchnorm uses running statistics.
    fn compute(&self, x: &Tensor<T>, record: bool) -> Result<(Tensor<T>, Option<Saved<T>>)> {
        let out_shape = self.output_shape(x.shape())?;
        let keep = |s: Saved<T>| if record { Some(s) } else { None };
        let (y, saved) = match &self.op {
            Op::Dense { weight, bias } => {
                let ws = weight.value().shape();
                let (b, i, o) = (x.shape()[0], ws[0], ws[1]);
                let mut out = vec![T::zero(); b * o];
                matmul_into(x.data(), weight.value().data(), &mut out, b, i, o);
                for row in out.chunks_mut(o) {
                    for (v, &bv) in row.iter_mut().zip(bias.value().data()) {
                        *v += bv;
                    }
                }
                (Tensor::new(out_shape, out)?, keep(Saved::Input(x.clone())))
            }
            Op::Conv2d {
                weight,
                bias,
                kernel,
                padding,
            } => (
                conv_forward(
                    x,
                    weight.value(),
                    bias.value(),
                    *kernel,
                    *padding,
                    &out_shape,
                ),
                keep(Saved::Input(x.clone())),
            ),
            Op::Relu => (
                x.map(|v| if v > T::zero() { v } else { T::zero() }),
                keep(Saved::Input(x.clone())),
            ),
            Op::MaxPool2d => {
                let (y, argmax) = maxpool_forward(x, &out_shape);
                let saved = keep(Saved::Argmax {
                    input_shape: x.shape().to_vec(),
                    argmax,
                });
                (y, saved)
            }
            Op::BatchNorm {
                gamma,
                beta,
                running_mean,
                running_var,
            } => (
                batchnorm_inference(x, gamma.value(), beta.value(), running_mean, running_var),
                keep(Saved::BatchNormInference { x: x.clone() }),
            ),
            Op::Flatten => (
                x.clone().reshape(&out_shape)?,
                keep(Saved::Shape(x.shape().to_vec())),
            ),
        };
        y.ensure_finite(&self.name)?;
        Ok((y, saved))
    }

    /// Backpropagates `grad_out`, storing parameter gradients (unless frozen) and
    /// returning the input gradient when `need_input_grad` is set.
    pub fn backward(
        &mut self,
        grad_out: &Tensor<T>,
        need_input_grad: bool,
    ) -> Result<Option<Tensor<T>>> {
        let saved = self
            .saved
            .take()
            .ok_or_else(|| Error::BackwardBeforeForward(self.name.clone()))?;
        let name = self.name.clone();
        match (&mut self.op, saved) {
            (Op::Dense { weight, bias }, Saved::Input(x)) => {
                let ws = weight.value().shape().to_vec();
                let (b, i, o) = (x.shape()[0], ws[0], ws[1]);
                check_grad_shape(&name, grad_out, &[b, o])?;
                if !weight.is_frozen() {
                    let mut dw = vec![T::zero(); i * o];
                    matmul_at_b_into(x.data(), grad_out.data(), &mut dw, b, i, o);
                    weight.set_grad(Tensor::new(ws.clone(), dw)?)?;
                }
                if !bias.is_frozen() {
                    let mut db = vec![T::zero(); o];
                    for row in grad_out.data().chunks(o) {
                        for (d, &g) in db.iter_mut().zip(row) {
                            *d += g;
                        }
                    }
                    bias.set_grad(Tensor::new(vec![o], db)?)?;
                }
                if need_input_grad {
                    let mut dx = vec![T::zero(); b * i];
                    matmul_a_bt_into(grad_out.data(), weight.value().data(), &mut dx, b, o, i);
                    return Ok(Some(Tensor::new(x.shape().to_vec(), dx)?));
                }
                Ok(None)
            }
            (
                Op::Conv2d {
                    weight,
                    bias,
                    kernel,
                    padding,
                },
                Saved::Input(x),
            ) => conv_backward(
                &name,
                &x,
                grad_out,
                weight,
                bias,
                *kernel,
                *padding,
                need_input_grad,
            ),
            (Op::Relu, Saved::Input(x)) => {
                check_grad_shape(&name, grad_out, x.shape())?;
                if !need_input_grad {
                    return Ok(None);
                }
                let data = x
                    .data()
                    .iter()
                    .zip(grad_out.data())
                    .map(|(&v, &g)| if v > T::zero() { g } else { T::zero() })
                    .collect();
                Ok(Some(Tensor::new(x.shape().to_vec(), data)?))
            }
            (
                Op::MaxPool2d,
                Saved::Argmax {
                    input_shape,
                    argmax,
                },
            ) => {
                if grad_out.len() != argmax.len() {
                    return Err(Error::shape(&name, &[argmax.len()], grad_out.shape()));
                }
                if !need_input_grad {
                    return Ok(None);
                }
                let mut dx = Tensor::zeros(&input_shape);
                let d = dx.data_mut();
                for (&idx, &g) in argmax.iter().zip(grad_out.data()) {
                    d[idx] += g;
                }
                Ok(Some(dx))
            }
            (Op::BatchNorm { gamma, beta, .. }, Saved::BatchNormTrain { xhat, inv_std }) => {
                check_grad_shape(&name, grad_out, xhat.shape())?;
                batchnorm_train_backward(&xhat, &inv_std, grad_out, gamma, beta, need_input_grad)
            }
            (
                Op::BatchNorm {
                    gamma,
                    beta,
                    running_mean,
                    running_var,
                },
                Saved::BatchNormInference { x },
            ) => {
                check_grad_shape(&name, grad_out, x.shape())?;
                batchnorm_inference_backward(
                    &x,
                    grad_out,
                    gamma,
                    beta,
                    running_mean,
                    running_var,
                    need_input_grad,
                )
            }
            (Op::Flatten, Saved::Shape(shape)) => {
                if !need_input_grad {
                    return Ok(None);
                }
                Ok(Some(grad_out.clone().reshape(&shape)?))
            }
            _ => Err(Error::BackwardBeforeForward(name)),
        }
    }

    /// Copy without recorded intermediates or gradients.
    pub fn snapshot(&self) -> Self {
        let mut l = self.clone();
        l.saved = None;
        for p in l.parameters_mut() {
            p.clear_grad();
        }
        l
    }
}

fn check_grad_shape<T: Scalar>(name: &str, grad: &Tensor<T>, expected: &[usize]) -> Result<()> {
    if grad.shape() != expected {
        return Err(Error::shape(format!("{name} grad"), expected, grad.shape()));
    }
    Ok(())
}

/// Column buffer `[c_in·k·k, h_out·w_out]` for one sample.
#[allow(clippy::too_many_arguments)]
fn im2col<T: Scalar>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    cols: &mut [T],
) {
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let dst = &mut cols[row * ho * wo..(row + 1) * ho * wo];
                for oi in 0..ho {
                    let ii = (oi + ki) as isize - pad as isize;
                    for oj in 0..wo {
                        let jj = (oj + kj) as isize - pad as isize;
                        dst[oi * wo + oj] =
                            if ii >= 0 && (ii as usize) < h && jj >= 0 && (jj as usize) < w {
                                x[(ci * h + ii as usize) * w + jj as usize]
                            } else {
                                T::zero()
                            };
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im<T: Scalar>(
    cols: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    dx: &mut [T],
) {
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let src = &cols[row * ho * wo..(row + 1) * ho * wo];
                for oi in 0..ho {
                    let ii = (oi + ki) as isize - pad as isize;
                    if ii < 0 || ii as usize >= h {
                        continue;
                    }
                    for oj in 0..wo {
                        let jj = (oj + kj) as isize - pad as isize;
                        if jj >= 0 && (jj as usize) < w {
                            dx[(ci * h + ii as usize) * w + jj as usize] += src[oi * wo + oj];
                        }
                    }
                }
            }
        }
    }
}

fn conv_forward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    k: usize,
    pad: usize,
    out_shape: &[usize],
) -> Tensor<T> {
    let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (co, ho, wo) = (out_shape[1], out_shape[2], out_shape[3]);
    let ckk = c * k * k;
    let mut cols = vec![T::zero(); ckk * ho * wo];
    let mut out = vec![T::zero(); b * co * ho * wo];
    for s in 0..b {
        im2col(
            &x.data()[s * c * h * w..(s + 1) * c * h * w],
            c,
            h,
            w,
            k,
            pad,
            ho,
            wo,
            &mut cols,
        );
        let dst = &mut out[s * co * ho * wo..(s + 1) * co * ho * wo];
        matmul_into(weight.data(), &cols, dst, co, ckk, ho * wo);
        for (oc, plane) in dst.chunks_mut(ho * wo).enumerate() {
            let bv = bias.data()[oc];
            plane.iter_mut().for_each(|v| *v += bv);
        }
    }
    Tensor::new(out_shape.to_vec(), out).expect("conv output shape")
}

#[allow(clippy::too_many_arguments)]
fn conv_backward<T: Scalar>(
    name: &str,
    x: &Tensor<T>,
    grad_out: &Tensor<T>,
    weight: &mut Parameter<T>,
    bias: &mut Parameter<T>,
    k: usize,
    pad: usize,
    need_input_grad: bool,
) -> Result<Option<Tensor<T>>> {
    let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let co = weight.value().shape()[0];
    let (ho, wo) = (h + 2 * pad + 1 - k, w + 2 * pad + 1 - k);
    check_grad_shape(name, grad_out, &[b, co, ho, wo])?;
    let ckk = c * k * k;
    let hw = ho * wo;
    let mut cols = vec![T::zero(); ckk * hw];
    let mut dcols = vec![T::zero(); ckk * hw];
    let mut dw = vec![T::zero(); co * ckk];
    let mut dw_s = vec![T::zero(); co * ckk];
    let mut db = vec![T::zero(); co];
    let mut dx = if need_input_grad {
        Some(Tensor::zeros(x.shape()))
    } else {
        None
    };
    let train_weight = !weight.is_frozen();
    for s in 0..b {
        let g = &grad_out.data()[s * co * hw..(s + 1) * co * hw];
        for (oc, plane) in g.chunks(hw).enumerate() {
            db[oc] += plane.iter().copied().sum::<T>();
        }
        if train_weight {
            im2col(
                &x.data()[s * c * h * w..(s + 1) * c * h * w],
                c,
                h,
                w,
                k,
                pad,
                ho,
                wo,
                &mut cols,
            );
            matmul_a_bt_into(g, &cols, &mut dw_s, co, hw, ckk);
            for (a, &v) in dw.iter_mut().zip(&dw_s) {
                *a += v;
            }
        }
        if let Some(dx) = dx.as_mut() {
            matmul_at_b_into(weight.value().data(), g, &mut dcols, co, ckk, hw);
            col2im(
                &dcols,
                c,
                h,
                w,
                k,
                pad,
                ho,
                wo,
                &mut dx.data_mut()[s * c * h * w..(s + 1) * c * h * w],
            );
        }
    }
    if train_weight {
        let ws = weight.value().shape().to_vec();
        weight.set_grad(Tensor::new(ws, dw)?)?;
    }
    if !bias.is_frozen() {
        bias.set_grad(Tensor::new(vec![co], db)?)?;
    }
    Ok(dx)
}

fn maxpool_forward<T: Scalar>(x: &Tensor<T>, out_shape: &[usize]) -> (Tensor<T>, Vec<usize>) {
    let (h, w) = (x.shape()[2], x.shape()[3]);
    let (ho, wo) = (out_shape[2], out_shape[3]);
    let planes = out_shape[0] * out_shape[1];
    let mut out = Vec::with_capacity(planes * ho * wo);
    let mut argmax = Vec::with_capacity(planes * ho * wo);
    let d = x.data();
    for p in 0..planes {
        let base = p * h * w;
        for oi in 0..ho {
            for oj in 0..wo {
                let mut best = base + 2 * oi * w + 2 * oj;
                for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oi + di) * w + 2 * oj + dj;
                    if d[idx] > d[best] {
                        best = idx;
                    }
                }
                out.push(d[best]);
                argmax.push(best);
            }
        }
    }
    (
        Tensor::new(out_shape.to_vec(), out).expect("pool shape"),
        argmax,
    )
}

/// (channels, elements per channel per sample) for `[b, c]` or `[b, c, h, w]`.
fn bn_dims(shape: &[usize]) -> (usize, usize) {
    let spatial = if shape.len() == 4 {
        shape[2] * shape[3]
    } else {
        1
    };
    (shape[1], spatial)
}

fn for_each_channel_value(shape: &[usize], mut f: impl FnMut(usize, usize)) {
    let (c, spatial) = bn_dims(shape);
    for s in 0..shape[0] {
        for ch in 0..c {
            let base = (s * c + ch) * spatial;
            for i in 0..spatial {
                f(ch, base + i);
            }
        }
    }
}

fn batchnorm_train<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running_mean: &mut Tensor<T>,
    running_var: &mut Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Vec<T>) {
    let (c, spatial) = bn_dims(x.shape());
    let count = x.shape()[0] * spatial;
    let n = T::from_usize_lossy(count);
    let d = x.data();
    let mut mean = vec![T::zero(); c];
    for_each_channel_value(x.shape(), |ch, i| mean[ch] += d[i]);
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![T::zero(); c];
    for_each_channel_value(x.shape(), |ch, i| {
        let dv = d[i] - mean[ch];
        var[ch] += dv * dv;
    });
    var.iter_mut().for_each(|v| *v /= n);
    let eps = T::lit(BATCHNORM_EPS);
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut xhat = Tensor::zeros(x.shape());
    let mut y = Tensor::zeros(x.shape());
    {
        let xh = xhat.data_mut();
        let yd = y.data_mut();
        for_each_channel_value(x.shape(), |ch, i| {
            xh[i] = (d[i] - mean[ch]) * inv_std[ch];
            yd[i] = gamma.data()[ch] * xh[i] + beta.data()[ch];
        });
    }
    let m = T::lit(BATCHNORM_MOMENTUM);
    let unbias = if count > 1 {
        n / T::from_usize_lossy(count - 1)
    } else {
        T::one()
    };
    for ch in 0..c {
        let rm = &mut running_mean.data_mut()[ch];
        *rm = (T::one() - m) * *rm + m * mean[ch];
        let rv = &mut running_var.data_mut()[ch];
        *rv = (T::one() - m) * *rv + m * var[ch] * unbias;
    }
    (y, xhat, inv_std)
}

fn batchnorm_inference<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running_mean: &Tensor<T>,
    running_var: &Tensor<T>,
) -> Tensor<T> {
    let eps = T::lit(BATCHNORM_EPS);
    let d = x.data();
    let mut y = Tensor::zeros(x.shape());
    let yd = y.data_mut();
    for_each_channel_value(x.shape(), |ch, i| {
        let inv = T::one() / (running_var.data()[ch] + eps).sqrt();
        yd[i] = gamma.data()[ch] * (d[i] - running_mean.data()[ch]) * inv + beta.data()[ch];
    });
    y
}

fn batchnorm_train_backward<T: Scalar>(
    xhat: &Tensor<T>,
    inv_std: &[T],
    grad_out: &Tensor<T>,
    gamma: &mut Parameter<T>,
    beta: &mut Parameter<T>,
    need_input_grad: bool,
) -> Result<Option<Tensor<T>>> {
    let shape = xhat.shape().to_vec();
    let (c, spatial) = bn_dims(&shape);
    let n = T::from_usize_lossy(shape[0] * spatial);
    let (xh, g) = (xhat.data(), grad_out.data());
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for_each_channel_value(&shape, |ch, i| {
        dgamma[ch] += g[i] * xh[i];
        dbeta[ch] += g[i];
    });
    let dx = if need_input_grad {
        let gm = gamma.value().data().to_vec();
        let mut dx = Tensor::zeros(&shape);
        let dxd = dx.data_mut();
        // dx = γ·inv_std/N · (N·dy − Σdy − x̂·Σ(dy·x̂))
        for_each_channel_value(&shape, |ch, i| {
            dxd[i] = gm[ch] * inv_std[ch] / n * (n * g[i] - dbeta[ch] - xh[i] * dgamma[ch]);
        });
        Some(dx)
    } else {
        None
    };
    if !gamma.is_frozen() {
        gamma.set_grad(Tensor::new(vec![c], dgamma)?)?;
    }
    if !beta.is_frozen() {
        beta.set_grad(Tensor::new(vec![c], dbeta)?)?;
    }
    Ok(dx)
}

fn batchnorm_inference_backward<T: Scalar>(
    x: &Tensor<T>,
    grad_out: &Tensor<T>,
    gamma: &mut Parameter<T>,
    beta: &mut Parameter<T>,
    running_mean: &Tensor<T>,
    running_var: &Tensor<T>,
    need_input_grad: bool,
) -> Result<Option<Tensor<T>>> {
    let shape = x.shape().to_vec();
    let (c, _) = bn_dims(&shape);
    let eps = T::lit(BATCHNORM_EPS);
    let (xd, g) = (x.data(), grad_out.data());
    let inv: Vec<T> = running_var
        .data()
        .iter()
        .map(|&v| T::one() / (v + eps).sqrt())
        .collect();
    let rm = running_mean.data();
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for_each_channel_value(&shape, |ch, i| {
        dgamma[ch] += g[i] * (xd[i] - rm[ch]) * inv[ch];
        dbeta[ch] += g[i];
    });
    let dx = if need_input_grad {
        let gm = gamma.value().data();
        let mut dx = Tensor::zeros(&shape);
        let dxd = dx.data_mut();
        for_each_channel_value(&shape, |ch, i| dxd[i] = g[i] * gm[ch] * inv[ch]);
        Some(dx)
    } else {
        None
    };
    if !gamma.is_frozen() {
        gamma.set_grad(Tensor::new(vec![c], dgamma)?)?;
    }
    if !beta.is_frozen() {
        beta.set_grad(Tensor::new(vec![c], dbeta)?)?;
    }
    Ok(dx)
}
