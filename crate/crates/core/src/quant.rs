//! Symmetric per-tensor int8 quantization and the reference model built from it.
//!
//! The reference model is a quantized, inference-only copy of the training model.
//! Dense layers run through an int8 GEMM with 32-bit accumulation; other layer
//! kinds use dequantized weights in float.

use crate::error::{Error, Result};
use crate::nn::layer::{Layer, Mode, Op};
use crate::nn::model::Model;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const QMAX: i32 = 127;

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor<T> {
    shape: Vec<usize>,
    q: Vec<i8>,
    scale: T,
}

impl<T: Scalar> QuantizedTensor<T> {
    pub fn from_parts(shape: Vec<usize>, q: Vec<i8>, scale: T) -> Result<Self> {
        if shape.iter().product::<usize>() != q.len() {
            return Err(Error::invalid(format!(
                "quantized tensor of shape {shape:?} needs {} values, got {}",
                shape.iter().product::<usize>(),
                q.len()
            )));
        }
        if !(scale > T::zero() && scale.is_finite()) {
            return Err(Error::invalid(format!(
                "scale must be positive, got {scale}"
            )));
        }
        if q.contains(&i8::MIN) {
            return Err(Error::invalid("quantized values must lie in [-127, 127]"));
        }
        Ok(QuantizedTensor { shape, q, scale })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[i8] {
        &self.q
    }

    pub fn scale(&self) -> T {
        self.scale
    }

    pub fn len(&self) -> usize {
        self.q.len()
    }

    pub fn is_empty(&self) -> bool {
        self.q.is_empty()
    }
}

/// `scale = max|t| / 127` (1 for an all-zero tensor), `q = round_half_away(t / scale)`
/// clamped to `[-127, 127]`. Rounding is done in `f64` against the stored scale, so
/// `|q·scale − t| ≤ scale/2` holds exactly for the stored values.
pub fn quantize_tensor<T: Scalar>(t: &Tensor<T>) -> Result<QuantizedTensor<T>> {
    t.ensure_finite("quantize_tensor")?;
    let max = t.max_abs();
    let scale = if max == T::zero() {
        T::one()
    } else {
        max / T::lit(QMAX as f64)
    };
    let s = scale.as_f64();
    let q = t
        .data()
        .iter()
        .map(|v| {
            // f64::round rounds half away from zero.
            let r = (v.as_f64() / s).round();
            r.clamp(-(QMAX as f64), QMAX as f64) as i8
        })
        .collect();
    Ok(QuantizedTensor {
        shape: t.shape().to_vec(),
        q,
        scale,
    })
}

pub fn dequantize_tensor<T: Scalar>(q: &QuantizedTensor<T>) -> Tensor<T> {
    let data = q.q.iter().map(|&v| T::lit(v as f64) * q.scale).collect();
    Tensor::new(q.shape.clone(), data).expect("quantized tensor shape is consistent")
}

/// `A[b×k] · W[k×n]` with i32 accumulation, rescaled by `scale_A · scale_W`.
pub fn int8_gemm<T: Scalar>(a: &QuantizedTensor<T>, w: &QuantizedTensor<T>) -> Result<Tensor<T>> {
    if a.shape.len() != 2 || w.shape.len() != 2 || a.shape[1] != w.shape[0] {
        return Err(Error::shape(
            "int8_gemm",
            &[
                a.shape.get(1).copied().unwrap_or(0),
                w.shape.get(1).copied().unwrap_or(0),
            ],
            &w.shape,
        ));
    }
    let (b, k, n) = (a.shape[0], a.shape[1], w.shape[1]);
    let mut acc = vec![0i32; b * n];
    for i in 0..b {
        let row = &mut acc[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a.q[i * k + p] as i32;
            if av == 0 {
                continue;
            }
            for (o, &wv) in row.iter_mut().zip(&w.q[p * n..(p + 1) * n]) {
                *o += av * wv as i32;
            }
        }
    }
    let s = a.scale.as_f64() * w.scale.as_f64();
    Tensor::new(
        vec![b, n],
        acc.into_iter().map(|v| T::lit(v as f64 * s)).collect(),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReferencePrecision {
    Int8,
    /// Fallback: unquantized float copy.
    Float32,
}

#[derive(Debug, Clone)]
#[allow(clippy::large_enum_variant)]
enum RefLayer<T> {
    Int8Dense {
        weight: QuantizedTensor<T>,
        bias: Tensor<T>,
    },
    Float(Layer<T>),
}

#[derive(Debug, Clone)]
pub struct RefModule<T> {
    name: String,
    layers: Vec<RefLayer<T>>,
}

impl<T: Scalar> RefModule<T> {
    pub fn name(&self) -> &str {
        &self.name
    }

    fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut h = x.clone();
        for l in &self.layers {
            h = match l {
                RefLayer::Int8Dense { weight, bias } => {
                    if h.rank() != 2 || h.shape()[1] != weight.shape[0] {
                        return Err(Error::shape(
                            format!("reference module {}", self.name),
                            &[h.batch(), weight.shape[0]],
                            h.shape(),
                        ));
                    }
                    let xq = quantize_tensor(&h)?;
                    let mut y = int8_gemm(&xq, weight)?;
                    let n = bias.len();
                    for row in y.data_mut().chunks_mut(n) {
                        for (v, &bv) in row.iter_mut().zip(bias.data()) {
                            *v += bv;
                        }
                    }
                    y
                }
                RefLayer::Float(layer) => layer.infer(&h)?,
            };
        }
        Ok(h)
    }
}

/// An inference-only, structurally identical copy of a training model.
#[derive(Debug, Clone)]
pub struct ReferenceModel<T> {
    modules: Vec<RefModule<T>>,
    input_shape: Vec<usize>,
    precision: ReferencePrecision,
    quantized: Vec<(String, QuantizedTensor<T>)>,
    pub snapshot_iteration: u64,
    pub version: u64,
}

impl<T: Scalar> ReferenceModel<T> {
    pub fn modules(&self) -> &[RefModule<T>] {
        &self.modules
    }

    pub fn num_modules(&self) -> usize {
        self.modules.len()
    }

    pub fn precision(&self) -> ReferencePrecision {
        self.precision
    }

    /// Quantized parameter tensors by name (empty for the float fallback).
    pub fn quantized_parameters(&self) -> &[(String, QuantizedTensor<T>)] {
        &self.quantized
    }

    /// Output of module `upto_module` for `batch`.
    pub fn forward(&self, batch: &Tensor<T>, upto_module: usize) -> Result<Tensor<T>> {
        if upto_module >= self.modules.len() {
            return Err(Error::invalid(format!(
                "module {upto_module} out of range for {} modules",
                self.modules.len()
            )));
        }
        if batch.rank() != self.input_shape.len() + 1 || batch.shape()[1..] != self.input_shape[..]
        {
            let mut expected = vec![batch.batch()];
            expected.extend_from_slice(&self.input_shape);
            return Err(Error::shape("reference input", &expected, batch.shape()));
        }
        let mut h = batch.clone();
        for m in &self.modules[..=upto_module] {
            h = m.infer(&h)?;
        }
        Ok(h)
    }
}

pub fn reference_forward<T: Scalar>(
    reference: &ReferenceModel<T>,
    batch: &Tensor<T>,
    upto_module: usize,
) -> Result<Tensor<T>> {
    reference.forward(batch, upto_module)
}

/// Produces successive reference models, numbering them 1, 2, ….
#[derive(Debug, Clone)]
pub struct ReferenceGenerator {
    precision: ReferencePrecision,
    version: u64,
}

impl ReferenceGenerator {
    pub fn new(precision: ReferencePrecision) -> Self {
        ReferenceGenerator {
            precision,
            version: 0,
        }
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    /// Copies every weight of `model`, quantizing each parameter tensor. Batchnorm
    /// running statistics stay in float and every layer runs in inference mode.
    pub fn snapshot<T: Scalar>(
        &mut self,
        model: &Model<T>,
        iteration: u64,
    ) -> Result<ReferenceModel<T>> {
        let mut quantized = Vec::new();
        let mut modules = Vec::with_capacity(model.num_modules());
        for m in model.modules() {
            let mut layers = Vec::with_capacity(m.layers().len());
            for layer in m.layers() {
                let mut copy = layer.snapshot();
                copy.set_mode(Mode::Inference);
                if self.precision == ReferencePrecision::Float32 {
                    layers.push(RefLayer::Float(copy));
                    continue;
                }
                let mut qs = Vec::new();
                for p in copy.parameters_mut() {
                    let q = quantize_tensor(p.value())?;
                    p.set_value(dequantize_tensor(&q))?;
                    qs.push((p.name.clone(), q));
                }
                let ref_layer = match layer.op() {
                    Op::Dense { .. } => RefLayer::Int8Dense {
                        weight: qs[0].1.clone(),
                        bias: dequantize_tensor(&qs[1].1),
                    },
                    _ => RefLayer::Float(copy),
                };
                quantized.extend(qs);
                layers.push(ref_layer);
            }
            modules.push(RefModule {
                name: m.name().to_string(),
                layers,
            });
        }
        self.version += 1;
        Ok(ReferenceModel {
            modules,
            input_shape: model.input_shape().to_vec(),
            precision: self.precision,
            quantized,
            snapshot_iteration: iteration,
            version: self.version,
        })
    }
}
