//! Reverse-mode contract for the primitive operations, plus the
//! central-difference oracle used to audit it.

use crate::error::{Error, Result};
use crate::tensor::{
    activation, conv2d, conv2d_backward, elementwise, sigmoid, ActivationKind, ConvKernel, Cotangent, ElementwiseKind,
    Scalar, Tensor3,
};

#[derive(Debug, Clone)]
pub enum Op<T> {
    Conv2d(ConvKernel<T>),
    Elementwise(ElementwiseKind),
    Activation(ActivationKind),
}

/// A forward execution with its inputs, ready for [`vjp`].
#[derive(Debug, Clone)]
pub struct Recorded<T> {
    pub op: Op<T>,
    pub inputs: Vec<Tensor3<T>>,
    pub output: Tensor3<T>,
}

impl<T: Scalar> Recorded<T> {
    pub fn conv2d(input: &Tensor3<T>, kernel: &ConvKernel<T>) -> Result<Self> {
        let output = conv2d(input, kernel)?;
        Ok(Recorded {
            op: Op::Conv2d(kernel.clone()),
            inputs: vec![input.clone()],
            output,
        })
    }

    pub fn elementwise(kind: ElementwiseKind, a: &Tensor3<T>, b: &Tensor3<T>) -> Result<Self> {
        let output = elementwise(kind, a, b)?;
        Ok(Recorded {
            op: Op::Elementwise(kind),
            inputs: vec![a.clone(), b.clone()],
            output,
        })
    }

    pub fn activation(kind: ActivationKind, x: &Tensor3<T>) -> Self {
        Recorded {
            op: Op::Activation(kind),
            inputs: vec![x.clone()],
            output: activation(kind, x),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Cotangents<T> {
    pub inputs: Vec<Cotangent<T>>,
    /// Present for convolutions: weight and bias cotangents.
    pub kernel: Option<ConvKernel<T>>,
}

pub fn vjp<T: Scalar>(rec: &Recorded<T>, out: &Cotangent<T>) -> Result<Cotangents<T>> {
    if out.shape() != rec.output.shape() {
        return Err(Error::ShapeMismatch {
            expected: rec.output.shape(),
            actual: out.shape(),
        });
    }
    Ok(match &rec.op {
        Op::Conv2d(kernel) => {
            let mut kg = kernel.zeros_like();
            let gi = conv2d_backward(&rec.inputs[0], kernel, out, &mut kg, true).expect("input grad requested");
            Cotangents {
                inputs: vec![gi],
                kernel: Some(kg),
            }
        }
        Op::Elementwise(kind) => {
            let (a, b) = (&rec.inputs[0], &rec.inputs[1]);
            let (ga, gb) = match kind {
                ElementwiseKind::Add => (out.clone(), out.clone()),
                ElementwiseKind::Sub => (out.clone(), out.neg()),
                ElementwiseKind::Mul => (out.zip_map(b, |g, bv| g * bv), out.zip_map(a, |g, av| g * av)),
                ElementwiseKind::Div => {
                    let ga = out.zip_map(b, |g, bv| g / bv);
                    let q = a.zip_map(b, |av, bv| av / (bv * bv));
                    (ga, out.zip_map(&q, |g, qv| -g * qv))
                }
            };
            Cotangents {
                inputs: vec![ga, gb],
                kernel: None,
            }
        }
        Op::Activation(kind) => {
            let x = &rec.inputs[0];
            let gi = match kind {
                ActivationKind::Sigmoid => out.zip_map(x, |g, v| {
                    let s = sigmoid(v);
                    g * s * (T::one() - s)
                }),
                ActivationKind::Tanh => out.zip_map(x, |g, v| {
                    let t = v.tanh();
                    g * (T::one() - t * t)
                }),
                ActivationKind::Relu => out.zip_map(x, |g, v| if v > T::zero() { g } else { T::zero() }),
            };
            Cotangents {
                inputs: vec![gi],
                kernel: None,
            }
        }
    })
}

/// Central-difference gradient `(f(x+h e_i) - f(x-h e_i)) / 2h` per element.
pub fn finite_diff_grad<T: Scalar>(mut f: impl FnMut(&Tensor3<T>) -> T, x: &Tensor3<T>, step: T) -> Result<Tensor3<T>> {
    if !(step > T::zero()) {
        return Err(Error::InvalidConfig(format!(
            "finite-difference step must be positive, got {step}"
        )));
    }
    let mut probe = x.clone();
    let mut grad = Tensor3::zeros(x.shape());
    let two = T::one() + T::one();
    for i in 0..x.len() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + step;
        let plus = f(&probe);
        probe.data_mut()[i] = orig - step;
        let minus = f(&probe);
        probe.data_mut()[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite { index: i });
        }
        grad.data_mut()[i] = (plus - minus) / (two * step);
    }
    Ok(grad)
}

/// Scalar central difference for callers that perturb state in place.
pub fn central_difference(mut f: impl FnMut(f64) -> f64, x: f64, step: f64) -> f64 {
    (f(x + step) - f(x - step)) / (2.0 * step)
}

/// `|a - b| / max(|a|, |b|, floor)`.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}
