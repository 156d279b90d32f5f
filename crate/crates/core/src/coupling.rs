//! Additive coupling blocks and pixel shuffle, the exactly invertible
//! building blocks of the autoencoder.
//!
//! A coupling block maps `(x1, x2)` to
//!
//! ```text
//! y2 = x2 + F1(x1)
//! y1 = x1 + F2(y2)
//! ```
//!
//! and is undone by `x1 = y1 - F2(y2)`, `x2 = y2 - F1(x1)`, whatever `F`
//! is. Both directions evaluate `F1` at `x1` and `F2` at `y2`, so they
//! produce the same [`CouplingCache`].

use crate::error::{Error, Result};
use crate::params::{join, Initializer, KernelSet};
use crate::tensor::{conv2d, conv2d_backward, relu, ConvKernel, Scalar, Shape3, Tensor3};

/// The two channel groups threaded through coupling blocks and RPMs.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitPair<T> {
    pub g1: Tensor3<T>,
    pub g2: Tensor3<T>,
}

impl<T: Scalar> SplitPair<T> {
    pub fn new(g1: Tensor3<T>, g2: Tensor3<T>) -> Result<Self> {
        if g1.shape() != g2.shape() {
            return Err(Error::ShapeMismatch {
                expected: g1.shape(),
                actual: g2.shape(),
            });
        }
        Ok(SplitPair { g1, g2 })
    }

    pub fn zeros(group: Shape3) -> Self {
        SplitPair {
            g1: Tensor3::zeros(group),
            g2: Tensor3::zeros(group),
        }
    }

    /// Lower half of the channels becomes `g1`, upper half `g2`.
    pub fn split(x: &Tensor3<T>) -> Result<Self> {
        let c = x.shape().c;
        if c % 2 != 0 {
            return Err(Error::NotDivisible {
                what: "channel count",
                value: c,
                factor: 2,
            });
        }
        let (g1, g2) = x.split_channels(c / 2)?;
        Ok(SplitPair { g1, g2 })
    }

    pub fn merge(&self) -> Tensor3<T> {
        Tensor3::concat_channels(&self.g1, &self.g2).expect("pair groups share spatial dims")
    }

    pub fn group_shape(&self) -> Shape3 {
        self.g1.shape()
    }

    pub fn len(&self) -> usize {
        self.g1.len() + self.g2.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn swapped(self) -> Self {
        SplitPair {
            g1: self.g2,
            g2: self.g1,
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        self.g1.add_assign(&other.g1);
        self.g2.add_assign(&other.g2);
    }

    pub fn scale(&self, k: T) -> Self {
        SplitPair {
            g1: self.g1.scale(k),
            g2: self.g2.scale(k),
        }
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.g1.max_abs_diff(&other.g1).max(self.g2.max_abs_diff(&other.g2))
    }

    pub fn bit_eq(&self, other: &Self) -> bool {
        self.g1.bit_eq(&other.g1) && self.g2.bit_eq(&other.g2)
    }

    pub fn cast<U: Scalar>(&self) -> SplitPair<U> {
        SplitPair {
            g1: self.g1.cast(),
            g2: self.g2.cast(),
        }
    }
}

/// Space-to-depth: `(H, W, C) -> (H/n, W/n, C*n^2)`.
///
/// Input element `(i, j, c)` lands at `(i / n, j / n, c*n^2 + (i % n)*n + j % n)`.
pub fn pixel_shuffle_down<T: Scalar>(x: &Tensor3<T>, n: usize) -> Result<Tensor3<T>> {
    let s = x.shape();
    if n == 0 {
        return Err(Error::InvalidConfig("shuffle factor must be positive".into()));
    }
    for (what, value) in [("height", s.h), ("width", s.w)] {
        if value % n != 0 {
            return Err(Error::NotDivisible { what, value, factor: n });
        }
    }
    let os = Shape3::new(s.h / n, s.w / n, s.c * n * n);
    let mut out = Tensor3::zeros(os);
    let src = x.data();
    let dst = out.data_mut();
    for i in 0..s.h {
        for j in 0..s.w {
            let sub = (i % n) * n + j % n;
            let obase = ((i / n) * os.w + j / n) * os.c;
            let ibase = (i * s.w + j) * s.c;
            for c in 0..s.c {
                dst[obase + c * n * n + sub] = src[ibase + c];
            }
        }
    }
    Ok(out)
}

/// Depth-to-space, the exact inverse permutation of [`pixel_shuffle_down`].
pub fn pixel_shuffle_up<T: Scalar>(x: &Tensor3<T>, n: usize) -> Result<Tensor3<T>> {
    let s = x.shape();
    if n == 0 {
        return Err(Error::InvalidConfig("shuffle factor must be positive".into()));
    }
    if s.c % (n * n) != 0 {
        return Err(Error::NotDivisible {
            what: "channel count",
            value: s.c,
            factor: n * n,
        });
    }
    let os = Shape3::new(s.h * n, s.w * n, s.c / (n * n));
    let mut out = Tensor3::zeros(os);
    let src = x.data();
    let dst = out.data_mut();
    for i in 0..os.h {
        for j in 0..os.w {
            let sub = (i % n) * n + j % n;
            let ibase = ((i / n) * s.w + j / n) * s.c;
            let obase = (i * os.w + j) * os.c;
            for c in 0..os.c {
                dst[obase + c] = src[ibase + c * n * n + sub];
            }
        }
    }
    Ok(out)
}

/// `F = conv_b . relu . conv_a`, mapping a group onto its own shape.
#[derive(Debug, Clone, PartialEq)]
pub struct FOperatorParams<T> {
    pub conv_a: ConvKernel<T>,
    pub conv_b: ConvKernel<T>,
}

impl<T: Scalar> FOperatorParams<T> {
    pub fn new(conv_a: ConvKernel<T>, conv_b: ConvKernel<T>) -> Result<Self> {
        if conv_a.out_channels() != conv_b.in_channels() || conv_b.out_channels() != conv_a.in_channels() {
            return Err(Error::InvalidConfig(format!(
                "F operator convs do not chain: {:?} then {:?}",
                conv_a.weight_dims(),
                conv_b.weight_dims()
            )));
        }
        Ok(FOperatorParams { conv_a, conv_b })
    }

    pub fn init(group_channels: usize, hidden: usize, kernel: usize, init: &mut Initializer) -> Result<Self> {
        Self::new(
            init.kernel(hidden, group_channels, kernel)?,
            init.kernel(group_channels, hidden, kernel)?,
        )
    }

    pub fn zeros_like(&self) -> Self {
        FOperatorParams {
            conv_a: self.conv_a.zeros_like(),
            conv_b: self.conv_b.zeros_like(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> FOperatorParams<U> {
        FOperatorParams {
            conv_a: self.conv_a.cast(),
            conv_b: self.conv_b.cast(),
        }
    }
}

impl<T: Scalar> KernelSet<T> for FOperatorParams<T> {
    fn kernels<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a ConvKernel<T>)>) {
        out.push((join(prefix, "conv_a"), &self.conv_a));
        out.push((join(prefix, "conv_b"), &self.conv_b));
    }

    fn kernels_mut<'a>(&'a mut self, out: &mut Vec<&'a mut ConvKernel<T>>) {
        out.push(&mut self.conv_a);
        out.push(&mut self.conv_b);
    }
}

/// Input and pre-activation hidden map of one `F` evaluation.
#[derive(Debug, Clone)]
pub struct FCache<T> {
    pub input: Tensor3<T>,
    pub hidden_pre: Tensor3<T>,
}

impl<T: Scalar> FCache<T> {
    pub fn elems(&self) -> usize {
        self.input.len() + self.hidden_pre.len()
    }
}

pub fn f_apply<T: Scalar>(params: &FOperatorParams<T>, x: &Tensor3<T>) -> Result<Tensor3<T>> {
    Ok(f_forward_cached(params, x)?.0)
}

pub fn f_forward_cached<T: Scalar>(params: &FOperatorParams<T>, x: &Tensor3<T>) -> Result<(Tensor3<T>, FCache<T>)> {
    let hidden_pre = conv2d(x, &params.conv_a)?;
    let out = conv2d(&hidden_pre.map(relu), &params.conv_b)?;
    Ok((
        out,
        FCache {
            input: x.clone(),
            hidden_pre,
        },
    ))
}

/// Returns the input cotangent; parameter cotangents accumulate into `grads`.
pub fn f_backward<T: Scalar>(
    params: &FOperatorParams<T>,
    cache: &FCache<T>,
    out_grad: &Tensor3<T>,
    grads: &mut FOperatorParams<T>,
) -> Tensor3<T> {
    let hidden = cache.hidden_pre.map(relu);
    let g_hidden = conv2d_backward(&hidden, &params.conv_b, out_grad, &mut grads.conv_b, true).expect("requested");
    let g_pre = g_hidden.zip_map(&cache.hidden_pre, |g, a| if a > T::zero() { g } else { T::zero() });
    conv2d_backward(&cache.input, &params.conv_a, &g_pre, &mut grads.conv_a, true).expect("requested")
}

#[derive(Debug, Clone, PartialEq)]
pub struct CouplingParams<T> {
    pub f1: FOperatorParams<T>,
    pub f2: FOperatorParams<T>,
}

impl<T: Scalar> CouplingParams<T> {
    pub fn init(group_channels: usize, hidden: usize, kernel: usize, init: &mut Initializer) -> Result<Self> {
        Ok(CouplingParams {
            f1: FOperatorParams::init(group_channels, hidden, kernel, init)?,
            f2: FOperatorParams::init(group_channels, hidden, kernel, init)?,
        })
    }

    pub fn group_channels(&self) -> usize {
        self.f1.conv_a.in_channels()
    }

    pub fn zeros_like(&self) -> Self {
        CouplingParams {
            f1: self.f1.zeros_like(),
            f2: self.f2.zeros_like(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> CouplingParams<U> {
        CouplingParams {
            f1: self.f1.cast(),
            f2: self.f2.cast(),
        }
    }
}

impl<T: Scalar> KernelSet<T> for CouplingParams<T> {
    fn kernels<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a ConvKernel<T>)>) {
        self.f1.kernels(&join(prefix, "f1"), out);
        self.f2.kernels(&join(prefix, "f2"), out);
    }

    fn kernels_mut<'a>(&'a mut self, out: &mut Vec<&'a mut ConvKernel<T>>) {
        self.f1.kernels_mut(out);
        self.f2.kernels_mut(out);
    }
}

/// `F1` evaluated at `x1` and `F2` evaluated at `y2`.
#[derive(Debug, Clone)]
pub struct CouplingCache<T> {
    pub f1: FCache<T>,
    pub f2: FCache<T>,
}

impl<T: Scalar> CouplingCache<T> {
    pub fn elems(&self) -> usize {
        self.f1.elems() + self.f2.elems()
    }
}

fn check_pair<T: Scalar>(pair: &SplitPair<T>, params: &CouplingParams<T>) -> Result<()> {
    if pair.g1.shape() != pair.g2.shape() {
        return Err(Error::ShapeMismatch {
            expected: pair.g1.shape(),
            actual: pair.g2.shape(),
        });
    }
    let c = params.group_channels();
    if pair.g1.shape().c != c {
        return Err(Error::ShapeMismatch {
            expected: pair.g1.shape().with_channels(c),
            actual: pair.g1.shape(),
        });
    }
    Ok(())
}

pub fn coupling_forward<T: Scalar>(pair: &SplitPair<T>, params: &CouplingParams<T>) -> Result<SplitPair<T>> {
    Ok(coupling_forward_cached(pair, params)?.0)
}

pub fn coupling_forward_cached<T: Scalar>(
    pair: &SplitPair<T>,
    params: &CouplingParams<T>,
) -> Result<(SplitPair<T>, CouplingCache<T>)> {
    check_pair(pair, params)?;
    let (f1, c1) = f_forward_cached(&params.f1, &pair.g1)?;
    let mut y2 = pair.g2.clone();
    y2.add_assign(&f1);
    let (f2, c2) = f_forward_cached(&params.f2, &y2)?;
    let mut y1 = pair.g1.clone();
    y1.add_assign(&f2);
    Ok((SplitPair { g1: y1, g2: y2 }, CouplingCache { f1: c1, f2: c2 }))
}

pub fn coupling_inverse<T: Scalar>(pair_out: &SplitPair<T>, params: &CouplingParams<T>) -> Result<SplitPair<T>> {
    Ok(coupling_inverse_cached(pair_out, params)?.0)
}

pub fn coupling_inverse_cached<T: Scalar>(
    pair_out: &SplitPair<T>,
    params: &CouplingParams<T>,
) -> Result<(SplitPair<T>, CouplingCache<T>)> {
    check_pair(pair_out, params)?;
    let (f2, c2) = f_forward_cached(&params.f2, &pair_out.g2)?;
    let mut x1 = pair_out.g1.clone();
    x1.sub_assign(&f2);
    let (f1, c1) = f_forward_cached(&params.f1, &x1)?;
    let mut x2 = pair_out.g2.clone();
    x2.sub_assign(&f1);
    Ok((SplitPair { g1: x1, g2: x2 }, CouplingCache { f1: c1, f2: c2 }))
}

/// Cotangent through the forward map: output grads in, input grads out.
pub fn coupling_backward<T: Scalar>(
    params: &CouplingParams<T>,
    cache: &CouplingCache<T>,
    out_grad: &SplitPair<T>,
    grads: &mut CouplingParams<T>,
) -> SplitPair<T> {
    let mut g_y2 = out_grad.g2.clone();
    g_y2.add_assign(&f_backward(&params.f2, &cache.f2, &out_grad.g1, &mut grads.f2));
    let mut g_x1 = out_grad.g1.clone();
    g_x1.add_assign(&f_backward(&params.f1, &cache.f1, &g_y2, &mut grads.f1));
    SplitPair { g1: g_x1, g2: g_y2 }
}

/// Cotangent through the inverse map: grads of the recovered `(x1, x2)` in,
/// grads of the block output `(y1, y2)` out.
pub fn coupling_inverse_backward<T: Scalar>(
    params: &CouplingParams<T>,
    cache: &CouplingCache<T>,
    in_grad: &SplitPair<T>,
    grads: &mut CouplingParams<T>,
) -> SplitPair<T> {
    let mut g_x1 = in_grad.g1.clone();
    g_x1.add_assign(&f_backward(&params.f1, &cache.f1, &in_grad.g2.neg(), &mut grads.f1));
    let mut g_y2 = in_grad.g2.clone();
    g_y2.add_assign(&f_backward(&params.f2, &cache.f2, &g_x1.neg(), &mut grads.f2));
    SplitPair { g1: g_x1, g2: g_y2 }
}

// Blocks with `swapped` set run the same equations with the roles of the
// two groups exchanged, which gives the alternating stack.

pub fn block_forward_cached<T: Scalar>(
    pair: &SplitPair<T>,
    params: &CouplingParams<T>,
    swapped: bool,
) -> Result<(SplitPair<T>, CouplingCache<T>)> {
    if swapped {
        let (y, c) = coupling_forward_cached(&pair.clone().swapped(), params)?;
        Ok((y.swapped(), c))
    } else {
        coupling_forward_cached(pair, params)
    }
}

pub fn block_inverse_cached<T: Scalar>(
    pair_out: &SplitPair<T>,
    params: &CouplingParams<T>,
    swapped: bool,
) -> Result<(SplitPair<T>, CouplingCache<T>)> {
    if swapped {
        let (x, c) = coupling_inverse_cached(&pair_out.clone().swapped(), params)?;
        Ok((x.swapped(), c))
    } else {
        coupling_inverse_cached(pair_out, params)
    }
}

pub fn block_backward<T: Scalar>(
    params: &CouplingParams<T>,
    cache: &CouplingCache<T>,
    out_grad: &SplitPair<T>,
    grads: &mut CouplingParams<T>,
    swapped: bool,
) -> SplitPair<T> {
    if swapped {
        coupling_backward(params, cache, &out_grad.clone().swapped(), grads).swapped()
    } else {
        coupling_backward(params, cache, out_grad, grads)
    }
}

pub fn block_inverse_backward<T: Scalar>(
    params: &CouplingParams<T>,
    cache: &CouplingCache<T>,
    in_grad: &SplitPair<T>,
    grads: &mut CouplingParams<T>,
    swapped: bool,
) -> SplitPair<T> {
    if swapped {
        coupling_inverse_backward(params, cache, &in_grad.clone().swapped(), grads).swapped()
    } else {
        coupling_inverse_backward(params, cache, in_grad, grads)
    }
}
