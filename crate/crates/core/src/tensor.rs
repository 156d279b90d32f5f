//! Dense row-major tensors and the primitive differentiable operations.
//!
//! Feature maps are `(height, width, channels)` with channels fastest.
//! Every reduction accumulates in a fixed order (row-major over the
//! kernel window, ascending input channel), so identical inputs give
//! bit-identical outputs.

use std::fmt::{self, Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};
use std::str::FromStr;

use num_traits::Float;

use crate::error::{Error, Result};

/// Floating point precision of a tensor payload.
///
/// The discriminant is the on-disk dtype code.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Precision {
    F32 = 0,
    F64 = 1,
}

impl Precision {
    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(Precision::F32),
            1 => Ok(Precision::F64),
            other => Err(Error::BadDtype(other)),
        }
    }

    pub fn elem_size(self) -> usize {
        match self {
            Precision::F32 => 4,
            Precision::F64 => 8,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        }
    }
}

impl Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Precision {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => Err(format!("unknown precision `{other}` (expected f32 or f64)")),
        }
    }
}

/// Element type of every tensor: `f32` for training and inference,
/// `f64` for gradient and invertibility audits.
pub trait Scalar:
    Float + AddAssign + SubAssign + MulAssign + DivAssign + Sum + Default + Debug + Display + Send + Sync + 'static
{
    const PRECISION: Precision;

    fn of(v: f64) -> Self;
    fn as_f64(self) -> f64;
    fn write_le(self, out: &mut Vec<u8>);
    /// `bytes` must hold exactly `PRECISION.elem_size()` bytes.
    fn read_le(bytes: &[u8]) -> Self;
}

impl Scalar for f32 {
    const PRECISION: Precision = Precision::F32;

    fn of(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
}

impl Scalar for f64 {
    const PRECISION: Precision = Precision::F64;

    fn of(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape3 {
    pub h: usize,
    pub w: usize,
    pub c: usize,
}

impl Shape3 {
    pub const fn new(h: usize, w: usize, c: usize) -> Self {
        Shape3 { h, w, c }
    }

    pub fn len(&self) -> usize {
        self.h * self.w * self.c
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn with_channels(self, c: usize) -> Self {
        Shape3 { c, ..self }
    }
}

impl Display for Shape3 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {})", self.h, self.w, self.c)
    }
}

/// A `(height, width, channels)` feature map.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3<T> {
    shape: Shape3,
    data: Vec<T>,
}

/// Cotangent of a `Tensor3`: same shape, holds `dloss/dvalue`.
pub type Cotangent<T> = Tensor3<T>;

impl<T: Scalar> Tensor3<T> {
    pub fn zeros(shape: Shape3) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: Shape3, value: T) -> Self {
        Tensor3 {
            shape,
            data: vec![value; shape.len()],
        }
    }

    pub fn from_vec(shape: Shape3, data: Vec<T>) -> Result<Self> {
        if shape.h == 0 || shape.w == 0 || shape.c == 0 {
            return Err(Error::InvalidConfig(format!(
                "tensor dims must be positive, got {shape}"
            )));
        }
        if data.len() != shape.len() {
            return Err(Error::LengthMismatch {
                expected: shape.len(),
                actual: data.len(),
            });
        }
        Ok(Tensor3 { shape, data })
    }

    /// Like [`Tensor3::from_vec`] but also rejects NaN and infinities.
    pub fn from_vec_checked(shape: Shape3, data: Vec<T>) -> Result<Self> {
        let t = Self::from_vec(shape, data)?;
        t.check_finite()?;
        Ok(t)
    }

    pub fn from_fn(shape: Shape3, mut f: impl FnMut(usize, usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(shape.len());
        for y in 0..shape.h {
            for x in 0..shape.w {
                for c in 0..shape.c {
                    data.push(f(y, x, c));
                }
            }
        }
        Tensor3 { shape, data }
    }

    pub fn check_finite(&self) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            Some(index) => Err(Error::NonFinite { index }),
            None => Ok(()),
        }
    }

    pub fn shape(&self) -> Shape3 {
        self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn index(&self, y: usize, x: usize, c: usize) -> usize {
        (y * self.shape.w + x) * self.shape.c + c
    }

    pub fn at(&self, y: usize, x: usize, c: usize) -> T {
        self.data[self.index(y, x, c)]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor3 {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Pointwise combination. Panics on shape mismatch; use
    /// [`elementwise`] for the checked public operation.
    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Self {
        assert_eq!(self.shape, other.shape, "zip_map shape mismatch");
        Tensor3 {
            shape: self.shape,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        assert_eq!(self.shape, other.shape, "add_assign shape mismatch");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn sub_assign(&mut self, other: &Self) {
        assert_eq!(self.shape, other.shape, "sub_assign shape mismatch");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a -= b;
        }
    }

    pub fn scale(&self, k: T) -> Self {
        self.map(|v| v * k)
    }

    pub fn neg(&self) -> Self {
        self.map(|v| -v)
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn cast<U: Scalar>(&self) -> Tensor3<U> {
        Tensor3 {
            shape: self.shape,
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }

    /// Largest absolute elementwise difference, in f64.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }

    pub fn bit_eq(&self, other: &Self) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.as_f64().to_bits() == b.as_f64().to_bits())
    }

    /// Channel concatenation `[a | b]`.
    pub fn concat_channels(a: &Self, b: &Self) -> Result<Self> {
        if a.shape.h != b.shape.h || a.shape.w != b.shape.w {
            return Err(Error::ShapeMismatch {
                expected: a.shape.with_channels(b.shape.c),
                actual: b.shape,
            });
        }
        let shape = Shape3::new(a.shape.h, a.shape.w, a.shape.c + b.shape.c);
        let mut data = Vec::with_capacity(shape.len());
        for (ra, rb) in a.data.chunks_exact(a.shape.c).zip(b.data.chunks_exact(b.shape.c)) {
            data.extend_from_slice(ra);
            data.extend_from_slice(rb);
        }
        Ok(Tensor3 { shape, data })
    }

    /// Split into channels `[0, at)` and `[at, c)`.
    pub fn split_channels(&self, at: usize) -> Result<(Self, Self)> {
        if at == 0 || at >= self.shape.c {
            return Err(Error::InvalidConfig(format!(
                "cannot split {} channels at {at}",
                self.shape.c
            )));
        }
        let sa = self.shape.with_channels(at);
        let sb = self.shape.with_channels(self.shape.c - at);
        let mut a = Vec::with_capacity(sa.len());
        let mut b = Vec::with_capacity(sb.len());
        for row in self.data.chunks_exact(self.shape.c) {
            a.extend_from_slice(&row[..at]);
            b.extend_from_slice(&row[at..]);
        }
        Ok((Tensor3 { shape: sa, data: a }, Tensor3 { shape: sb, data: b }))
    }
}

/// A `(frames, height, width, channels)` sequence, index order `(t, y, x, c)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4<T> {
    frames: usize,
    frame_shape: Shape3,
    data: Vec<T>,
}

impl<T: Scalar> Tensor4<T> {
    pub fn zeros(frames: usize, frame_shape: Shape3) -> Self {
        Tensor4 {
            frames,
            frame_shape,
            data: vec![T::zero(); frames * frame_shape.len()],
        }
    }

    pub fn from_vec(frames: usize, frame_shape: Shape3, data: Vec<T>) -> Result<Self> {
        if frames == 0 || frame_shape.is_empty() {
            return Err(Error::InvalidConfig(format!(
                "tensor dims must be positive, got ({frames}, {frame_shape})"
            )));
        }
        let expected = frames * frame_shape.len();
        if data.len() != expected {
            return Err(Error::LengthMismatch {
                expected,
                actual: data.len(),
            });
        }
        Ok(Tensor4 {
            frames,
            frame_shape,
            data,
        })
    }

    pub fn from_frames(frames: &[Tensor3<T>]) -> Result<Self> {
        let first = frames
            .first()
            .ok_or_else(|| Error::InvalidConfig("empty frame list".into()))?;
        let shape = first.shape();
        let mut data = Vec::with_capacity(frames.len() * shape.len());
        for f in frames {
            if f.shape() != shape {
                return Err(Error::ShapeMismatch {
                    expected: shape,
                    actual: f.shape(),
                });
            }
            data.extend_from_slice(f.data());
        }
        Ok(Tensor4 {
            frames: frames.len(),
            frame_shape: shape,
            data,
        })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn frame_shape(&self) -> Shape3 {
        self.frame_shape
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.frames, self.frame_shape.h, self.frame_shape.w, self.frame_shape.c]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn frame(&self, t: usize) -> Tensor3<T> {
        let n = self.frame_shape.len();
        Tensor3 {
            shape: self.frame_shape,
            data: self.data[t * n..(t + 1) * n].to_vec(),
        }
    }

    pub fn frame_slice(&self, t: usize) -> &[T] {
        let n = self.frame_shape.len();
        &self.data[t * n..(t + 1) * n]
    }

    /// Frames `[start, end)` as a new sequence.
    pub fn window(&self, start: usize, end: usize) -> Result<Self> {
        if start >= end || end > self.frames {
            return Err(Error::InvalidConfig(format!(
                "window [{start}, {end}) out of range for {} frames",
                self.frames
            )));
        }
        let n = self.frame_shape.len();
        Ok(Tensor4 {
            frames: end - start,
            frame_shape: self.frame_shape,
            data: self.data[start * n..end * n].to_vec(),
        })
    }

    pub fn cast<U: Scalar>(&self) -> Tensor4<U> {
        Tensor4 {
            frames: self.frames,
            frame_shape: self.frame_shape,
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }
}

/// Convolution weights `(out, in, kh, kw)` plus per-output bias.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvKernel<T> {
    out_channels: usize,
    in_channels: usize,
    kh: usize,
    kw: usize,
    weights: Vec<T>,
    bias: Vec<T>,
}

impl<T: Scalar> ConvKernel<T> {
    pub fn new(
        out_channels: usize,
        in_channels: usize,
        kh: usize,
        kw: usize,
        weights: Vec<T>,
        bias: Vec<T>,
    ) -> Result<Self> {
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::EvenKernel { kh, kw });
        }
        if out_channels == 0 || in_channels == 0 {
            return Err(Error::InvalidConfig("kernel channel counts must be positive".into()));
        }
        let expected = out_channels * in_channels * kh * kw;
        if weights.len() != expected {
            return Err(Error::LengthMismatch {
                expected,
                actual: weights.len(),
            });
        }
        if bias.len() != out_channels {
            return Err(Error::LengthMismatch {
                expected: out_channels,
                actual: bias.len(),
            });
        }
        Ok(ConvKernel {
            out_channels,
            in_channels,
            kh,
            kw,
            weights,
            bias,
        })
    }

    pub fn zeros(out_channels: usize, in_channels: usize, kh: usize, kw: usize) -> Result<Self> {
        Self::new(
            out_channels,
            in_channels,
            kh,
            kw,
            vec![T::zero(); out_channels * in_channels * kh * kw],
            vec![T::zero(); out_channels],
        )
    }

    pub fn zeros_like(&self) -> Self {
        ConvKernel {
            weights: vec![T::zero(); self.weights.len()],
            bias: vec![T::zero(); self.bias.len()],
            ..*self
        }
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn kernel_size(&self) -> (usize, usize) {
        (self.kh, self.kw)
    }

    pub fn weight_dims(&self) -> [usize; 4] {
        [self.out_channels, self.in_channels, self.kh, self.kw]
    }

    pub fn fan_in(&self) -> usize {
        self.in_channels * self.kh * self.kw
    }

    pub fn weights(&self) -> &[T] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [T] {
        &mut self.weights
    }

    pub fn bias(&self) -> &[T] {
        &self.bias
    }

    pub fn bias_mut(&mut self) -> &mut [T] {
        &mut self.bias
    }

    #[inline]
    pub fn weight_index(&self, o: usize, i: usize, ky: usize, kx: usize) -> usize {
        ((o * self.in_channels + i) * self.kh + ky) * self.kw + kx
    }

    pub fn weight(&self, o: usize, i: usize, ky: usize, kx: usize) -> T {
        self.weights[self.weight_index(o, i, ky, kx)]
    }

    pub fn add_assign(&mut self, other: &Self) {
        assert_eq!(self.weight_dims(), other.weight_dims());
        for (a, &b) in self.weights.iter_mut().zip(&other.weights) {
            *a += b;
        }
        for (a, &b) in self.bias.iter_mut().zip(&other.bias) {
            *a += b;
        }
    }

    pub fn cast<U: Scalar>(&self) -> ConvKernel<U> {
        ConvKernel {
            out_channels: self.out_channels,
            in_channels: self.in_channels,
            kh: self.kh,
            kw: self.kw,
            weights: self.weights.iter().map(|v| U::of(v.as_f64())).collect(),
            bias: self.bias.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }

    /// Weights rearranged to `(ky, kx, in, out)` so the output channel
    /// is the contiguous inner axis.
    fn transposed(&self) -> Vec<T> {
        let (o_n, i_n) = (self.out_channels, self.in_channels);
        let mut wt = vec![T::zero(); self.weights.len()];
        for o in 0..o_n {
            for i in 0..i_n {
                for ky in 0..self.kh {
                    for kx in 0..self.kw {
                        wt[((ky * self.kw + kx) * i_n + i) * o_n + o] = self.weight(o, i, ky, kx);
                    }
                }
            }
        }
        wt
    }
}

#[inline]
fn tap(pos: usize, k: usize, pad: usize, limit: usize) -> Option<usize> {
    let p = pos + k;
    if p < pad || p - pad >= limit {
        None
    } else {
        Some(p - pad)
    }
}

/// Stride-1, same-padded (zero pad `(k-1)/2`) 2-D convolution.
pub fn conv2d<T: Scalar>(input: &Tensor3<T>, kernel: &ConvKernel<T>) -> Result<Tensor3<T>> {
    let s = input.shape();
    if s.c != kernel.in_channels {
        return Err(Error::ChannelMismatch {
            expected: kernel.in_channels,
            actual: s.c,
        });
    }
    let (kh, kw) = (kernel.kh, kernel.kw);
    let (py, px) = (kh / 2, kw / 2);
    let (cin, cout) = (s.c, kernel.out_channels);
    let wt = kernel.transposed();
    let out_shape = s.with_channels(cout);
    let mut out = Vec::with_capacity(out_shape.len());
    for _ in 0..s.h * s.w {
        out.extend_from_slice(&kernel.bias);
    }
    let inp = input.data();
    for y in 0..s.h {
        for x in 0..s.w {
            let o = &mut out[(y * s.w + x) * cout..][..cout];
            for ky in 0..kh {
                let Some(iy) = tap(y, ky, py, s.h) else { continue };
                for kx in 0..kw {
                    let Some(ix) = tap(x, kx, px, s.w) else { continue };
                    let irow = &inp[(iy * s.w + ix) * cin..][..cin];
                    let wbase = (ky * kw + kx) * cin * cout;
                    for (ci, &v) in irow.iter().enumerate() {
                        let wrow = &wt[wbase + ci * cout..][..cout];
                        for (acc, &wv) in o.iter_mut().zip(wrow) {
                            *acc += v * wv;
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor3 {
        shape: out_shape,
        data: out,
    })
}

/// Reverse-mode rule for [`conv2d`].
///
/// Accumulates weight and bias cotangents into `kernel_grad` and returns the
/// input cotangent when `want_input` is set.
pub fn conv2d_backward<T: Scalar>(
    input: &Tensor3<T>,
    kernel: &ConvKernel<T>,
    out_grad: &Tensor3<T>,
    kernel_grad: &mut ConvKernel<T>,
    want_input: bool,
) -> Option<Tensor3<T>> {
    let s = input.shape();
    assert_eq!(out_grad.shape(), s.with_channels(kernel.out_channels));
    assert_eq!(kernel_grad.weight_dims(), kernel.weight_dims());
    let (kh, kw) = (kernel.kh, kernel.kw);
    let (py, px) = (kh / 2, kw / 2);
    let (cin, cout) = (s.c, kernel.out_channels);
    let wt = kernel.transposed();
    let mut gwt = vec![T::zero(); wt.len()];
    let mut gin = if want_input {
        vec![T::zero(); s.len()]
    } else {
        Vec::new()
    };
    let inp = input.data();
    let g = out_grad.data();
    for y in 0..s.h {
        for x in 0..s.w {
            let grow = &g[(y * s.w + x) * cout..][..cout];
            for (b, &gv) in kernel_grad.bias.iter_mut().zip(grow) {
                *b += gv;
            }
            for ky in 0..kh {
                let Some(iy) = tap(y, ky, py, s.h) else { continue };
                for kx in 0..kw {
                    let Some(ix) = tap(x, kx, px, s.w) else { continue };
                    let ibase = (iy * s.w + ix) * cin;
                    let wbase = (ky * kw + kx) * cin * cout;
                    for ci in 0..cin {
                        let v = inp[ibase + ci];
                        let wrow = &wt[wbase + ci * cout..][..cout];
                        let gwrow = &mut gwt[wbase + ci * cout..][..cout];
                        let mut acc = T::zero();
                        for ((gw, &wv), &gv) in gwrow.iter_mut().zip(wrow).zip(grow) {
                            *gw += v * gv;
                            acc += wv * gv;
                        }
                        if want_input {
                            gin[ibase + ci] += acc;
                        }
                    }
                }
            }
        }
    }
    for o in 0..cout {
        for i in 0..cin {
            for ky in 0..kh {
                for kx in 0..kw {
                    let idx = kernel.weight_index(o, i, ky, kx);
                    kernel_grad.weights[idx] += gwt[((ky * kw + kx) * cin + i) * cout + o];
                }
            }
        }
    }
    want_input.then(|| Tensor3 { shape: s, data: gin })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElementwiseKind {
    Add,
    Sub,
    Mul,
    Div,
}

pub fn elementwise<T: Scalar>(kind: ElementwiseKind, a: &Tensor3<T>, b: &Tensor3<T>) -> Result<Tensor3<T>> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            expected: a.shape(),
            actual: b.shape(),
        });
    }
    Ok(match kind {
        ElementwiseKind::Add => a.zip_map(b, |x, y| x + y),
        ElementwiseKind::Sub => a.zip_map(b, |x, y| x - y),
        ElementwiseKind::Mul => a.zip_map(b, |x, y| x * y),
        ElementwiseKind::Div => {
            if let Some(index) = b.data().iter().position(|v| v.is_zero()) {
                return Err(Error::DivisionByZero { index });
            }
            a.zip_map(b, |x, y| x / y)
        }
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActivationKind {
    Sigmoid,
    Relu,
    Tanh,
}

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
pub fn relu<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        x
    } else {
        T::zero()
    }
}

pub fn activation<T: Scalar>(kind: ActivationKind, x: &Tensor3<T>) -> Tensor3<T> {
    match kind {
        ActivationKind::Sigmoid => x.map(sigmoid),
        ActivationKind::Relu => x.map(relu),
        ActivationKind::Tanh => x.map(|v| v.tanh()),
    }
}

/// Checked-mode activation: rejects non-finite input.
pub fn activation_checked<T: Scalar>(kind: ActivationKind, x: &Tensor3<T>) -> Result<Tensor3<T>> {
    x.check_finite()?;
    Ok(activation(kind, x))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(shape: Shape3, rng: &mut ChaCha8Rng) -> Tensor3<f64> {
        Tensor3::from_fn(shape, |_, _, _| rng.gen_range(-1.0..1.0))
    }

    fn random_kernel(o: usize, i: usize, k: usize, rng: &mut ChaCha8Rng) -> ConvKernel<f64> {
        let w = (0..o * i * k * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b = (0..o).map(|_| rng.gen_range(-1.0..1.0)).collect();
        ConvKernel::new(o, i, k, k, w, b).unwrap()
    }

    /// Straight loop nest over output sites, independent of the transposed
    /// weight layout used by `conv2d`.
    fn naive_conv(input: &Tensor3<f64>, k: &ConvKernel<f64>) -> Tensor3<f64> {
        let s = input.shape();
        let (kh, kw) = k.kernel_size();
        let mut out = Tensor3::zeros(s.with_channels(k.out_channels()));
        for o in 0..k.out_channels() {
            for y in 0..s.h as isize {
                for x in 0..s.w as isize {
                    let mut acc = k.bias()[o];
                    for i in 0..k.in_channels() {
                        for ky in 0..kh as isize {
                            for kx in 0..kw as isize {
                                let iy = y + ky - (kh as isize - 1) / 2;
                                let ix = x + kx - (kw as isize - 1) / 2;
                                if iy < 0 || ix < 0 || iy >= s.h as isize || ix >= s.w as isize {
                                    continue;
                                }
                                acc += k.weight(o, i, ky as usize, kx as usize) * input.at(iy as usize, ix as usize, i);
                            }
                        }
                    }
                    let idx = out.index(y as usize, x as usize, o);
                    out.data_mut()[idx] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn conv_scalar_definition() {
        let x = Tensor3::from_vec(Shape3::new(1, 1, 1), vec![3.0f64]).unwrap();
        let k = ConvKernel::new(1, 1, 1, 1, vec![2.0], vec![0.5]).unwrap();
        assert_eq!(conv2d(&x, &k).unwrap().data(), &[6.5]);
    }

    #[test]
    fn conv_zero_padded_window_counts() {
        let x = Tensor3::full(Shape3::new(3, 3, 1), 1.0f32);
        let k = ConvKernel::new(1, 1, 3, 3, vec![1.0; 9], vec![0.0]).unwrap();
        let y = conv2d(&x, &k).unwrap();
        assert_eq!(y.at(1, 1, 0), 9.0);
        for (cy, cx) in [(0, 0), (0, 2), (2, 0), (2, 2)] {
            assert_eq!(y.at(cy, cx, 0), 4.0);
        }
        assert_eq!(y.at(0, 1, 0), 6.0);
    }

    #[test]
    fn conv_matches_loop_nest_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for (shape, cout) in [(Shape3::new(5, 5, 2), 3), (Shape3::new(7, 7, 3), 2)] {
            for _ in 0..5 {
                let x = random_tensor(shape, &mut rng);
                let k = random_kernel(cout, shape.c, 3, &mut rng);
                let got = conv2d(&x, &k).unwrap();
                let want = naive_conv(&x, &k);
                assert!(got.max_abs_diff(&want) <= 1e-6);
            }
        }
    }

    #[test]
    fn conv_rejects_bad_inputs() {
        assert!(matches!(
            ConvKernel::<f32>::zeros(1, 1, 2, 3),
            Err(Error::EvenKernel { kh: 2, kw: 3 })
        ));
        let x = Tensor3::<f32>::zeros(Shape3::new(2, 2, 3));
        let k = ConvKernel::<f32>::zeros(1, 2, 3, 3).unwrap();
        assert!(matches!(
            conv2d(&x, &k),
            Err(Error::ChannelMismatch { expected: 2, actual: 3 })
        ));
    }

    #[test]
    fn elementwise_cases() {
        let a = Tensor3::from_vec(Shape3::new(1, 2, 1), vec![2.0f32, 3.0]).unwrap();
        let b = Tensor3::from_vec(Shape3::new(1, 2, 1), vec![4.0f32, 5.0]).unwrap();
        assert_eq!(elementwise(ElementwiseKind::Mul, &a, &b).unwrap().data(), &[8.0, 15.0]);
        let z = Tensor3::zeros(a.shape());
        assert!(elementwise(ElementwiseKind::Add, &a, &z).unwrap().bit_eq(&a));
        assert!(matches!(
            elementwise(ElementwiseKind::Div, &a, &z),
            Err(Error::DivisionByZero { index: 0 })
        ));
        let c = Tensor3::<f32>::zeros(Shape3::new(2, 1, 1));
        assert!(matches!(
            elementwise(ElementwiseKind::Add, &a, &c),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn div_undoes_mul_within_one_ulp() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10 {
            let shape = Shape3::new(4, 4, 2);
            let x = Tensor3::<f32>::from_fn(shape, |_, _, _| rng.gen_range(-4.0..4.0));
            let b = Tensor3::<f32>::from_fn(shape, |_, _, _| {
                let m: f32 = rng.gen_range(0.25..4.0);
                if rng.gen::<bool>() {
                    m
                } else {
                    -m
                }
            });
            let prod = elementwise(ElementwiseKind::Mul, &x, &b).unwrap();
            let back = elementwise(ElementwiseKind::Div, &prod, &b).unwrap();
            for (&r, &orig) in back.data().iter().zip(x.data()) {
                let ulp = f32::from_bits(orig.abs().to_bits() + 1) - orig.abs();
                assert!((r - orig).abs() <= ulp, "{r} vs {orig}");
            }
        }
    }

    #[test]
    fn activation_definitions() {
        let x = Tensor3::from_vec(Shape3::new(1, 3, 1), vec![0.0f64, -1.5, 2.0]).unwrap();
        assert_eq!(activation(ActivationKind::Sigmoid, &x).at(0, 0, 0), 0.5);
        let r = activation(ActivationKind::Relu, &x);
        assert_eq!(r.data(), &[0.0, 0.0, 2.0]);
        let bad = Tensor3::from_vec(Shape3::new(1, 1, 1), vec![f64::NAN]).unwrap();
        assert!(activation_checked(ActivationKind::Tanh, &bad).is_err());
        assert!(Tensor3::from_vec_checked(Shape3::new(1, 1, 1), vec![f32::INFINITY]).is_err());
    }

    /// tanh through exp of the doubled argument, evaluated in f64 and
    /// compared against the f32 library result.
    #[test]
    fn tanh_matches_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let pts: Vec<f32> = (0..20).map(|_| rng.gen_range(-6.0..6.0)).collect();
        let x = Tensor3::from_vec(Shape3::new(1, 20, 1), pts.clone()).unwrap();
        let y = activation(ActivationKind::Tanh, &x);
        for (&p, &v) in pts.iter().zip(y.data()) {
            let e = (2.0 * p as f64).exp();
            let reference = (e - 1.0) / (e + 1.0);
            assert!((v as f64 - reference).abs() <= 1e-6);
        }
    }

    #[test]
    fn split_and_concat_are_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_tensor(Shape3::new(3, 2, 6), &mut rng);
        let (a, b) = x.split_channels(2).unwrap();
        assert_eq!(a.shape().c, 2);
        assert_eq!(b.shape().c, 4);
        assert!(Tensor3::concat_channels(&a, &b).unwrap().bit_eq(&x));
    }
}
