//! Peephole-free ConvLSTM cell.
//!
//! ```text
//! i  = sigmoid(Wxi * x + Whi * h + b_i)
//! f  = sigmoid(Wxf * x + Whf * h + b_f)
//! o  = sigmoid(Wxo * x + Who * h + b_o)
//! c~ = tanh(Wxc * x + Whc * h + b_c)
//! c' = f . c + i . c~
//! h' = o . tanh(c')
//! ```

use crate::error::{Error, Result};
use crate::params::{join, Initializer, KernelSet};
use crate::tensor::{conv2d, conv2d_backward, sigmoid, ConvKernel, Scalar, Shape3, Tensor3};

pub const GATE_NAMES: [&str; 4] = ["i", "f", "o", "c"];
const FORGET: usize = 1;

/// Input-to-gate and hidden-to-gate kernels for gates `i, f, o, c~`, in that order.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLstmParams<T> {
    pub input: [ConvKernel<T>; 4],
    pub hidden: [ConvKernel<T>; 4],
}

impl<T: Scalar> ConvLstmParams<T> {
    /// Hidden channels equal input channels. Forget-gate bias starts at
    /// `forget_bias` unless the initializer is all-zero.
    pub fn init(channels: usize, kernel: usize, forget_bias: f64, init: &mut Initializer) -> Result<Self> {
        let mut input = Vec::with_capacity(4);
        let mut hidden = Vec::with_capacity(4);
        for _ in 0..4 {
            input.push(init.kernel(channels, channels, kernel)?);
            hidden.push(init.kernel(channels, channels, kernel)?);
        }
        let mut p = ConvLstmParams {
            input: input.try_into().expect("four gates"),
            hidden: hidden.try_into().expect("four gates"),
        };
        if !init.is_zero() {
            p.input[FORGET]
                .bias_mut()
                .iter_mut()
                .for_each(|b| *b = T::of(forget_bias));
        }
        Ok(p)
    }

    pub fn channels(&self) -> usize {
        self.input[0].in_channels()
    }

    pub fn zeros_like(&self) -> Self {
        ConvLstmParams {
            input: std::array::from_fn(|g| self.input[g].zeros_like()),
            hidden: std::array::from_fn(|g| self.hidden[g].zeros_like()),
        }
    }

    pub fn cast<U: Scalar>(&self) -> ConvLstmParams<U> {
        ConvLstmParams {
            input: std::array::from_fn(|g| self.input[g].cast()),
            hidden: std::array::from_fn(|g| self.hidden[g].cast()),
        }
    }
}

impl<T: Scalar> KernelSet<T> for ConvLstmParams<T> {
    fn kernels<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a ConvKernel<T>)>) {
        for g in 0..4 {
            out.push((join(prefix, &format!("wx_{}", GATE_NAMES[g])), &self.input[g]));
            out.push((join(prefix, &format!("wh_{}", GATE_NAMES[g])), &self.hidden[g]));
        }
    }

    fn kernels_mut<'a>(&'a mut self, out: &mut Vec<&'a mut ConvKernel<T>>) {
        for (x, h) in self.input.iter_mut().zip(self.hidden.iter_mut()) {
            out.push(x);
            out.push(h);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellState<T> {
    pub h: Tensor3<T>,
    pub c: Tensor3<T>,
}

impl<T: Scalar> CellState<T> {
    pub fn elems(&self) -> usize {
        self.h.len() + self.c.len()
    }

    pub fn shape(&self) -> Shape3 {
        self.h.shape()
    }

    pub fn add_assign(&mut self, other: &Self) {
        self.h.add_assign(&other.h);
        self.c.add_assign(&other.c);
    }

    pub fn bit_eq(&self, other: &Self) -> bool {
        self.h.bit_eq(&other.h) && self.c.bit_eq(&other.c)
    }

    pub fn cast<U: Scalar>(&self) -> CellState<U> {
        CellState {
            h: self.h.cast(),
            c: self.c.cast(),
        }
    }
}

pub fn zero_state<T: Scalar>(shape: Shape3) -> CellState<T> {
    CellState {
        h: Tensor3::zeros(shape),
        c: Tensor3::zeros(shape),
    }
}

/// Everything the cotangent rule of one step needs.
#[derive(Debug, Clone)]
pub struct LstmCache<T> {
    pub x: Tensor3<T>,
    pub prev: CellState<T>,
    /// Activated gates `i, f, o, c~`.
    pub gates: [Tensor3<T>; 4],
    pub c_new: Tensor3<T>,
}

impl<T: Scalar> LstmCache<T> {
    pub fn elems(&self) -> usize {
        self.x.len() + self.prev.elems() + self.gates.iter().map(|g| g.len()).sum::<usize>() + self.c_new.len()
    }
}

fn check_step<T: Scalar>(x: &Tensor3<T>, state: &CellState<T>, params: &ConvLstmParams<T>) -> Result<()> {
    let want = x.shape().with_channels(params.channels());
    for s in [x.shape(), state.h.shape(), state.c.shape()] {
        if s != want {
            return Err(Error::ShapeMismatch {
                expected: want,
                actual: s,
            });
        }
    }
    Ok(())
}

pub fn convlstm_step<T: Scalar>(
    x: &Tensor3<T>,
    state: &CellState<T>,
    params: &ConvLstmParams<T>,
) -> Result<CellState<T>> {
    Ok(convlstm_step_cached(x, state, params)?.0)
}

pub fn convlstm_step_cached<T: Scalar>(
    x: &Tensor3<T>,
    state: &CellState<T>,
    params: &ConvLstmParams<T>,
) -> Result<(CellState<T>, LstmCache<T>)> {
    check_step(x, state, params)?;
    let mut pre = Vec::with_capacity(4);
    for g in 0..4 {
        let mut z = conv2d(x, &params.input[g])?;
        z.add_assign(&conv2d(&state.h, &params.hidden[g])?);
        pre.push(z);
    }
    let gates: [Tensor3<T>; 4] = std::array::from_fn(|g| {
        if g == 3 {
            pre[g].map(|v| v.tanh())
        } else {
            pre[g].map(sigmoid)
        }
    });
    let [i, f, o, cc] = &gates;
    let c_new = f
        .zip_map(&state.c, |a, b| a * b)
        .zip_map(&i.zip_map(cc, |a, b| a * b), |a, b| a + b);
    let h_new = o.zip_map(&c_new, |a, b| a * b.tanh());
    let cache = LstmCache {
        x: x.clone(),
        prev: state.clone(),
        gates,
        c_new: c_new.clone(),
    };
    Ok((CellState { h: h_new, c: c_new }, cache))
}

/// Cotangent rule for one step.
///
/// `g_next` holds the cotangents of the new `(h, c)`. Returns the input
/// cotangent and the cotangent of the previous state.
pub fn convlstm_backward<T: Scalar>(
    params: &ConvLstmParams<T>,
    cache: &LstmCache<T>,
    g_next: &CellState<T>,
    grads: &mut ConvLstmParams<T>,
) -> (Tensor3<T>, CellState<T>) {
    let one = T::one();
    let [i, f, o, cc] = &cache.gates;
    let tanh_c = cache.c_new.map(|v| v.tanh());
    // dL/dc' = dL/dc'(direct) + dL/dh' . o . (1 - tanh^2 c')
    let mut g_c = g_next
        .h
        .zip_map(o, |g, ov| g * ov)
        .zip_map(&tanh_c, |a, t| a * (one - t * t));
    g_c.add_assign(&g_next.c);
    let g_o = g_next.h.zip_map(&tanh_c, |g, t| g * t);
    let g_f = g_c.zip_map(&cache.prev.c, |g, c| g * c);
    let g_i = g_c.zip_map(cc, |g, c| g * c);
    let g_cc = g_c.zip_map(i, |g, iv| g * iv);
    let g_c_prev = g_c.zip_map(f, |g, fv| g * fv);

    let sig_back = |g: &Tensor3<T>, s: &Tensor3<T>| g.zip_map(s, |gv, sv| gv * sv * (one - sv));
    let g_pre = [
        sig_back(&g_i, i),
        sig_back(&g_f, f),
        sig_back(&g_o, o),
        g_cc.zip_map(cc, |gv, t| gv * (one - t * t)),
    ];

    let mut g_x = Tensor3::zeros(cache.x.shape());
    let mut g_h_prev = Tensor3::zeros(cache.prev.h.shape());
    for g in 0..4 {
        let gx = conv2d_backward(&cache.x, &params.input[g], &g_pre[g], &mut grads.input[g], true).expect("requested");
        g_x.add_assign(&gx);
        let gh = conv2d_backward(&cache.prev.h, &params.hidden[g], &g_pre[g], &mut grads.hidden[g], true)
            .expect("requested");
        g_h_prev.add_assign(&gh);
    }
    (
        g_x,
        CellState {
            h: g_h_prev,
            c: g_c_prev,
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{central_difference, relative_error};
    use crate::params::{flatten, scalar_mut};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_params<T: Scalar>(c: usize, rng: &mut ChaCha8Rng) -> ConvLstmParams<T> {
        let mut k = || {
            let w = (0..c * c * 9).map(|_| T::of(rng.gen_range(-0.5..0.5))).collect();
            let b = (0..c).map(|_| T::of(rng.gen_range(-0.5..0.5))).collect();
            ConvKernel::new(c, c, 3, 3, w, b).unwrap()
        };
        ConvLstmParams {
            input: std::array::from_fn(|_| k()),
            hidden: std::array::from_fn(|_| k()),
        }
    }

    fn random_tensor<T: Scalar>(shape: Shape3, rng: &mut ChaCha8Rng) -> Tensor3<T> {
        Tensor3::from_fn(shape, |_, _, _| T::of(rng.gen_range(-1.0..1.0)))
    }

    fn conv_ref(x: &Tensor3<f64>, k: &ConvKernel<f64>) -> Tensor3<f64> {
        let s = x.shape();
        Tensor3::from_fn(s.with_channels(k.out_channels()), |y, xx, o| {
            let mut acc = k.bias()[o];
            for i in 0..k.in_channels() {
                for ky in 0..3 {
                    for kx in 0..3 {
                        let (iy, ix) = (y as isize + ky as isize - 1, xx as isize + kx as isize - 1);
                        if iy >= 0 && ix >= 0 && (iy as usize) < s.h && (ix as usize) < s.w {
                            acc += k.weight(o, i, ky, kx) * x.at(iy as usize, ix as usize, i);
                        }
                    }
                }
            }
            acc
        })
    }

    /// Gate-by-gate straight-line evaluation at every site.
    fn oracle_step(x: &Tensor3<f64>, st: &CellState<f64>, p: &ConvLstmParams<f64>) -> CellState<f64> {
        let pre: Vec<Tensor3<f64>> = (0..4)
            .map(|g| {
                let a = conv_ref(x, &p.input[g]);
                let b = conv_ref(&st.h, &p.hidden[g]);
                a.zip_map(&b, |u, v| u + v)
            })
            .collect();
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let mut h = Tensor3::zeros(x.shape());
        let mut c = Tensor3::zeros(x.shape());
        for k in 0..x.len() {
            let i = sig(pre[0].data()[k]);
            let f = sig(pre[1].data()[k]);
            let o = sig(pre[2].data()[k]);
            let cc = pre[3].data()[k].tanh();
            let cn = f * st.c.data()[k] + i * cc;
            c.data_mut()[k] = cn;
            h.data_mut()[k] = o * cn.tanh();
        }
        CellState { h, c }
    }

    #[test]
    fn zero_state_is_zero() {
        let s = zero_state::<f32>(Shape3::new(4, 4, 2));
        assert_eq!(s.h.shape(), Shape3::new(4, 4, 2));
        assert_eq!(s.c.shape(), Shape3::new(4, 4, 2));
        assert_eq!(s.h.sum() + s.c.sum(), 0.0);
    }

    #[test]
    fn zero_params_keep_state_zero() {
        let p = ConvLstmParams::<f32>::init(2, 3, 1.0, &mut Initializer::zeros()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = random_tensor::<f32>(Shape3::new(4, 4, 2), &mut rng);
        let s = convlstm_step(&x, &zero_state(x.shape()), &p).unwrap();
        assert!(s.h.data().iter().all(|&v| v == 0.0));
        assert!(s.c.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forget_bias_scalar_reference() {
        let mut p = ConvLstmParams::<f64>::init(1, 3, 0.0, &mut Initializer::zeros()).unwrap();
        p.input[FORGET].bias_mut()[0] = 1.0;
        let shape = Shape3::new(1, 1, 1);
        let state = CellState {
            h: Tensor3::zeros(shape),
            c: Tensor3::full(shape, 1.0),
        };
        let s = convlstm_step(&Tensor3::zeros(shape), &state, &p).unwrap();
        let c = 1.0 / (1.0 + (-1.0f64).exp());
        assert!((c - 0.7310586).abs() < 1e-7);
        assert!((s.c.data()[0] - c).abs() <= 1e-15);
        assert!((s.h.data()[0] - 0.5 * c.tanh()).abs() <= 1e-15);
    }

    #[test]
    fn matches_gate_by_gate_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let shape = Shape3::new(4, 4, 2);
        for _ in 0..5 {
            let p = random_params::<f64>(2, &mut rng);
            let x = random_tensor(shape, &mut rng);
            let st = CellState {
                h: random_tensor(shape, &mut rng),
                c: random_tensor(shape, &mut rng),
            };
            let got = convlstm_step(&x, &st, &p).unwrap();
            let want = oracle_step(&x, &st, &p);
            assert!(got.h.max_abs_diff(&want.h) <= 1e-6);
            assert!(got.c.max_abs_diff(&want.c) <= 1e-6);
            assert!(got.h.data().iter().all(|v| v.abs() < 1.0));
        }
    }

    #[test]
    fn rejects_shape_mismatch() {
        let p = ConvLstmParams::<f32>::init(2, 3, 1.0, &mut Initializer::seeded(0)).unwrap();
        let x = Tensor3::zeros(Shape3::new(4, 4, 3));
        assert!(convlstm_step(&x, &zero_state(Shape3::new(4, 4, 3)), &p).is_err());
        let x = Tensor3::zeros(Shape3::new(4, 4, 2));
        assert!(convlstm_step(&x, &zero_state(Shape3::new(4, 3, 2)), &p).is_err());
    }

    #[test]
    fn deterministic() {
        let p = ConvLstmParams::<f32>::init(2, 3, 1.0, &mut Initializer::seeded(4)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random_tensor::<f32>(Shape3::new(3, 3, 2), &mut rng);
        let a = convlstm_step(&x, &zero_state(x.shape()), &p).unwrap();
        let b = convlstm_step(&x, &zero_state(x.shape()), &p).unwrap();
        assert!(a.bit_eq(&b));
    }

    /// Loss `<w, h_3>` after three unrolled steps from a random state.
    #[test]
    fn three_step_unroll_matches_finite_differences() {
        let shape = Shape3::new(3, 3, 2);
        for seed in 0..4 {
            let mut rng = ChaCha8Rng::seed_from_u64(10 + seed);
            let p = random_params::<f64>(2, &mut rng);
            let xs: Vec<Tensor3<f64>> = (0..3).map(|_| random_tensor(shape, &mut rng)).collect();
            let s0 = CellState {
                h: random_tensor(shape, &mut rng),
                c: random_tensor(shape, &mut rng),
            };
            let w = random_tensor::<f64>(shape, &mut rng);
            let loss = |q: &ConvLstmParams<f64>| {
                let mut s = s0.clone();
                for x in &xs {
                    s = convlstm_step(x, &s, q).unwrap();
                }
                s.h.data().iter().zip(w.data()).map(|(a, b)| a * b).sum::<f64>()
            };
            let mut caches = Vec::new();
            let mut s = s0.clone();
            for x in &xs {
                let (n, c) = convlstm_step_cached(x, &s, &p).unwrap();
                caches.push(c);
                s = n;
            }
            let mut grads = p.zeros_like();
            let mut g = CellState {
                h: w.clone(),
                c: Tensor3::zeros(shape),
            };
            for c in caches.iter().rev() {
                g = convlstm_backward(&p, c, &g, &mut grads).1;
            }
            let flat_p = flatten(&p);
            let flat_g = flatten(&grads);
            for idx in (0..flat_p.len()).step_by(13) {
                let num = central_difference(
                    |v| {
                        let mut q = p.clone();
                        *scalar_mut(&mut q, idx).unwrap() = v;
                        loss(&q)
                    },
                    flat_p[idx],
                    1e-5,
                );
                let r = relative_error(flat_g[idx], num, 1e-6);
                assert!(r <= 1e-5, "coord {idx}: {} vs {num} ({r})", flat_g[idx]);
            }
        }
    }
}
