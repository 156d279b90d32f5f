//! Parameter enumeration and seeded initialization.
//!
//! Every learnable parameter in the model lives in a [`ConvKernel`], so a
//! parameter bundle is described by the ordered list of its kernels. The
//! same structs double as gradient accumulators.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tensor::{ConvKernel, Scalar};

pub trait KernelSet<T: Scalar> {
    /// Appends `(name, kernel)` pairs in canonical order.
    fn kernels<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a ConvKernel<T>)>);

    /// Same order as [`KernelSet::kernels`].
    fn kernels_mut<'a>(&'a mut self, out: &mut Vec<&'a mut ConvKernel<T>>);

    fn kernel_list(&self) -> Vec<(String, &ConvKernel<T>)> {
        let mut v = Vec::new();
        self.kernels("", &mut v);
        v
    }

    fn kernel_list_mut(&mut self) -> Vec<&mut ConvKernel<T>> {
        let mut v = Vec::new();
        self.kernels_mut(&mut v);
        v
    }

    fn param_count(&self) -> usize {
        self.kernel_list()
            .iter()
            .map(|(_, k)| k.weights().len() + k.bias().len())
            .sum()
    }
}

impl<T: Scalar> KernelSet<T> for ConvKernel<T> {
    fn kernels<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a ConvKernel<T>)>) {
        out.push((prefix.to_string(), self));
    }

    fn kernels_mut<'a>(&'a mut self, out: &mut Vec<&'a mut ConvKernel<T>>) {
        out.push(self);
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Seeded source of initial weights.
///
/// Weights are drawn uniform in `[-s, s]` with `s = sqrt(1 / fan_in)`,
/// sampled in f64 and rounded to `T`, so f32 and f64 models built from
/// the same seed agree up to rounding. Biases start at zero.
pub struct Initializer {
    rng: ChaCha8Rng,
    zero: bool,
}

impl Initializer {
    pub fn seeded(seed: u64) -> Self {
        Initializer {
            rng: ChaCha8Rng::seed_from_u64(seed),
            zero: false,
        }
    }

    /// Every weight and bias exactly zero.
    pub fn zeros() -> Self {
        Initializer {
            rng: ChaCha8Rng::seed_from_u64(0),
            zero: true,
        }
    }

    pub fn is_zero(&self) -> bool {
        self.zero
    }

    pub fn kernel<T: Scalar>(&mut self, out_c: usize, in_c: usize, k: usize) -> Result<ConvKernel<T>> {
        let mut kernel = ConvKernel::zeros(out_c, in_c, k, k)?;
        if !self.zero {
            let bound = (1.0 / kernel.fan_in() as f64).sqrt();
            for w in kernel.weights_mut() {
                *w = T::of(self.rng.gen_range(-bound..=bound));
            }
        }
        Ok(kernel)
    }
}

pub fn cast_kernels<T: Scalar, U: Scalar>(ks: &[ConvKernel<T>]) -> Vec<ConvKernel<U>> {
    ks.iter().map(|k| k.cast()).collect()
}

/// Elementwise `dst += src` over matching kernel sets.
pub fn accumulate<T: Scalar, P: KernelSet<T>>(dst: &mut P, src: &P) {
    let srcs = src.kernel_list();
    for (d, (_, s)) in dst.kernel_list_mut().into_iter().zip(srcs) {
        d.add_assign(s);
    }
}

/// Flattened view of all parameters, canonical order, weights then bias per kernel.
pub fn flatten<T: Scalar, P: KernelSet<T>>(p: &P) -> Vec<T> {
    let mut v = Vec::with_capacity(p.param_count());
    for (_, k) in p.kernel_list() {
        v.extend_from_slice(k.weights());
        v.extend_from_slice(k.bias());
    }
    v
}

/// Mutable access to the `index`-th scalar of [`flatten`] order.
pub fn scalar_mut<T: Scalar, P: KernelSet<T>>(p: &mut P, mut index: usize) -> Option<&mut T> {
    for k in p.kernel_list_mut() {
        let nw = k.weights().len();
        if index < nw {
            return Some(&mut k.weights_mut()[index]);
        }
        index -= nw;
        let nb = k.bias().len();
        if index < nb {
            return Some(&mut k.bias_mut()[index]);
        }
        index -= nb;
    }
    None
}

/// Name and position of the `index`-th scalar of [`flatten`] order.
pub fn describe_scalar<T: Scalar, P: KernelSet<T>>(p: &P, mut index: usize) -> Option<String> {
    for (name, k) in p.kernel_list() {
        let nw = k.weights().len();
        if index < nw {
            return Some(format!("{name}.weight[{index}]"));
        }
        index -= nw;
        let nb = k.bias().len();
        if index < nb {
            return Some(format!("{name}.bias[{index}]"));
        }
        index -= nb;
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fan_in_bound() {
        let mut init = Initializer::seeded(5);
        let k: ConvKernel<f64> = init.kernel(3, 4, 3).unwrap();
        let s = (1.0f64 / 36.0).sqrt();
        assert!(k.weights().iter().all(|w| w.abs() <= s));
        assert!(k.weights().iter().any(|w| w.abs() > 0.5 * s));
        assert!(k.bias().iter().all(|&b| b == 0.0));
    }

    #[test]
    fn same_seed_same_weights() {
        let a: ConvKernel<f32> = Initializer::seeded(9).kernel(2, 2, 3).unwrap();
        let b: ConvKernel<f32> = Initializer::seeded(9).kernel(2, 2, 3).unwrap();
        assert_eq!(a, b);
        let z: ConvKernel<f32> = Initializer::zeros().kernel(2, 2, 3).unwrap();
        assert!(z.weights().iter().all(|&w| w == 0.0));
    }

    #[test]
    fn scalar_addressing_follows_flatten_order() {
        let mut k: ConvKernel<f64> = Initializer::seeded(1).kernel(2, 1, 1).unwrap();
        let flat = flatten(&k);
        assert_eq!(flat.len(), 4);
        *scalar_mut(&mut k, 3).unwrap() = 7.0;
        assert_eq!(k.bias()[1], 7.0);
        assert_eq!(describe_scalar(&k, 2).unwrap(), ".bias[0]");
        assert!(scalar_mut(&mut k, 4).is_none());
    }
}
