//! The bijective two-way autoencoder.
//!
//! The encoder is a sequence of stages. Each stage pixel-shuffles its input
//! down, splits the channels into two groups and runs a stack of coupling
//! blocks whose update order alternates from block to block. The decoder is
//! the exact inverse of the same network; it has no parameters of its own.

use crate::coupling::{
    block_backward, block_forward_cached, block_inverse_backward, block_inverse_cached, pixel_shuffle_down,
    pixel_shuffle_up, CouplingCache, CouplingParams, SplitPair,
};
use crate::error::{Error, Result};
use crate::ledger::{Category, MemoryLedger};
use crate::params::{join, Initializer, KernelSet};
use crate::tensor::{ConvKernel, Scalar, Shape3, Tensor3};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StageSpec {
    pub shuffle: usize,
    pub blocks: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AutoencoderConfig {
    pub stages: Vec<StageSpec>,
    /// Hidden width of every `F` is this multiple of the group channel count.
    pub f_hidden_multiplier: usize,
    pub kernel_size: usize,
}

impl Default for AutoencoderConfig {
    fn default() -> Self {
        AutoencoderConfig {
            stages: vec![StageSpec { shuffle: 2, blocks: 2 }, StageSpec { shuffle: 2, blocks: 2 }],
            f_hidden_multiplier: 2,
            kernel_size: 3,
        }
    }
}

/// Shapes derived for one stage of a concrete frame size.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StageGeometry {
    pub shuffle: usize,
    pub blocks: usize,
    /// Shape of each of the two groups inside the stage.
    pub group: Shape3,
}

impl AutoencoderConfig {
    pub fn total_blocks(&self) -> usize {
        self.stages.iter().map(|s| s.blocks).sum()
    }

    pub fn geometry(&self, frame: Shape3) -> Result<Vec<StageGeometry>> {
        if self.stages.is_empty() {
            return Err(Error::InvalidConfig("autoencoder needs at least one stage".into()));
        }
        if self.f_hidden_multiplier == 0 {
            return Err(Error::InvalidConfig("f_hidden_multiplier must be positive".into()));
        }
        if self.kernel_size % 2 == 0 {
            return Err(Error::EvenKernel {
                kh: self.kernel_size,
                kw: self.kernel_size,
            });
        }
        if self.stages[0].shuffle < 2 {
            return Err(Error::InvalidConfig(
                "the first stage must shuffle with a factor of at least 2".into(),
            ));
        }
        let mut cur = frame;
        let mut out = Vec::with_capacity(self.stages.len());
        for (i, st) in self.stages.iter().enumerate() {
            if st.blocks == 0 {
                return Err(Error::InvalidConfig(format!("stage {i} has no coupling blocks")));
            }
            if st.shuffle == 0 || cur.h % st.shuffle != 0 || cur.w % st.shuffle != 0 {
                return Err(Error::InvalidConfig(format!(
                    "stage {i}: shuffle factor {} does not divide spatial dims {}x{}",
                    st.shuffle, cur.h, cur.w
                )));
            }
            cur = Shape3::new(cur.h / st.shuffle, cur.w / st.shuffle, cur.c * st.shuffle * st.shuffle);
            if cur.c % 2 != 0 {
                return Err(Error::InvalidConfig(format!(
                    "stage {i}: {} channels cannot be split evenly",
                    cur.c
                )));
            }
            out.push(StageGeometry {
                shuffle: st.shuffle,
                blocks: st.blocks,
                group: cur.with_channels(cur.c / 2),
            });
        }
        Ok(out)
    }

    /// Frame shape whose encoding has groups of shape `group`.
    pub fn frame_for_group(&self, group: Shape3) -> Result<Shape3> {
        let mut cur = group.with_channels(group.c * 2);
        for st in self.stages.iter().rev() {
            let n2 = st.shuffle * st.shuffle;
            if cur.c % n2 != 0 {
                return Err(Error::NotDivisible {
                    what: "channel count",
                    value: cur.c,
                    factor: n2,
                });
            }
            cur = Shape3::new(cur.h * st.shuffle, cur.w * st.shuffle, cur.c / n2);
        }
        Ok(cur)
    }
}

/// One [`CouplingParams`] per block, across all stages in order.
#[derive(Debug, Clone, PartialEq)]
pub struct AutoencoderParams<T> {
    pub blocks: Vec<CouplingParams<T>>,
}

impl<T: Scalar> AutoencoderParams<T> {
    pub fn init(config: &AutoencoderConfig, frame: Shape3, init: &mut Initializer) -> Result<Self> {
        let geo = config.geometry(frame)?;
        let mut blocks = Vec::with_capacity(config.total_blocks());
        for st in &geo {
            let c = st.group.c;
            for _ in 0..st.blocks {
                blocks.push(CouplingParams::init(
                    c,
                    c * config.f_hidden_multiplier,
                    config.kernel_size,
                    init,
                )?);
            }
        }
        Ok(AutoencoderParams { blocks })
    }

    pub fn zeros_like(&self) -> Self {
        AutoencoderParams {
            blocks: self.blocks.iter().map(|b| b.zeros_like()).collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> AutoencoderParams<U> {
        AutoencoderParams {
            blocks: self.blocks.iter().map(|b| b.cast()).collect(),
        }
    }

    fn check(&self, geo: &[StageGeometry]) -> Result<()> {
        let expected: usize = geo.iter().map(|g| g.blocks).sum();
        if self.blocks.len() != expected {
            return Err(Error::InvalidConfig(format!(
                "autoencoder has {} blocks, config needs {expected}",
                self.blocks.len()
            )));
        }
        let mut b = 0;
        for st in geo {
            for _ in 0..st.blocks {
                let c = self.blocks[b].group_channels();
                if c != st.group.c {
                    return Err(Error::ShapeMismatch {
                        expected: st.group,
                        actual: st.group.with_channels(c),
                    });
                }
                b += 1;
            }
        }
        Ok(())
    }
}

impl<T: Scalar> KernelSet<T> for AutoencoderParams<T> {
    fn kernels<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a ConvKernel<T>)>) {
        for (i, b) in self.blocks.iter().enumerate() {
            b.kernels(&join(prefix, &format!("block{i}")), out);
        }
    }

    fn kernels_mut<'a>(&'a mut self, out: &mut Vec<&'a mut ConvKernel<T>>) {
        for b in &mut self.blocks {
            b.kernels_mut(out);
        }
    }
}

pub fn init_autoencoder<T: Scalar>(
    config: &AutoencoderConfig,
    frame: Shape3,
    seed: u64,
) -> Result<AutoencoderParams<T>> {
    AutoencoderParams::init(config, frame, &mut Initializer::seeded(seed))
}

/// Odd-numbered blocks (counting from zero, across all stages) swap the
/// roles of the two groups.
#[inline]
pub fn is_swapped(block_index: usize) -> bool {
    block_index % 2 == 1
}

fn features_geometry(config: &AutoencoderConfig, group: Shape3) -> Result<Vec<StageGeometry>> {
    config.geometry(config.frame_for_group(group)?)
}

fn check_features<T: Scalar>(features: &SplitPair<T>, geo: &[StageGeometry]) -> Result<()> {
    let want = geo.last().expect("non-empty").group;
    for g in [&features.g1, &features.g2] {
        if g.shape() != want {
            return Err(Error::ShapeMismatch {
                expected: want,
                actual: g.shape(),
            });
        }
    }
    Ok(())
}

pub fn encode<T: Scalar>(
    x: &Tensor3<T>,
    params: &AutoencoderParams<T>,
    config: &AutoencoderConfig,
) -> Result<SplitPair<T>> {
    let geo = config.geometry(x.shape())?;
    params.check(&geo)?;
    let mut merged = x.clone();
    let mut b = 0;
    let mut pair = None;
    for (s, st) in geo.iter().enumerate() {
        if s > 0 {
            merged = pair
                .take()
                .map(|p: SplitPair<T>| p.merge())
                .expect("previous stage output");
        }
        let mut p = SplitPair::split(&pixel_shuffle_down(&merged, st.shuffle)?)?;
        for _ in 0..st.blocks {
            p = block_forward_cached(&p, &params.blocks[b], is_swapped(b))?.0;
            b += 1;
        }
        pair = Some(p);
    }
    Ok(pair.expect("at least one stage"))
}

pub fn decode<T: Scalar>(
    features: &SplitPair<T>,
    params: &AutoencoderParams<T>,
    config: &AutoencoderConfig,
) -> Result<Tensor3<T>> {
    let geo = features_geometry(config, features.group_shape())?;
    params.check(&geo)?;
    check_features(features, &geo)?;
    let mut p = features.clone();
    let mut b = params.blocks.len();
    for (s, st) in geo.iter().enumerate().rev() {
        for _ in 0..st.blocks {
            b -= 1;
            p = block_inverse_cached(&p, &params.blocks[b], is_swapped(b))?.0;
        }
        let merged = pixel_shuffle_up(&p.merge(), st.shuffle)?;
        if s == 0 {
            return Ok(merged);
        }
        p = SplitPair::split(&merged)?;
    }
    unreachable!("geometry has at least one stage")
}

/// Coupling caches of one encoder pass, in execution order.
#[derive(Debug, Clone)]
pub struct EncodeTape<T> {
    caches: Vec<CouplingCache<T>>,
}

/// Coupling caches of one decoder pass, in execution order (last block first).
#[derive(Debug, Clone)]
pub struct DecodeTape<T> {
    caches: Vec<CouplingCache<T>>,
}

impl<T: Scalar> EncodeTape<T> {
    pub fn elems(&self) -> usize {
        self.caches.iter().map(|c| c.elems()).sum()
    }
}

impl<T: Scalar> DecodeTape<T> {
    pub fn elems(&self) -> usize {
        self.caches.iter().map(|c| c.elems()).sum()
    }
}

/// Encoder pass keeping every block's activations for the backward pass.
pub fn encode_stored<T: Scalar>(
    x: &Tensor3<T>,
    params: &AutoencoderParams<T>,
    config: &AutoencoderConfig,
    ledger: &mut MemoryLedger,
) -> Result<(SplitPair<T>, EncodeTape<T>)> {
    let geo = config.geometry(x.shape())?;
    params.check(&geo)?;
    let mut caches = Vec::with_capacity(params.blocks.len());
    let mut merged = x.clone();
    let mut b = 0;
    let mut pair = None;
    for (s, st) in geo.iter().enumerate() {
        if s > 0 {
            merged = pair
                .take()
                .map(|p: SplitPair<T>| p.merge())
                .expect("previous stage output");
        }
        let mut p = SplitPair::split(&pixel_shuffle_down(&merged, st.shuffle)?)?;
        for _ in 0..st.blocks {
            let (y, cache) = block_forward_cached(&p, &params.blocks[b], is_swapped(b))?;
            ledger.alloc(Category::CouplingStack, cache.elems());
            caches.push(cache);
            p = y;
            b += 1;
        }
        pair = Some(p);
    }
    Ok((pair.expect("at least one stage"), EncodeTape { caches }))
}

/// Backward through a stored encoder pass; returns the frame cotangent.
pub fn encode_backward_stored<T: Scalar>(
    tape: EncodeTape<T>,
    params: &AutoencoderParams<T>,
    config: &AutoencoderConfig,
    out_grad: &SplitPair<T>,
    grads: &mut AutoencoderParams<T>,
    ledger: &mut MemoryLedger,
) -> Result<Tensor3<T>> {
    let geo = features_geometry(config, out_grad.group_shape())?;
    let mut caches = tape.caches;
    let mut g = out_grad.clone();
    let mut b = params.blocks.len();
    for (s, st) in geo.iter().enumerate().rev() {
        for _ in 0..st.blocks {
            b -= 1;
            let cache = caches.pop().expect("one cache per block");
            g = block_backward(&params.blocks[b], &cache, &g, &mut grads.blocks[b], is_swapped(b));
            ledger.free(Category::CouplingStack, cache.elems());
        }
        let merged = pixel_shuffle_up(&g.merge(), st.shuffle)?;
        if s == 0 {
            return Ok(merged);
        }
        g = SplitPair::split(&merged)?;
    }
    unreachable!("geometry has at least one stage")
}

/// Backward through an encoder pass from its output alone.
///
/// Each block's input is rebuilt with the coupling inverse, which also
/// yields the activations its cotangent rule needs. Only one block's
/// activations are alive at a time. Returns the reconstructed frame and
/// the frame cotangent.
pub fn encode_backward_reversible<T: Scalar>(
    output: &SplitPair<T>,
    params: &AutoencoderParams<T>,
    config: &AutoencoderConfig,
    out_grad: &SplitPair<T>,
    grads: &mut AutoencoderParams<T>,
    ledger: &mut MemoryLedger,
) -> Result<(Tensor3<T>, Tensor3<T>)> {
    let geo = features_geometry(config, output.group_shape())?;
    params.check(&geo)?;
    let mut v = output.clone();
    let mut g = out_grad.clone();
    let mut b = params.blocks.len();
    for (s, st) in geo.iter().enumerate().rev() {
        for _ in 0..st.blocks {
            b -= 1;
            let (x, cache) = block_inverse_cached(&v, &params.blocks[b], is_swapped(b))?;
            ledger.alloc(Category::CouplingStack, cache.elems());
            g = block_backward(&params.blocks[b], &cache, &g, &mut grads.blocks[b], is_swapped(b));
            ledger.free(Category::CouplingStack, cache.elems());
            v = x;
        }
        let mv = pixel_shuffle_up(&v.merge(), st.shuffle)?;
        let mg = pixel_shuffle_up(&g.merge(), st.shuffle)?;
        if s == 0 {
            return Ok((mv, mg));
        }
        v = SplitPair::split(&mv)?;
        g = SplitPair::split(&mg)?;
    }
    unreachable!("geometry has at least one stage")
}

/// Decoder pass keeping every block's activations for the backward pass.
pub fn decode_stored<T: Scalar>(
    features: &SplitPair<T>,
    params: &AutoencoderParams<T>,
    config: &AutoencoderConfig,
    ledger: &mut MemoryLedger,
) -> Result<(Tensor3<T>, DecodeTape<T>)> {
    let geo = features_geometry(config, features.group_shape())?;
    params.check(&geo)?;
    check_features(features, &geo)?;
    let mut caches = Vec::with_capacity(params.blocks.len());
    let mut p = features.clone();
    let mut b = params.blocks.len();
    for (s, st) in geo.iter().enumerate().rev() {
        for _ in 0..st.blocks {
            b -= 1;
            let (x, cache) = block_inverse_cached(&p, &params.blocks[b], is_swapped(b))?;
            ledger.alloc(Category::CouplingStack, cache.elems());
            caches.push(cache);
            p = x;
        }
        let merged = pixel_shuffle_up(&p.merge(), st.shuffle)?;
        if s == 0 {
            return Ok((merged, DecodeTape { caches }));
        }
        p = SplitPair::split(&merged)?;
    }
    unreachable!("geometry has at least one stage")
}

/// Backward through a stored decoder pass; returns the feature cotangent.
pub fn decode_backward_stored<T: Scalar>(
    tape: DecodeTape<T>,
    params: &AutoencoderParams<T>,
    config: &AutoencoderConfig,
    out_grad: &Tensor3<T>,
    grads: &mut AutoencoderParams<T>,
    ledger: &mut MemoryLedger,
) -> Result<SplitPair<T>> {
    let geo = config.geometry(out_grad.shape())?;
    let mut caches = tape.caches;
    let mut merged = out_grad.clone();
    let mut b = 0;
    let mut g = None;
    for (s, st) in geo.iter().enumerate() {
        if s > 0 {
            merged = g.take().map(|p: SplitPair<T>| p.merge()).expect("previous stage grad");
        }
        let mut gp = SplitPair::split(&pixel_shuffle_down(&merged, st.shuffle)?)?;
        for _ in 0..st.blocks {
            let cache = caches.pop().expect("one cache per block");
            gp = block_inverse_backward(&params.blocks[b], &cache, &gp, &mut grads.blocks[b], is_swapped(b));
            ledger.free(Category::CouplingStack, cache.elems());
            b += 1;
        }
        g = Some(gp);
    }
    Ok(g.expect("at least one stage"))
}

/// Backward through a decoder pass from its output frame alone.
///
/// Walks the blocks in the order opposite to decoding, rebuilding each
/// block's decoder input by running the block forward. Returns the
/// reconstructed features and their cotangent.
pub fn decode_backward_reversible<T: Scalar>(
    output: &Tensor3<T>,
    params: &AutoencoderParams<T>,
    config: &AutoencoderConfig,
    out_grad: &Tensor3<T>,
    grads: &mut AutoencoderParams<T>,
    ledger: &mut MemoryLedger,
) -> Result<(SplitPair<T>, SplitPair<T>)> {
    let geo = config.geometry(output.shape())?;
    params.check(&geo)?;
    let mut mv = output.clone();
    let mut mg = out_grad.clone();
    let mut b = 0;
    let mut state = None;
    for (s, st) in geo.iter().enumerate() {
        if s > 0 {
            let (v, g): (SplitPair<T>, SplitPair<T>) = state.take().expect("previous stage");
            mv = v.merge();
            mg = g.merge();
        }
        let mut v = SplitPair::split(&pixel_shuffle_down(&mv, st.shuffle)?)?;
        let mut g = SplitPair::split(&pixel_shuffle_down(&mg, st.shuffle)?)?;
        for _ in 0..st.blocks {
            let (y, cache) = block_forward_cached(&v, &params.blocks[b], is_swapped(b))?;
            ledger.alloc(Category::CouplingStack, cache.elems());
            g = block_inverse_backward(&params.blocks[b], &cache, &g, &mut grads.blocks[b], is_swapped(b));
            ledger.free(Category::CouplingStack, cache.elems());
            v = y;
            b += 1;
        }
        state = Some((v, g));
    }
    Ok(state.expect("at least one stage"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cfg(stages: &[(usize, usize)]) -> AutoencoderConfig {
        AutoencoderConfig {
            stages: stages
                .iter()
                .map(|&(shuffle, blocks)| StageSpec { shuffle, blocks })
                .collect(),
            f_hidden_multiplier: 2,
            kernel_size: 3,
        }
    }

    fn random_frame<T: Scalar>(shape: Shape3, seed: u64) -> Tensor3<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor3::from_fn(shape, |_, _, _| T::of(rng.gen_range(0.0..1.0)))
    }

    #[test]
    fn geometry_and_validation() {
        let c = cfg(&[(2, 2), (2, 2)]);
        let geo = c.geometry(Shape3::new(16, 16, 1)).unwrap();
        assert_eq!(geo[0].group, Shape3::new(8, 8, 2));
        assert_eq!(geo[1].group, Shape3::new(4, 4, 8));
        assert_eq!(c.frame_for_group(Shape3::new(4, 4, 8)).unwrap(), Shape3::new(16, 16, 1));
        assert!(c.geometry(Shape3::new(6, 6, 1)).is_err());
        assert!(cfg(&[(1, 2)]).geometry(Shape3::new(4, 4, 2)).is_err());
        assert!(cfg(&[(2, 0)]).geometry(Shape3::new(4, 4, 1)).is_err());
        assert!(cfg(&[(3, 1)]).geometry(Shape3::new(3, 3, 1)).is_err());
        assert!(cfg(&[(3, 1)]).geometry(Shape3::new(3, 3, 2)).is_ok());
    }

    #[test]
    fn init_counts_and_determinism() {
        let c = cfg(&[(2, 2), (2, 2)]);
        let frame = Shape3::new(16, 16, 1);
        let a = init_autoencoder::<f32>(&c, frame, 42).unwrap();
        let b = init_autoencoder::<f32>(&c, frame, 42).unwrap();
        assert_eq!(a.blocks.len(), 4);
        assert_eq!(a, b);
        assert_ne!(a, init_autoencoder::<f32>(&c, frame, 43).unwrap());
        // 3x3 conv over 4 channels: fan-in 36
        let k = &a.blocks[2].f1.conv_b;
        assert_eq!(k.in_channels(), 16);
        let k = &a.blocks[0].f1.conv_b;
        assert_eq!(k.fan_in(), 36);
        let bound = (1.0f64 / 36.0).sqrt() as f32;
        assert!(k.weights().iter().all(|w| w.abs() <= bound));
    }

    #[test]
    fn zero_blocks_are_a_pure_permutation() {
        let c = cfg(&[(2, 2)]);
        let frame = Shape3::new(8, 8, 4);
        let params = AutoencoderParams::<f32>::init(&c, frame, &mut Initializer::zeros()).unwrap();
        let x = random_frame::<f32>(frame, 1);
        let z = encode(&x, &params, &c).unwrap();
        let want = SplitPair::split(&pixel_shuffle_down(&x, 2).unwrap()).unwrap();
        assert!(z.bit_eq(&want));
        assert!(decode(&z, &params, &c).unwrap().bit_eq(&x));
    }

    #[test]
    fn round_trips_both_directions() {
        for (stages, frame) in [
            (vec![(2, 2), (2, 2)], Shape3::new(16, 16, 1)),
            (vec![(2, 4), (2, 4)], Shape3::new(16, 16, 1)),
            (vec![(2, 2), (2, 2)], Shape3::new(32, 32, 3)),
        ] {
            let c = cfg(&stages);
            for seed in 0..3 {
                let params = init_autoencoder::<f32>(&c, frame, seed).unwrap();
                let x = random_frame::<f32>(frame, 100 + seed);
                let z = encode(&x, &params, &c).unwrap();
                assert_eq!(z.len(), x.len());
                assert!(decode(&z, &params, &c).unwrap().max_abs_diff(&x) <= 1e-4);
                let again = encode(&decode(&z, &params, &c).unwrap(), &params, &c).unwrap();
                assert!(again.max_abs_diff(&z) <= 1e-4);

                let p64 = params.cast::<f64>();
                let x64 = x.cast::<f64>();
                let z64 = encode(&x64, &p64, &c).unwrap();
                assert!(decode(&z64, &p64, &c).unwrap().max_abs_diff(&x64) <= 1e-12);
            }
        }
    }

    #[test]
    fn shape_errors() {
        let c = cfg(&[(2, 2), (2, 2)]);
        let params = init_autoencoder::<f32>(&c, Shape3::new(16, 16, 1), 0).unwrap();
        assert!(encode(&Tensor3::zeros(Shape3::new(16, 16, 3)), &params, &c).is_err());
        assert!(decode(&SplitPair::zeros(Shape3::new(4, 4, 4)), &params, &c).is_err());
    }

    #[test]
    fn stored_and_reversible_backward_agree() {
        let c = cfg(&[(2, 2), (2, 2)]);
        let frame = Shape3::new(8, 8, 1);
        let params = init_autoencoder::<f64>(&c, frame, 3).unwrap();
        let x = random_frame::<f64>(frame, 4);
        let mut ledger = MemoryLedger::new();
        let (z, tape) = encode_stored(&x, &params, &c, &mut ledger).unwrap();
        assert!(ledger.current(Category::CouplingStack) > 0);
        let gz = SplitPair {
            g1: random_frame(z.group_shape(), 5),
            g2: random_frame(z.group_shape(), 6),
        };
        let mut g_stored = params.zeros_like();
        let gx_stored = encode_backward_stored(tape, &params, &c, &gz, &mut g_stored, &mut ledger).unwrap();
        assert_eq!(ledger.current(Category::CouplingStack), 0);
        let mut g_rev = params.zeros_like();
        let (x_rec, gx_rev) = encode_backward_reversible(&z, &params, &c, &gz, &mut g_rev, &mut ledger).unwrap();
        assert!(x_rec.max_abs_diff(&x) <= 1e-12);
        assert!(gx_rev.max_abs_diff(&gx_stored) <= 1e-10);
        for ((_, a), (_, b)) in g_stored.kernel_list().iter().zip(g_rev.kernel_list()) {
            for (u, v) in a.weights().iter().zip(b.weights()) {
                assert!((u - v).abs() <= 1e-10);
            }
        }

        let (xd, dtape) = decode_stored(&z, &params, &c, &mut ledger).unwrap();
        let gx = random_frame::<f64>(frame, 7);
        let mut d_stored = params.zeros_like();
        let gz_stored = decode_backward_stored(dtape, &params, &c, &gx, &mut d_stored, &mut ledger).unwrap();
        let mut d_rev = params.zeros_like();
        let (z_rec, gz_rev) = decode_backward_reversible(&xd, &params, &c, &gx, &mut d_rev, &mut ledger).unwrap();
        assert!(z_rec.max_abs_diff(&z) <= 1e-12);
        assert!(gz_rev.max_abs_diff(&gz_stored) <= 1e-10);
        assert_eq!(ledger.current(Category::CouplingStack), 0);
    }
}
