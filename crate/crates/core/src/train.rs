//! Training: MSE objective, Adam, and backpropagation through whole
//! sequences in either store-everything or reversible mode.
//!
//! A training sequence holds `T_in + T_out` frames. The predictor runs
//! `T_in + T_out - 1` steps. The first `T_in` steps consume encoded
//! observations. Later steps consume the previous step's output features,
//! so the model is trained on its own predictions. Outputs of the last
//! `T_out` steps are decoded and compared with the next frame.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autoencoder::{
    decode, decode_backward_reversible, decode_backward_stored, decode_stored, encode, encode_backward_reversible,
    encode_backward_stored, encode_stored, DecodeTape, EncodeTape,
};
use crate::coupling::SplitPair;
use crate::error::{Error, Result};
use crate::ledger::{Category, MemoryLedger};
use crate::params::{accumulate, KernelSet};
use crate::pipeline::{rollout, ModelConfig, ModelParams};
use crate::rpm::{
    predictor_backward_reversible, predictor_backward_stored, predictor_forward_cached, PredictorState, PredictorTape,
};
use crate::tensor::{ConvKernel, Precision, Scalar, Tensor3, Tensor4};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackwardMode {
    /// Keep every intermediate activation.
    StoreAll,
    /// Keep stage boundaries, states and gates; rebuild the rest by inversion.
    Reversible,
}

impl BackwardMode {
    pub fn name(self) -> &'static str {
        match self {
            BackwardMode::StoreAll => "store",
            BackwardMode::Reversible => "reversible",
        }
    }
}

impl std::str::FromStr for BackwardMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "store" => Ok(BackwardMode::StoreAll),
            "reversible" => Ok(BackwardMode::Reversible),
            other => Err(format!(
                "unknown backward mode '{other}' (expected store or reversible)"
            )),
        }
    }
}

/// Largest tolerated reconstruction error when the reversible backward
/// pass rebuilds an input it can also check against.
pub fn reconstruction_threshold(p: Precision) -> f64 {
    match p {
        Precision::F32 => 1e-2,
        Precision::F64 => 1e-8,
    }
}

fn frame_mse<T: Scalar>(pred: &Tensor3<T>, target: &Tensor3<T>) -> f64 {
    let s: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(p, t)| {
            let d = p.as_f64() - t.as_f64();
            d * d
        })
        .sum();
    s / pred.len() as f64
}

/// Mean squared difference over all elements.
pub fn mse_loss<T: Scalar>(pred: &Tensor4<T>, target: &Tensor4<T>) -> Result<f64> {
    if pred.dims() != target.dims() {
        return Err(Error::LengthMismatch {
            expected: target.len(),
            actual: pred.len(),
        });
    }
    let s: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(p, t)| {
            let d = p.as_f64() - t.as_f64();
            d * d
        })
        .sum();
    Ok(s / pred.len() as f64)
}

/// `weight * 2 (pred - target) / N`, the cotangent of `weight * mse`.
pub fn mse_grad<T: Scalar>(pred: &Tensor3<T>, target: &Tensor3<T>, weight: T) -> Tensor3<T> {
    let k = weight * T::of(2.0 / pred.len() as f64);
    pred.zip_map(target, |p, t| k * (p - t))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments, one kernel-shaped buffer per parameter kernel.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    pub step: u64,
    m: Vec<ConvKernel<T>>,
    v: Vec<ConvKernel<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new<P: KernelSet<T>>(params: &P, config: AdamConfig) -> Self {
        let zeros: Vec<ConvKernel<T>> = params.kernel_list().iter().map(|(_, k)| k.zeros_like()).collect();
        AdamState {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn first_moments(&self) -> &[ConvKernel<T>] {
        &self.m
    }

    pub fn second_moments(&self) -> &[ConvKernel<T>] {
        &self.v
    }
}

/// One bias-corrected Adam update.
pub fn adam_step<T: Scalar, P: KernelSet<T>>(params: &mut P, grads: &P, opt: &mut AdamState<T>) -> Result<()> {
    let c = opt.config;
    if !(c.lr > 0.0) || !c.lr.is_finite() {
        return Err(Error::InvalidConfig(format!(
            "learning rate must be positive, got {}",
            c.lr
        )));
    }
    let gl = grads.kernel_list();
    let mut pl = params.kernel_list_mut();
    if pl.len() != gl.len() || pl.len() != opt.m.len() {
        return Err(Error::LengthMismatch {
            expected: opt.m.len(),
            actual: gl.len(),
        });
    }
    for ((p, (_, g)), m) in pl.iter().zip(&gl).zip(&opt.m) {
        if p.weight_dims() != g.weight_dims() || p.weight_dims() != m.weight_dims() {
            return Err(Error::LengthMismatch {
                expected: p.weights().len(),
                actual: g.weights().len(),
            });
        }
    }
    opt.step += 1;
    let t = opt.step as i32;
    let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
    let (one, eps, lr) = (T::one(), T::of(c.eps), T::of(c.lr));
    let bc1 = T::of(1.0 - c.beta1.powi(t));
    let bc2 = T::of(1.0 - c.beta2.powi(t));
    let update = |p: &mut [T], g: &[T], m: &mut [T], v: &mut [T]| {
        for i in 0..p.len() {
            m[i] = b1 * m[i] + (one - b1) * g[i];
            v[i] = b2 * v[i] + (one - b2) * g[i] * g[i];
            let mh = m[i] / bc1;
            let vh = v[i] / bc2;
            p[i] -= lr * mh / (vh.sqrt() + eps);
        }
    };
    for (((p, (_, g)), m), v) in pl.iter_mut().zip(&gl).zip(opt.m.iter_mut()).zip(opt.v.iter_mut()) {
        update(p.weights_mut(), g.weights(), m.weights_mut(), v.weights_mut());
        update(p.bias_mut(), g.bias(), m.bias_mut(), v.bias_mut());
    }
    Ok(())
}

pub fn global_norm<T: Scalar, P: KernelSet<T>>(grads: &P) -> f64 {
    grads
        .kernel_list()
        .iter()
        .flat_map(|(_, k)| k.weights().iter().chain(k.bias()))
        .map(|g| g.as_f64() * g.as_f64())
        .sum::<f64>()
        .sqrt()
}

/// Rescales `grads` to global norm `max_norm` if it exceeds it. Returns
/// the norm before clipping. A non-positive `max_norm` disables clipping.
pub fn clip_global_norm<T: Scalar, P: KernelSet<T>>(grads: &mut P, max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if max_norm > 0.0 && norm > max_norm {
        let k = T::of(max_norm / norm);
        for kern in grads.kernel_list_mut() {
            kern.weights_mut().iter_mut().for_each(|g| *g *= k);
            kern.bias_mut().iter_mut().for_each(|g| *g *= k);
        }
    }
    norm
}

enum PredictorRecord<T> {
    Tape(PredictorTape<T>),
    Reversible {
        out: SplitPair<T>,
        states_before: PredictorState<T>,
        gates: Vec<Tensor3<T>>,
    },
}

struct StepRecord<T> {
    encode: Option<EncodeTape<T>>,
    /// Encoded input kept when the predictor cannot rebuild it.
    input: Option<SplitPair<T>>,
    predictor: PredictorRecord<T>,
    decode: Option<DecodeTape<T>>,
    frame: Option<Tensor3<T>>,
}

fn check_sequence<T: Scalar>(seq: &Tensor4<T>, config: &ModelConfig) -> Result<()> {
    if seq.frame_shape() != config.frame {
        return Err(Error::ShapeMismatch {
            expected: config.frame,
            actual: seq.frame_shape(),
        });
    }
    if seq.frames() < config.sequence_len() {
        return Err(Error::InvalidConfig(format!(
            "sequence has {} frames, training needs {}",
            seq.frames(),
            config.sequence_len()
        )));
    }
    Ok(())
}

/// Sum over predicted frames of the per-frame MSE, computed on the
/// inference rollout path.
pub fn sequence_loss<T: Scalar>(seq: &Tensor4<T>, params: &ModelParams<T>, config: &ModelConfig) -> Result<f64> {
    check_sequence(seq, config)?;
    let obs = seq.window(0, config.frames_in)?;
    let pred = rollout(&obs, config.frames_out, params, config)?;
    Ok((0..config.frames_out)
        .map(|k| frame_mse(&pred.frame(k), &seq.frame(config.frames_in + k)))
        .sum())
}

/// Forward and backward over one sequence.
///
/// Adds `weight` times the gradient of the sequence loss into `grads` and
/// returns the unweighted loss. Stored activations are tracked in `ledger`,
/// which returns to zero on success.
pub fn sequence_gradients<T: Scalar>(
    seq: &Tensor4<T>,
    params: &ModelParams<T>,
    config: &ModelConfig,
    mode: BackwardMode,
    weight: T,
    grads: &mut ModelParams<T>,
    ledger: &mut MemoryLedger,
) -> Result<f64> {
    check_sequence(seq, config)?;
    let group = config.validate()?;
    let (fi, fo) = (config.frames_in, config.frames_out);
    let steps = fi + fo - 1;
    let ae_cfg = &config.autoencoder;
    let reversible_predictor = mode == BackwardMode::Reversible && params.predictor.is_reversible();

    let mut states = params.predictor.zero_state(group);
    let mut prev_out: Option<SplitPair<T>> = None;
    let mut records = Vec::with_capacity(steps);
    let mut loss = 0.0;

    for s in 0..steps {
        let mut rec = StepRecord {
            encode: None,
            input: None,
            predictor: PredictorRecord::Tape(PredictorTape::Rpm(Vec::new())),
            decode: None,
            frame: None,
        };
        let input = if s < fi {
            let x = seq.frame(s);
            match mode {
                BackwardMode::StoreAll => {
                    let (f, tape) = encode_stored(&x, &params.autoencoder, ae_cfg, ledger)?;
                    rec.encode = Some(tape);
                    f
                }
                BackwardMode::Reversible => {
                    let f = encode(&x, &params.autoencoder, ae_cfg)?;
                    if !reversible_predictor {
                        ledger.alloc(Category::StageBoundary, f.len());
                        rec.input = Some(f.clone());
                    }
                    f
                }
            }
        } else {
            prev_out.take().expect("previous step output")
        };
        let (out, next, tape) = predictor_forward_cached(&input, &states, &params.predictor)?;
        rec.predictor = if reversible_predictor {
            let gates = tape.gates();
            ledger.alloc(Category::States, states.elems());
            ledger.alloc(Category::Gates, gates.iter().map(|g| g.len()).sum());
            ledger.alloc(Category::StageBoundary, out.len());
            PredictorRecord::Reversible {
                out: out.clone(),
                states_before: std::mem::replace(&mut states, next),
                gates,
            }
        } else {
            ledger.alloc(Category::Predictor, tape.elems());
            states = next;
            PredictorRecord::Tape(tape)
        };
        if s + 1 >= fi {
            let frame = match mode {
                BackwardMode::StoreAll => {
                    let (frame, tape) = decode_stored(&out, &params.autoencoder, ae_cfg, ledger)?;
                    rec.decode = Some(tape);
                    frame
                }
                BackwardMode::Reversible => decode(&out, &params.autoencoder, ae_cfg)?,
            };
            loss += frame_mse(&frame, &seq.frame(s + 1));
            ledger.alloc(Category::StageBoundary, frame.len());
            rec.frame = Some(frame);
        }
        records.push(rec);
        prev_out = Some(out);
    }
    drop(prev_out);
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss {
            step: 0,
            detail: format!("sequence loss is {loss}"),
        });
    }

    let threshold = reconstruction_threshold(T::PRECISION);
    let mut g_states = params.predictor.zero_state(group);
    let mut g_carry: Option<SplitPair<T>> = None;
    for s in (0..steps).rev() {
        let rec = records.pop().expect("one record per step");
        let mut g_out = g_carry.take().unwrap_or_else(|| SplitPair::zeros(group));
        if let Some(frame) = rec.frame {
            let g_frame = mse_grad(&frame, &seq.frame(s + 1), weight);
            let g = match rec.decode {
                Some(tape) => decode_backward_stored(
                    tape,
                    &params.autoencoder,
                    ae_cfg,
                    &g_frame,
                    &mut grads.autoencoder,
                    ledger,
                )?,
                None => {
                    decode_backward_reversible(
                        &frame,
                        &params.autoencoder,
                        ae_cfg,
                        &g_frame,
                        &mut grads.autoencoder,
                        ledger,
                    )?
                    .1
                }
            };
            ledger.free(Category::StageBoundary, frame.len());
            g_out.add_assign(&g);
        }
        let kept_input = rec.input.is_some();
        let (rebuilt, g_in) = match rec.predictor {
            PredictorRecord::Tape(tape) => {
                ledger.free(Category::Predictor, tape.elems());
                let (g_in, gs) =
                    predictor_backward_stored(&params.predictor, tape, &g_out, &g_states, &mut grads.predictor)?;
                g_states = gs;
                (rec.input, g_in)
            }
            PredictorRecord::Reversible {
                out,
                states_before,
                gates,
            } => {
                let (x, g_in, gs) = predictor_backward_reversible(
                    &params.predictor,
                    &out,
                    &states_before,
                    &gates,
                    &g_out,
                    &g_states,
                    &mut grads.predictor,
                    ledger,
                )?;
                ledger.free(Category::States, states_before.elems());
                ledger.free(Category::Gates, gates.iter().map(|g| g.len()).sum());
                ledger.free(Category::StageBoundary, out.len());
                g_states = gs;
                (Some(x), g_in)
            }
        };
        if s < fi {
            if let Some(tape) = rec.encode {
                encode_backward_stored(tape, &params.autoencoder, ae_cfg, &g_in, &mut grads.autoencoder, ledger)?;
            } else {
                let features = rebuilt.expect("reversible mode keeps or rebuilds the input");
                if kept_input {
                    ledger.free(Category::StageBoundary, features.len());
                }
                let (x, _) = encode_backward_reversible(
                    &features,
                    &params.autoencoder,
                    ae_cfg,
                    &g_in,
                    &mut grads.autoencoder,
                    ledger,
                )?;
                let err = x.max_abs_diff(&seq.frame(s));
                if !(err <= threshold) {
                    return Err(Error::ReconstructionDivergence { error: err, threshold });
                }
            }
        } else {
            g_carry = Some(g_in);
        }
    }
    Ok(loss)
}

/// Mean sequence loss over a batch, with gradients of that mean.
#[derive(Debug, Clone)]
pub struct BatchGradients<T> {
    pub loss: f64,
    pub grads: ModelParams<T>,
    /// Per-category peaks, maximised over the batch's sequences.
    pub ledger: MemoryLedger,
    /// Sequences whose reversible pass diverged and were redone with
    /// stored activations.
    pub store_fallbacks: usize,
}

/// Mean loss and gradients over `batch`. Any reconstruction divergence in
/// reversible mode is an error.
pub fn compute_gradients<T: Scalar>(
    batch: &[Tensor4<T>],
    params: &ModelParams<T>,
    config: &ModelConfig,
    mode: BackwardMode,
) -> Result<BatchGradients<T>> {
    batch_gradients(batch, params, config, mode, false)
}

/// Like [`compute_gradients`], but a sequence whose reversible pass
/// diverges is recomputed with stored activations and counted in
/// `store_fallbacks`.
pub fn compute_gradients_with_fallback<T: Scalar>(
    batch: &[Tensor4<T>],
    params: &ModelParams<T>,
    config: &ModelConfig,
    mode: BackwardMode,
) -> Result<BatchGradients<T>> {
    batch_gradients(batch, params, config, mode, true)
}

fn batch_gradients<T: Scalar>(
    batch: &[Tensor4<T>],
    params: &ModelParams<T>,
    config: &ModelConfig,
    mode: BackwardMode,
    fallback: bool,
) -> Result<BatchGradients<T>> {
    if batch.is_empty() {
        return Err(Error::InvalidConfig("empty batch".into()));
    }
    let weight = T::of(1.0 / batch.len() as f64);
    let mut grads = params.zeros_like();
    let mut worst = MemoryLedger::new();
    let mut loss = 0.0;
    let mut store_fallbacks = 0;
    for seq in batch {
        let mut ledger = MemoryLedger::new();
        loss += if fallback && mode == BackwardMode::Reversible {
            // partial sums from a diverged pass must not leak into grads
            let mut g = params.zeros_like();
            match sequence_gradients(seq, params, config, mode, weight, &mut g, &mut ledger) {
                Ok(l) => {
                    accumulate(&mut grads, &g);
                    l
                }
                Err(Error::ReconstructionDivergence { .. }) => {
                    store_fallbacks += 1;
                    ledger = MemoryLedger::new();
                    sequence_gradients(
                        seq,
                        params,
                        config,
                        BackwardMode::StoreAll,
                        weight,
                        &mut grads,
                        &mut ledger,
                    )?
                }
                Err(e) => return Err(e),
            }
        } else {
            sequence_gradients(seq, params, config, mode, weight, &mut grads, &mut ledger)?
        };
        if ledger.total_peak() > worst.total_peak() {
            worst = ledger;
        }
    }
    Ok(BatchGradients {
        loss: loss / batch.len() as f64,
        grads,
        ledger: worst,
        store_fallbacks,
    })
}

/// Batch gradients through the memory-light path: coupling activations
/// are rebuilt by inversion instead of stored.
pub fn reversible_backward<T: Scalar>(
    batch: &[Tensor4<T>],
    params: &ModelParams<T>,
    config: &ModelConfig,
) -> Result<BatchGradients<T>> {
    compute_gradients(batch, params, config, BackwardMode::Reversible)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub adam: AdamConfig,
    pub steps: usize,
    pub batch: usize,
    pub clip_norm: f64,
    pub backward: BackwardMode,
    pub val_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            adam: AdamConfig::default(),
            steps: 2000,
            batch: 8,
            clip_norm: 5.0,
            backward: BackwardMode::Reversible,
            val_every: 100,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub step: usize,
    /// Mean per-pixel MSE over predicted frames of the batch, before the
    /// update. Absent on the closing row that scores the final parameters.
    pub train_mse: Option<f64>,
    pub val_mse: Option<f64>,
    pub baseline_mse: Option<f64>,
    pub peak_activation_elems: usize,
    /// Not written to the CSV.
    pub store_fallbacks: usize,
}

pub const METRICS_HEADER: &str = "step,train_mse,val_mse,baseline_mse,peak_activation_elems";

impl MetricsRow {
    pub fn csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.9e}")).unwrap_or_default();
        format!(
            "{},{},{},{},{}",
            self.step,
            opt(self.train_mse),
            opt(self.val_mse),
            opt(self.baseline_mse),
            self.peak_activation_elems
        )
    }
}

/// Mean per-pixel MSE over the predicted frames of `seqs`, for the model
/// rollout and for the last-observed-frame persistence forecast.
pub fn evaluate<T: Scalar>(seqs: &[Tensor4<T>], params: &ModelParams<T>, config: &ModelConfig) -> Result<(f64, f64)> {
    if seqs.is_empty() {
        return Err(Error::InvalidConfig("no evaluation sequences".into()));
    }
    let (fi, fo) = (config.frames_in, config.frames_out);
    let (mut model, mut base) = (0.0, 0.0);
    for seq in seqs {
        check_sequence(seq, config)?;
        let pred = rollout(&seq.window(0, fi)?, fo, params, config)?;
        let last = seq.frame(fi - 1);
        for k in 0..fo {
            let target = seq.frame(fi + k);
            model += frame_mse(&pred.frame(k), &target);
            base += frame_mse(&last, &target);
        }
    }
    let n = (seqs.len() * fo) as f64;
    Ok((model / n, base / n))
}

fn sample_batch<T: Scalar>(
    data: &[Tensor4<T>],
    batch: usize,
    len: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Tensor4<T>>> {
    (0..batch)
        .map(|_| {
            let seq = &data[rng.gen_range(0..data.len())];
            let start = rng.gen_range(0..=seq.frames() - len);
            seq.window(start, start + len)
        })
        .collect()
}

/// Minibatch training loop. Calls `on_row` for every step and returns the
/// full metrics trace. A learning rate of zero evaluates without updating.
pub fn train<T: Scalar>(
    params: &mut ModelParams<T>,
    config: &ModelConfig,
    train_set: &[Tensor4<T>],
    val_set: &[Tensor4<T>],
    tc: &TrainConfig,
    mut on_row: impl FnMut(&MetricsRow),
) -> Result<Vec<MetricsRow>> {
    config.validate()?;
    params.predictor.validate()?;
    if train_set.is_empty() {
        return Err(Error::InvalidConfig("empty training set".into()));
    }
    if tc.batch == 0 {
        return Err(Error::InvalidConfig("batch must be at least 1".into()));
    }
    if tc.adam.lr < 0.0 || !tc.adam.lr.is_finite() {
        return Err(Error::InvalidConfig(format!("invalid learning rate {}", tc.adam.lr)));
    }
    let len = config.sequence_len();
    for s in train_set.iter().chain(val_set) {
        check_sequence(s, config)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let mut opt = AdamState::new(params, tc.adam);
    let mut trace = Vec::with_capacity(tc.steps);
    for step in 0..tc.steps {
        let batch = sample_batch(train_set, tc.batch, len, &mut rng)?;
        let mut bg = match compute_gradients_with_fallback(&batch, params, config, tc.backward) {
            Err(Error::NonFiniteLoss { detail, .. }) => return Err(Error::NonFiniteLoss { step, detail }),
            other => other?,
        };
        let norm = clip_global_norm(&mut bg.grads, tc.clip_norm);
        if !norm.is_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                detail: format!("gradient norm is {norm} at loss {}", bg.loss),
            });
        }
        let last = step + 1 == tc.steps;
        let (val_mse, baseline_mse) = if !val_set.is_empty() && tc.val_every > 0 && (step % tc.val_every == 0 || last) {
            let (v, b) = evaluate(val_set, params, config)?;
            (Some(v), Some(b))
        } else {
            (None, None)
        };
        let row = MetricsRow {
            step,
            train_mse: Some(bg.loss / config.frames_out as f64),
            val_mse,
            baseline_mse,
            peak_activation_elems: bg.ledger.total_peak(),
            store_fallbacks: bg.store_fallbacks,
        };
        on_row(&row);
        trace.push(row);
        if tc.adam.lr > 0.0 {
            adam_step(params, &bg.grads, &mut opt)?;
        }
    }
    if !val_set.is_empty() {
        // metrics of the final parameters
        let (v, b) = evaluate(val_set, params, config)?;
        let row = MetricsRow {
            step: tc.steps,
            train_mse: None,
            val_mse: Some(v),
            baseline_mse: Some(b),
            peak_activation_elems: 0,
            store_fallbacks: 0,
        };
        on_row(&row);
        trace.push(row);
    }
    Ok(trace)
}
