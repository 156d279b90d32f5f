//! Numerical audits: invertibility, reconstruction, gradients, backward
//! equivalence, the feature shortcut, and stored-activation profiles.
//!
//! Thresholds live here and are echoed in every report.

use std::fmt;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{central_difference, relative_error};
use crate::autoencoder::{decode, encode};
use crate::config::{with_depth, InitKind};
use crate::coupling::{pixel_shuffle_down, pixel_shuffle_up};
use crate::error::Result;
use crate::ledger::MemoryLedger;
use crate::params::{describe_scalar, flatten, scalar_mut, KernelSet};
use crate::pipeline::{reconstruct_previous, rollout, rollout_reencode, rollout_traced, ModelConfig, ModelParams};
use crate::rpm::{predictor_forward_cached, PredictorKind, GATE_EPS};
use crate::tensor::{Precision, Scalar, Shape3, Tensor3, Tensor4};
use crate::train::{compute_gradients, reconstruction_threshold, sequence_gradients, sequence_loss, BackwardMode};

pub const BIJECTIVITY_CASES: usize = 100;
pub const RECONSTRUCTION_SEEDS: usize = 20;
pub const GRAD_SAMPLES: usize = 50;
pub const GRAD_FD_STEP: f64 = 1e-5;
pub const GRAD_TOLERANCE: f64 = 1e-5;
/// Denominator floor for the relative error. At this step, central
/// differences of the default-model loss carry 1e-11 to 3e-11 of roundoff,
/// so gradients below the floor are judged against 1e-10 absolute.
pub const GRAD_FLOOR: f64 = 1e-5;
pub const EQUIVALENCE_SEEDS: usize = 10;
pub const EQUIVALENCE_BATCH: usize = 2;
pub const SHORTCUT_TOLERANCE: f64 = 1e-4;
pub const SHORTCUT_STEPS: usize = 3;
pub const SHORTCUT_SEEDS: usize = 10;

/// Max abs round-trip error allowed for decode after encode.
pub fn bijectivity_tolerance(precision: Precision, blocks: usize) -> f64 {
    match precision {
        Precision::F64 => 1e-12,
        Precision::F32 if blocks <= 8 => 1e-4,
        Precision::F32 => 1e-3,
    }
}

/// Per-kernel relative gradient gap allowed between the two backward modes.
pub fn equivalence_tolerance(precision: Precision) -> f64 {
    match precision {
        Precision::F32 => 1e-4,
        Precision::F64 => 1e-10,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Pass,
    Fail,
    /// The check does not apply to this model.
    Skipped,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub outcome: Outcome,
    /// Worst observed value of the audited quantity.
    pub value: f64,
    pub threshold: f64,
    pub detail: String,
}

impl CheckResult {
    fn judge(name: &'static str, value: f64, threshold: f64, detail: String) -> Self {
        // NaN fails
        let outcome = if value <= threshold {
            Outcome::Pass
        } else {
            Outcome::Fail
        };
        CheckResult {
            name,
            outcome,
            value,
            threshold,
            detail,
        }
    }

    fn skipped(name: &'static str, detail: String) -> Self {
        CheckResult {
            name,
            outcome: Outcome::Skipped,
            value: f64::NAN,
            threshold: f64::NAN,
            detail,
        }
    }

    pub fn passed(&self) -> bool {
        self.outcome != Outcome::Fail
    }
}

impl fmt::Display for CheckResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.outcome {
            Outcome::Skipped => write!(f, "{:<22} SKIP  {}", self.name, self.detail),
            o => write!(
                f,
                "{:<22} {}  max {:.3e} (limit {:.1e})  {}",
                self.name,
                if o == Outcome::Pass { "PASS" } else { "FAIL" },
                self.value,
                self.threshold,
                self.detail
            ),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerifyReport {
    pub precision: Precision,
    pub checks: Vec<CheckResult>,
}

impl VerifyReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(CheckResult::passed)
    }
}

impl fmt::Display for VerifyReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "verify ({})", self.precision)?;
        for c in &self.checks {
            writeln!(f, "  {c}")?;
        }
        write!(
            f,
            "{}",
            if self.all_passed() {
                "all checks passed"
            } else {
                "some checks FAILED"
            }
        )
    }
}

/// Parameters for audit case `case`.
pub fn audit_params<T: Scalar>(config: &ModelConfig, init: InitKind, seed: u64) -> Result<ModelParams<T>> {
    match init {
        InitKind::Random => ModelParams::seeded(config, seed),
        InitKind::Zero => ModelParams::zeros(config),
    }
}

fn case_seed(seed: u64, case: usize) -> u64 {
    seed.wrapping_mul(1_000_003).wrapping_add(case as u64)
}

/// Uniform [0, 1) frames, `frames` long.
pub fn random_sequence<T: Scalar>(shape: Shape3, frames: usize, seed: u64) -> Result<Tensor4<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = frames * shape.len();
    Tensor4::from_vec(frames, shape, (0..n).map(|_| T::of(rng.gen_range(0.0..1.0))).collect())
}

/// Pixel-shuffle round trips at every stage factor, counted in mismatching
/// elements.
pub fn shuffle_audit(config: &ModelConfig, cases: usize, seed: u64) -> Result<CheckResult> {
    let geometry = config.autoencoder.geometry(config.frame)?;
    let mut mismatches = 0usize;
    let mut checked = 0usize;
    for case in 0..cases {
        let mut shape = config.frame;
        let mut rng = ChaCha8Rng::seed_from_u64(case_seed(seed, case));
        for st in &geometry {
            let x = Tensor3::<f32>::from_fn(shape, |_, _, _| rng.gen_range(-1.0..1.0));
            let down = pixel_shuffle_down(&x, st.shuffle)?;
            let back = pixel_shuffle_up(&down, st.shuffle)?;
            let x64 = x.cast::<f64>();
            let back64 = pixel_shuffle_up(&pixel_shuffle_down(&x64, st.shuffle)?, st.shuffle)?;
            mismatches += x
                .data()
                .iter()
                .zip(back.data())
                .filter(|(a, b)| a.to_bits() != b.to_bits())
                .count();
            mismatches += x64
                .data()
                .iter()
                .zip(back64.data())
                .filter(|(a, b)| a.to_bits() != b.to_bits())
                .count();
            checked += 2 * x.len();
            shape = down.shape();
        }
    }
    Ok(CheckResult::judge(
        "pixel_shuffle",
        mismatches as f64,
        0.0,
        format!("{mismatches} of {checked} elements differ, {cases} cases"),
    ))
}

/// Max abs error of decode(encode(x)) over `cases` seeded parameter and
/// input draws.
pub fn bijectivity_audit<T: Scalar>(
    config: &ModelConfig,
    init: InitKind,
    cases: usize,
    seed: u64,
) -> Result<CheckResult> {
    let mut worst = 0.0f64;
    for case in 0..cases {
        let s = case_seed(seed, case);
        let params = audit_params::<T>(config, init, s)?;
        let x = random_sequence::<T>(config.frame, 1, s)?.frame(0);
        let f = encode(&x, &params.autoencoder, &config.autoencoder)?;
        let back = decode(&f, &params.autoencoder, &config.autoencoder)?;
        worst = worst.max(back.max_abs_diff(&x));
    }
    let blocks = config.autoencoder.total_blocks();
    Ok(CheckResult::judge(
        "autoencoder_roundtrip",
        worst,
        bijectivity_tolerance(T::PRECISION, blocks),
        format!("{cases} cases, {blocks} blocks"),
    ))
}

/// Rebuilds the frame each rollout step consumed from its prediction and
/// the states before that step.
pub fn reconstruction_audit<T: Scalar>(
    config: &ModelConfig,
    init: InitKind,
    seeds: usize,
    seed: u64,
) -> Result<CheckResult> {
    const NAME: &str = "conditional_reversal";
    if config.predictor != PredictorKind::Rpm {
        return Ok(CheckResult::skipped(
            NAME,
            format!("{} predictor is not invertible", config.predictor.name()),
        ));
    }
    let mut worst = 0.0f64;
    let (mut clamped, mut gates) = (0usize, 0usize);
    let (lo, hi) = (T::of(GATE_EPS), T::of(1.0 - GATE_EPS));
    for case in 0..seeds {
        let s = case_seed(seed, case);
        let params = audit_params::<T>(config, init, s)?;
        let obs = random_sequence::<T>(config.frame, config.frames_in, s)?;
        let trace = rollout_traced(&obs, config.frames_out, &params, config, true)?;
        for k in 0..trace.frames.len() {
            let rebuilt = reconstruct_previous(&trace.frames[k], &trace.states_before[k], &params, config)?;
            worst = worst.max(rebuilt.max_abs_diff(&trace.inputs[k]));
            // gates pinned at the clamp make the inverse lean on the bound
            let input = match k {
                0 => encode(&trace.inputs[0], &params.autoencoder, &config.autoencoder)?,
                _ => trace.features[k - 1].clone(),
            };
            let (_, _, tape) = predictor_forward_cached(&input, &trace.states_before[k], &params.predictor)?;
            for g in tape.gates() {
                gates += g.len();
                clamped += g.data().iter().filter(|&&v| v <= lo || v >= hi).count();
            }
        }
    }
    Ok(CheckResult::judge(
        NAME,
        worst,
        reconstruction_threshold(T::PRECISION),
        format!(
            "{seeds} seeds x {} steps, {clamped} of {gates} gate elements at the clamp",
            config.frames_out
        ),
    ))
}

/// One sampled gradient coordinate.
#[derive(Debug, Clone, PartialEq)]
pub struct GradSample {
    pub name: String,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

/// Analytic gradients of one sequence loss against central differences
/// on `samples` randomly chosen parameters, in 64-bit.
pub fn grad_samples(
    config: &ModelConfig,
    init: InitKind,
    mode: BackwardMode,
    samples: usize,
    seed: u64,
) -> Result<Vec<GradSample>> {
    let config = ModelConfig {
        precision: Precision::F64,
        ..config.clone()
    };
    let params = audit_params::<f64>(&config, init, seed)?;
    let seq = random_sequence::<f64>(config.frame, config.sequence_len(), seed)?;
    let mut grads = params.zeros_like();
    sequence_gradients(&seq, &params, &config, mode, 1.0, &mut grads, &mut MemoryLedger::new())?;
    let flat = flatten(&params);
    let gflat = flatten(&grads);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picks = sample(&mut rng, flat.len(), samples.min(flat.len())).into_vec();
    picks.sort_unstable();
    let mut probe = params.clone();
    let mut out = Vec::with_capacity(picks.len());
    for idx in picks {
        let mut failure = None;
        let numeric = central_difference(
            |v| {
                *scalar_mut(&mut probe, idx).expect("index in range") = v;
                sequence_loss(&seq, &probe, &config).unwrap_or_else(|e| {
                    failure = Some(e);
                    f64::NAN
                })
            },
            flat[idx],
            GRAD_FD_STEP,
        );
        *scalar_mut(&mut probe, idx).expect("index in range") = flat[idx];
        if let Some(e) = failure {
            return Err(e);
        }
        out.push(GradSample {
            name: describe_scalar(&params, idx).expect("index in range"),
            analytic: gflat[idx],
            numeric,
            rel_error: relative_error(gflat[idx], numeric, GRAD_FLOOR),
        });
    }
    Ok(out)
}

pub fn grad_audit(config: &ModelConfig, init: InitKind, samples: usize, seed: u64) -> Result<CheckResult> {
    let s = grad_samples(config, init, BackwardMode::Reversible, samples, seed)?;
    let worst = s.iter().max_by(|a, b| a.rel_error.total_cmp(&b.rel_error));
    let (value, detail) = match worst {
        Some(w) => (
            w.rel_error,
            format!(
                "{} coords, worst {} ({:.6e} vs {:.6e})",
                s.len(),
                w.name,
                w.analytic,
                w.numeric
            ),
        ),
        None => (0.0, "model has no parameters".into()),
    };
    Ok(CheckResult::judge("gradient_oracle", value, GRAD_TOLERANCE, detail))
}

/// `max |a - b| / max(|a|, |b|)` over one kernel, zero when both vanish.
fn kernel_gap<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    let (mut diff, mut scale) = (0.0f64, 0.0f64);
    for (x, y) in a.iter().zip(b) {
        let (x, y) = (x.as_f64(), y.as_f64());
        diff = diff.max((x - y).abs());
        scale = scale.max(x.abs()).max(y.abs());
    }
    if scale == 0.0 {
        if diff == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        diff / scale
    }
}

/// Worst per-kernel relative gap between two gradient sets, and the name of
/// that kernel.
pub fn gradient_gap<T: Scalar>(a: &ModelParams<T>, b: &ModelParams<T>) -> (f64, String) {
    let mut worst = (0.0, String::new());
    for ((name, ka), (_, kb)) in a.kernel_list().into_iter().zip(b.kernel_list()) {
        let gw = kernel_gap(ka.weights(), kb.weights());
        let gb = kernel_gap(ka.bias(), kb.bias());
        for (g, part) in [(gw, "weight"), (gb, "bias")] {
            if g > worst.0 || g.is_nan() {
                worst = (g, format!("{name}.{part}"));
            }
        }
    }
    worst
}

pub fn equivalence_audit<T: Scalar>(
    config: &ModelConfig,
    init: InitKind,
    seeds: usize,
    seed: u64,
) -> Result<CheckResult> {
    let mut worst = (0.0f64, String::new());
    for case in 0..seeds {
        let s = case_seed(seed, case);
        let params = audit_params::<T>(config, init, s)?;
        let batch = (0..EQUIVALENCE_BATCH)
            .map(|b| random_sequence::<T>(config.frame, config.sequence_len(), s.wrapping_add(b as u64 * 7919)))
            .collect::<Result<Vec<_>>>()?;
        let a = compute_gradients(&batch, &params, config, BackwardMode::StoreAll)?;
        let b = compute_gradients(&batch, &params, config, BackwardMode::Reversible)?;
        let gap = gradient_gap(&a.grads, &b.grads);
        if gap.0 > worst.0 || gap.0.is_nan() {
            worst = gap;
        }
    }
    Ok(CheckResult::judge(
        "backward_equivalence",
        worst.0,
        equivalence_tolerance(T::PRECISION),
        format!(
            "{seeds} seeds, worst kernel {}",
            if worst.1.is_empty() { "-" } else { &worst.1 }
        ),
    ))
}

/// Max abs per-frame difference between the feature-shortcut rollout and
/// the decode/re-encode rollout.
pub fn shortcut_audit<T: Scalar>(
    config: &ModelConfig,
    init: InitKind,
    steps: usize,
    seeds: usize,
    seed: u64,
) -> Result<CheckResult> {
    let mut worst = 0.0f64;
    for case in 0..seeds {
        let s = case_seed(seed, case);
        let params = audit_params::<T>(config, init, s)?;
        let obs = random_sequence::<T>(config.frame, config.frames_in, s)?;
        let a = rollout(&obs, steps, &params, config)?;
        let b = rollout_reencode(&obs, steps, &params, config)?;
        for t in 0..steps {
            worst = worst.max(a.frame(t).max_abs_diff(&b.frame(t)));
        }
    }
    Ok(CheckResult::judge(
        "feature_shortcut",
        worst,
        SHORTCUT_TOLERANCE,
        format!("{seeds} seeds x {steps} steps"),
    ))
}

fn verify_at<T: Scalar>(config: &ModelConfig, init: InitKind, seed: u64) -> Result<Vec<CheckResult>> {
    let config = ModelConfig {
        precision: T::PRECISION,
        ..config.clone()
    };
    Ok(vec![
        shuffle_audit(&config, BIJECTIVITY_CASES, seed)?,
        bijectivity_audit::<T>(&config, init, BIJECTIVITY_CASES, seed)?,
        reconstruction_audit::<T>(&config, init, RECONSTRUCTION_SEEDS, seed)?,
        grad_audit(&config, init, GRAD_SAMPLES, seed)?,
        equivalence_audit::<T>(&config, init, EQUIVALENCE_SEEDS, seed)?,
        shortcut_audit::<T>(&config, init, SHORTCUT_STEPS, SHORTCUT_SEEDS, seed)?,
    ])
}

/// Every audit at `precision`. The gradient oracle always runs in 64-bit.
pub fn verify(config: &ModelConfig, init: InitKind, precision: Precision, seed: u64) -> Result<VerifyReport> {
    let checks = match precision {
        Precision::F32 => verify_at::<f32>(config, init, seed)?,
        Precision::F64 => verify_at::<f64>(config, init, seed)?,
    };
    Ok(VerifyReport { precision, checks })
}

/// Stored-activation peaks for one training sequence at the given
/// coupling depth. Blocks are split evenly over the configured stages.
pub fn memory_profile(config: &ModelConfig, depth: usize, mode: BackwardMode) -> Result<MemoryLedger> {
    let config = ModelConfig {
        precision: Precision::F32,
        ..with_depth(config, depth)?
    };
    let params = ModelParams::<f32>::seeded(&config, 0)?;
    let seq = random_sequence::<f32>(config.frame, config.sequence_len(), 0)?;
    let mut grads = params.zeros_like();
    let mut ledger = MemoryLedger::new();
    sequence_gradients(&seq, &params, &config, mode, 1.0, &mut grads, &mut ledger)?;
    Ok(ledger)
}
