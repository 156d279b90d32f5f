//! End-to-end model: warm-up, next-frame prediction, rollout and the
//! conditional reconstruction of a previous frame from a prediction.

use crate::autoencoder::{decode, encode, AutoencoderConfig, AutoencoderParams};
use crate::coupling::SplitPair;
use crate::error::{Error, Result};
use crate::params::{join, Initializer, KernelSet};
use crate::rpm::{predictor_forward, predictor_inverse, PredictorKind, PredictorParams, PredictorState};
use crate::tensor::{ConvKernel, Precision, Scalar, Shape3, Tensor3, Tensor4};

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub frame: Shape3,
    pub autoencoder: AutoencoderConfig,
    pub predictor: PredictorKind,
    pub rpm_count: usize,
    pub cell_kernel: usize,
    pub frames_in: usize,
    pub frames_out: usize,
    pub precision: Precision,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            frame: Shape3::new(16, 16, 1),
            autoencoder: AutoencoderConfig::default(),
            predictor: PredictorKind::Rpm,
            rpm_count: 4,
            cell_kernel: 3,
            frames_in: 6,
            frames_out: 2,
            precision: Precision::F32,
        }
    }
}

impl ModelConfig {
    /// Checks every structural constraint and returns the feature group shape.
    pub fn validate(&self) -> Result<Shape3> {
        if self.frame.h == 0 || self.frame.w == 0 || self.frame.c == 0 {
            return Err(Error::InvalidConfig(format!(
                "frame shape {} has a zero dimension",
                self.frame
            )));
        }
        if self.rpm_count == 0 {
            return Err(Error::InvalidConfig("rpm_count must be at least 1".into()));
        }
        if self.cell_kernel % 2 == 0 {
            return Err(Error::EvenKernel {
                kh: self.cell_kernel,
                kw: self.cell_kernel,
            });
        }
        if self.frames_in < 2 {
            return Err(Error::InvalidConfig("frames_in must be at least 2".into()));
        }
        if self.frames_out == 0 {
            return Err(Error::InvalidConfig("frames_out must be at least 1".into()));
        }
        let geo = self.autoencoder.geometry(self.frame)?;
        Ok(geo.last().expect("non-empty").group)
    }

    pub fn group_shape(&self) -> Result<Shape3> {
        self.validate()
    }

    pub fn sequence_len(&self) -> usize {
        self.frames_in + self.frames_out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub autoencoder: AutoencoderParams<T>,
    pub predictor: PredictorParams<T>,
}

impl<T: Scalar> ModelParams<T> {
    pub fn init(config: &ModelConfig, init: &mut Initializer) -> Result<Self> {
        let group = config.validate()?;
        let autoencoder = AutoencoderParams::init(&config.autoencoder, config.frame, init)?;
        let predictor = PredictorParams::init(config.predictor, config.rpm_count, group.c, config.cell_kernel, init)?;
        Ok(ModelParams { autoencoder, predictor })
    }

    pub fn seeded(config: &ModelConfig, seed: u64) -> Result<Self> {
        Self::init(config, &mut Initializer::seeded(seed))
    }

    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        Self::init(config, &mut Initializer::zeros())
    }

    pub fn zeros_like(&self) -> Self {
        ModelParams {
            autoencoder: self.autoencoder.zeros_like(),
            predictor: self.predictor.zeros_like(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            autoencoder: self.autoencoder.cast(),
            predictor: self.predictor.cast(),
        }
    }
}

impl<T: Scalar> KernelSet<T> for ModelParams<T> {
    fn kernels<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a ConvKernel<T>)>) {
        self.autoencoder.kernels(&join(prefix, "ae"), out);
        self.predictor.kernels(&join(prefix, "pred"), out);
    }

    fn kernels_mut<'a>(&'a mut self, out: &mut Vec<&'a mut ConvKernel<T>>) {
        self.autoencoder.kernels_mut(out);
        self.predictor.kernels_mut(out);
    }
}

/// What the predictor consumes on a step: a frame to encode, or features
/// already in latent space.
#[derive(Debug, Clone, Copy)]
pub enum StepInput<'a, T> {
    Frame(&'a Tensor3<T>),
    Features(&'a SplitPair<T>),
}

fn check_frame<T: Scalar>(x: &Tensor3<T>, config: &ModelConfig) -> Result<()> {
    if x.shape() != config.frame {
        return Err(Error::ShapeMismatch {
            expected: config.frame,
            actual: x.shape(),
        });
    }
    Ok(())
}

fn check_obs<T: Scalar>(obs: &Tensor4<T>, config: &ModelConfig) -> Result<()> {
    if obs.frame_shape() != config.frame {
        return Err(Error::ShapeMismatch {
            expected: config.frame,
            actual: obs.frame_shape(),
        });
    }
    if obs.frames() < 2 {
        return Err(Error::InvalidConfig(format!(
            "need at least 2 observed frames, got {}",
            obs.frames()
        )));
    }
    Ok(())
}

pub fn initial_state<T: Scalar>(params: &ModelParams<T>, config: &ModelConfig) -> Result<PredictorState<T>> {
    Ok(params.predictor.zero_state(config.group_shape()?))
}

/// One predictor step; returns the output features and the new states.
pub fn advance<T: Scalar>(
    input: StepInput<'_, T>,
    states: &PredictorState<T>,
    params: &ModelParams<T>,
    config: &ModelConfig,
) -> Result<(SplitPair<T>, PredictorState<T>)> {
    match input {
        StepInput::Frame(x) => {
            check_frame(x, config)?;
            let f = encode(x, &params.autoencoder, &config.autoencoder)?;
            predictor_forward(&f, states, &params.predictor)
        }
        StepInput::Features(f) => predictor_forward(f, states, &params.predictor),
    }
}

/// Predicts the next frame. Returns the decoded frame, the predictor's
/// output features, and the new states.
pub fn predict_next<T: Scalar>(
    input: StepInput<'_, T>,
    states: &PredictorState<T>,
    params: &ModelParams<T>,
    config: &ModelConfig,
) -> Result<(Tensor3<T>, SplitPair<T>, PredictorState<T>)> {
    let (features, next) = advance(input, states, params, config)?;
    let frame = decode(&features, &params.autoencoder, &config.autoencoder)?;
    Ok((frame, features, next))
}

/// Runs the predictor over every frame, discarding its outputs.
pub fn condition<T: Scalar>(
    frames: &[Tensor3<T>],
    states: PredictorState<T>,
    params: &ModelParams<T>,
    config: &ModelConfig,
) -> Result<PredictorState<T>> {
    frames
        .iter()
        .try_fold(states, |st, x| Ok(advance(StepInput::Frame(x), &st, params, config)?.1))
}

/// Pushes every observed frame through the predictor. Returns the final
/// states and the output features for the last frame.
pub fn warmup<T: Scalar>(
    frames: &Tensor4<T>,
    params: &ModelParams<T>,
    config: &ModelConfig,
) -> Result<(PredictorState<T>, SplitPair<T>)> {
    check_obs(frames, config)?;
    let all: Vec<Tensor3<T>> = (0..frames.frames()).map(|t| frames.frame(t)).collect();
    let (last, head) = all.split_last().expect("at least two frames");
    let st = condition(head, initial_state(params, config)?, params, config)?;
    let (out, st) = advance(StepInput::Frame(last), &st, params, config)?;
    Ok((st, out))
}

/// Per-step record of a rollout.
#[derive(Debug, Clone)]
pub struct RolloutTrace<T> {
    pub frames: Vec<Tensor3<T>>,
    pub features: Vec<SplitPair<T>>,
    /// Predictor states right before the step that produced `frames[k]`.
    pub states_before: Vec<PredictorState<T>>,
    /// What step `k` consumed: the last observation or the previous prediction.
    pub inputs: Vec<Tensor3<T>>,
}

impl<T: Scalar> RolloutTrace<T> {
    pub fn to_tensor(&self) -> Result<Tensor4<T>> {
        Tensor4::from_frames(&self.frames)
    }
}

/// `k` predicted frames after observing `obs`.
///
/// With `shortcut`, steps after the first feed the previous output
/// features straight back into the predictor. Without it, each predicted
/// frame is decoded and encoded again.
pub fn rollout_traced<T: Scalar>(
    obs: &Tensor4<T>,
    k: usize,
    params: &ModelParams<T>,
    config: &ModelConfig,
    shortcut: bool,
) -> Result<RolloutTrace<T>> {
    check_obs(obs, config)?;
    if k == 0 {
        return Err(Error::InvalidConfig("rollout needs at least one step".into()));
    }
    let all: Vec<Tensor3<T>> = (0..obs.frames()).map(|t| obs.frame(t)).collect();
    let (last, head) = all.split_last().expect("at least two frames");
    let mut st = condition(head, initial_state(params, config)?, params, config)?;
    let mut trace = RolloutTrace {
        frames: Vec::with_capacity(k),
        features: Vec::with_capacity(k),
        states_before: Vec::with_capacity(k),
        inputs: Vec::with_capacity(k),
    };
    for step in 0..k {
        let input = match (step, shortcut) {
            (0, _) => StepInput::Frame(last),
            (_, true) => StepInput::Features(&trace.features[step - 1]),
            (_, false) => StepInput::Frame(&trace.frames[step - 1]),
        };
        let (frame, features, next) = predict_next(input, &st, params, config)?;
        let prev = std::mem::replace(&mut st, next);
        trace.inputs.push(if step == 0 {
            last.clone()
        } else {
            trace.frames[step - 1].clone()
        });
        trace.states_before.push(prev);
        trace.frames.push(frame);
        trace.features.push(features);
    }
    Ok(trace)
}

pub fn rollout<T: Scalar>(
    obs: &Tensor4<T>,
    k: usize,
    params: &ModelParams<T>,
    config: &ModelConfig,
) -> Result<Tensor4<T>> {
    rollout_traced(obs, k, params, config, true)?.to_tensor()
}

/// Rollout that decodes and re-encodes every prediction.
pub fn rollout_reencode<T: Scalar>(
    obs: &Tensor4<T>,
    k: usize,
    params: &ModelParams<T>,
    config: &ModelConfig,
) -> Result<Tensor4<T>> {
    rollout_traced(obs, k, params, config, false)?.to_tensor()
}

/// Recovers the frame a prediction was made from, given the predictor
/// states captured right before that step.
pub fn reconstruct_previous<T: Scalar>(
    pred_frame: &Tensor3<T>,
    states_prev: &PredictorState<T>,
    params: &ModelParams<T>,
    config: &ModelConfig,
) -> Result<Tensor3<T>> {
    check_frame(pred_frame, config)?;
    let f = encode(pred_frame, &params.autoencoder, &config.autoencoder)?;
    let prev = predictor_inverse(&f, states_prev, &params.predictor)?;
    decode(&prev, &params.autoencoder, &config.autoencoder)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autoencoder::StageSpec;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_config() -> ModelConfig {
        ModelConfig {
            frame: Shape3::new(8, 8, 1),
            frames_in: 3,
            ..ModelConfig::default()
        }
    }

    fn obs<T: Scalar>(config: &ModelConfig, frames: usize, seed: u64) -> Tensor4<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = frames * config.frame.len();
        Tensor4::from_vec(
            frames,
            config.frame,
            (0..n).map(|_| T::of(rng.gen_range(0.0..1.0))).collect(),
        )
        .unwrap()
    }

    #[test]
    fn validation() {
        let c = ModelConfig::default();
        assert_eq!(c.validate().unwrap(), Shape3::new(4, 4, 8));
        for bad in [
            ModelConfig {
                rpm_count: 0,
                ..c.clone()
            },
            ModelConfig {
                frames_in: 1,
                ..c.clone()
            },
            ModelConfig {
                frames_out: 0,
                ..c.clone()
            },
            ModelConfig {
                cell_kernel: 2,
                ..c.clone()
            },
            ModelConfig {
                frame: Shape3::new(10, 10, 1),
                ..c.clone()
            },
        ] {
            assert!(bad.validate().is_err(), "{bad:?}");
        }
    }

    #[test]
    fn zero_model_warmup_and_prediction() {
        let config = ModelConfig {
            rpm_count: 2,
            frames_in: 2,
            ..small_config()
        };
        let params = ModelParams::<f64>::zeros(&config).unwrap();
        let x = obs::<f64>(&config, 2, 1);
        let (st, out) = warmup(&x, &params, &config).unwrap();
        assert_eq!(st.cells.len(), 2);
        let f1 = encode(&x.frame(1), &params.autoencoder, &config.autoencoder).unwrap();
        assert!(out.bit_eq(&f1.scale(0.5)));

        let (frame, _, _) = predict_next(StepInput::Frame(&x.frame(0)), &st, &params, &config).unwrap();
        let f0 = encode(&x.frame(0), &params.autoencoder, &config.autoencoder).unwrap();
        let want = decode(&f0.scale(0.5), &params.autoencoder, &config.autoencoder).unwrap();
        assert!(frame.bit_eq(&want));
        assert_eq!(frame.shape(), config.frame);
    }

    #[test]
    fn zero_model_two_step_rollout_quarters() {
        let config = ModelConfig {
            rpm_count: 2,
            ..small_config()
        };
        let params = ModelParams::<f64>::zeros(&config).unwrap();
        let x = obs::<f64>(&config, 3, 2);
        let r = rollout(&x, 2, &params, &config).unwrap();
        let f = encode(&x.frame(2), &params.autoencoder, &config.autoencoder).unwrap();
        let want = decode(&f.scale(0.25), &params.autoencoder, &config.autoencoder).unwrap();
        assert!(r.frame(1).bit_eq(&want));
        // zero couplings make the autoencoder a pure permutation
        assert!(r.frame(1).max_abs_diff(&x.frame(2).map(|v| 0.25 * v)) <= 1e-15);
    }

    #[test]
    fn one_step_rollout_equals_predict_next() {
        let config = small_config();
        let params = ModelParams::<f32>::seeded(&config, 3).unwrap();
        let x = obs::<f32>(&config, 3, 3);
        let r = rollout(&x, 1, &params, &config).unwrap();
        let head: Vec<_> = (0..2).map(|t| x.frame(t)).collect();
        let st = condition(&head, initial_state(&params, &config).unwrap(), &params, &config).unwrap();
        let (frame, _, _) = predict_next(StepInput::Frame(&x.frame(2)), &st, &params, &config).unwrap();
        assert!(r.frame(0).bit_eq(&frame));
        let (_, wf) = warmup(&x, &params, &config).unwrap();
        let decoded = decode(&wf, &params.autoencoder, &config.autoencoder).unwrap();
        assert!(decoded.bit_eq(&frame));
    }

    #[test]
    fn deterministic_states() {
        let config = small_config();
        let params = ModelParams::<f32>::seeded(&config, 4).unwrap();
        let x = obs::<f32>(&config, 3, 4);
        let (a, _) = warmup(&x, &params, &config).unwrap();
        let (b, _) = warmup(&x, &params, &config).unwrap();
        assert!(a.bit_eq(&b));
    }

    #[test]
    fn shortcut_matches_reencoding() {
        let config = small_config();
        for seed in 0..3 {
            let params = ModelParams::<f32>::seeded(&config, seed).unwrap();
            let x = obs::<f32>(&config, 3, seed);
            let a = rollout(&x, 3, &params, &config).unwrap();
            let b = rollout_reencode(&x, 3, &params, &config).unwrap();
            for t in 0..3 {
                assert!(a.frame(t).max_abs_diff(&b.frame(t)) <= 1e-4);
            }
        }
    }

    #[test]
    fn reconstruction_zero_model_tiny_frame() {
        let config = ModelConfig {
            frame: Shape3::new(2, 2, 1),
            autoencoder: AutoencoderConfig {
                stages: vec![StageSpec { shuffle: 2, blocks: 2 }],
                ..AutoencoderConfig::default()
            },
            frames_in: 2,
            ..ModelConfig::default()
        };
        let params = ModelParams::<f32>::zeros(&config).unwrap();
        let x = obs::<f32>(&config, 2, 5);
        let trace = rollout_traced(&x, 1, &params, &config, true).unwrap();
        let rec = reconstruct_previous(&trace.frames[0], &trace.states_before[0], &params, &config).unwrap();
        assert!(rec.max_abs_diff(&x.frame(1)) <= 1e-5);
    }

    #[test]
    fn reconstruction_seeded() {
        let config = small_config();
        let params = ModelParams::<f64>::seeded(&config, 6).unwrap();
        let x = obs::<f64>(&config, 3, 6);
        let trace = rollout_traced(&x, 3, &params, &config, true).unwrap();
        for k in 0..3 {
            let rec = reconstruct_previous(&trace.frames[k], &trace.states_before[k], &params, &config).unwrap();
            assert!(rec.max_abs_diff(&trace.inputs[k]) <= 1e-8, "step {k}");
        }
    }

    #[test]
    fn stacked_model_predicts_but_cannot_reconstruct() {
        let config = ModelConfig {
            predictor: PredictorKind::Stacked,
            rpm_count: 2,
            ..small_config()
        };
        let params = ModelParams::<f32>::seeded(&config, 7).unwrap();
        let x = obs::<f32>(&config, 3, 7);
        let trace = rollout_traced(&x, 2, &params, &config, true).unwrap();
        assert_eq!(trace.frames[1].shape(), config.frame);
        assert!(matches!(
            reconstruct_previous(&trace.frames[0], &trace.states_before[0], &params, &config),
            Err(Error::NotReversible)
        ));
    }

    #[test]
    fn shape_errors() {
        let config = small_config();
        let params = ModelParams::<f32>::seeded(&config, 0).unwrap();
        let wrong = Tensor4::<f32>::zeros(3, Shape3::new(4, 4, 1));
        assert!(warmup(&wrong, &params, &config).is_err());
        let single = Tensor4::<f32>::zeros(1, config.frame);
        assert!(rollout(&single, 1, &params, &config).is_err());
        let x = obs::<f32>(&config, 3, 0);
        assert!(rollout(&x, 0, &params, &config).is_err());
    }
}
