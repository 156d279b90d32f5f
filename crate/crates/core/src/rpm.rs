//! Reversible predictive modules and the predictor built from them.
//!
//! One RPM keeps a pass-through group fixed, runs it through a ConvLSTM,
//! and blends the hidden state into the other group through a sigmoid
//! gate:
//!
//! ```text
//! h   = ConvLSTM(pass, state)
//! g   = clamp(sigmoid(W2 * relu(W1 * h + b1) + b2), eps, 1 - eps)
//! upd = (1 - g) . old + g . h
//! ```
//!
//! Given the same pre-step state, `old = (upd - g . h) / (1 - g)`.

use crate::convlstm::{convlstm_backward, convlstm_step_cached, zero_state, CellState, ConvLstmParams, LstmCache};
use crate::coupling::SplitPair;
use crate::error::{Error, Result};
use crate::ledger::{Category, MemoryLedger};
use crate::params::{join, Initializer, KernelSet};
use crate::tensor::{conv2d, conv2d_backward, sigmoid, ConvKernel, Scalar, Shape3, Tensor3};

/// Gate clamp bound.
pub const GATE_EPS: f64 = 1e-6;
pub const ATTENTION_KERNEL: usize = 3;
pub const FORGET_BIAS: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Group {
    One,
    Two,
}

impl Group {
    /// Group rewritten by the `k`-th RPM of a stack.
    pub fn for_index(k: usize) -> Group {
        if k % 2 == 0 {
            Group::Two
        } else {
            Group::One
        }
    }

    pub fn number(self) -> u8 {
        match self {
            Group::One => 1,
            Group::Two => 2,
        }
    }
}

fn split_roles<T>(pair: &SplitPair<T>, updates: Group) -> (&Tensor3<T>, &Tensor3<T>) {
    match updates {
        Group::Two => (&pair.g1, &pair.g2),
        Group::One => (&pair.g2, &pair.g1),
    }
}

fn join_roles<T>(pass: Tensor3<T>, upd: Tensor3<T>, updates: Group) -> SplitPair<T> {
    match updates {
        Group::Two => SplitPair { g1: pass, g2: upd },
        Group::One => SplitPair { g1: upd, g2: pass },
    }
}

/// `(1 - g) . old + g . h`
pub fn blend<T: Scalar>(old: &Tensor3<T>, h: &Tensor3<T>, g: &Tensor3<T>) -> Tensor3<T> {
    let one = T::one();
    let mut out = old.zip_map(g, |o, gv| (one - gv) * o);
    out.add_assign(&h.zip_map(g, |hv, gv| gv * hv));
    out
}

/// `(upd - g . h) / (1 - g)`
pub fn unblend<T: Scalar>(upd: &Tensor3<T>, h: &Tensor3<T>, g: &Tensor3<T>) -> Tensor3<T> {
    let one = T::one();
    let num = upd.zip_map(&h.zip_map(g, |hv, gv| gv * hv), |u, gh| u - gh);
    num.zip_map(g, |n, gv| n / (one - gv))
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams<T> {
    pub w1: ConvKernel<T>,
    pub w2: ConvKernel<T>,
}

impl<T: Scalar> AttentionParams<T> {
    pub fn init(channels: usize, init: &mut Initializer) -> Result<Self> {
        Ok(AttentionParams {
            w1: init.kernel(channels, channels, ATTENTION_KERNEL)?,
            w2: init.kernel(channels, channels, ATTENTION_KERNEL)?,
        })
    }

    pub fn zeros_like(&self) -> Self {
        AttentionParams {
            w1: self.w1.zeros_like(),
            w2: self.w2.zeros_like(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> AttentionParams<U> {
        AttentionParams {
            w1: self.w1.cast(),
            w2: self.w2.cast(),
        }
    }
}

impl<T: Scalar> KernelSet<T> for AttentionParams<T> {
    fn kernels<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a ConvKernel<T>)>) {
        out.push((join(prefix, "w1"), &self.w1));
        out.push((join(prefix, "w2"), &self.w2));
    }

    fn kernels_mut<'a>(&'a mut self, out: &mut Vec<&'a mut ConvKernel<T>>) {
        out.push(&mut self.w1);
        out.push(&mut self.w2);
    }
}

fn clamp_gate<T: Scalar>(s: T) -> T {
    let lo = T::of(GATE_EPS);
    let hi = T::one() - lo;
    if s < lo {
        lo
    } else if s > hi {
        hi
    } else {
        s
    }
}

/// Derivative of the clamped sigmoid, expressed through its output.
fn gate_slope<T: Scalar>(g: T) -> T {
    let lo = T::of(GATE_EPS);
    if g > lo && g < T::one() - lo {
        g * (T::one() - g)
    } else {
        T::zero()
    }
}

pub fn attention_gate<T: Scalar>(h: &Tensor3<T>, params: &AttentionParams<T>) -> Result<Tensor3<T>> {
    Ok(attention_forward(h, params)?.1)
}

/// Returns the pre-relu hidden activation and the gate.
fn attention_forward<T: Scalar>(h: &Tensor3<T>, params: &AttentionParams<T>) -> Result<(Tensor3<T>, Tensor3<T>)> {
    if h.shape().c != params.w1.in_channels() || params.w2.out_channels() != h.shape().c {
        return Err(Error::ShapeMismatch {
            expected: h.shape().with_channels(params.w1.in_channels()),
            actual: h.shape(),
        });
    }
    let a1 = conv2d(h, &params.w1)?;
    let r = a1.map(|v| v.max(T::zero()));
    let g = conv2d(&r, &params.w2)?.map(|v| clamp_gate(sigmoid(v)));
    Ok((a1, g))
}

/// Accumulates kernel cotangents and returns the cotangent of `h`.
fn attention_backward<T: Scalar>(
    params: &AttentionParams<T>,
    h: &Tensor3<T>,
    a1: &Tensor3<T>,
    g: &Tensor3<T>,
    g_gate: &Tensor3<T>,
    grads: &mut AttentionParams<T>,
) -> Tensor3<T> {
    let g_a2 = g_gate.zip_map(g, |gg, gv| gg * gate_slope(gv));
    let r = a1.map(|v| v.max(T::zero()));
    let g_r = conv2d_backward(&r, &params.w2, &g_a2, &mut grads.w2, true).expect("requested");
    let g_a1 = g_r.zip_map(a1, |gv, av| if av > T::zero() { gv } else { T::zero() });
    conv2d_backward(h, &params.w1, &g_a1, &mut grads.w1, true).expect("requested")
}

#[derive(Debug, Clone, PartialEq)]
pub struct RpmParams<T> {
    pub cell: ConvLstmParams<T>,
    pub attention: AttentionParams<T>,
    pub updates: Group,
}

impl<T: Scalar> RpmParams<T> {
    pub fn init(channels: usize, cell_kernel: usize, updates: Group, init: &mut Initializer) -> Result<Self> {
        Ok(RpmParams {
            cell: ConvLstmParams::init(channels, cell_kernel, FORGET_BIAS, init)?,
            attention: AttentionParams::init(channels, init)?,
            updates,
        })
    }

    pub fn channels(&self) -> usize {
        self.cell.channels()
    }

    pub fn zeros_like(&self) -> Self {
        RpmParams {
            cell: self.cell.zeros_like(),
            attention: self.attention.zeros_like(),
            updates: self.updates,
        }
    }

    pub fn cast<U: Scalar>(&self) -> RpmParams<U> {
        RpmParams {
            cell: self.cell.cast(),
            attention: self.attention.cast(),
            updates: self.updates,
        }
    }
}

impl<T: Scalar> KernelSet<T> for RpmParams<T> {
    fn kernels<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a ConvKernel<T>)>) {
        self.cell.kernels(&join(prefix, "cell"), out);
        self.attention.kernels(&join(prefix, "attn"), out);
    }

    fn kernels_mut<'a>(&'a mut self, out: &mut Vec<&'a mut ConvKernel<T>>) {
        self.cell.kernels_mut(out);
        self.attention.kernels_mut(out);
    }
}

/// Activations one RPM step needs for its cotangent rule.
#[derive(Debug, Clone)]
pub struct RpmCache<T> {
    lstm: LstmCache<T>,
    h: Tensor3<T>,
    a1: Tensor3<T>,
    gate: Tensor3<T>,
    old: Tensor3<T>,
}

impl<T: Scalar> RpmCache<T> {
    pub fn elems(&self) -> usize {
        self.lstm.elems() + self.h.len() + self.a1.len() + self.gate.len() + self.old.len()
    }

    pub fn gate(&self) -> &Tensor3<T> {
        &self.gate
    }
}

pub fn rpm_forward<T: Scalar>(
    pair: &SplitPair<T>,
    state: &CellState<T>,
    params: &RpmParams<T>,
) -> Result<(SplitPair<T>, CellState<T>)> {
    let (out, st, _) = rpm_forward_cached(pair, state, params)?;
    Ok((out, st))
}

pub fn rpm_forward_cached<T: Scalar>(
    pair: &SplitPair<T>,
    state: &CellState<T>,
    params: &RpmParams<T>,
) -> Result<(SplitPair<T>, CellState<T>, RpmCache<T>)> {
    let (pass, old) = split_roles(pair, params.updates);
    let (next, lstm) = convlstm_step_cached(pass, state, &params.cell)?;
    let (a1, gate) = attention_forward(&next.h, &params.attention)?;
    let upd = blend(old, &next.h, &gate);
    let out = join_roles(pass.clone(), upd, params.updates);
    let cache = RpmCache {
        lstm,
        h: next.h.clone(),
        a1,
        gate,
        old: old.clone(),
    };
    Ok((out, next, cache))
}

pub fn rpm_inverse<T: Scalar>(
    pair_out: &SplitPair<T>,
    state: &CellState<T>,
    params: &RpmParams<T>,
) -> Result<SplitPair<T>> {
    let (pass, upd) = split_roles(pair_out, params.updates);
    let (next, _) = convlstm_step_cached(pass, state, &params.cell)?;
    let gate = attention_gate(&next.h, &params.attention)?;
    Ok(join_roles(pass.clone(), unblend(upd, &next.h, &gate), params.updates))
}

/// Rebuilds an RPM step's input and cache from its output, the pre-step
/// state and the gate recorded during the forward pass.
///
/// The cell is re-run on the pass-through group; only the first attention
/// convolution is recomputed, the gate itself is taken as stored.
pub fn rpm_reconstruct<T: Scalar>(
    pair_out: &SplitPair<T>,
    state: &CellState<T>,
    gate: &Tensor3<T>,
    params: &RpmParams<T>,
) -> Result<(SplitPair<T>, RpmCache<T>)> {
    let (pass, upd) = split_roles(pair_out, params.updates);
    let (next, lstm) = convlstm_step_cached(pass, state, &params.cell)?;
    if gate.shape() != next.h.shape() {
        return Err(Error::ShapeMismatch {
            expected: next.h.shape(),
            actual: gate.shape(),
        });
    }
    let a1 = conv2d(&next.h, &params.attention.w1)?;
    let old = unblend(upd, &next.h, gate);
    let input = join_roles(pass.clone(), old.clone(), params.updates);
    let cache = RpmCache {
        lstm,
        h: next.h,
        a1,
        gate: gate.clone(),
        old,
    };
    Ok((input, cache))
}

/// Cotangent rule for one RPM step. Returns the cotangents of the input
/// pair and of the pre-step state.
pub fn rpm_backward<T: Scalar>(
    params: &RpmParams<T>,
    cache: &RpmCache<T>,
    g_out: &SplitPair<T>,
    g_state: &CellState<T>,
    grads: &mut RpmParams<T>,
) -> (SplitPair<T>, CellState<T>) {
    let one = T::one();
    let (g_pass_out, g_upd) = split_roles(g_out, params.updates);
    let g_old = g_upd.zip_map(&cache.gate, |gu, gv| gu * (one - gv));
    let g_gate = g_upd.zip_map(&cache.h.zip_map(&cache.old, |h, o| h - o), |gu, d| gu * d);
    let mut g_h = g_upd.zip_map(&cache.gate, |gu, gv| gu * gv);
    g_h.add_assign(&attention_backward(
        &params.attention,
        &cache.h,
        &cache.a1,
        &cache.gate,
        &g_gate,
        &mut grads.attention,
    ));
    g_h.add_assign(&g_state.h);
    let g_next = CellState {
        h: g_h,
        c: g_state.c.clone(),
    };
    let (g_x, g_prev) = convlstm_backward(&params.cell, &cache.lstm, &g_next, &mut grads.cell);
    let mut g_pass = g_pass_out.clone();
    g_pass.add_assign(&g_x);
    (join_roles(g_pass, g_old, params.updates), g_prev)
}

/// Stack of ConvLSTM layers on the merged pair, used as a non-reversible
/// reference predictor. Every layer has `2 * group_channels` channels.
#[derive(Debug, Clone, PartialEq)]
pub struct StackedParams<T> {
    pub layers: Vec<ConvLstmParams<T>>,
}

/// Predictor parameters: alternating RPMs or the stacked-ConvLSTM baseline.
#[derive(Debug, Clone, PartialEq)]
pub enum PredictorParams<T> {
    Rpm(Vec<RpmParams<T>>),
    Stacked(StackedParams<T>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PredictorKind {
    Rpm,
    Stacked,
}

impl PredictorKind {
    pub fn name(self) -> &'static str {
        match self {
            PredictorKind::Rpm => "rpm",
            PredictorKind::Stacked => "stacked",
        }
    }
}

impl std::str::FromStr for PredictorKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "rpm" => Ok(PredictorKind::Rpm),
            "stacked" => Ok(PredictorKind::Stacked),
            other => Err(format!("unknown predictor '{other}' (expected rpm or stacked)")),
        }
    }
}

impl<T: Scalar> PredictorParams<T> {
    /// `count` RPMs (or stacked layers) over groups of `group_channels`.
    pub fn init(
        kind: PredictorKind,
        count: usize,
        group_channels: usize,
        cell_kernel: usize,
        init: &mut Initializer,
    ) -> Result<Self> {
        if count == 0 {
            return Err(Error::InvalidConfig("predictor needs at least one module".into()));
        }
        match kind {
            PredictorKind::Rpm => (0..count)
                .map(|k| RpmParams::init(group_channels, cell_kernel, Group::for_index(k), init))
                .collect::<Result<Vec<_>>>()
                .map(PredictorParams::Rpm),
            PredictorKind::Stacked => (0..count)
                .map(|_| ConvLstmParams::init(2 * group_channels, cell_kernel, FORGET_BIAS, init))
                .collect::<Result<Vec<_>>>()
                .map(|layers| PredictorParams::Stacked(StackedParams { layers })),
        }
    }

    pub fn kind(&self) -> PredictorKind {
        match self {
            PredictorParams::Rpm(_) => PredictorKind::Rpm,
            PredictorParams::Stacked(_) => PredictorKind::Stacked,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            PredictorParams::Rpm(r) => r.len(),
            PredictorParams::Stacked(s) => s.layers.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Non-empty, and consecutive RPMs rewrite different groups.
    pub fn validate(&self) -> Result<()> {
        if self.is_empty() {
            return Err(Error::InvalidConfig("predictor needs at least one module".into()));
        }
        if let PredictorParams::Rpm(rpms) = self {
            for (k, w) in rpms.windows(2).enumerate() {
                if w[0].updates == w[1].updates {
                    return Err(Error::InvalidConfig(format!(
                        "rpm {} and rpm {} both update group {}",
                        k,
                        k + 1,
                        w[0].updates.number()
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn is_reversible(&self) -> bool {
        matches!(self, PredictorParams::Rpm(_))
    }

    /// Zero recurrent state for features with the given group shape.
    pub fn zero_state(&self, group: Shape3) -> PredictorState<T> {
        let cells = match self {
            PredictorParams::Rpm(r) => r.iter().map(|_| zero_state(group)).collect(),
            PredictorParams::Stacked(s) => s
                .layers
                .iter()
                .map(|l| zero_state(group.with_channels(l.channels())))
                .collect(),
        };
        PredictorState { cells }
    }

    pub fn zeros_like(&self) -> Self {
        match self {
            PredictorParams::Rpm(r) => PredictorParams::Rpm(r.iter().map(|p| p.zeros_like()).collect()),
            PredictorParams::Stacked(s) => PredictorParams::Stacked(StackedParams {
                layers: s.layers.iter().map(|l| l.zeros_like()).collect(),
            }),
        }
    }

    pub fn cast<U: Scalar>(&self) -> PredictorParams<U> {
        match self {
            PredictorParams::Rpm(r) => PredictorParams::Rpm(r.iter().map(|p| p.cast()).collect()),
            PredictorParams::Stacked(s) => PredictorParams::Stacked(StackedParams {
                layers: s.layers.iter().map(|l| l.cast()).collect(),
            }),
        }
    }
}

impl<T: Scalar> KernelSet<T> for PredictorParams<T> {
    fn kernels<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a ConvKernel<T>)>) {
        match self {
            PredictorParams::Rpm(r) => {
                for (k, p) in r.iter().enumerate() {
                    p.kernels(&join(prefix, &format!("rpm{k}")), out);
                }
            }
            PredictorParams::Stacked(s) => {
                for (k, l) in s.layers.iter().enumerate() {
                    l.kernels(&join(prefix, &format!("lstm{k}")), out);
                }
            }
        }
    }

    fn kernels_mut<'a>(&'a mut self, out: &mut Vec<&'a mut ConvKernel<T>>) {
        match self {
            PredictorParams::Rpm(r) => r.iter_mut().for_each(|p| p.kernels_mut(out)),
            PredictorParams::Stacked(s) => s.layers.iter_mut().for_each(|l| l.kernels_mut(out)),
        }
    }
}

/// One recurrent state per RPM (or stacked layer), in stack order.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictorState<T> {
    pub cells: Vec<CellState<T>>,
}

impl<T: Scalar> PredictorState<T> {
    pub fn elems(&self) -> usize {
        self.cells.iter().map(|c| c.elems()).sum()
    }

    pub fn zeros_like(&self) -> Self {
        PredictorState {
            cells: self.cells.iter().map(|c| zero_state(c.shape())).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.cells.iter_mut().zip(&other.cells) {
            a.add_assign(b);
        }
    }

    pub fn bit_eq(&self, other: &Self) -> bool {
        self.cells.len() == other.cells.len() && self.cells.iter().zip(&other.cells).all(|(a, b)| a.bit_eq(b))
    }

    pub fn cast<U: Scalar>(&self) -> PredictorState<U> {
        PredictorState {
            cells: self.cells.iter().map(|c| c.cast()).collect(),
        }
    }
}

fn check_states<T: Scalar>(params: &PredictorParams<T>, states: &PredictorState<T>) -> Result<()> {
    if states.cells.len() != params.len() {
        return Err(Error::LengthMismatch {
            expected: params.len(),
            actual: states.cells.len(),
        });
    }
    Ok(())
}

/// Tape of one predictor step in store-everything mode.
#[derive(Debug, Clone)]
pub enum PredictorTape<T> {
    Rpm(Vec<RpmCache<T>>),
    Stacked(Vec<LstmCache<T>>),
}

impl<T: Scalar> PredictorTape<T> {
    pub fn elems(&self) -> usize {
        match self {
            PredictorTape::Rpm(c) => c.iter().map(|c| c.elems()).sum(),
            PredictorTape::Stacked(c) => c.iter().map(|c| c.elems()).sum(),
        }
    }

    /// Gate tensors in RPM order (empty for the stacked baseline).
    pub fn gates(&self) -> Vec<Tensor3<T>> {
        match self {
            PredictorTape::Rpm(c) => c.iter().map(|c| c.gate.clone()).collect(),
            PredictorTape::Stacked(_) => Vec::new(),
        }
    }
}

pub fn predictor_forward<T: Scalar>(
    pair: &SplitPair<T>,
    states: &PredictorState<T>,
    params: &PredictorParams<T>,
) -> Result<(SplitPair<T>, PredictorState<T>)> {
    let (out, next, _) = predictor_forward_cached(pair, states, params)?;
    Ok((out, next))
}

pub fn predictor_forward_cached<T: Scalar>(
    pair: &SplitPair<T>,
    states: &PredictorState<T>,
    params: &PredictorParams<T>,
) -> Result<(SplitPair<T>, PredictorState<T>, PredictorTape<T>)> {
    check_states(params, states)?;
    match params {
        PredictorParams::Rpm(rpms) => {
            let mut p = pair.clone();
            let mut cells = Vec::with_capacity(rpms.len());
            let mut caches = Vec::with_capacity(rpms.len());
            for (rp, st) in rpms.iter().zip(&states.cells) {
                let (out, next, cache) = rpm_forward_cached(&p, st, rp)?;
                p = out;
                cells.push(next);
                caches.push(cache);
            }
            Ok((p, PredictorState { cells }, PredictorTape::Rpm(caches)))
        }
        PredictorParams::Stacked(s) => {
            let mut x = pair.merge();
            let mut cells = Vec::with_capacity(s.layers.len());
            let mut caches = Vec::with_capacity(s.layers.len());
            for (layer, st) in s.layers.iter().zip(&states.cells) {
                let (next, cache) = convlstm_step_cached(&x, st, layer)?;
                x = next.h.clone();
                cells.push(next);
                caches.push(cache);
            }
            Ok((
                SplitPair::split(&x)?,
                PredictorState { cells },
                PredictorTape::Stacked(caches),
            ))
        }
    }
}

/// Conditional inverse: recovers the input pair of a predictor step from
/// its output and the states the step started from.
pub fn predictor_inverse<T: Scalar>(
    pair_out: &SplitPair<T>,
    states_prev: &PredictorState<T>,
    params: &PredictorParams<T>,
) -> Result<SplitPair<T>> {
    check_states(params, states_prev)?;
    match params {
        PredictorParams::Rpm(rpms) => {
            let mut p = pair_out.clone();
            for (rp, st) in rpms.iter().zip(&states_prev.cells).rev() {
                p = rpm_inverse(&p, st, rp)?;
            }
            Ok(p)
        }
        PredictorParams::Stacked(_) => Err(Error::NotReversible),
    }
}

/// Backward through a stored predictor step. Returns the cotangents of the
/// input pair and of the pre-step states.
pub fn predictor_backward_stored<T: Scalar>(
    params: &PredictorParams<T>,
    tape: PredictorTape<T>,
    g_out: &SplitPair<T>,
    g_states: &PredictorState<T>,
    grads: &mut PredictorParams<T>,
) -> Result<(SplitPair<T>, PredictorState<T>)> {
    check_states(params, g_states)?;
    match (params, tape, grads) {
        (PredictorParams::Rpm(rpms), PredictorTape::Rpm(caches), PredictorParams::Rpm(gr)) => {
            let mut g = g_out.clone();
            let mut cells = Vec::with_capacity(rpms.len());
            for k in (0..rpms.len()).rev() {
                let (gp, gs) = rpm_backward(&rpms[k], &caches[k], &g, &g_states.cells[k], &mut gr[k]);
                g = gp;
                cells.push(gs);
            }
            cells.reverse();
            Ok((g, PredictorState { cells }))
        }
        (PredictorParams::Stacked(s), PredictorTape::Stacked(caches), PredictorParams::Stacked(gr)) => {
            let mut g_h = g_out.merge();
            let mut cells = Vec::with_capacity(s.layers.len());
            for k in (0..s.layers.len()).rev() {
                let mut g_next = g_states.cells[k].clone();
                g_next.h.add_assign(&g_h);
                let (g_x, g_prev) = convlstm_backward(&s.layers[k], &caches[k], &g_next, &mut gr.layers[k]);
                g_h = g_x;
                cells.push(g_prev);
            }
            cells.reverse();
            Ok((SplitPair::split(&g_h)?, PredictorState { cells }))
        }
        _ => Err(Error::InvalidConfig("predictor tape does not match parameters".into())),
    }
}

/// Backward through an RPM predictor step from its output, pre-step
/// states and stored gates. Caches are rebuilt one RPM at a time and
/// counted as transient predictor activations.
///
/// Returns the reconstructed input pair, its cotangent, and the pre-step
/// state cotangents.
#[allow(clippy::too_many_arguments)]
pub fn predictor_backward_reversible<T: Scalar>(
    params: &PredictorParams<T>,
    pair_out: &SplitPair<T>,
    states_prev: &PredictorState<T>,
    gates: &[Tensor3<T>],
    g_out: &SplitPair<T>,
    g_states: &PredictorState<T>,
    grads: &mut PredictorParams<T>,
    ledger: &mut MemoryLedger,
) -> Result<(SplitPair<T>, SplitPair<T>, PredictorState<T>)> {
    check_states(params, states_prev)?;
    check_states(params, g_states)?;
    let (PredictorParams::Rpm(rpms), PredictorParams::Rpm(gr)) = (params, grads) else {
        return Err(Error::NotReversible);
    };
    if gates.len() != rpms.len() {
        return Err(Error::LengthMismatch {
            expected: rpms.len(),
            actual: gates.len(),
        });
    }
    let mut v = pair_out.clone();
    let mut g = g_out.clone();
    let mut cells = Vec::with_capacity(rpms.len());
    for k in (0..rpms.len()).rev() {
        let (x, cache) = rpm_reconstruct(&v, &states_prev.cells[k], &gates[k], &rpms[k])?;
        ledger.alloc(Category::Predictor, cache.elems());
        let (gp, gs) = rpm_backward(&rpms[k], &cache, &g, &g_states.cells[k], &mut gr[k]);
        ledger.free(Category::Predictor, cache.elems());
        v = x;
        g = gp;
        cells.push(gs);
    }
    cells.reverse();
    Ok((v, g, PredictorState { cells }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{central_difference, relative_error};
    use crate::params::{flatten, scalar_mut};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor<T: Scalar>(shape: Shape3, rng: &mut ChaCha8Rng) -> Tensor3<T> {
        Tensor3::from_fn(shape, |_, _, _| T::of(rng.gen_range(-1.0..1.0)))
    }

    fn rand_pair<T: Scalar>(shape: Shape3, rng: &mut ChaCha8Rng) -> SplitPair<T> {
        SplitPair::new(rand_tensor(shape, rng), rand_tensor(shape, rng)).unwrap()
    }

    /// Seeded init with every bias also randomized.
    fn rand_predictor(kind: PredictorKind, count: usize, c: usize, seed: u64) -> PredictorParams<f64> {
        let mut p = PredictorParams::<f64>::init(kind, count, c, 3, &mut Initializer::seeded(seed)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xb1a5);
        for k in p.kernel_list_mut() {
            for b in k.bias_mut() {
                *b = rng.gen_range(-0.5..0.5);
            }
        }
        p
    }

    fn rand_states(p: &PredictorParams<f64>, group: Shape3, rng: &mut ChaCha8Rng) -> PredictorState<f64> {
        let mut s = p.zero_state(group);
        for c in &mut s.cells {
            c.h = rand_tensor(c.h.shape(), rng).map(|v: f64| 0.5 * v);
            c.c = rand_tensor(c.c.shape(), rng);
        }
        s
    }

    fn zero_rpm(c: usize, updates: Group) -> RpmParams<f32> {
        RpmParams::init(c, 3, updates, &mut Initializer::zeros()).unwrap()
    }

    #[test]
    fn zero_attention_is_half() {
        let p = AttentionParams::<f32>::init(2, &mut Initializer::zeros()).unwrap();
        let g = attention_gate(&Tensor3::full(Shape3::new(3, 3, 2), 0.7f32), &p).unwrap();
        assert!(g.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn clamp_engages_for_large_bias() {
        let mut p = AttentionParams::<f64>::init(1, &mut Initializer::zeros()).unwrap();
        p.w2.bias_mut()[0] = 40.0;
        let g = attention_gate(&Tensor3::zeros(Shape3::new(2, 2, 1)), &p).unwrap();
        assert!(g.data().iter().all(|&v| v == 1.0 - 1e-6));
        p.w2.bias_mut()[0] = -40.0;
        let g = attention_gate(&Tensor3::zeros(Shape3::new(2, 2, 1)), &p).unwrap();
        assert!(g.data().iter().all(|&v| v == 1e-6));
    }

    #[test]
    fn attention_matches_composed_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut p = AttentionParams::<f64>::init(2, &mut Initializer::seeded(3)).unwrap();
        p.w1.bias_mut().iter_mut().for_each(|b| *b = rng.gen_range(-0.5..0.5));
        p.w2.bias_mut().iter_mut().for_each(|b| *b = rng.gen_range(-0.5..0.5));
        let h = rand_tensor::<f64>(Shape3::new(4, 4, 2), &mut rng);
        let a1 = conv2d(&h, &p.w1).unwrap();
        let r = crate::tensor::activation(crate::tensor::ActivationKind::Relu, &a1);
        let a2 = conv2d(&r, &p.w2).unwrap();
        let s = crate::tensor::activation(crate::tensor::ActivationKind::Sigmoid, &a2);
        let want = s.map(|v| v.clamp(1e-6, 1.0 - 1e-6));
        let got = attention_gate(&h, &p).unwrap();
        assert!(got.max_abs_diff(&want) <= 1e-6);
    }

    #[test]
    fn blend_scalar_example() {
        let s = Shape3::new(1, 1, 1);
        let old = Tensor3::full(s, 2.0f64);
        let h = Tensor3::full(s, 1.0);
        let g = Tensor3::full(s, 0.5);
        let upd = blend(&old, &h, &g);
        assert_eq!(upd.data()[0], 1.5);
        assert_eq!(unblend(&upd, &h, &g).data()[0], 2.0);
    }

    #[test]
    fn zero_rpm_halves_updated_group() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pair = rand_pair::<f32>(Shape3::new(4, 4, 2), &mut rng);
        for updates in [Group::One, Group::Two] {
            let p = zero_rpm(2, updates);
            let (out, st) = rpm_forward(&pair, &zero_state(pair.group_shape()), &p).unwrap();
            let (pass_in, old) = split_roles(&pair, updates);
            let (pass_out, upd) = split_roles(&out, updates);
            assert!(pass_in.bit_eq(pass_out));
            assert!(upd.bit_eq(&old.map(|v| 0.5 * v)));
            assert!(st.h.data().iter().all(|&v| v == 0.0));
            let back = rpm_inverse(&out, &zero_state(pair.group_shape()), &p).unwrap();
            let (_, rec) = split_roles(&back, updates);
            assert!(rec.bit_eq(&upd.map(|v| 2.0 * v)));
        }
    }

    #[test]
    fn rpm_round_trip_f32() {
        let shape = Shape3::new(4, 4, 2);
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = rand_predictor(PredictorKind::Rpm, 1, 2, seed).cast::<f32>();
            let PredictorParams::Rpm(r) = &p else { unreachable!() };
            let pair = rand_pair::<f32>(shape, &mut rng);
            let st = CellState {
                h: rand_tensor(shape, &mut rng),
                c: rand_tensor(shape, &mut rng),
            };
            let (out, _) = rpm_forward(&pair, &st, &r[0]).unwrap();
            assert!(out.g1.bit_eq(&pair.g1));
            let back = rpm_inverse(&out, &st, &r[0]).unwrap();
            assert!(back.max_abs_diff(&pair) <= 1e-4);
        }
    }

    #[test]
    fn zero_predictor_alternates() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pair = rand_pair::<f32>(Shape3::new(2, 2, 1), &mut rng);
        let one = PredictorParams::Rpm(vec![zero_rpm(1, Group::Two)]);
        let (out, _) = predictor_forward(&pair, &one.zero_state(pair.group_shape()), &one).unwrap();
        assert!(out.g1.bit_eq(&pair.g1));
        assert!(out.g2.bit_eq(&pair.g2.map(|v| 0.5 * v)));
        let back = predictor_inverse(&pair, &one.zero_state(pair.group_shape()), &one).unwrap();
        assert!(back.g2.bit_eq(&pair.g2.map(|v| 2.0 * v)));

        let two = PredictorParams::Rpm(vec![zero_rpm(1, Group::Two), zero_rpm(1, Group::One)]);
        let (out, st) = predictor_forward(&pair, &two.zero_state(pair.group_shape()), &two).unwrap();
        assert!(out.bit_eq(&pair.scale(0.5)));
        assert_eq!(st.cells.len(), 2);
    }

    #[test]
    fn validation_rejects_repeated_group() {
        let bad = PredictorParams::Rpm(vec![zero_rpm(1, Group::Two), zero_rpm(1, Group::Two)]);
        assert!(matches!(bad.validate(), Err(Error::InvalidConfig(_))));
        assert!(PredictorParams::<f32>::Rpm(vec![]).validate().is_err());
        let good = PredictorParams::<f32>::init(PredictorKind::Rpm, 4, 1, 3, &mut Initializer::seeded(0)).unwrap();
        good.validate().unwrap();
    }

    #[test]
    fn predictor_round_trip_four_rpms() {
        let shape = Shape3::new(4, 4, 2);
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let p = rand_predictor(PredictorKind::Rpm, 4, 2, seed);
            let pair = rand_pair::<f64>(shape, &mut rng);
            let st = rand_states(&p, shape, &mut rng);
            let (out, _) = predictor_forward(&pair, &st, &p).unwrap();
            assert!(predictor_inverse(&out, &st, &p).unwrap().max_abs_diff(&pair) <= 1e-10);

            let p32 = p.cast::<f32>();
            let (pair32, st32) = (pair.cast::<f32>(), st.cast::<f32>());
            let (out32, _) = predictor_forward(&pair32, &st32, &p32).unwrap();
            assert!(predictor_inverse(&out32, &st32, &p32).unwrap().max_abs_diff(&pair32) <= 1e-3);
        }
    }

    #[test]
    fn wrong_state_count_rejected() {
        let p = PredictorParams::<f32>::init(PredictorKind::Rpm, 2, 1, 3, &mut Initializer::seeded(0)).unwrap();
        let pair = SplitPair::zeros(Shape3::new(2, 2, 1));
        let st = PredictorState {
            cells: vec![zero_state(Shape3::new(2, 2, 1))],
        };
        assert!(matches!(
            predictor_forward(&pair, &st, &p),
            Err(Error::LengthMismatch { .. })
        ));
    }

    #[test]
    fn stacked_baseline_shapes_and_irreversibility() {
        let p = PredictorParams::<f32>::init(PredictorKind::Stacked, 2, 2, 3, &mut Initializer::seeded(1)).unwrap();
        let shape = Shape3::new(3, 3, 2);
        let st = p.zero_state(shape);
        assert_eq!(st.cells[0].h.shape(), Shape3::new(3, 3, 4));
        let (out, next) = predictor_forward(&SplitPair::zeros(shape), &st, &p).unwrap();
        assert_eq!(out.group_shape(), shape);
        assert_eq!(next.cells.len(), 2);
        assert!(matches!(predictor_inverse(&out, &st, &p), Err(Error::NotReversible)));
        assert!(!p.is_reversible());
    }

    /// `<w, out_1>` after two predictor steps, differentiated with respect
    /// to every parameter sampled, the first input pair, and the initial state.
    fn two_step_gradient_check(kind: PredictorKind) {
        let shape = Shape3::new(3, 3, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let p = rand_predictor(kind, 3, 1, 11);
        let x0 = rand_pair::<f64>(shape, &mut rng);
        let x1 = rand_pair::<f64>(shape, &mut rng);
        let s0 = rand_states(&p, shape, &mut rng);
        let w = rand_pair::<f64>(shape, &mut rng);
        let dot = |a: &SplitPair<f64>| {
            let f = |x: &Tensor3<f64>, y: &Tensor3<f64>| x.data().iter().zip(y.data()).map(|(a, b)| a * b).sum::<f64>();
            f(&a.g1, &w.g1) + f(&a.g2, &w.g2)
        };
        let loss = |q: &PredictorParams<f64>, x0: &SplitPair<f64>| {
            let (_, s1) = predictor_forward(x0, &s0, q).unwrap();
            let (o, _) = predictor_forward(&x1, &s1, q).unwrap();
            dot(&o)
        };
        let (_, s1, t0) = predictor_forward_cached(&x0, &s0, &p).unwrap();
        let (_, _, t1) = predictor_forward_cached(&x1, &s1, &p).unwrap();
        let mut grads = p.zeros_like();
        let (_, gs1) = predictor_backward_stored(&p, t1, &w, &s0.zeros_like(), &mut grads).unwrap();
        let (gx0, _) = predictor_backward_stored(&p, t0, &SplitPair::zeros(shape), &gs1, &mut grads).unwrap();

        let flat = flatten(&p);
        let flat_g = flatten(&grads);
        for idx in (0..flat.len()).step_by(17) {
            let num = central_difference(
                |v| {
                    let mut q = p.clone();
                    *scalar_mut(&mut q, idx).unwrap() = v;
                    loss(&q, &x0)
                },
                flat[idx],
                1e-5,
            );
            assert!(
                relative_error(flat_g[idx], num, 1e-6) <= 1e-5,
                "param {idx}: {} vs {num}",
                flat_g[idx]
            );
        }
        for k in 0..x0.g2.len() {
            let num = central_difference(
                |v| {
                    let mut x = x0.clone();
                    x.g2.data_mut()[k] = v;
                    loss(&p, &x)
                },
                x0.g2.data()[k],
                1e-5,
            );
            assert!(relative_error(gx0.g2.data()[k], num, 1e-6) <= 1e-5);
        }
    }

    #[test]
    fn rpm_backward_matches_finite_differences() {
        two_step_gradient_check(PredictorKind::Rpm);
    }

    #[test]
    fn stacked_backward_matches_finite_differences() {
        two_step_gradient_check(PredictorKind::Stacked);
    }

    #[test]
    fn reversible_backward_matches_stored() {
        let shape = Shape3::new(4, 4, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let p = rand_predictor(PredictorKind::Rpm, 4, 2, 21);
        let x = rand_pair::<f64>(shape, &mut rng);
        let s = rand_states(&p, shape, &mut rng);
        let g_out = rand_pair::<f64>(shape, &mut rng);
        let g_st = rand_states(&p, shape, &mut rng);

        let (out, _, tape) = predictor_forward_cached(&x, &s, &p).unwrap();
        let gates = tape.gates();
        let mut ga = p.zeros_like();
        let (gx_a, gs_a) = predictor_backward_stored(&p, tape, &g_out, &g_st, &mut ga).unwrap();

        let mut ledger = MemoryLedger::new();
        let mut gb = p.zeros_like();
        let (rec, gx_b, gs_b) =
            predictor_backward_reversible(&p, &out, &s, &gates, &g_out, &g_st, &mut gb, &mut ledger).unwrap();
        assert!(rec.max_abs_diff(&x) <= 1e-12);
        assert!(gx_a.max_abs_diff(&gx_b) <= 1e-10);
        for (a, b) in gs_a.cells.iter().zip(&gs_b.cells) {
            assert!(a.h.max_abs_diff(&b.h) <= 1e-10 && a.c.max_abs_diff(&b.c) <= 1e-10);
        }
        for (a, b) in flatten(&ga).iter().zip(flatten(&gb)) {
            assert!((a - b).abs() <= 1e-10 * (1.0 + a.abs()));
        }
        assert_eq!(ledger.current(Category::Predictor), 0);
        assert!(ledger.peak(Category::Predictor) > 0);
    }

    proptest! {
        #[test]
        fn gates_stay_in_clamped_range(seed in 0u64..500, scale in 0.1f64..50.0) {
            let mut p = AttentionParams::<f64>::init(1, &mut Initializer::seeded(seed)).unwrap();
            p.w2.weights_mut().iter_mut().for_each(|w| *w *= scale);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let h = rand_tensor::<f64>(Shape3::new(3, 3, 1), &mut rng).map(|v| v * scale);
            let g = attention_gate(&h, &p).unwrap();
            prop_assert!(g.data().iter().all(|&v| (1e-6..=1.0 - 1e-6).contains(&v)));
        }

        #[test]
        fn pass_through_group_bit_exact(seed in 0u64..200) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = PredictorParams::<f32>::init(PredictorKind::Rpm, 2, 1, 3, &mut Initializer::seeded(seed)).unwrap();
            let PredictorParams::Rpm(r) = &p else { unreachable!() };
            let pair = rand_pair::<f32>(Shape3::new(3, 3, 1), &mut rng);
            for rp in r {
                let (out, _) = rpm_forward(&pair, &zero_state(pair.group_shape()), rp).unwrap();
                let (a, _) = split_roles(&pair, rp.updates);
                let (b, _) = split_roles(&out, rp.updates);
                prop_assert!(a.bit_eq(b));
            }
        }
    }
}
