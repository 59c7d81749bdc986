//! Runnable control loops that carry window labels over a binary link.
//!
//! [`build_closed_loop`] checks a plant model, a transport, per-stream
//! rates, and a [`LoopConfig`] against each other and returns the matching
//! loop together with a [`DemandReport`] comparing each stream's
//! reliability demand with what the link provides. Two arrangements exist.
//!
//! [`DiagonalExplicitLoop`] serves a diagonal plant whose state is
//! measured exactly and whose channel outcomes are visible at the sensor:
//! every step each dimension's window process emits label bits into a
//! priority buffer, delivered bits are replayed into controls, and the
//! measured state re-anchors each window through a control-deficit
//! replica.
//!
//! [`DanceLoop`] serves a noisy-output plant whose sensor never sees the
//! link. The controller modulates each channel outcome onto its single
//! control input; the sensor demodulates the outcome from the next plant
//! output, replays the controller's bookkeeping from the demodulated
//! stream, and so reconstructs every applied control. Windows advance once
//! per superstep of `n` plant steps, which is the horizon a batched
//! control needs to land a full state increment.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bounds;
use crate::channels::{ChannelError, ChannelEvent, ChannelOutput, ErasureChannel};
use crate::observer_controller::{
    batch_controls_net, dance_decode, dance_encode, dance_plan, recover_state, ControlError,
    DancePlan, LabelReplay, VirtualProcess,
};
use crate::priority_code::{
    CodeError, DecoderMirror, Discipline, PriorityEncoder, Selection, StreamSpec,
};
use crate::state_space::{
    is_observable, is_reachable, real_jordan, StateSpaceError, StateSpaceModel,
};

/// Magnitude at which a loop declares divergence and clamps, keeping later
/// moment statistics finite in floating point.
pub const CLAMP: f64 = 1e100;

/// Errors from loop construction.
#[derive(Debug, Error)]
pub enum LoopError {
    /// The model, streams, transport, and config do not describe a loop
    /// this module can run.
    #[error("unsupported loop configuration: {0}")]
    Unsupported(String),
    #[error(transparent)]
    Control(#[from] ControlError),
    #[error(transparent)]
    Channel(#[from] ChannelError),
    #[error(transparent)]
    Code(#[from] CodeError),
    #[error(transparent)]
    Model(#[from] StateSpaceError),
}

/// How channel outcomes reach the encoding side.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeedbackMode {
    /// Outcomes are observed directly at the sensor.
    Explicit,
    /// Outcomes are modulated onto the control signal and demodulated from
    /// the plant output.
    Dance,
}

/// The binary link carrying label bits.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase", deny_unknown_fields)]
pub enum Transport {
    /// Noiseless link that drains every queued bit the step it is sent.
    Pipe,
    /// Binary erasure channel, one use per step.
    Bec {
        /// Erasure probability in `[0, 1)`.
        beta: f64,
    },
}

fn default_dance_factor() -> f64 {
    3.0
}

/// Loop-level knobs. The JSON form uses lowercase mode names, so a typical
/// config reads `{"feedback":"explicit","superstep":1,"epsilon":0.04}`;
/// `dance_factor` and `discipline` are optional and default to `3.0` and
/// strict priority.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoopConfig {
    /// Feedback arrangement.
    pub feedback: FeedbackMode,
    /// Plant steps per window update: 1 for explicit loops, the state
    /// dimension for the dance.
    pub superstep: usize,
    /// Slack added to every rate and reliability demand.
    pub epsilon: f64,
    /// Ratio of the modulation amplitude to the demodulation noise bound;
    /// must exceed 2 for error-free symbol recovery.
    #[serde(default = "default_dance_factor")]
    pub dance_factor: f64,
    /// Encoder service discipline.
    #[serde(default)]
    pub discipline: Discipline,
}

/// One stream's reliability demand against what the link provides.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DemandLine {
    /// Stream id, which indexes the decoupled mode it serves.
    pub stream: usize,
    /// Growth factor of that mode per step.
    pub lambda: f64,
    /// Stream rate in bits per step.
    pub rate: f64,
    /// Exponent needed to keep the eta-th state moment bounded, with slack.
    pub required_alpha: f64,
    /// Exponent the link guarantees at this rate, when a closed form is
    /// known for the stream's service position.
    pub achieved_alpha: Option<f64>,
    /// Whether the guarantee meets the demand; `None` when no closed form
    /// applies.
    pub satisfied: Option<bool>,
}

/// Advisory comparison of per-stream demands with link guarantees. Never
/// gates construction: a loop whose demands fail here still runs, it just
/// cannot certify bounded moments.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DemandReport {
    /// Moment order the demands are written for.
    pub eta: f64,
    /// Slack added to every demand.
    pub epsilon: f64,
    /// One line per stream, in service order.
    pub lines: Vec<DemandLine>,
    /// Conjunction over the lines, `None` if any line is inconclusive.
    pub all_satisfied: Option<bool>,
}

fn demand_report(
    transport: Transport,
    discipline: Discipline,
    streams: &[StreamSpec],
    growth_of_id: &[f64],
    eta: f64,
    epsilon: f64,
) -> DemandReport {
    let mut ordered = streams.to_vec();
    ordered.sort_by_key(|s| s.priority);
    let total_rate: f64 = ordered.iter().map(|s| s.rate).sum();
    let mut lines = Vec::with_capacity(ordered.len());
    for (pos, s) in ordered.iter().enumerate() {
        let lambda = growth_of_id[s.id];
        let required = eta * lambda.log2() + epsilon;
        let (achieved, satisfied) = match transport {
            Transport::Pipe => (None, Some(true)),
            Transport::Bec { beta } => {
                let closed_form = match discipline {
                    Discipline::StrictPriority => match pos {
                        0 => Some(bounds::bec_anytime_capacity_inverse(s.rate, beta)),
                        1 if ordered.len() == 2 => Some(bounds::low_priority_exponent(
                            ordered[0].rate,
                            s.rate,
                            beta,
                        )),
                        _ => None,
                    },
                    Discipline::GlobalFifo => {
                        Some(bounds::bec_anytime_capacity_inverse(total_rate, beta))
                    }
                };
                match closed_form {
                    None => (None, None),
                    Some(Ok(alpha)) => (Some(alpha), Some(alpha >= required)),
                    Some(Err(_)) => (None, Some(false)),
                }
            }
        };
        lines.push(DemandLine {
            stream: s.id,
            lambda,
            rate: s.rate,
            required_alpha: required,
            achieved_alpha: achieved,
            satisfied,
        });
    }
    let all_satisfied = if lines.iter().any(|l| l.satisfied == Some(false)) {
        Some(false)
    } else if lines.iter().any(|l| l.satisfied.is_none()) {
        None
    } else {
        Some(true)
    };
    DemandReport {
        eta,
        epsilon,
        lines,
        all_satisfied,
    }
}

fn clamp_mag(x: f64) -> f64 {
    if x.is_nan() {
        return CLAMP;
    }
    x.clamp(-CLAMP, CLAMP)
}

fn is_identity(m: &DMatrix<f64>) -> bool {
    m.is_square()
        && (0..m.nrows()).all(|i| {
            (0..m.ncols()).all(|j| (m[(i, j)] - if i == j { 1.0 } else { 0.0 }).abs() <= 1e-12)
        })
}

fn mat_pow(a: &DMatrix<f64>, k: usize) -> DMatrix<f64> {
    let mut out = DMatrix::identity(a.nrows(), a.ncols());
    for _ in 0..k {
        out = &out * a;
    }
    out
}

fn validate_stream_ids(streams: &[StreamSpec], n: usize) -> Result<(), LoopError> {
    if streams.len() != n {
        return Err(LoopError::Unsupported(format!(
            "need one stream per mode: got {} streams for {} modes",
            streams.len(),
            n
        )));
    }
    let mut ids: Vec<usize> = streams.iter().map(|s| s.id).collect();
    ids.sort_unstable();
    if ids.iter().enumerate().any(|(i, &id)| i != id) {
        return Err(LoopError::Unsupported(
            "stream ids must index the modes 0..n".into(),
        ));
    }
    Ok(())
}

fn validate_config(config: &LoopConfig) -> Result<(), LoopError> {
    if !(config.epsilon > 0.0) || !config.epsilon.is_finite() {
        return Err(LoopError::Unsupported(format!(
            "epsilon must be positive and finite, got {}",
            config.epsilon
        )));
    }
    if config.superstep == 0 {
        return Err(LoopError::Unsupported("superstep must be at least 1".into()));
    }
    if !config.dance_factor.is_finite() {
        return Err(LoopError::Unsupported(
            "dance_factor must be finite".into(),
        ));
    }
    Ok(())
}

/// One state dimension's window process, control replay, and in-flight
/// bookkeeping inside a [`DiagonalExplicitLoop`]. `debits` holds one entry
/// per label group whose control has not been applied yet, as
/// `(group index, grown recentering control)`; each entry ages by the
/// growth factor once per step and leaves when its group's control lands.
#[derive(Debug, Clone)]
struct LoopDim {
    lambda: f64,
    vp: VirtualProcess,
    replay: LabelReplay,
    x: f64,
    anchor: f64,
    debits: VecDeque<(u64, f64)>,
    delivered: Vec<bool>,
    staged: VecDeque<bool>,
    ubar: f64,
    u: f64,
}

/// Explicit-feedback loop: a diagonal plant with exact state measurement,
/// full actuation, and channel outcomes visible at the sensor.
///
/// Each step re-anchors every window process to the measured state plus
/// the recentering controls still in flight, so the anchor sees the state
/// as it will stand once the delayed controls land. The in-flight sum is
/// rebuilt from per-group debits each step, and each debit lives only
/// until its group's control is applied, so no bookkeeping term is
/// integrated indefinitely and rounding cannot compound under the growth
/// factor; whatever dust the applied controls leave in the plant flows
/// back through the anchor and is recentered away like any other
/// disturbance. A failed window update or a state past [`CLAMP`] marks
/// the loop diverged; controls then stop and the plant drifts open loop
/// at the clamp.
#[derive(Debug, Clone)]
pub struct DiagonalExplicitLoop {
    dims: Vec<LoopDim>,
    order: Vec<usize>,
    enc: PriorityEncoder,
    mirror: DecoderMirror,
    transport: Transport,
    channel: ErasureChannel,
    omega: f64,
    time: u64,
    diverged: Option<u64>,
    last_erased: bool,
}

fn build_diagonal(
    model: &StateSpaceModel,
    transport: Transport,
    streams: &[StreamSpec],
    config: &LoopConfig,
) -> Result<DiagonalExplicitLoop, LoopError> {
    if config.superstep != 1 {
        return Err(LoopError::Unsupported(
            "explicit feedback updates its windows every step, so superstep must be 1".into(),
        ));
    }
    let n = model.n();
    let a = model.a();
    let scale = a.amax().max(1.0);
    for i in 0..n {
        for j in 0..n {
            if i != j && a[(i, j)].abs() > 1e-12 * scale {
                return Err(LoopError::Unsupported(
                    "explicit feedback needs a diagonal transition matrix".into(),
                ));
            }
        }
    }
    if !is_identity(model.b_u()) || !is_identity(model.b_w()) || !is_identity(model.c_y()) {
        return Err(LoopError::Unsupported(
            "explicit feedback needs identity actuation, disturbance entry, and readout".into(),
        ));
    }
    if model.gamma() != 0.0 {
        return Err(LoopError::Unsupported(
            "explicit feedback needs noiseless state measurement".into(),
        ));
    }
    if model.omega0() != 0.0 {
        return Err(LoopError::Unsupported(
            "loops start from a known zero state".into(),
        ));
    }
    if !(model.omega() > 0.0) {
        return Err(LoopError::Unsupported(
            "a positive disturbance bound is needed to size the windows".into(),
        ));
    }
    validate_stream_ids(streams, n)?;
    let mut dims = Vec::with_capacity(n);
    for i in 0..n {
        let lambda = a[(i, i)];
        if !(lambda > 1.0) {
            return Err(LoopError::Unsupported(format!(
                "dimension {i} has growth {lambda}, but every mode must be strictly expanding"
            )));
        }
        let rate = streams
            .iter()
            .find(|s| s.id == i)
            .expect("ids validated")
            .rate;
        dims.push(LoopDim {
            lambda,
            vp: VirtualProcess::new(lambda, rate, model.omega())?,
            replay: LabelReplay::new(lambda, rate, model.omega())?,
            x: 0.0,
            anchor: 0.0,
            debits: VecDeque::new(),
            delivered: Vec::new(),
            staged: VecDeque::new(),
            ubar: 0.0,
            u: 0.0,
        });
    }
    let enc = PriorityEncoder::with_discipline(streams, config.discipline)?;
    let mirror = DecoderMirror::with_discipline(streams, config.discipline)?;
    let order = enc.streams().iter().map(|s| s.id).collect();
    let channel = match transport {
        Transport::Pipe => ErasureChannel::new(0.0).expect("zero is a valid erasure rate"),
        Transport::Bec { beta } => ErasureChannel::new(beta)?,
    };
    Ok(DiagonalExplicitLoop {
        dims,
        order,
        enc,
        mirror,
        transport,
        channel,
        omega: model.omega(),
        time: 0,
        diverged: None,
        last_erased: false,
    })
}

impl DiagonalExplicitLoop {
    /// Completed steps.
    pub fn time(&self) -> u64 {
        self.time
    }

    /// Step at which the loop lost its certificate, if it has.
    pub fn diverged(&self) -> Option<u64> {
        self.diverged
    }

    /// Plant state after the last completed step.
    pub fn states(&self) -> Vec<f64> {
        self.dims.iter().map(|d| d.x).collect()
    }

    /// Largest state magnitude across dimensions.
    pub fn sup_norm(&self) -> f64 {
        self.dims.iter().map(|d| d.x.abs()).fold(0.0, f64::max)
    }

    /// Gap between the plant state and its window process per dimension;
    /// it carries exactly the recentering controls still in flight.
    pub fn window_gaps(&self) -> Vec<f64> {
        self.dims.iter().map(|d| d.x - d.vp.xbar()).collect()
    }

    /// Controls applied in the last completed step, per dimension.
    pub fn controls(&self) -> Vec<f64> {
        self.dims.iter().map(|d| d.u).collect()
    }

    /// Whether the last completed step's channel use came out erased;
    /// always false on the pipe.
    pub fn last_erased(&self) -> bool {
        self.last_erased
    }

    /// Label groups issued but not yet answered by an applied control,
    /// per dimension.
    pub fn commit_lags(&self) -> Vec<u64> {
        self.dims
            .iter()
            .map(|d| self.time.saturating_sub(d.replay.committed()))
            .collect()
    }

    /// Window-process states per dimension.
    pub fn window_states(&self) -> Vec<f64> {
        self.dims.iter().map(|d| d.vp.xbar()).collect()
    }

    /// Certified window half-widths per dimension.
    pub fn window_half_widths(&self) -> Vec<f64> {
        self.dims.iter().map(|d| d.vp.half_width()).collect()
    }

    /// Per-mode growth factors, indexed by stream id.
    pub fn mode_growths(&self) -> Vec<f64> {
        self.dims.iter().map(|d| d.lambda).collect()
    }

    /// Advances one step with the given per-dimension disturbances. The
    /// rng drives only the transport, so paired runs that share a channel
    /// rng stream see identical erasures.
    pub fn step(&mut self, w: &[f64], rng: &mut impl Rng) {
        assert_eq!(w.len(), self.dims.len(), "one disturbance per dimension");
        let half = self.omega / 2.0 * (1.0 + 1e-9) + f64::MIN_POSITIVE;
        for &wi in w {
            assert!(wi.abs() <= half, "disturbance {wi} outside its bound");
        }
        let t = self.time + 1;
        self.time = t;
        self.last_erased = false;
        if self.diverged.is_some() {
            for (d, &wi) in self.dims.iter_mut().zip(w) {
                d.x = clamp_mag(d.lambda * d.x + wi);
            }
            return;
        }
        for d in &mut self.dims {
            let label = d.vp.quantize();
            d.ubar = label.ubar;
            d.debits.push_back((t, label.ubar));
            d.staged.extend(label.bits);
        }
        {
            let dims = &mut self.dims;
            let order = &self.order;
            self.enc.enqueue_arrivals(t, |s, _j| {
                dims[order[s]]
                    .staged
                    .pop_front()
                    .expect("label bits must match the arrival schedule")
            });
        }
        debug_assert!(self.dims.iter().all(|d| d.staged.is_empty()));
        match self.transport {
            Transport::Pipe => loop {
                match self.enc.select_for_transmission() {
                    Selection::Stream(s, b) => {
                        self.dims[self.order[s]].delivered.push(b.value);
                        self.enc.apply_feedback(true);
                    }
                    Selection::Dummy => break,
                }
            },
            Transport::Bec { .. } => {
                let event = self.enc.select_and_transmit(&self.channel, rng);
                self.last_erased = matches!(event.output, ChannelOutput::Erased);
                self.mirror.mirror_update(&event);
                let mirror = &self.mirror;
                for (i, d) in self.dims.iter_mut().enumerate() {
                    let log = mirror.delivered_log(i).expect("stream exists");
                    for &(v, _) in &log[d.delivered.len()..] {
                        d.delivered.push(v);
                    }
                }
            }
        }
        let mut bad = false;
        for d in &mut self.dims {
            d.u = d.replay.control(t, &d.delivered);
            let landed = d.replay.committed();
            while d.debits.front().is_some_and(|&(g, _)| g <= landed) {
                d.debits.pop_front();
            }
            if !d.u.is_finite() || d.u.abs() > CLAMP {
                bad = true;
            }
        }
        for (d, &wi) in self.dims.iter_mut().zip(w) {
            let x_next = d.lambda * d.x + d.u + wi;
            let pending: f64 = d.debits.iter().map(|&(_, v)| v).sum();
            d.anchor = x_next + pending;
            if !x_next.is_finite() || x_next.abs() > CLAMP || !pending.is_finite() {
                bad = true;
            }
            d.x = x_next;
        }
        if bad {
            self.diverged = Some(t);
            for d in &mut self.dims {
                d.x = clamp_mag(d.x);
            }
            return;
        }
        for d in &mut self.dims {
            if !d.vp.try_advance_to_state(d.anchor) {
                self.diverged = Some(t);
            }
            for (_, v) in &mut d.debits {
                *v *= d.lambda;
            }
        }
    }
}

/// Deterministic dance bookkeeping: the buffer mirror, label replays at
/// superstep scale, the stabilizing batch in progress, and the pending
/// probe counter-controls. The controller runs one from true channel
/// outcomes; the sensor runs an identical replica from demodulated ones,
/// so both sides agree on every applied control bit for bit.
#[derive(Debug, Clone)]
struct DanceBook {
    mirror: DecoderMirror,
    replays: Vec<LabelReplay>,
    delivered: Vec<Vec<bool>>,
    stab: VecDeque<f64>,
    counter: VecDeque<f64>,
    counter_unit: Vec<f64>,
    v_inv: DMatrix<f64>,
    a: DMatrix<f64>,
    b_u: DMatrix<f64>,
    n: usize,
    time: u64,
    pending_known: Option<f64>,
}

impl DanceBook {
    /// The stabilizing and counter components of the step-`t` control,
    /// which depend only on information through step `t - 1`. At superstep
    /// starts this folds newly delivered label groups into per-mode
    /// control increments and batches them over the next `n` steps.
    fn known_component(&mut self, t: u64) -> f64 {
        assert_eq!(t, self.time + 1, "books advance one step at a time");
        assert!(
            self.pending_known.is_none(),
            "previous outcome not folded yet"
        );
        if (t - 1) % self.n as u64 == 0 {
            debug_assert!(self.stab.is_empty());
            let k = (t - 1) / self.n as u64 + 1;
            let modes = self.replays.len();
            let mut c = DVector::zeros(modes);
            for i in 0..modes {
                c[i] = self.replays[i].control(k, &self.delivered[i]);
            }
            let delta = &self.v_inv * c;
            let batch = batch_controls_net(&self.a, &self.b_u, &delta)
                .expect("a reachable pair absorbs any state increment");
            self.stab = batch.iter().map(|u| u[0]).collect();
        }
        let stab = self.stab.pop_front().unwrap_or(0.0);
        let counter = self.counter.pop_front().unwrap_or(0.0);
        let known = stab + counter;
        self.pending_known = Some(known);
        known
    }

    /// Folds the step-`t` outcome: updates the buffer mirror, schedules
    /// the counter-controls that cancel the probe's state effect after `n`
    /// steps, and returns the full control `known + probe`.
    fn fold_outcome(&mut self, event: &ChannelEvent, probe: f64) -> f64 {
        assert_eq!(event.t, self.time + 1, "books advance one step at a time");
        let known = self
            .pending_known
            .take()
            .expect("known_component must run first");
        self.mirror.mirror_update(event);
        for (i, seen) in self.delivered.iter_mut().enumerate() {
            let log = self.mirror.delivered_log(i).expect("stream exists");
            for &(v, _) in &log[seen.len()..] {
                seen.push(v);
            }
        }
        while self.counter.len() < self.n {
            self.counter.push_back(0.0);
        }
        for (s, unit) in self.counter_unit.iter().enumerate() {
            self.counter[s] += unit * probe;
        }
        self.time = event.t;
        known + probe
    }
}

fn outcome_symbol(output: ChannelOutput) -> usize {
    match output {
        ChannelOutput::Erased => 1,
        ChannelOutput::Received(false) => 2,
        ChannelOutput::Received(true) => 3,
    }
}

fn symbol_outcome(z: usize) -> ChannelOutput {
    match z {
        1 => ChannelOutput::Erased,
        2 => ChannelOutput::Received(false),
        3 => ChannelOutput::Received(true),
        _ => unreachable!("demodulated symbols are clamped to the alphabet"),
    }
}

/// A probe together with its counter-batch in flight. `value` tracks, per
/// mode, the net effect the pair has had on the modal state so far; the
/// pair nets out to nothing once the full counter-batch lands, so an echo
/// lives for the batch span plus one step and is then dropped.
#[derive(Debug, Clone)]
struct ProbeEcho {
    born: u64,
    p: f64,
    value: Vec<f64>,
}

/// Output-feedback loop for a plant with one control input, observed
/// through a noisy output, over an erasure channel whose outcomes only the
/// controller sees.
///
/// Per step `t` the sensor reads `Y_t`, demodulates the previous outcome
/// from the shift the controller's probe left in it, replays the
/// controller's step `t - 1`, recovers the current state from the last `n`
/// outputs and known controls, and feeds its encoder. Windows live on the
/// decoupled modes at superstep scale: growth `lambda^n`, rate `n R`, and
/// a disturbance budget that absorbs `n` steps of process noise plus the
/// estimation churn. Each superstep the windows re-anchor to the estimate
/// adjusted for what is still in flight: recentering controls whose
/// stabilizing batch has not finished land as `group_debits`, and each
/// probe rides with its counter-batch as a short-lived echo. Every
/// in-flight term is bounded-lived and the adjustments are rebuilt from
/// scratch at each anchor, so rounding never compounds under the growth
/// factor, and because the anchor tracks the measured estimate, whatever
/// dust the applied controls leave behind is recentered away like any
/// other disturbance.
#[derive(Debug, Clone)]
pub struct DanceLoop {
    model: StateSpaceModel,
    n: usize,
    v: DMatrix<f64>,
    lambdas: Vec<f64>,
    lam_pow: Vec<f64>,
    vb_u: DVector<f64>,
    b_u_col: DVector<f64>,
    cy_a: DMatrix<f64>,
    cy_bu: DVector<f64>,
    plan: DancePlan,
    x: DVector<f64>,
    time: u64,
    diverged: Option<u64>,
    vps: Vec<VirtualProcess>,
    enc: PriorityEncoder,
    order: Vec<usize>,
    staged: Vec<VecDeque<bool>>,
    group_debits: Vec<VecDeque<(u64, f64)>>,
    echoes: VecDeque<ProbeEcho>,
    xhat: DVector<f64>,
    y_window: VecDeque<DVector<f64>>,
    u_window: VecDeque<DVector<f64>>,
    obs_book: DanceBook,
    ctl_book: DanceBook,
    channel: ErasureChannel,
    last_input: bool,
    last_erased: bool,
    last_z_true: usize,
    last_u_true: f64,
    demod_errors: u64,
}

fn build_dance(
    model: &StateSpaceModel,
    transport: Transport,
    streams: &[StreamSpec],
    config: &LoopConfig,
) -> Result<DanceLoop, LoopError> {
    let n = model.n();
    if config.superstep != n {
        return Err(LoopError::Unsupported(format!(
            "the dance batches controls over the state dimension, so superstep must be {n}"
        )));
    }
    if model.m_u() != 1 {
        return Err(LoopError::Unsupported(
            "the dance rides a single control input".into(),
        ));
    }
    if model.omega0() != 0.0 {
        return Err(LoopError::Unsupported(
            "loops start from a known zero state".into(),
        ));
    }
    let beta = match transport {
        Transport::Bec { beta } => beta,
        Transport::Pipe => {
            return Err(LoopError::Unsupported(
                "the dance paces one channel use per step; use an erasure transport".into(),
            ))
        }
    };
    if !is_reachable(model.a(), model.b_u()) {
        return Err(LoopError::Unsupported(
            "the control input must reach every mode".into(),
        ));
    }
    if !is_observable(model.a(), model.c_y()) {
        return Err(LoopError::Unsupported(
            "the output must expose every mode".into(),
        ));
    }
    let jf = real_jordan(model.a())?;
    if jf
        .blocks()
        .iter()
        .any(|b| b.size != 1 || b.angle.is_some() || !(b.magnitude > 1.0))
    {
        return Err(LoopError::Unsupported(
            "the dance needs real, distinct, strictly expanding modes".into(),
        ));
    }
    validate_stream_ids(streams, n)?;
    let lambdas: Vec<f64> = (0..n).map(|i| jf.lambda()[(i, i)]).collect();
    let v = jf.v().clone();
    let v_inv = jf.v_inv().clone();

    let m_y = model.m_y();
    let zero_obs = vec![DVector::zeros(m_y); n];
    let zero_ctl = vec![DVector::zeros(1); n.saturating_sub(1)];
    let rec0 = recover_state(model, &zero_obs, &zero_ctl)?;
    let abs_a = model.a().map(f64::abs);
    let noise_reach: DVector<f64> = DVector::from_iterator(
        n,
        (0..n).map(|i| model.b_w().row(i).iter().map(|v| v.abs()).sum::<f64>() * model.omega()
            / 2.0),
    );
    let mut bound_star = rec0.final_bound.clone();
    let mut roll = DVector::zeros(n);
    for _ in 1..n {
        roll = &abs_a * &roll + &noise_reach;
        bound_star = bound_star.zip_map(&roll, f64::max);
    }
    let cy_a = model.c_y() * model.a();
    let mut gamma2 = 0.0f64;
    for r in 0..m_y {
        let est: f64 = (0..n).map(|j| cy_a[(r, j)].abs() * bound_star[j]).sum();
        let dist: f64 = (model.c_y().row(r) * model.b_w())
            .iter()
            .map(|v| v.abs())
            .sum::<f64>()
            * model.omega()
            / 2.0;
        gamma2 = gamma2.max(est + dist + model.gamma() / 2.0);
    }
    let plan = dance_plan(model, gamma2, 3, config.dance_factor)?;
    if plan.theta != 0 {
        return Err(LoopError::Unsupported(
            "the output must respond to the control within one step".into(),
        ));
    }

    let a_n = mat_pow(model.a(), n);
    let counter_target = -(&a_n * model.b_u()).column(0).into_owned();
    let counter_unit: Vec<f64> = batch_controls_net(model.a(), model.b_u(), &counter_target)?
        .iter()
        .map(|u| u[0])
        .collect();

    let vb_w = &v * model.b_w();
    let mut vps = Vec::with_capacity(n);
    let mut replays = Vec::with_capacity(n);
    for i in 0..n {
        let lam = lambdas[i];
        let lam_n = lam.powi(n as i32);
        let rate_super = n as f64
            * streams
                .iter()
                .find(|s| s.id == i)
                .expect("ids validated")
                .rate;
        let row_reach: f64 = vb_w.row(i).iter().map(|v| v.abs()).sum::<f64>() * model.omega() / 2.0;
        let accum: f64 = (0..n).map(|s| lam.powi(s as i32)).sum::<f64>() * row_reach;
        let churn: f64 = (1.0 + lam_n)
            * (0..n)
                .map(|j| v[(i, j)].abs() * bound_star[j])
                .sum::<f64>();
        let omega_super = 2.0 * (accum + churn);
        vps.push(VirtualProcess::new(lam_n, rate_super, omega_super)?);
        replays.push(LabelReplay::new(lam_n, rate_super, omega_super)?);
    }

    let enc = PriorityEncoder::with_discipline(streams, config.discipline)?;
    let order: Vec<usize> = enc.streams().iter().map(|s| s.id).collect();
    let vb_u = (&v * model.b_u()).column(0).into_owned();
    let book = DanceBook {
        mirror: DecoderMirror::with_discipline(streams, config.discipline)?,
        replays,
        delivered: vec![Vec::new(); n],
        stab: VecDeque::new(),
        counter: VecDeque::new(),
        counter_unit,
        v_inv,
        a: model.a().clone(),
        b_u: model.b_u().clone(),
        n,
        time: 0,
        pending_known: None,
    };
    let lam_pow: Vec<f64> = lambdas.iter().map(|l| l.powi(n as i32)).collect();
    Ok(DanceLoop {
        n,
        v,
        lambdas,
        lam_pow,
        vb_u,
        b_u_col: model.b_u().column(0).into_owned(),
        cy_a,
        cy_bu: (model.c_y() * model.b_u()).column(0).into_owned(),
        plan,
        x: DVector::zeros(n),
        time: 0,
        diverged: None,
        vps,
        enc,
        order,
        staged: vec![VecDeque::new(); n],
        group_debits: vec![VecDeque::new(); n],
        echoes: VecDeque::new(),
        xhat: DVector::zeros(n),
        y_window: VecDeque::with_capacity(n + 1),
        u_window: VecDeque::with_capacity(n),
        ctl_book: book.clone(),
        obs_book: book,
        channel: ErasureChannel::new(beta)?,
        last_input: false,
        last_erased: false,
        last_z_true: 0,
        last_u_true: 0.0,
        demod_errors: 0,
        model: model.clone(),
    })
}

impl DanceLoop {
    /// Completed steps.
    pub fn time(&self) -> u64 {
        self.time
    }

    /// Step at which the loop lost its certificate, if it has.
    pub fn diverged(&self) -> Option<u64> {
        self.diverged
    }

    /// Plant state after the last completed step.
    pub fn state(&self) -> &DVector<f64> {
        &self.x
    }

    /// Largest state magnitude.
    pub fn sup_norm(&self) -> f64 {
        self.x.amax()
    }

    /// Demodulated symbols that disagreed with the true channel outcome.
    pub fn demod_errors(&self) -> u64 {
        self.demod_errors
    }

    /// The modulation plan in force.
    pub fn plan(&self) -> &DancePlan {
        &self.plan
    }

    /// Sensor-side estimate of the state at the last observation.
    pub fn estimate(&self) -> &DVector<f64> {
        &self.xhat
    }

    /// Certified window half-widths per mode, at superstep scale.
    pub fn window_half_widths(&self) -> Vec<f64> {
        self.vps.iter().map(|vp| vp.half_width()).collect()
    }

    /// Per-mode growth factors per plant step, indexed by stream id.
    pub fn mode_growths(&self) -> Vec<f64> {
        self.lambdas.clone()
    }

    /// Whether the last completed step's channel use came out erased.
    pub fn last_erased(&self) -> bool {
        self.last_erased
    }

    /// Control applied in the last completed step.
    pub fn last_control(&self) -> f64 {
        self.last_u_true
    }

    /// Label groups issued but not yet answered by an applied control,
    /// per mode, counted at superstep scale.
    pub fn commit_lags(&self) -> Vec<u64> {
        (0..self.n)
            .map(|i| {
                self.vps[i]
                    .time()
                    .saturating_sub(self.ctl_book.replays[i].committed())
            })
            .collect()
    }

    /// Advances one step. `w` is the process disturbance entering through
    /// the disturbance matrix; `noise` lands on this step's output
    /// reading. The rng drives only the channel.
    pub fn step(&mut self, w: &DVector<f64>, noise: &DVector<f64>, rng: &mut impl Rng) {
        assert_eq!(w.len(), self.model.m_w(), "disturbance dimension");
        assert_eq!(noise.len(), self.model.m_y(), "noise dimension");
        let w_half = self.model.omega() / 2.0 * (1.0 + 1e-9) + f64::MIN_POSITIVE;
        let n_half = self.model.gamma() / 2.0 * (1.0 + 1e-9) + f64::MIN_POSITIVE;
        assert!(w.iter().all(|v| v.abs() <= w_half), "disturbance outside its bound");
        assert!(noise.iter().all(|v| v.abs() <= n_half), "noise outside its bound");
        let t = self.time + 1;
        self.last_erased = false;
        if self.diverged.is_some() {
            self.drift_open_loop(w);
            self.time = t;
            return;
        }
        let nn = self.n as u64;

        let y = self.model.c_y() * &self.x + noise;
        self.y_window.push_back(y.clone());
        if self.y_window.len() > self.n {
            self.y_window.pop_front();
        }

        if t >= 2 {
            let known_prev = self.obs_book.known_component(t - 1);
            let pred = &self.cy_a * &self.xhat + &self.cy_bu * known_prev;
            let shift = &y - pred;
            let z_rec = dance_decode(&self.plan, &shift);
            if z_rec != self.last_z_true {
                self.demod_errors += 1;
            }
            let event = ChannelEvent {
                t: t - 1,
                input: self.last_input,
                output: symbol_outcome(z_rec),
            };
            self.enc.apply_feedback(z_rec != 1);
            let probe_rec =
                dance_encode(&self.plan, z_rec).expect("decoded symbols lie in the alphabet");
            let u_prev = self.obs_book.fold_outcome(&event, probe_rec);
            if z_rec == self.last_z_true {
                debug_assert_eq!(u_prev, self.last_u_true);
            }
            self.u_window.push_back(DVector::from_element(1, u_prev));
            if self.u_window.len() > self.n - 1 {
                self.u_window.pop_front();
            }
            if self.y_window.len() == self.n && self.u_window.len() + 1 == self.n {
                let obs: Vec<DVector<f64>> = self.y_window.iter().cloned().collect();
                let ctl: Vec<DVector<f64>> = self.u_window.iter().cloned().collect();
                let rec = recover_state(&self.model, &obs, &ctl)
                    .expect("observability checked at construction");
                self.xhat = rec.final_estimate;
            } else {
                self.xhat = self.model.a() * &self.xhat + &self.b_u_col * u_prev;
            }
        }

        if (t - 1) % nn == 0 {
            let k = (t - 1) / nn + 1;
            if k > 1 {
                let xi = &self.v * &self.xhat;
                for i in 0..self.n {
                    let landed = self.ctl_book.replays[i].committed();
                    let debits = &mut self.group_debits[i];
                    while debits.front().is_some_and(|&(g, _)| g <= landed) {
                        debits.pop_front();
                    }
                    let pending: f64 = debits.iter().map(|&(_, v)| v).sum();
                    let echo: f64 = self.echoes.iter().map(|e| e.value[i]).sum();
                    let anchor = (xi[i] + pending) - echo;
                    if !self.vps[i].try_advance_to_state(anchor) {
                        self.diverged = Some(t);
                    }
                }
            }
            if self.diverged.is_some() {
                self.drift_open_loop(w);
                self.time = t;
                return;
            }
            for i in 0..self.n {
                for (_, v) in &mut self.group_debits[i] {
                    *v *= self.lam_pow[i];
                }
                debug_assert!(self.staged[i].is_empty());
                let label = self.vps[i].quantize();
                self.group_debits[i].push_back((self.vps[i].time() + 1, label.ubar));
                self.staged[i].extend(label.bits);
            }
        }

        {
            let staged = &mut self.staged;
            let order = &self.order;
            self.enc.enqueue_arrivals(t, |s, _j| {
                staged[order[s]]
                    .pop_front()
                    .expect("label bits must match the arrival schedule")
            });
        }
        let input = match self.enc.select_for_transmission() {
            Selection::Stream(_, b) => b.value,
            Selection::Dummy => false,
        };
        let event = self.channel.transmit(t, input, rng);
        self.last_erased = matches!(event.output, ChannelOutput::Erased);
        self.last_input = input;

        let z_true = outcome_symbol(event.output);
        self.ctl_book.known_component(t);
        let probe = dance_encode(&self.plan, z_true).expect("symbols lie in the alphabet");
        let u_now = self.ctl_book.fold_outcome(&event, probe);
        self.last_z_true = z_true;
        self.last_u_true = u_now;

        let cu = &self.ctl_book.counter_unit;
        for e in &mut self.echoes {
            let idx = (t - e.born - 1) as usize;
            for i in 0..self.n {
                e.value[i] = self.lambdas[i] * e.value[i] + self.vb_u[i] * cu[idx] * e.p;
            }
        }
        while self.echoes.front().is_some_and(|e| e.born + nn <= t) {
            self.echoes.pop_front();
        }
        self.echoes.push_back(ProbeEcho {
            born: t,
            p: probe,
            value: self.vb_u.iter().map(|&v| v * probe).collect(),
        });

        self.x = self.model.a() * &self.x + &self.b_u_col * u_now + self.model.b_w() * w;
        if self.x.iter().any(|v| !v.is_finite() || v.abs() > CLAMP) {
            self.diverged = Some(t);
            self.x = self.x.map(clamp_mag);
        }
        self.time = t;
    }

    fn drift_open_loop(&mut self, w: &DVector<f64>) {
        self.x = (self.model.a() * &self.x + self.model.b_w() * w).map(clamp_mag);
    }
}

/// A runnable loop, in the variant the inputs call for.
#[derive(Debug, Clone)]
pub enum ClosedLoop {
    /// Diagonal plant, exact state measurement, explicit outcome feedback.
    Diagonal(DiagonalExplicitLoop),
    /// Output feedback with modulated outcome feedback.
    Dance(DanceLoop),
}

/// Wires a plant model, a transport, per-stream rates, and a config into a
/// runnable loop, and reports each stream's reliability demand for moment
/// order `eta` against what the link provides. The report is advisory:
/// construction fails only on structural mismatches, never on demand
/// shortfalls.
pub fn build_closed_loop(
    model: &StateSpaceModel,
    transport: Transport,
    streams: &[StreamSpec],
    config: &LoopConfig,
    eta: f64,
) -> Result<(ClosedLoop, DemandReport), LoopError> {
    validate_config(config)?;
    if !(eta > 0.0) || !eta.is_finite() {
        return Err(LoopError::Unsupported(format!(
            "eta must be positive and finite, got {eta}"
        )));
    }
    match config.feedback {
        FeedbackMode::Explicit => {
            let lp = build_diagonal(model, transport, streams, config)?;
            let report = demand_report(
                transport,
                config.discipline,
                streams,
                &lp.mode_growths(),
                eta,
                config.epsilon,
            );
            Ok((ClosedLoop::Diagonal(lp), report))
        }
        FeedbackMode::Dance => {
            let lp = build_dance(model, transport, streams, config)?;
            let report = demand_report(
                transport,
                config.discipline,
                streams,
                &lp.mode_growths(),
                eta,
                config.epsilon,
            );
            Ok((ClosedLoop::Dance(lp), report))
        }
    }
}
