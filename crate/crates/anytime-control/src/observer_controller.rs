//! Quantized-control primitives: virtual controlled processes that certify a
//! state box from a bit budget, replay of delayed window labels into control
//! targets, multi-step control batching, state recovery from an observation
//! window, and amplitude signaling through the plant output.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::channels::BitPipe;
use crate::state_space::{
    controllability_matrix, intrinsic_delay, is_observable, is_reachable, StateSpaceError,
    StateSpaceModel,
};

/// Relative slack for assertion-grade bound checks on simulated traces.
const TRACE_SLACK: f64 = 1e-12;

/// Errors from control-side constructions.
#[derive(Debug, Error)]
pub enum ControlError {
    #[error("rate {rate} is at or below log2({lambda}): no finite box exists")]
    RateTooLow { rate: f64, lambda: f64 },
    #[error("growth factor {lambda} is not above 1")]
    InvalidGrowth { lambda: f64 },
    #[error("block is not upper triangular with a constant diagonal: {0}")]
    BlockShape(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("control pair cannot reach every state direction")]
    NotReachable,
    #[error("control target lies outside the reachable subspace (residual {residual:.3e})")]
    TargetUnreachable { residual: f64 },
    #[error("output pair does not determine the state from a window")]
    NotObservable,
    #[error("separation factor {factor} leaves no demodulation margin (needs > 2)")]
    SignalGapTooSmall { factor: f64 },
    #[error("symbol {symbol} outside alphabet 1..={alphabet}")]
    InvalidSymbol { symbol: usize, alphabet: usize },
    #[error("first input produces no output response")]
    NoOutputResponse,
    #[error("numerical factorization failed: {0}")]
    Numerical(String),
    #[error(transparent)]
    State(#[from] StateSpaceError),
}

/// Smallest box half-supporting the window recursion: `omega / (1 - lambda
/// 2^{-rate})`. The fixed point of `delta -> lambda 2^{-rate} delta + omega`.
pub fn delta_min(rate: f64, lambda: f64, omega: f64) -> Result<f64, ControlError> {
    assert!(omega >= 0.0, "disturbance bound must be nonnegative");
    if !rate.is_finite() || !lambda.is_finite() || lambda <= 0.0 {
        return Err(ControlError::RateTooLow { rate, lambda });
    }
    let contraction = 1.0 - lambda * (-rate).exp2();
    if contraction <= 0.0 {
        return Err(ControlError::RateTooLow { rate, lambda });
    }
    Ok(omega / contraction)
}

/// Bits emitted by one quantization step, most significant first, along with
/// the recentering control the emitter committed to.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelStep {
    pub bits: Vec<bool>,
    pub ubar: f64,
}

fn group_budget(pipe: &BitPipe, step: u64) -> u32 {
    let b = pipe.cumulative(step) - pipe.cumulative(step - 1);
    assert!(b <= 52, "per-step bit budget {b} exceeds exact cell arithmetic");
    b as u32
}

fn cell_of(lam_x: f64, lam_h: f64, cells: u64) -> u64 {
    if lam_h <= 0.0 {
        return 0;
    }
    let frac = (lam_x + lam_h) / (2.0 * lam_h);
    let idx = (frac * cells as f64).floor();
    idx.max(0.0).min((cells - 1) as f64) as u64
}

fn cell_center(idx: u64, lam_h: f64, cells: u64) -> f64 {
    if lam_h <= 0.0 {
        return 0.0;
    }
    -lam_h + (idx as f64 + 0.5) * (2.0 * lam_h / cells as f64)
}

fn bits_of_cell(idx: u64, width: u32) -> Vec<bool> {
    (0..width).map(|k| (idx >> (width - 1 - k)) & 1 == 1).collect()
}

fn cell_of_bits(bits: &[bool]) -> u64 {
    bits.iter().fold(0u64, |acc, &b| (acc << 1) | u64::from(b))
}

/// A scalar state kept inside a certified window by quantized recentering.
///
/// Each step splits the grown window into `2^b` cells, where `b` follows the
/// floor schedule of the long-run rate, announces the cell holding the grown
/// state, and applies the control that moves that cell's center to zero. The
/// certified half-width then contracts to half a cell plus the disturbance
/// margin, so `|xbar|` never leaves it.
#[derive(Debug, Clone)]
pub struct VirtualProcess {
    lambda: f64,
    rate: f64,
    omega: f64,
    delta: f64,
    xbar: f64,
    half: f64,
    time: u64,
    pipe: BitPipe,
    pending: Option<(f64, f64)>,
    frozen: bool,
}

impl VirtualProcess {
    pub fn new(lambda: f64, rate: f64, omega: f64) -> Result<Self, ControlError> {
        if !(lambda > 1.0) {
            return Err(ControlError::InvalidGrowth { lambda });
        }
        let delta = delta_min(rate, lambda, omega)?;
        let pipe = BitPipe::new(rate).expect("rate validated above");
        Ok(Self {
            lambda,
            rate,
            omega,
            delta,
            xbar: 0.0,
            half: delta / 2.0,
            time: 0,
            pipe,
            pending: None,
            frozen: false,
        })
    }

    /// Starts from a nonzero state inside the initial window.
    pub fn with_initial(mut self, xbar0: f64) -> Self {
        assert!(self.time == 0 && self.pending.is_none());
        assert!(
            xbar0.abs() <= self.half * (1.0 + TRACE_SLACK) + f64::MIN_POSITIVE,
            "initial state outside certified window"
        );
        self.xbar = xbar0;
        self
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }

    pub fn omega(&self) -> f64 {
        self.omega
    }

    /// The long-run box size; the certified half-width never strays above
    /// it by more than the fractional-schedule jitter.
    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn xbar(&self) -> f64 {
        self.xbar
    }

    /// Current certified bound on `|xbar|`.
    pub fn half_width(&self) -> f64 {
        self.half
    }

    pub fn time(&self) -> u64 {
        self.time
    }

    /// Whether a failed window update has permanently stopped the process.
    pub fn frozen(&self) -> bool {
        self.frozen
    }

    /// Announces the cell of the grown state and commits the recentering
    /// control for this step. Must be followed by [`Self::advance`] or one
    /// of its variants.
    pub fn quantize(&mut self) -> LabelStep {
        assert!(!self.frozen, "process was frozen by a failed window update");
        assert!(self.pending.is_none(), "quantize called twice without advance");
        assert!(
            self.xbar.abs() <= self.half * (1.0 + TRACE_SLACK) + f64::MIN_POSITIVE,
            "state escaped its certified window"
        );
        let width = group_budget(&self.pipe, self.time + 1);
        let cells = 1u64 << width;
        let lam_x = self.lambda * self.xbar;
        let lam_h = self.lambda * self.half;
        let idx = cell_of(lam_x, lam_h, cells);
        let center = cell_center(idx, lam_h, cells);
        let ubar = -center;
        let shrunk = lam_h / cells as f64;
        self.pending = Some((ubar, shrunk));
        LabelStep {
            bits: bits_of_cell(idx, width),
            ubar,
        }
    }

    /// Applies the committed control together with the step disturbance and
    /// contracts the certified window.
    pub fn advance(&mut self, w: f64) -> f64 {
        let (ubar, shrunk) = self.pending.take().expect("advance without quantize");
        assert!(
            w.abs() <= self.omega / 2.0 * (1.0 + TRACE_SLACK) + f64::MIN_POSITIVE,
            "disturbance {w} exceeds bound {}",
            self.omega / 2.0
        );
        self.xbar = self.lambda * self.xbar + ubar + w;
        self.half = shrunk + self.omega / 2.0;
        self.time += 1;
        assert!(
            self.xbar.abs() <= self.half * (1.0 + TRACE_SLACK) + f64::MIN_POSITIVE,
            "certified window violated: |{}| > {}",
            self.xbar,
            self.half
        );
        self.xbar
    }

    /// One full step: quantize, then advance with the given disturbance.
    pub fn virtual_step(&mut self, w: f64) -> LabelStep {
        let label = self.quantize();
        self.advance(w);
        label
    }

    /// Re-anchoring variant of [`Self::advance`]: instead of integrating a
    /// disturbance, takes the externally measured next state, whose implied
    /// disturbance must stay inside the bound. Integrating the window state
    /// separately from the physical one lets rounding differences compound
    /// by the growth factor each step; anchoring to the measurement keeps
    /// them inside the disturbance margin. Returns false and freezes the
    /// process if the measurement falls outside the certified window.
    pub fn try_advance_to_state(&mut self, xbar_new: f64) -> bool {
        let (ubar, shrunk) = self.pending.take().expect("advance without quantize");
        let implied = xbar_new - (self.lambda * self.xbar + ubar);
        let half_next = shrunk + self.omega / 2.0;
        let slack = 1e-12 * half_next.max(1.0);
        let ok = implied.abs() <= self.omega / 2.0 * (1.0 + 1e-9) + slack
            && xbar_new.abs() <= half_next + slack;
        if ok {
            self.xbar = xbar_new;
            self.half = half_next;
            self.time += 1;
        } else {
            self.frozen = true;
        }
        ok
    }
}

/// Turns the delivered label bits of a [`VirtualProcess`] into the control
/// to apply each step.
///
/// Delivered bits are folded in one full step group at a time; the window
/// recursion is deterministic, so each group pins down the recentering
/// control it encoded. A group that lands with a delay of `d` steps has its
/// control scaled by the growth factor to the power `d`, which is exactly
/// the correction that makes the plant end up where on-time application
/// would have put it. Groups still in flight contribute nothing yet.
#[derive(Debug, Clone)]
pub struct LabelReplay {
    lambda: f64,
    omega: f64,
    half: f64,
    steps_committed: u64,
    bits_consumed: usize,
    last_now: u64,
    pipe: BitPipe,
}

impl LabelReplay {
    pub fn new(lambda: f64, rate: f64, omega: f64) -> Result<Self, ControlError> {
        if !(lambda > 1.0) {
            return Err(ControlError::InvalidGrowth { lambda });
        }
        let delta = delta_min(rate, lambda, omega)?;
        let pipe = BitPipe::new(rate).expect("rate validated above");
        Ok(Self {
            lambda,
            omega,
            half: delta / 2.0,
            steps_committed: 0,
            bits_consumed: 0,
            last_now: 0,
            pipe,
        })
    }

    /// Number of full step groups folded in so far.
    pub fn committed(&self) -> u64 {
        self.steps_committed
    }

    /// Certified half-width at the committed boundary.
    pub fn half_width(&self) -> f64 {
        self.half
    }

    /// Folds in any newly completed step groups from the delivered prefix
    /// (never past step `now`) and returns the control to apply at step
    /// `now`. Must be called once per step, with `now` advancing by one, so
    /// that every group's correction is emitted exactly once.
    pub fn control(&mut self, now: u64, delivered: &[bool]) -> f64 {
        assert_eq!(now, self.last_now + 1, "controls must be drawn step by step");
        self.last_now = now;
        let mut fresh = 0.0f64;
        while self.steps_committed < now {
            let step = self.steps_committed + 1;
            let width = group_budget(&self.pipe, step);
            let end = self.bits_consumed + width as usize;
            if delivered.len() < end {
                break;
            }
            let idx = cell_of_bits(&delivered[self.bits_consumed..end]);
            let cells = 1u64 << width;
            let lam_h = self.lambda * self.half;
            let ubar = -cell_center(idx, lam_h, cells);
            fresh = self.lambda * fresh + ubar;
            self.half = lam_h / cells as f64 + self.omega / 2.0;
            self.bits_consumed = end;
            self.steps_committed = step;
        }
        if fresh == 0.0 {
            return 0.0;
        }
        let lag = (now - self.steps_committed) as i32;
        fresh * self.lambda.powi(lag)
    }
}

/// The state a linear plant would hold if only the applied controls acted on
/// it. Feeding it a desired next state yields the control that gets there.
#[derive(Debug, Clone)]
pub struct ControllerShadow {
    a: DMatrix<f64>,
    xtilde: DVector<f64>,
}

impl ControllerShadow {
    pub fn new(a: DMatrix<f64>) -> Self {
        assert_eq!(a.nrows(), a.ncols(), "growth matrix must be square");
        let n = a.nrows();
        Self {
            a,
            xtilde: DVector::zeros(n),
        }
    }

    pub fn xtilde(&self) -> &DVector<f64> {
        &self.xtilde
    }

    /// Returns the fully-actuated control that moves the shadow to `target`.
    pub fn apply(&mut self, target: &DVector<f64>) -> DVector<f64> {
        assert_eq!(target.len(), self.xtilde.len());
        let u = target - &self.a * &self.xtilde;
        self.xtilde.copy_from(target);
        u
    }
}

/// Per-dimension disturbance and box sizes for an upper-triangular block
/// with constant diagonal: coupling from later dimensions is absorbed as
/// extra disturbance, so boxes are solved from the last dimension backwards.
#[derive(Debug, Clone)]
pub struct JordanBlockPlan {
    block: DMatrix<f64>,
    lambda: f64,
    rate: f64,
    omega: f64,
    omegas: Vec<f64>,
    deltas: Vec<f64>,
}

impl JordanBlockPlan {
    pub fn block(&self) -> &DMatrix<f64> {
        &self.block
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }

    pub fn omega(&self) -> f64 {
        self.omega
    }

    /// Inflated per-dimension disturbance bounds.
    pub fn omegas(&self) -> &[f64] {
        &self.omegas
    }

    /// Per-dimension box sizes.
    pub fn deltas(&self) -> &[f64] {
        &self.deltas
    }
}

/// Solves the per-dimension boxes for an upper-triangular constant-diagonal
/// block: the last dimension is scalar, and each earlier one treats the
/// already-boxed later dimensions as bounded extra disturbance.
pub fn jordan_plan(
    block: &DMatrix<f64>,
    rate: f64,
    omega: f64,
) -> Result<JordanBlockPlan, ControlError> {
    let n = block.nrows();
    if n == 0 || block.ncols() != n {
        return Err(ControlError::DimensionMismatch(format!(
            "block must be square and nonempty, got {}x{}",
            block.nrows(),
            block.ncols()
        )));
    }
    assert!(omega >= 0.0, "disturbance bound must be nonnegative");
    let scale = block.amax().max(1.0);
    let lambda = block[(0, 0)];
    for i in 0..n {
        if (block[(i, i)] - lambda).abs() > 1e-9 * scale {
            return Err(ControlError::BlockShape(format!(
                "diagonal entry ({i},{i}) = {} differs from {lambda}",
                block[(i, i)]
            )));
        }
        for j in 0..i {
            if block[(i, j)].abs() > 1e-9 * scale {
                return Err(ControlError::BlockShape(format!(
                    "nonzero entry {} below the diagonal at ({i},{j})",
                    block[(i, j)]
                )));
            }
        }
    }
    let mut omegas = vec![0.0; n];
    let mut deltas = vec![0.0; n];
    for i in (0..n).rev() {
        let coupled: f64 = (i + 1..n).map(|j| block[(i, j)].abs() * deltas[j]).sum();
        omegas[i] = omega + coupled;
        deltas[i] = delta_min(rate, lambda, omegas[i])?;
    }
    Ok(JordanBlockPlan {
        block: block.clone(),
        lambda,
        rate,
        omega,
        omegas,
        deltas,
    })
}

/// Coupled virtual processes for one upper-triangular block: each dimension
/// runs its own window quantizer and the cross terms from later dimensions
/// ride along as disturbance.
#[derive(Debug, Clone)]
pub struct JordanLoop {
    plan: JordanBlockPlan,
    vps: Vec<VirtualProcess>,
}

impl JordanLoop {
    pub fn new(block: &DMatrix<f64>, rate: f64, omega: f64) -> Result<Self, ControlError> {
        let plan = jordan_plan(block, rate, omega)?;
        let vps = plan
            .omegas
            .iter()
            .map(|&om| VirtualProcess::new(plan.lambda, rate, om))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self { plan, vps })
    }

    pub fn plan(&self) -> &JordanBlockPlan {
        &self.plan
    }

    pub fn states(&self) -> Vec<f64> {
        self.vps.iter().map(VirtualProcess::xbar).collect()
    }

    /// One coupled step with an externally chosen disturbance vector.
    pub fn step(&mut self, w: &[f64]) -> Vec<LabelStep> {
        self.step_with(|i, _| w[i])
    }

    /// One coupled step where the disturbance for each dimension may be
    /// chosen after seeing that dimension's drift (its next state before the
    /// disturbance lands), which is what a worst-case adversary gets to do.
    pub fn step_with(&mut self, mut w: impl FnMut(usize, f64) -> f64) -> Vec<LabelStep> {
        let n = self.vps.len();
        let labels: Vec<LabelStep> = self.vps.iter_mut().map(VirtualProcess::quantize).collect();
        let states: Vec<f64> = self.vps.iter().map(VirtualProcess::xbar).collect();
        for i in 0..n {
            let cross: f64 = (i + 1..n)
                .map(|j| self.plan.block[(i, j)] * states[j])
                .sum();
            let drift = self.plan.lambda * states[i] + labels[i].ubar + cross;
            let wi = w(i, drift);
            assert!(
                wi.abs() <= self.plan.omega / 2.0 * (1.0 + TRACE_SLACK) + f64::MIN_POSITIVE,
                "raw disturbance {wi} exceeds bound {}",
                self.plan.omega / 2.0
            );
            self.vps[i].advance(wi + cross);
        }
        labels
    }
}

/// Control sequence over `n` steps whose net effect on the state equals the
/// one-step increment `delta`, solved least-norm through the reachability
/// map.
pub fn batch_controls_net(
    a: &DMatrix<f64>,
    b_u: &DMatrix<f64>,
    delta: &DVector<f64>,
) -> Result<Vec<DVector<f64>>, ControlError> {
    let n = a.nrows();
    if a.ncols() != n || b_u.nrows() != n || delta.len() != n {
        return Err(ControlError::DimensionMismatch(format!(
            "A {}x{}, B {}x{}, target {}",
            a.nrows(),
            a.ncols(),
            b_u.nrows(),
            b_u.ncols(),
            delta.len()
        )));
    }
    if !is_reachable(a, b_u) {
        return Err(ControlError::NotReachable);
    }
    let m = b_u.ncols();
    let k = controllability_matrix(a, b_u);
    let eps = 1e-12 * k.amax().max(1.0);
    let pinv = k
        .clone()
        .pseudo_inverse(eps)
        .map_err(|e| ControlError::Numerical(e.to_string()))?;
    let stacked = pinv * delta;
    let residual = (&k * &stacked - delta).amax();
    let scale = delta.amax().max(1.0);
    if residual > 1e-9 * scale {
        return Err(ControlError::TargetUnreachable { residual });
    }
    Ok((0..n).map(|s| stacked.rows(s * m, m).into_owned()).collect())
}

/// Control sequence over `n` steps that lands the system where a single
/// fully-actuated input `desired` applied at the window start would have
/// put it: the net increment is `A^{n-1} desired`.
pub fn batch_controls(
    a: &DMatrix<f64>,
    b_u: &DMatrix<f64>,
    desired: &DVector<f64>,
) -> Result<Vec<DVector<f64>>, ControlError> {
    let n = a.nrows();
    if desired.len() != n {
        return Err(ControlError::DimensionMismatch(format!(
            "desired has {} entries, state has {n}",
            desired.len()
        )));
    }
    let mut net = desired.clone();
    for _ in 1..n {
        net = a * net;
    }
    batch_controls_net(a, b_u, &net)
}

/// State estimate recovered from an observation window, with worst-case
/// componentwise error bounds at both ends of the window.
#[derive(Debug, Clone)]
pub struct StateRecovery {
    /// Estimate of the state at the first observation.
    pub estimate: DVector<f64>,
    /// Componentwise error bound for `estimate`.
    pub bound: DVector<f64>,
    /// Estimate of the state at the last observation.
    pub final_estimate: DVector<f64>,
    /// Componentwise error bound for `final_estimate`.
    pub final_bound: DVector<f64>,
}

/// Recovers the state from `n` consecutive outputs and the `n-1` controls
/// applied between them. The exact control contribution is subtracted, the
/// stacked output map is inverted least-squares, and the returned bounds
/// propagate the worst case of measurement noise and disturbance through
/// that inversion.
pub fn recover_state(
    model: &StateSpaceModel,
    observations: &[DVector<f64>],
    controls: &[DVector<f64>],
) -> Result<StateRecovery, ControlError> {
    let n = model.n();
    let m_y = model.m_y();
    if !is_observable(model.a(), model.c_y()) {
        return Err(ControlError::NotObservable);
    }
    if observations.len() != n || controls.len() + 1 != n {
        return Err(ControlError::DimensionMismatch(format!(
            "need {n} observations and {} controls, got {} and {}",
            n - 1,
            observations.len(),
            controls.len()
        )));
    }
    for y in observations {
        if y.len() != m_y {
            return Err(ControlError::DimensionMismatch(format!(
                "observation has {} entries, output has {m_y}",
                y.len()
            )));
        }
    }
    for u in controls {
        if u.len() != model.m_u() {
            return Err(ControlError::DimensionMismatch(format!(
                "control has {} entries, input has {}",
                u.len(),
                model.m_u()
            )));
        }
    }
    let mut apow = Vec::with_capacity(n);
    apow.push(DMatrix::identity(n, n));
    for k in 1..n {
        apow.push(&apow[k - 1] * model.a());
    }
    let half_gamma = model.gamma() / 2.0;
    let half_omega = model.omega() / 2.0;
    let mut stacked = DMatrix::zeros(n * m_y, n);
    let mut rhs = DVector::zeros(n * m_y);
    let mut row_bound = DVector::zeros(n * m_y);
    for k in 0..n {
        let block = model.c_y() * &apow[k];
        stacked.rows_mut(k * m_y, m_y).copy_from(&block);
        let mut cleaned = observations[k].clone();
        for (s, u) in controls.iter().enumerate().take(k) {
            cleaned -= model.c_y() * (&apow[k - 1 - s] * (model.b_u() * u));
        }
        rhs.rows_mut(k * m_y, m_y).copy_from(&cleaned);
        for r in 0..m_y {
            let mut noise = half_gamma;
            for s in 0..k {
                let reach = model.c_y() * (&apow[k - 1 - s] * model.b_w());
                noise += half_omega * reach.row(r).iter().map(|v| v.abs()).sum::<f64>();
            }
            row_bound[k * m_y + r] = noise;
        }
    }
    let eps = 1e-12 * stacked.amax().max(1.0);
    let pinv = stacked
        .pseudo_inverse(eps)
        .map_err(|e| ControlError::Numerical(e.to_string()))?;
    let estimate = &pinv * &rhs;
    let mut bound = DVector::zeros(n);
    for i in 0..n {
        bound[i] = (0..n * m_y)
            .map(|r| pinv[(i, r)].abs() * row_bound[r])
            .sum();
    }
    let mut final_estimate = &apow[n - 1] * &estimate;
    for (s, u) in controls.iter().enumerate() {
        final_estimate += &apow[n - 2 - s] * (model.b_u() * u);
    }
    let mut final_bound = DVector::zeros(n);
    for i in 0..n {
        let mut total: f64 = (0..n).map(|j| apow[n - 1][(i, j)].abs() * bound[j]).sum();
        for s in 0..n - 1 {
            let reach = &apow[n - 2 - s] * model.b_w();
            total += half_omega * reach.row(i).iter().map(|v| v.abs()).sum::<f64>();
        }
        final_bound[i] = total;
    }
    Ok(StateRecovery {
        estimate,
        bound,
        final_estimate,
        final_bound,
    })
}

/// Amplitude-modulation plan for signaling a symbol through the plant: the
/// symbol scales a probe on the first input, and after the input-output
/// delay the output shifts by the probe response times the symbol.
#[derive(Debug, Clone)]
pub struct DancePlan {
    /// Output response to a unit probe on the first input after the
    /// input-output delay.
    pub psi: DVector<f64>,
    /// Largest absolute response entry.
    pub psibar: f64,
    /// Index of that entry; demodulation reads it.
    pub kstar: usize,
    /// Worst-case output perturbation from everything except the probe.
    pub gamma2: f64,
    /// Probe amplitude per symbol unit.
    pub amplitude: f64,
    /// Symbols are `1..=alphabet`.
    pub alphabet: usize,
    /// Ratio of the per-symbol output gap to `gamma2`.
    pub factor: f64,
    /// Steps before the probe reaches the output.
    pub theta: usize,
}

/// Builds a signaling plan with gap `factor * gamma2` between adjacent
/// symbol levels at the strongest output. Any factor above 2 separates the
/// levels beyond the worst-case perturbation, so demodulation is exact.
pub fn dance_plan(
    model: &StateSpaceModel,
    gamma2: f64,
    alphabet: usize,
    factor: f64,
) -> Result<DancePlan, ControlError> {
    assert!(gamma2 >= 0.0, "perturbation bound must be nonnegative");
    assert!(alphabet >= 1, "alphabet must be nonempty");
    let theta = intrinsic_delay(model)?;
    let mut probe = model.b_u().column(0).into_owned();
    for _ in 0..theta {
        probe = model.a() * probe;
    }
    let psi = model.c_y() * probe;
    let psibar = psi.amax();
    let scale = model.a().amax().max(model.b_u().amax()).max(1.0);
    if psibar <= 1e-9 * scale {
        return Err(ControlError::NoOutputResponse);
    }
    let kstar = (0..psi.len())
        .max_by(|&i, &j| psi[i].abs().total_cmp(&psi[j].abs()))
        .expect("response is nonempty");
    let amplitude = if gamma2 > 0.0 {
        if factor <= 2.0 {
            return Err(ControlError::SignalGapTooSmall { factor });
        }
        factor * gamma2 / psibar
    } else {
        1.0 / psibar
    };
    Ok(DancePlan {
        psi,
        psibar,
        kstar,
        gamma2,
        amplitude,
        alphabet,
        factor,
        theta,
    })
}

/// The probe value to add on the first input for symbol `z`.
pub fn dance_encode(plan: &DancePlan, z: usize) -> Result<f64, ControlError> {
    if z < 1 || z > plan.alphabet {
        return Err(ControlError::InvalidSymbol {
            symbol: z,
            alphabet: plan.alphabet,
        });
    }
    Ok(plan.amplitude * z as f64)
}

/// Recovers the symbol from the observed output shift. Exact whenever the
/// non-probe perturbation stays within `gamma2`.
pub fn dance_decode(plan: &DancePlan, shift: &DVector<f64>) -> usize {
    assert_eq!(shift.len(), plan.psi.len(), "shift has wrong output size");
    let ratio = shift[plan.kstar] / (plan.psi[plan.kstar] * plan.amplitude);
    let z = ratio.round();
    if z < 1.0 {
        1
    } else if z > plan.alphabet as f64 {
        plan.alphabet
    } else {
        z as usize
    }
}
