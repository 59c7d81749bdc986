//! Hiding message bits inside the disturbance budget of a stabilized plant
//! and reading them back out of the control record.
//!
//! The encoder runs a plant simulation and spends part of the allowed
//! disturbance on bit-keyed injections. Bit `k` of a stream with growth
//! `lambda` and message rate `R` lands at the first step `t` where
//! `floor(R t) >= k`, and from then on carries weight
//! `gamma lambda^(t - k/R)` in the uncontrolled state. The closed loop
//! keeps the plant state small, so the accumulated control response
//! mirrors the injected content, and a receiver that only remembers the
//! controls it applied can recover the bits. The weights form a
//! super-geometric ladder whenever `R < log2 lambda`, which leaves every
//! bit separated from the combined weight of all later bits, so greedy
//! oldest-first extraction is safe while the leftover plant state stays
//! under half the separation.
//!
//! ```text
//! gamma = Omega / (2 lambda^(1 + 1/R))    injection scale
//! eps1  = lambda^(1/R) - 2                ladder slack, > 0 iff R < log2 lambda
//! half gap of bit k at time t = gamma lambda^(t - k/R) eps1 / (1 + eps1)
//! ```
//!
//! Upper-triangular blocks couple streams one way, later streams leaking
//! into earlier components, so decoding runs from the last stream to the
//! first and subtracts each decoded stream's rebuilt contribution from the
//! components below it. [`MarginLedger`] prices that ordering: a decode
//! error of age `d` in one stream moves lower components by at most a
//! constant times `lambda^((1 + eps') d)`, and each stream's half gap is
//! split evenly among itself and the streams above it, which converts the
//! bound into a tolerated-delay relation between adjacent streams.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use thiserror::Error;

use crate::closed_loop::{
    build_closed_loop, ClosedLoop, DemandReport, DiagonalExplicitLoop, LoopConfig, LoopError,
    Transport,
};
use crate::priority_code::StreamSpec;
use crate::state_space::StateSpaceModel;

/// Why an embedding cannot be built or applied.
#[derive(Debug, Error)]
pub enum EmbeddingError {
    /// Growth at or below one gives the bit weights no ordering.
    #[error("mode growth must exceed 1, got {lambda}")]
    NonExpanding {
        /// Offending growth factor.
        lambda: f64,
    },
    /// The message rate must stay strictly inside `(0, log2 lambda)`.
    #[error("message rate {rate} must lie in (0, {limit}) under mode growth {lambda}")]
    RateOutsideRange {
        /// Requested message rate.
        rate: f64,
        /// Growth factor of the mode.
        lambda: f64,
        /// Largest admissible rate, `log2 lambda`.
        limit: f64,
    },
    /// The disturbance budget must be a positive finite width.
    #[error("disturbance bound must be positive and finite, got {omega}")]
    InvalidBound {
        /// Offending bound.
        omega: f64,
    },
    /// Message symbols live in `{-1, +1}`.
    #[error("message symbol at stream {stream} position {position} must be -1 or +1, got {value}")]
    BadSymbol {
        /// Stream holding the bad entry.
        stream: usize,
        /// Index of the bad entry.
        position: usize,
        /// Offending value.
        value: i8,
    },
    /// Plain bits live in `{0, 1}`.
    #[error("bit at position {position} must be 0 or 1, got {value}")]
    BadBit {
        /// Index of the bad entry.
        position: usize,
        /// Offending value.
        value: u8,
    },
    /// Matrix or argument shapes do not line up.
    #[error("shape mismatch: {0}")]
    Shape(String),
    /// The propagation slack must be positive and finite.
    #[error("propagation slack must be positive and finite, got {value}")]
    InvalidSlack {
        /// Offending slack.
        value: f64,
    },
    /// The provided loop cannot host an embedded code.
    #[error("unsupported loop for an embedded code: {0}")]
    UnsupportedLoop(String),
    #[error(transparent)]
    Loop(#[from] LoopError),
}

/// Per-stream constants of the embedding.
///
/// `gamma` scales every injection so that each step's total stays inside
/// the disturbance box, and `eps1` measures how much the weight ladder
/// beats a plain halving, which is exactly the slack the decoder spends.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmbeddingParams {
    lambda: f64,
    rate: f64,
    omega: f64,
    gamma: f64,
    eps1: f64,
}

impl EmbeddingParams {
    /// Derives the embedding constants for one stream.
    pub fn new(lambda: f64, rate: f64, omega: f64) -> Result<Self, EmbeddingError> {
        if !(lambda > 1.0) || !lambda.is_finite() {
            return Err(EmbeddingError::NonExpanding { lambda });
        }
        let limit = lambda.log2();
        if !(rate > 0.0) || !(rate < limit) {
            return Err(EmbeddingError::RateOutsideRange {
                rate,
                lambda,
                limit,
            });
        }
        if !(omega > 0.0) || !omega.is_finite() {
            return Err(EmbeddingError::InvalidBound { omega });
        }
        let gamma = omega / (2.0 * lambda.powf(1.0 + 1.0 / rate));
        let eps1 = lambda.powf(1.0 / rate) - 2.0;
        Ok(Self {
            lambda,
            rate,
            omega,
            gamma,
            eps1,
        })
    }

    /// Growth factor of the carrying mode.
    pub fn lambda(&self) -> f64 {
        self.lambda
    }
    /// Message rate in bits per step.
    pub fn rate(&self) -> f64 {
        self.rate
    }
    /// Disturbance box width the injections must respect.
    pub fn omega(&self) -> f64 {
        self.omega
    }
    /// Injection scale.
    pub fn gamma(&self) -> f64 {
        self.gamma
    }
    /// Ladder slack, positive exactly when the rate is admissible.
    pub fn eps1(&self) -> f64 {
        self.eps1
    }

    fn released_at(rate: f64, t: u64) -> u64 {
        (rate * t as f64).floor() as u64
    }

    /// Number of bit positions already carried at time `t`, positions
    /// `0..floor(R t)` inclusive.
    pub fn bits_released(&self, t: u64) -> usize {
        (Self::released_at(self.rate, t) + 1) as usize
    }

    /// First step whose state carries bit `k`; position zero is deferred
    /// to step one so the state starts at zero.
    pub fn arrival_step(&self, k: usize) -> u64 {
        if k == 0 {
            return 1;
        }
        let k64 = k as u64;
        let mut m = ((k as f64) / self.rate).ceil().max(1.0) as u64;
        while m > 1 && Self::released_at(self.rate, m - 1) >= k64 {
            m -= 1;
        }
        while Self::released_at(self.rate, m) < k64 {
            m += 1;
        }
        m
    }

    /// Weight bit `k` contributes to the uncontrolled state at time `t`.
    pub fn bit_weight(&self, k: usize, t: u64) -> f64 {
        self.gamma * self.lambda.powf(t as f64 - k as f64 / self.rate)
    }

    /// Half of the guaranteed separation of bit `k` at time `t`: greedy
    /// extraction recovers the prefix through `k` whenever the decoder-side
    /// deviation stays strictly below this.
    pub fn half_gap(&self, k: usize, t: u64) -> f64 {
        self.bit_weight(k, t) * self.eps1 / (1.0 + self.eps1)
    }

    /// Disturbance injected while stepping the state from `tau` to
    /// `tau + 1`. Positions beyond the supplied message are skipped. The
    /// total always stays inside the disturbance box, with room to spare
    /// by the factor `1 + eps1`.
    pub fn simulated_disturbance(&self, symbols: &[i8], tau: u64) -> f64 {
        let m = tau + 1;
        let lo = if m == 1 {
            0
        } else {
            Self::released_at(self.rate, m - 1) + 1
        };
        let hi = Self::released_at(self.rate, m);
        let mut w = 0.0;
        let mut k = lo;
        while k <= hi {
            if let Some(&s) = symbols.get(k as usize) {
                debug_assert!(s == 1 || s == -1);
                w += f64::from(s) * self.bit_weight(k as usize, self.arrival_step(k as usize));
            }
            k += 1;
        }
        debug_assert!(w.abs() <= self.omega / 2.0);
        w
    }
}

fn validate_symbols(symbols: &[i8], stream: usize) -> Result<(), EmbeddingError> {
    for (position, &value) in symbols.iter().enumerate() {
        if value != 1 && value != -1 {
            return Err(EmbeddingError::BadSymbol {
                stream,
                position,
                value,
            });
        }
    }
    Ok(())
}

fn validate_block(block: &DMatrix<f64>, params: &[EmbeddingParams]) -> Result<(), EmbeddingError> {
    let n = params.len();
    if n == 0 {
        return Err(EmbeddingError::Shape("at least one stream is needed".into()));
    }
    if block.nrows() != n || block.ncols() != n {
        return Err(EmbeddingError::Shape(format!(
            "block must be {n}x{n} to match {n} streams, got {}x{}",
            block.nrows(),
            block.ncols()
        )));
    }
    for i in 0..n {
        let lambda = params[i].lambda;
        if (block[(i, i)] - lambda).abs() > 1e-12 * lambda {
            return Err(EmbeddingError::Shape(format!(
                "diagonal entry {i} is {}, but stream {i} was built for growth {lambda}",
                block[(i, i)]
            )));
        }
        for j in 0..i {
            if block[(i, j)] != 0.0 {
                return Err(EmbeddingError::Shape(format!(
                    "block must be upper triangular, entry ({i}, {j}) is {}",
                    block[(i, j)]
                )));
            }
        }
    }
    Ok(())
}

fn require_shared_growth(params: &[EmbeddingParams]) -> Result<f64, EmbeddingError> {
    let lambda = params[0].lambda;
    for p in params {
        if (p.lambda - lambda).abs() > 1e-9 * lambda {
            return Err(EmbeddingError::Shape(format!(
                "coupled streams must share one growth factor, got {} and {lambda}",
                p.lambda
            )));
        }
    }
    Ok(lambda)
}

/// Uncontrolled state reached at time `t` when every stream's message is
/// injected into a plant with the given upper-triangular transition block
/// and no control acts. Message positions past the end of a stream's
/// symbol list contribute nothing.
pub fn embed(
    params: &[EmbeddingParams],
    block: &DMatrix<f64>,
    symbols: &[Vec<i8>],
    t: u64,
) -> Result<DVector<f64>, EmbeddingError> {
    validate_block(block, params)?;
    if symbols.len() != params.len() {
        return Err(EmbeddingError::Shape(format!(
            "{} streams need {} symbol lists, got {}",
            params.len(),
            params.len(),
            symbols.len()
        )));
    }
    for (i, s) in symbols.iter().enumerate() {
        validate_symbols(s, i)?;
    }
    let n = params.len();
    let mut x = DVector::zeros(n);
    for tau in 0..t {
        let w = DVector::from_fn(n, |i, _| params[i].simulated_disturbance(&symbols[i], tau));
        x = block * &x + w;
    }
    Ok(x)
}

fn stream_contribution(
    p: &EmbeddingParams,
    block: &DMatrix<f64>,
    symbols: &[i8],
    stream: usize,
    t: u64,
) -> DVector<f64> {
    let n = block.nrows();
    let mut x = DVector::zeros(n);
    for tau in 0..t {
        let mut w = DVector::zeros(n);
        w[stream] = p.simulated_disturbance(symbols, tau);
        x = block * &x + w;
    }
    x
}

fn extract_prefix(p: &EmbeddingParams, residual: f64, t: u64, count: usize) -> Vec<i8> {
    let mut r = residual;
    let mut out = Vec::with_capacity(count);
    for k in 0..count {
        let s: i8 = if r >= 0.0 { 1 } else { -1 };
        r -= f64::from(s) * p.bit_weight(k, t);
        out.push(s);
    }
    out
}

/// Greedy oldest-first bit extraction from a scalar residual at time `t`.
/// Each position takes the sign of what is left and subtracts its weight,
/// which is the midpoint split of the remaining interval. The returned
/// prefix covers every released position; it is correct through position
/// `k` whenever the residual deviates from the true weighted sum by less
/// than the half gap at `k`.
pub fn extract_bits(params: &EmbeddingParams, residual: f64, t: u64) -> Vec<i8> {
    extract_prefix(params, residual, t, params.bits_released(t))
}

/// Walks the streams from last to first, extracting each stream's prefix
/// from its residual component and clearing the decoded stream's rebuilt
/// contribution out of the components below it.
#[derive(Debug, Clone)]
pub struct SuccessiveDecoderState {
    params: Vec<EmbeddingParams>,
    block: DMatrix<f64>,
    t: u64,
    residual: DVector<f64>,
    prefixes: Vec<Vec<i8>>,
    remaining: usize,
}

impl SuccessiveDecoderState {
    /// Starts a decode at time `t` from the accumulated control content;
    /// the working residual is its negation, per stream the weighted bit
    /// sum plus whatever small state the loop failed to cancel.
    pub fn new(
        params: &[EmbeddingParams],
        block: &DMatrix<f64>,
        control_content: &DVector<f64>,
        t: u64,
    ) -> Result<Self, EmbeddingError> {
        validate_block(block, params)?;
        if control_content.len() != params.len() {
            return Err(EmbeddingError::Shape(format!(
                "{} streams need a length-{} content vector, got length {}",
                params.len(),
                params.len(),
                control_content.len()
            )));
        }
        if t == 0 {
            return Err(EmbeddingError::Shape(
                "decoding needs at least one completed step".into(),
            ));
        }
        let n = params.len();
        Ok(Self {
            params: params.to_vec(),
            block: block.clone(),
            t,
            residual: -control_content,
            prefixes: vec![Vec::new(); n],
            remaining: n,
        })
    }

    /// Stream the next call to [`decode_next`](Self::decode_next) will
    /// handle, `None` once all streams are done.
    pub fn stream_index(&self) -> Option<usize> {
        self.remaining.checked_sub(1)
    }

    /// Current working residual.
    pub fn residual(&self) -> &DVector<f64> {
        &self.residual
    }

    /// Prefixes decoded so far, later streams first.
    pub fn prefixes(&self) -> &[Vec<i8>] {
        &self.prefixes
    }

    /// Decodes one stream and subtracts its impact from the streams below.
    /// Returns the decoded prefix, empty when nothing was left to do.
    pub fn decode_next(&mut self) -> &[i8] {
        let Some(i) = self.stream_index() else {
            return &[];
        };
        self.remaining = i;
        let prefix = extract_bits(&self.params[i], self.residual[i], self.t);
        if i > 0 {
            let contribution = stream_contribution(&self.params[i], &self.block, &prefix, i, self.t);
            for j in 0..i {
                self.residual[j] -= contribution[j];
            }
        }
        self.prefixes[i] = prefix;
        &self.prefixes[i]
    }

    /// Runs the remaining streams and returns every prefix in stream order.
    pub fn finish(mut self) -> Vec<Vec<i8>> {
        while self.stream_index().is_some() {
            self.decode_next();
        }
        self.prefixes
    }
}

/// Decodes every stream's released prefix from the accumulated control
/// content at time `t`. Wrong bits are possible and show up in the output;
/// only shape problems are errors.
pub fn successive_decode(
    params: &[EmbeddingParams],
    block: &DMatrix<f64>,
    control_content: &DVector<f64>,
    t: u64,
) -> Result<Vec<Vec<i8>>, EmbeddingError> {
    Ok(SuccessiveDecoderState::new(params, block, control_content, t)?.finish())
}

/// Slice of stream `i`'s half gap granted to one of the `n - i + 1`
/// consumers (itself and each stream below it), grown over `d` steps.
/// Streams are numbered `1..=n` here, matching the decode order talk of
/// "stream i" and "streams below i".
pub fn margin_allocation(n: usize, i: usize, d: f64, params: &EmbeddingParams) -> f64 {
    assert!(i >= 1 && i <= n, "stream index {i} outside 1..={n}");
    assert!(d >= 0.0, "delay must be nonnegative, got {d}");
    let pieces = (n - i + 1) as f64;
    params.gamma * params.eps1 / (pieces * (1.0 + params.eps1)) * params.lambda.powf(d)
}

fn coupling_ceiling(
    block: &DMatrix<f64>,
    lambda: f64,
    eps_shift: f64,
) -> DMatrix<f64> {
    let n = block.nrows();
    let damp = 1.0 / (lambda * 2f64.powf(eps_shift));
    let scaled = block * damp;
    let mut power = DMatrix::<f64>::identity(n, n);
    let mut ceiling = power.abs();
    let cap = 200 + (80.0 * n as f64 / eps_shift).ceil().min(1e5) as usize;
    let mut quiet = 0;
    for _ in 0..cap {
        power = &scaled * power;
        let mut largest = 0.0f64;
        for (c, &p) in ceiling.iter_mut().zip(power.iter()) {
            *c = c.max(p.abs());
            largest = largest.max(p.abs());
        }
        if largest < 1e-15 * ceiling.amax() {
            quiet += 1;
            if quiet >= 3 {
                break;
            }
        } else {
            quiet = 0;
        }
    }
    ceiling
}

/// Margin bookkeeping for one coupled block: per-pair deviation constants
/// and the delay conversion they induce between adjacent streams.
///
/// For a source stream `s` and a lower component `j`, every power of the
/// block satisfies `|(J^tau)[j, s]| <= K lambda^tau 2^(eps_shift tau)` with
/// `eps_shift = eps' log2 lambda` and `K` the ceiling of the damped power
/// sequence. Summing the weight ladder of the bits younger than `d` steps
/// then bounds the damage of arbitrarily wrong decodes in `s` by
/// `k_prime(s, j) lambda^((1 + eps') d)`.
#[derive(Debug, Clone)]
pub struct MarginLedger {
    params: Vec<EmbeddingParams>,
    eps_prime: f64,
    lambda: f64,
    k_prime: DMatrix<f64>,
}

impl MarginLedger {
    /// Builds the ledger for a shared-growth upper-triangular block.
    pub fn new(
        block: &DMatrix<f64>,
        params: &[EmbeddingParams],
        eps_prime: f64,
    ) -> Result<Self, EmbeddingError> {
        validate_block(block, params)?;
        let lambda = require_shared_growth(params)?;
        if !(eps_prime > 0.0) || !eps_prime.is_finite() {
            return Err(EmbeddingError::InvalidSlack { value: eps_prime });
        }
        let n = params.len();
        let eps_shift = eps_prime * lambda.log2();
        let ceiling = coupling_ceiling(block, lambda, eps_shift);
        let mut k_prime = DMatrix::zeros(n, n);
        for source in 0..n {
            let p = &params[source];
            let scale = 2.0 * p.gamma * (2.0 + p.eps1) / (1.0 + p.eps1);
            for target in 0..n {
                k_prime[(target, source)] = scale * ceiling[(target, source)];
            }
        }
        Ok(Self {
            params: params.to_vec(),
            eps_prime,
            lambda,
            k_prime,
        })
    }

    /// Slack exponent the ledger was built with.
    pub fn eps_prime(&self) -> f64 {
        self.eps_prime
    }

    /// Deviation constant for decode errors in `source` as seen by
    /// component `target`; zero whenever the block never routes `source`
    /// into `target`.
    pub fn k_prime(&self, source: usize, target: usize) -> f64 {
        self.k_prime[(target, source)]
    }

    /// Margin slice of stream `i` (numbered `1..=n`) at delay exponent `d`.
    pub fn margin(&self, i: usize, d: f64) -> f64 {
        margin_allocation(self.params.len(), i, d, &self.params[i - 1])
    }

    /// Largest deviation component `target` can see when every bit of
    /// `source` younger than `d` steps is decoded wrong.
    pub fn bound(&self, source: usize, target: usize, d: f64) -> f64 {
        self.k_prime(source, target) * self.lambda.powf((1.0 + self.eps_prime) * d)
    }

    /// Age beyond which `target`'s bits survive arbitrary decode errors in
    /// `source` younger than `d` steps: the bound at the returned delay
    /// equals `target`'s margin slice at exponent `d`. Infinite when the
    /// block never routes `source` into `target`.
    pub fn tolerated_delay(&self, source: usize, target: usize, d: f64) -> f64 {
        let kp = self.k_prime(source, target);
        if kp == 0.0 {
            return f64::INFINITY;
        }
        let p = &self.params[target];
        let pieces = (self.params.len() - target) as f64;
        let margin_scale = p.gamma * p.eps1 / (pieces * (1.0 + p.eps1));
        let offset = (margin_scale / kp).log2() / ((1.0 + self.eps_prime) * self.lambda.log2());
        offset + d / (1.0 + self.eps_prime)
    }
}

/// Certified ceiling on the deviation component `target` can see when all
/// of `source`'s bits younger than `d` steps decode wrong, growing as
/// `lambda^((1 + eps_prime) d)`.
pub fn propagation_bound(
    block: &DMatrix<f64>,
    params: &[EmbeddingParams],
    source: usize,
    target: usize,
    d: f64,
    eps_prime: f64,
) -> Result<f64, EmbeddingError> {
    let ledger = MarginLedger::new(block, params, eps_prime)?;
    Ok(ledger.bound(source, target, d))
}

/// Exact worst-case deviation of component `target` at time `t` when the
/// decoded prefix of `source` may differ from the truth at every position
/// younger than `d` steps: twice the coupled weight of those positions.
pub fn worst_case_deviation(
    block: &DMatrix<f64>,
    params: &[EmbeddingParams],
    source: usize,
    target: usize,
    t: u64,
    d: u64,
) -> Result<f64, EmbeddingError> {
    validate_block(block, params)?;
    let p = &params[source];
    let hi = EmbeddingParams::released_at(p.rate, t);
    let lo = if d >= t {
        0
    } else {
        EmbeddingParams::released_at(p.rate, t - d) + 1
    };
    let n = block.nrows();
    let mut powers = Vec::with_capacity(t as usize + 1);
    powers.push(DMatrix::<f64>::identity(n, n));
    for tau in 0..t as usize {
        let next = block * &powers[tau];
        powers.push(next);
    }
    let mut sum = 0.0;
    let mut k = lo;
    while k <= hi {
        let m = p.arrival_step(k as usize);
        let injected = p.bit_weight(k as usize, m);
        sum += 2.0 * injected * powers[(t - m) as usize][(target, source)].abs();
        k += 1;
    }
    Ok(sum)
}

/// Maps plain bits to the symmetric symbol alphabet, `0 -> -1, 1 -> +1`.
pub fn symbols_from_bits(bits: &[u8]) -> Result<Vec<i8>, EmbeddingError> {
    bits.iter()
        .enumerate()
        .map(|(position, &value)| match value {
            0 => Ok(-1),
            1 => Ok(1),
            _ => Err(EmbeddingError::BadBit { position, value }),
        })
        .collect()
}

/// Maps symbols back to plain bits, `-1 -> 0, +1 -> 1`.
pub fn bits_from_symbols(symbols: &[i8]) -> Result<Vec<u8>, EmbeddingError> {
    symbols
        .iter()
        .enumerate()
        .map(|(position, &value)| match value {
            -1 => Ok(0),
            1 => Ok(1),
            _ => Err(EmbeddingError::BadSymbol {
                stream: 0,
                position,
                value,
            }),
        })
        .collect()
}

/// A bit pipe riding on a running control loop: the plant's disturbances
/// carry the messages, the loop keeps the state small, and the decoder
/// reads the messages back out of the control record alone.
#[derive(Debug, Clone)]
pub struct EmbeddedCode {
    lp: DiagonalExplicitLoop,
    params: Vec<EmbeddingParams>,
    block: DMatrix<f64>,
    messages: Vec<Vec<i8>>,
    control_content: Vec<f64>,
    sup_seen: f64,
}

impl EmbeddedCode {
    /// Completed steps.
    pub fn time(&self) -> u64 {
        self.lp.time()
    }

    /// Step at which the loop lost its certificate, if ever.
    pub fn diverged(&self) -> Option<u64> {
        self.lp.diverged()
    }

    /// The loop carrying the code.
    pub fn plant(&self) -> &DiagonalExplicitLoop {
        &self.lp
    }

    /// Per-stream embedding constants, in plant mode order.
    pub fn params(&self) -> &[EmbeddingParams] {
        &self.params
    }

    /// Accumulated control response per mode, the decoder's only input.
    pub fn control_content(&self) -> &[f64] {
        &self.control_content
    }

    /// Largest plant sup norm seen so far.
    pub fn state_sup(&self) -> f64 {
        self.sup_seen
    }

    /// Advances the loop one step, injecting the message-keyed disturbance.
    pub fn step(&mut self, rng: &mut impl Rng) {
        let tau = self.lp.time();
        let w: Vec<f64> = self
            .params
            .iter()
            .zip(&self.messages)
            .map(|(p, m)| p.simulated_disturbance(m, tau))
            .collect();
        self.lp.step(&w, rng);
        for ((c, p), u) in self
            .control_content
            .iter_mut()
            .zip(&self.params)
            .zip(self.lp.controls())
        {
            *c = p.lambda * *c + u;
        }
        self.sup_seen = self.sup_seen.max(self.lp.sup_norm());
    }

    /// Decodes every stream's released prefix from the control record.
    pub fn decode(&self) -> Result<Vec<Vec<i8>>, EmbeddingError> {
        successive_decode(
            &self.params,
            &self.block,
            &DVector::from_column_slice(&self.control_content),
            self.lp.time(),
        )
    }

    /// Number of oldest positions on stream `i` whose half gap at the
    /// current time clears every plant state seen so far; these positions
    /// decode correctly no matter how the rest of the run went.
    pub fn assured_prefix(&self, i: usize) -> usize {
        let t = self.lp.time();
        if t == 0 {
            return 0;
        }
        let p = &self.params[i];
        (0..p.bits_released(t))
            .take_while(|&k| p.half_gap(k, t) > self.sup_seen)
            .count()
    }
}

/// Turns a stabilizing loop into an anytime bit pipe. The loop must come
/// out diagonal with explicit feedback; each plant mode then carries one
/// message at a rate strictly under its growth exponent, injected through
/// the mode's disturbance slot. The report is the loop's own reliability
/// accounting, returned unchanged.
pub fn code_from_controller(
    model: &StateSpaceModel,
    transport: Transport,
    streams: &[StreamSpec],
    config: &LoopConfig,
    eta: f64,
    message_rates: &[f64],
    messages: &[Vec<i8>],
) -> Result<(EmbeddedCode, DemandReport), EmbeddingError> {
    let (lp, report) = build_closed_loop(model, transport, streams, config, eta)?;
    let ClosedLoop::Diagonal(lp) = lp else {
        return Err(EmbeddingError::UnsupportedLoop(
            "embedded codes need a diagonal loop with explicit feedback".into(),
        ));
    };
    let growths = lp.mode_growths();
    let n = growths.len();
    if message_rates.len() != n || messages.len() != n {
        return Err(EmbeddingError::Shape(format!(
            "{n} plant modes need {n} message rates and {n} messages, got {} and {}",
            message_rates.len(),
            messages.len()
        )));
    }
    let params = growths
        .iter()
        .zip(message_rates)
        .map(|(&g, &r)| EmbeddingParams::new(g, r, model.omega()))
        .collect::<Result<Vec<_>, _>>()?;
    for (i, m) in messages.iter().enumerate() {
        validate_symbols(m, i)?;
    }
    let block = DMatrix::from_diagonal(&DVector::from_column_slice(&growths));
    Ok((
        EmbeddedCode {
            lp,
            params,
            block,
            messages: messages.to_vec(),
            control_content: vec![0.0; n],
            sup_seen: 0.0,
        },
        report,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::closed_loop::FeedbackMode;
    use crate::priority_code::Discipline;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn scalar_params(lambda: f64, rate: f64, omega: f64) -> EmbeddingParams {
        EmbeddingParams::new(lambda, rate, omega).unwrap()
    }

    fn random_symbols(rng: &mut ChaCha12Rng, len: usize) -> Vec<i8> {
        (0..len).map(|_| if rng.gen::<bool>() { 1 } else { -1 }).collect()
    }

    fn first_mismatch(a: &[i8], b: &[i8]) -> Option<usize> {
        a.iter().zip(b).position(|(x, y)| x != y)
    }

    #[test]
    fn params_pin_the_interval_constants() {
        let p = scalar_params(2.0, 0.5, 1.0);
        assert_relative_eq!(p.gamma(), 1.0 / 16.0, max_relative = 1e-12);
        assert_relative_eq!(p.eps1(), 2.0, max_relative = 1e-12);

        assert!(matches!(
            EmbeddingParams::new(2.0, 1.0, 1.0),
            Err(EmbeddingError::RateOutsideRange { .. })
        ));
        assert!(matches!(
            EmbeddingParams::new(2.0, 1.4, 1.0),
            Err(EmbeddingError::RateOutsideRange { .. })
        ));
        assert!(matches!(
            EmbeddingParams::new(1.0, 0.5, 1.0),
            Err(EmbeddingError::NonExpanding { .. })
        ));
        assert!(matches!(
            EmbeddingParams::new(2.0, 0.5, 0.0),
            Err(EmbeddingError::InvalidBound { .. })
        ));

        assert_eq!(p.arrival_step(0), 1);
        assert_eq!(p.arrival_step(1), 2);
        assert_eq!(p.arrival_step(2), 4);
        assert_eq!(p.arrival_step(3), 6);
        assert_eq!(p.bits_released(4), 3);

        for rate in [0.3, 0.5, 0.7, 0.93, 1.6] {
            let q = EmbeddingParams::new(4.0, rate, 1.0).unwrap();
            for k in 0..60usize {
                let m = q.arrival_step(k);
                assert!(
                    (m as f64) <= k as f64 / rate + 1.0 / rate + 1.0,
                    "bit {k} at rate {rate} waits until {m}"
                );
                assert!(EmbeddingParams::released_at(rate, m) >= k as u64);
                if m > 1 {
                    assert!(EmbeddingParams::released_at(rate, m - 1) < k as u64);
                }
            }
        }
    }

    #[test]
    fn injections_stay_inside_the_disturbance_box() {
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        for (lambda, rate) in [(2.0, 0.5), (2.0, 0.93), (1.2, 0.2), (3.7, 1.7)] {
            let p = scalar_params(lambda, rate, 1.0);
            let symbols = random_symbols(&mut rng, p.bits_released(400));
            let reserve = 1.0 / (1.0 + p.eps1());
            for tau in 0..400 {
                let w = p.simulated_disturbance(&symbols, tau);
                assert!(
                    w.abs() <= 0.5 * reserve + 1e-12,
                    "step {tau} injects {w} at lambda {lambda} rate {rate}"
                );
            }
        }
    }

    #[test]
    fn embed_matches_the_scalar_example() {
        let p = scalar_params(2.0, 0.5, 1.0);
        let block = DMatrix::from_element(1, 1, 2.0);
        let x = embed(&[p], &block, &[vec![1, 1]], 4).unwrap();
        assert_relative_eq!(x[0], 20.0 * p.gamma(), max_relative = 1e-12);
        assert_relative_eq!(x[0], 1.25, max_relative = 1e-12);

        let x0 = embed(&[p], &block, &[vec![1, 1]], 0).unwrap();
        assert_eq!(x0[0], 0.0);

        let t = 6u64;
        let count = p.bits_released(t);
        let plus = embed(&[p], &block, &[vec![1; count]], t).unwrap();
        let minus = embed(&[p], &block, &[vec![-1; count]], t).unwrap();
        assert_relative_eq!(plus[0], -minus[0], max_relative = 1e-12);
        let direct: f64 = (0..count).map(|k| p.bit_weight(k, t)).sum();
        assert_relative_eq!(plus[0], direct, max_relative = 1e-12);
    }

    #[test]
    fn round_trip_recovers_every_bit() {
        let mut rng = ChaCha12Rng::seed_from_u64(4242);
        let grid = [(1.1f64, 200u64, 0.35f64), (1.6, 47, 0.8), (2.0, 32, 0.8), (3.7, 17, 0.8)];
        for &(lambda, t, coupling) in &grid {
            for frac in [0.35, 0.93] {
                let rate = frac * lambda.log2();
                for n in 1..=3usize {
                    for _ in 0..3 {
                        let params = vec![scalar_params(lambda, rate, 1.0); n];
                        let mut block = DMatrix::from_diagonal(&DVector::from_element(n, lambda));
                        for i in 0..n {
                            for j in (i + 1)..n {
                                block[(i, j)] = rng.gen_range(-coupling..coupling);
                            }
                        }
                        let symbols: Vec<Vec<i8>> = (0..n)
                            .map(|_| random_symbols(&mut rng, params[0].bits_released(t)))
                            .collect();
                        let x = embed(&params, &block, &symbols, t).unwrap();
                        let decoded = successive_decode(&params, &block, &(-x), t).unwrap();
                        for i in 0..n {
                            assert_eq!(
                                decoded[i], symbols[i],
                                "stream {i} of {n} at lambda {lambda} rate {rate} horizon {t}"
                            );
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn gap_clears_the_certified_floor() {
        let p = scalar_params(2.0, 0.7, 1.0);
        let t = 20u64;
        let count = p.bits_released(t);
        assert_eq!(count, 15);
        let weights: Vec<f64> = (0..count).map(|k| p.bit_weight(k, t)).collect();

        fn scan(weights: &[f64], k: usize, anchor: usize, acc: f64, best: &mut f64) {
            if k == weights.len() {
                *best = best.min(acc.abs());
                return;
            }
            if k == anchor {
                scan(weights, k + 1, anchor, acc + 2.0 * weights[k], best);
            } else {
                scan(weights, k + 1, anchor, acc - 2.0 * weights[k], best);
                scan(weights, k + 1, anchor, acc, best);
                scan(weights, k + 1, anchor, acc + 2.0 * weights[k], best);
            }
        }

        for anchor in [0usize, 4, 9, 14] {
            let mut best = f64::INFINITY;
            scan(&weights, 0, anchor, 0.0, &mut best);
            let floor = 2.0 * p.half_gap(anchor, t);
            assert!(
                best > floor,
                "anchor {anchor}: smallest split {best} under the floor {floor}"
            );
            assert!(best <= 2.0 * weights[anchor] + 1e-9);
        }
    }

    #[test]
    fn extraction_errors_respect_the_margins() {
        let p = scalar_params(2.0, 0.7, 1.0);
        let t = 20u64;
        let count = p.bits_released(t);
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        for _ in 0..8 {
            let symbols = random_symbols(&mut rng, count);
            let clean: f64 = symbols
                .iter()
                .enumerate()
                .map(|(k, &s)| f64::from(s) * p.bit_weight(k, t))
                .sum();
            let exact = extract_bits(&p, clean, t);
            assert_eq!(exact, symbols);

            for k in [0usize, 3, 7, 12] {
                for sign in [1.0, -1.0] {
                    let under = extract_bits(&p, clean + sign * 0.999 * p.half_gap(k, t), t);
                    assert!(
                        first_mismatch(&under, &symbols).is_none_or(|e| e > k),
                        "deviation under the half gap at {k} broke position {:?}",
                        first_mismatch(&under, &symbols)
                    );

                    let over = extract_bits(&p, clean + sign * 2.5 * p.half_gap(k, t), t);
                    assert!(
                        first_mismatch(&over, &symbols).is_none_or(|e| e >= k),
                        "deviation above the gap at {k} broke an earlier position {:?}",
                        first_mismatch(&over, &symbols)
                    );
                }
            }
        }
    }

    #[test]
    fn margins_split_the_half_gap() {
        let p = scalar_params(2.0, 0.7, 1.0);
        for d in [0.0, 3.0, 11.5] {
            let full = p.gamma() * p.eps1() / (1.0 + p.eps1()) * 2f64.powf(d);
            assert_relative_eq!(margin_allocation(3, 3, d, &p), full, max_relative = 1e-12);
            assert_relative_eq!(
                margin_allocation(2, 1, d, &p),
                margin_allocation(2, 2, d, &p) / 2.0,
                max_relative = 1e-12
            );
            assert_relative_eq!(margin_allocation(1, 1, d, &p), full, max_relative = 1e-12);
        }

        let params = vec![p; 2];
        let block = DMatrix::from_row_slice(2, 2, &[2.0, 1.3, 0.0, 2.0]);
        let ledger = MarginLedger::new(&block, &params, 0.3).unwrap();
        for d in [5.0, 10.0, 20.0] {
            let tolerated = ledger.tolerated_delay(1, 0, d);
            assert_relative_eq!(
                ledger.bound(1, 0, tolerated),
                ledger.margin(1, d),
                max_relative = 1e-9
            );
        }

        let diagonal = DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 2.0]);
        let flat = MarginLedger::new(&diagonal, &params, 0.3).unwrap();
        assert_eq!(flat.k_prime(1, 0), 0.0);
        assert_eq!(flat.bound(1, 0, 12.0), 0.0);
        assert!(flat.tolerated_delay(1, 0, 12.0).is_infinite());
        assert_eq!(
            worst_case_deviation(&diagonal, &params, 1, 0, 30, 10).unwrap(),
            0.0
        );

        for d in [10.0, 20.0] {
            let tight = propagation_bound(&block, &params, 1, 0, d, 0.3).unwrap();
            let loose = propagation_bound(&block, &params, 1, 0, d, 0.6).unwrap();
            assert!(
                loose > tight,
                "doubled slack should loosen the bound at d = {d}: {loose} vs {tight}"
            );
        }

        assert!(matches!(
            MarginLedger::new(&block, &params, 0.0),
            Err(EmbeddingError::InvalidSlack { .. })
        ));
    }

    #[test]
    fn propagation_bound_dominates_worst_case() {
        let p = scalar_params(2.0, 0.7, 1.0);
        let params = vec![p; 2];
        let block = DMatrix::from_row_slice(2, 2, &[2.0, 1.3, 0.0, 2.0]);
        for t in [25u64, 40] {
            for d in 1..=20u64 {
                let worst = worst_case_deviation(&block, &params, 1, 0, t, d).unwrap();
                let bound = propagation_bound(&block, &params, 1, 0, d as f64, 0.3).unwrap();
                assert!(
                    worst < bound,
                    "t {t} d {d}: worst case {worst} above the certified {bound}"
                );
            }
        }

        let lam = 1.7f64;
        let q = scalar_params(lam, 0.6 * lam.log2(), 2.0);
        let params3 = vec![q; 3];
        let block3 = DMatrix::from_row_slice(
            3,
            3,
            &[lam, 0.9, 0.5, 0.0, lam, -1.1, 0.0, 0.0, lam],
        );
        for (source, target) in [(2usize, 0usize), (2, 1), (1, 0)] {
            for d in 1..=20u64 {
                let worst =
                    worst_case_deviation(&block3, &params3, source, target, 25, d).unwrap();
                let bound =
                    propagation_bound(&block3, &params3, source, target, d as f64, 0.25).unwrap();
                assert!(
                    worst < bound,
                    "{source}->{target} d {d}: worst {worst} above {bound}"
                );
            }
        }
    }

    #[test]
    fn worst_case_deviation_is_realized_by_a_symbol_pair() {
        let p = scalar_params(2.0, 0.7, 1.0);
        let params = vec![p; 2];
        let block = DMatrix::from_row_slice(2, 2, &[2.0, 1.3, 0.0, 2.0]);
        let t = 25u64;
        let count = p.bits_released(t);
        let mut powers = vec![DMatrix::<f64>::identity(2, 2)];
        for tau in 0..t as usize {
            let next = &block * &powers[tau];
            powers.push(next);
        }
        for d in [3u64, 8, 15] {
            let lo = EmbeddingParams::released_at(p.rate(), t - d) as usize + 1;
            let mut a = vec![1i8; count];
            let mut b = vec![1i8; count];
            for k in lo..count {
                let coefficient = powers[(t - p.arrival_step(k)) as usize][(0, 1)];
                if coefficient >= 0.0 {
                    a[k] = -1;
                    b[k] = 1;
                } else {
                    a[k] = 1;
                    b[k] = -1;
                }
            }
            let xa = stream_contribution(&p, &block, &a, 1, t);
            let xb = stream_contribution(&p, &block, &b, 1, t);
            let realized = (xa[0] - xb[0]).abs();
            let worst = worst_case_deviation(&block, &params, 1, 0, t, d).unwrap();
            assert_relative_eq!(realized, worst, max_relative = 1e-9);
        }
    }

    #[test]
    fn decoder_state_walks_streams_from_the_top() {
        let p = scalar_params(2.0, 0.6, 1.0);
        let params = vec![p; 2];
        let block = DMatrix::from_row_slice(2, 2, &[2.0, 0.7, 0.0, 2.0]);
        let t = 18u64;
        let symbols: Vec<Vec<i8>> = {
            let mut rng = ChaCha12Rng::seed_from_u64(99);
            (0..2)
                .map(|_| random_symbols(&mut rng, p.bits_released(t)))
                .collect()
        };
        let x = embed(&params, &block, &symbols, t).unwrap();
        let mut state = SuccessiveDecoderState::new(&params, &block, &(-x), t).unwrap();
        assert_eq!(state.stream_index(), Some(1));
        assert_eq!(state.decode_next(), symbols[1].as_slice());
        assert_eq!(state.stream_index(), Some(0));
        assert_relative_eq!(
            state.residual()[0],
            stream_contribution(&p, &block, &symbols[0], 0, t)[0],
            max_relative = 1e-9
        );
        assert_eq!(state.decode_next(), symbols[0].as_slice());
        assert_eq!(state.stream_index(), None);
        assert_eq!(state.decode_next(), &[] as &[i8]);

        assert!(matches!(
            SuccessiveDecoderState::new(&params, &block, &DVector::zeros(3), t),
            Err(EmbeddingError::Shape(_))
        ));
        assert!(matches!(
            SuccessiveDecoderState::new(&params, &block, &DVector::zeros(2), 0),
            Err(EmbeddingError::Shape(_))
        ));
    }

    #[test]
    fn symbol_maps_are_inverse() {
        assert_eq!(symbols_from_bits(&[0, 1, 1, 0]).unwrap(), vec![-1, 1, 1, -1]);
        assert_eq!(bits_from_symbols(&[-1, 1, 1, -1]).unwrap(), vec![0, 1, 1, 0]);
        assert!(matches!(
            symbols_from_bits(&[0, 2]),
            Err(EmbeddingError::BadBit { position: 1, .. })
        ));
        assert!(matches!(
            bits_from_symbols(&[-1, 0]),
            Err(EmbeddingError::BadSymbol { position: 1, .. })
        ));
    }

    fn scalar_model(lambda: f64, omega: f64) -> StateSpaceModel {
        StateSpaceModel::new(
            DMatrix::from_element(1, 1, lambda),
            DMatrix::identity(1, 1),
            DMatrix::identity(1, 1),
            DMatrix::identity(1, 1),
            omega,
            0.0,
            0.0,
        )
        .unwrap()
    }

    fn explicit_config() -> LoopConfig {
        LoopConfig {
            feedback: FeedbackMode::Explicit,
            superstep: 1,
            epsilon: 0.04,
            dance_factor: 3.0,
            discipline: Discipline::default(),
        }
    }

    #[test]
    fn controller_code_round_trip_over_a_pipe() {
        let model = scalar_model(2.0, 1.0);
        let streams = [StreamSpec {
            id: 0,
            rate: 1.3,
            priority: 0,
        }];
        let horizon = 40u64;
        let p = scalar_params(2.0, 0.9, 1.0);
        let mut rng = ChaCha12Rng::seed_from_u64(21);
        let message = random_symbols(&mut rng, p.bits_released(horizon));
        let (mut code, _report) = code_from_controller(
            &model,
            Transport::Pipe,
            &streams,
            &explicit_config(),
            3.0,
            &[0.9],
            &[message.clone()],
        )
        .unwrap();
        for _ in 0..horizon {
            code.step(&mut rng);
        }
        assert_eq!(code.diverged(), None);
        let decoded = code.decode().unwrap();
        let assured = code.assured_prefix(0);
        assert!(
            assured >= 20,
            "only {assured} positions assured with sup {}",
            code.state_sup()
        );
        assert_eq!(decoded[0][..assured], message[..assured]);
    }

    #[test]
    fn controller_code_survives_the_erasure_channel() {
        let lambda = 2f64.powf(0.34);
        let model = scalar_model(lambda, 1.0);
        let streams = [StreamSpec {
            id: 0,
            rate: 0.341,
            priority: 0,
        }];
        let horizon = 120u64;
        let p = scalar_params(lambda, 0.306, 1.0);
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let message = random_symbols(&mut rng, p.bits_released(horizon));
        let (mut code, _report) = code_from_controller(
            &model,
            Transport::Bec { beta: 0.4 },
            &streams,
            &explicit_config(),
            3.0,
            &[0.306],
            &[message.clone()],
        )
        .unwrap();
        for _ in 0..horizon {
            code.step(&mut rng);
        }
        assert_eq!(code.diverged(), None);
        let decoded = code.decode().unwrap();
        let assured = code.assured_prefix(0);
        assert!(
            assured >= 8,
            "only {assured} positions assured with sup {}",
            code.state_sup()
        );
        assert_eq!(decoded[0][..assured], message[..assured]);
    }

    #[test]
    fn controller_code_rejects_bad_shapes_and_rates() {
        let model = scalar_model(2.0, 1.0);
        let streams = [StreamSpec {
            id: 0,
            rate: 1.3,
            priority: 0,
        }];
        let err = code_from_controller(
            &model,
            Transport::Pipe,
            &streams,
            &explicit_config(),
            3.0,
            &[1.2],
            &[vec![1, -1]],
        )
        .unwrap_err();
        assert!(matches!(err, EmbeddingError::RateOutsideRange { .. }), "{err}");

        let err = code_from_controller(
            &model,
            Transport::Pipe,
            &streams,
            &explicit_config(),
            3.0,
            &[0.9, 0.5],
            &[vec![1], vec![1]],
        )
        .unwrap_err();
        assert!(matches!(err, EmbeddingError::Shape(_)), "{err}");

        let err = code_from_controller(
            &model,
            Transport::Pipe,
            &streams,
            &explicit_config(),
            3.0,
            &[0.9],
            &[vec![1, 2]],
        )
        .unwrap_err();
        assert!(matches!(err, EmbeddingError::BadSymbol { .. }), "{err}");

        let mut dance = explicit_config();
        dance.feedback = FeedbackMode::Dance;
        dance.superstep = 1;
        let err = code_from_controller(
            &model,
            Transport::Bec { beta: 0.4 },
            &streams,
            &dance,
            3.0,
            &[0.9],
            &[vec![1]],
        )
        .unwrap_err();
        assert!(
            matches!(
                err,
                EmbeddingError::UnsupportedLoop(_) | EmbeddingError::Loop(_)
            ),
            "{err}"
        );
    }
}
