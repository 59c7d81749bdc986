//! Channel models with feedback semantics: the binary erasure channel, a
//! noiseless rate-R bit pipe, and the delayed view of past channel events
//! available to a transmitter.
//!
//! Channels are immutable; all randomness comes from caller-owned
//! generators so that a fixed seed replays the identical event sequence.
//! Each simulation trial draws from dedicated ChaCha streams (channel,
//! disturbance, noise, message bits), which keeps erasure patterns
//! byte-identical when comparing schemes on the same seed.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Number of ChaCha streams reserved per trial.
pub const STREAMS_PER_TRIAL: u64 = 16;
/// Stream tag for channel erasures.
pub const TAG_CHANNEL: u64 = 0;
/// Stream tag for plant disturbances.
pub const TAG_DISTURBANCE: u64 = 1;
/// Stream tag for observation noise.
pub const TAG_NOISE: u64 = 2;
/// Base tag for message-bit sources; source `i` uses `TAG_BITS + i`.
pub const TAG_BITS: u64 = 4;

/// Generator for one (trial, purpose) pair. Trials and purposes map to
/// disjoint ChaCha streams of a common seed, so adding a consumer never
/// perturbs the draws of another.
pub fn trial_rng(seed: u64, trial: u64, tag: u64) -> ChaCha12Rng {
    assert!(tag < STREAMS_PER_TRIAL, "stream tag {tag} out of range");
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream(trial * STREAMS_PER_TRIAL + tag);
    rng
}

/// Errors from channel construction.
#[derive(Debug, Error, PartialEq)]
pub enum ChannelError {
    /// Erasure probability outside `[0, 1)`.
    #[error("erasure probability must lie in [0, 1), got {0}")]
    InvalidBeta(f64),
    /// Bit-pipe rate must be positive.
    #[error("bit-pipe rate must be positive, got {0}")]
    InvalidRate(f64),
    /// Feedback delay must be at least one step.
    #[error("feedback delay must be at least 1, got {0}")]
    InvalidFeedbackDelay(u64),
}

/// What the channel delivered for one input bit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChannelOutput {
    /// The receiver saw an erasure symbol.
    Erased,
    /// The receiver saw the bit unchanged; erasure channels never flip.
    Received(bool),
}

/// One channel use: time, input bit, and what came out.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChannelEvent {
    /// Time step of the transmission.
    pub t: u64,
    /// Transmitted bit.
    pub input: bool,
    /// Outcome at the receiver.
    pub output: ChannelOutput,
}

/// Binary erasure channel: each input bit is erased independently with
/// probability `beta`, otherwise delivered intact.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ErasureChannel {
    beta: f64,
}

impl ErasureChannel {
    /// Builds a channel with erasure probability `beta` in `[0, 1)`.
    pub fn new(beta: f64) -> Result<Self, ChannelError> {
        if !(0.0..1.0).contains(&beta) || !beta.is_finite() {
            return Err(ChannelError::InvalidBeta(beta));
        }
        Ok(Self { beta })
    }

    /// Erasure probability.
    pub fn beta(&self) -> f64 {
        self.beta
    }

    /// Sends one bit at time `t`, drawing the erasure decision from `rng`.
    pub fn transmit(&self, t: u64, bit: bool, rng: &mut impl Rng) -> ChannelEvent {
        let output = if rng.gen::<f64>() < self.beta {
            ChannelOutput::Erased
        } else {
            ChannelOutput::Received(bit)
        };
        ChannelEvent {
            t,
            input: bit,
            output,
        }
    }
}

/// Delay on the feedback path: at time `t` the transmitter knows channel
/// outcomes through time `t - theta`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeedbackLink {
    theta: u64,
}

impl FeedbackLink {
    /// Builds a feedback link with delay `theta >= 1`.
    pub fn new(theta: u64) -> Result<Self, ChannelError> {
        if theta == 0 {
            return Err(ChannelError::InvalidFeedbackDelay(theta));
        }
        Ok(Self { theta })
    }

    /// Feedback delay in steps.
    pub fn theta(&self) -> u64 {
        self.theta
    }
}

/// The prefix of `history` visible to the transmitter at time `t`: exactly
/// the events with `event.t <= t - theta`. `history` must be sorted by
/// time, which every recording loop here produces naturally.
pub fn feedback_view(history: &[ChannelEvent], t: u64, link: FeedbackLink) -> &[ChannelEvent] {
    let cutoff = match t.checked_sub(link.theta) {
        Some(c) => c,
        None => return &history[..0],
    };
    let end = history.partition_point(|e| e.t <= cutoff);
    &history[..end]
}

/// Noiseless bit pipe delivering `floor(R t)` bits by time `t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BitPipe {
    rate: f64,
}

impl BitPipe {
    /// Builds a pipe with positive rate `R` in bits per step.
    pub fn new(rate: f64) -> Result<Self, ChannelError> {
        if !(rate > 0.0) || !rate.is_finite() {
            return Err(ChannelError::InvalidRate(rate));
        }
        Ok(Self { rate })
    }

    /// Rate in bits per step.
    pub fn rate(&self) -> f64 {
        self.rate
    }

    /// Total bits delivered by time `t`: `floor(R t)`.
    pub fn cumulative(&self, t: u64) -> u64 {
        (self.rate * t as f64).floor() as u64
    }
}

/// Bits arriving exactly at step `t >= 1`: `floor(R t) - floor(R (t-1))`.
/// Summed over `t = 1..T` this telescopes to `floor(R T)`.
pub fn pipe_budget(pipe: BitPipe, t: u64) -> u64 {
    assert!(t >= 1, "pipe_budget is defined for t >= 1");
    pipe.cumulative(t) - pipe.cumulative(t - 1)
}

/// Channel section of a scenario file.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase", deny_unknown_fields)]
pub enum ChannelConfig {
    /// `{"type": "bec", "beta": 0.4, "feedback_delay": 1}`
    Bec {
        /// Erasure probability.
        beta: f64,
        /// Feedback delay in steps.
        feedback_delay: u64,
    },
}

impl ChannelConfig {
    /// Instantiates the channel and its feedback link.
    pub fn build(&self) -> Result<(ErasureChannel, FeedbackLink), ChannelError> {
        match *self {
            ChannelConfig::Bec {
                beta,
                feedback_delay,
            } => Ok((ErasureChannel::new(beta)?, FeedbackLink::new(feedback_delay)?)),
        }
    }
}
