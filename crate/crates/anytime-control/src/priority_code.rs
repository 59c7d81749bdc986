//! Retransmission coding over the erasure channel with strict priorities:
//! per-stream FIFO buffers, oldest-bit-first service from the highest
//! nonempty priority, a decoder-side mirror of the buffer state, and the
//! delay/queue statistics that certify anytime reliability.
//!
//! Timing convention for one step `t >= 1`: bits whose arrival time `j/R`
//! satisfies `j <= floor(R t)` enter their buffer, then one channel use
//! happens, and a received bit reaches the decoder at time `t + 1`. The
//! recorded delay of bit `j` is `(t + 1) - j/R`. With feedback delay 1 the
//! encoder learns the outcome before the next selection, so a received bit
//! is popped immediately after its transmission.
//!
//! Erasures are visible at the receiver, and arrivals follow a schedule
//! both sides know, so the decoder replays the encoder's buffer bookkeeping
//! exactly and attributes every channel use to a stream (or to a dummy bit
//! sent when all buffers are empty) without any in-band labels.

use std::collections::{BTreeMap, VecDeque};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::channels::{BitPipe, ChannelEvent, ChannelOutput, ErasureChannel};

/// Errors from code construction and statistics.
#[derive(Debug, Error, PartialEq)]
pub enum CodeError {
    /// No streams supplied.
    #[error("at least one stream is required")]
    NoStreams,
    /// A stream rate is not positive.
    #[error("stream {id} has nonpositive rate {rate}")]
    InvalidRate { id: usize, rate: f64 },
    /// Two streams share a priority level.
    #[error("duplicate priority {0}")]
    DuplicatePriority(u32),
    /// Two streams share an id.
    #[error("duplicate stream id {0}")]
    DuplicateId(usize),
    /// Not enough positive-mass tail points to fit an exponent.
    #[error(
        "only {available} tail points with positive mass in [{d_min}, {d_max}], \
         need at least 5; increase trials or lower d_max"
    )]
    InsufficientTailMass {
        available: usize,
        d_min: u64,
        d_max: u64,
    },
    /// Unknown stream id in a query.
    #[error("no stream with id {0}")]
    UnknownStream(usize),
}

/// One message source: an id for reporting, a bit rate, and a priority
/// level (lower number served first).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StreamSpec {
    /// Stable identifier used in records and queries.
    pub id: usize,
    /// Arrival rate in bits per step; bit `j` arrives at time `j / rate`.
    pub rate: f64,
    /// Service priority; lower numbers are served first.
    pub priority: u32,
}

fn validate_streams(streams: &[StreamSpec]) -> Result<Vec<StreamSpec>, CodeError> {
    if streams.is_empty() {
        return Err(CodeError::NoStreams);
    }
    for s in streams {
        if !(s.rate > 0.0) || !s.rate.is_finite() {
            return Err(CodeError::InvalidRate {
                id: s.id,
                rate: s.rate,
            });
        }
    }
    let mut sorted = streams.to_vec();
    sorted.sort_by_key(|s| s.priority);
    for w in sorted.windows(2) {
        if w[0].priority == w[1].priority {
            return Err(CodeError::DuplicatePriority(w[0].priority));
        }
    }
    let mut ids: Vec<usize> = sorted.iter().map(|s| s.id).collect();
    ids.sort_unstable();
    for w in ids.windows(2) {
        if w[0] == w[1] {
            return Err(CodeError::DuplicateId(w[0]));
        }
    }
    Ok(sorted)
}

/// A bit waiting in an encoder buffer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QueuedBit {
    /// One-based arrival index within its stream.
    pub index: u64,
    /// Bit value.
    pub value: bool,
}

/// How the encoder picks the next bit to send.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Discipline {
    /// Oldest bit of the highest-priority nonempty buffer.
    #[default]
    StrictPriority,
    /// Oldest bit across all buffers by arrival time, ignoring priority;
    /// this is undifferentiated service of the merged stream.
    GlobalFifo,
}

/// What the strict-priority rule picked for one channel use.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Selection {
    /// Head of the given stream (position in priority order) is sent.
    Stream(usize, QueuedBit),
    /// All buffers empty; a dummy bit is sent.
    Dummy,
}

/// Picks the buffer to serve under a discipline: first nonempty in
/// priority order, or the globally oldest arrival. Returns the buffer
/// position.
fn choose_buffer(
    discipline: Discipline,
    streams: &[StreamSpec],
    heads: impl Iterator<Item = Option<u64>>,
) -> Option<usize> {
    match discipline {
        Discipline::StrictPriority => heads
            .enumerate()
            .find_map(|(s, h)| h.map(|_| s)),
        Discipline::GlobalFifo => heads
            .enumerate()
            .filter_map(|(s, h)| h.map(|index| (s, index as f64 / streams[s].rate)))
            .min_by(|x, y| x.1.total_cmp(&y.1).then(x.0.cmp(&y.0)))
            .map(|(s, _)| s),
    }
}

/// Encoder state: prioritized FIFO buffers and the arrival bookkeeping.
#[derive(Debug, Clone)]
pub struct PriorityEncoder {
    streams: Vec<StreamSpec>,
    pipes: Vec<BitPipe>,
    queues: Vec<VecDeque<QueuedBit>>,
    discipline: Discipline,
    in_flight: Option<usize>,
    time: u64,
}

impl PriorityEncoder {
    /// Builds an encoder; streams are served in increasing priority number.
    pub fn new(streams: &[StreamSpec]) -> Result<Self, CodeError> {
        Self::with_discipline(streams, Discipline::StrictPriority)
    }

    /// Builds an encoder with an explicit service discipline.
    pub fn with_discipline(
        streams: &[StreamSpec],
        discipline: Discipline,
    ) -> Result<Self, CodeError> {
        let streams = validate_streams(streams)?;
        let pipes = streams
            .iter()
            .map(|s| BitPipe::new(s.rate).expect("rate validated"))
            .collect();
        let queues = streams.iter().map(|_| VecDeque::new()).collect();
        Ok(Self {
            streams,
            pipes,
            queues,
            discipline,
            in_flight: None,
            time: 0,
        })
    }

    /// Streams in service (priority) order.
    pub fn streams(&self) -> &[StreamSpec] {
        &self.streams
    }

    /// Current step.
    pub fn time(&self) -> u64 {
        self.time
    }

    /// Buffer lengths in service order.
    pub fn queue_lengths(&self) -> Vec<usize> {
        self.queues.iter().map(|q| q.len()).collect()
    }

    /// Total bits waiting across all buffers.
    pub fn pending_bits(&self) -> usize {
        self.queues.iter().map(|q| q.len()).sum()
    }

    /// Admits the step-`t` arrivals. `value(stream_position, bit_index)`
    /// supplies bit values; use [`uniform_bits`] for iid uniform sources.
    /// Must be called with `t = time + 1`.
    pub fn enqueue_arrivals<F: FnMut(usize, u64) -> bool>(&mut self, t: u64, mut value: F) {
        assert_eq!(t, self.time + 1, "enqueue_arrivals must advance time by 1");
        for (s, pipe) in self.pipes.iter().enumerate() {
            let upto = pipe.cumulative(t);
            let from = pipe.cumulative(t - 1);
            for index in from + 1..=upto {
                let v = value(s, index);
                self.queues[s].push_back(QueuedBit { index, value: v });
            }
        }
        self.time = t;
    }

    /// The service rule: under strict priority, the oldest bit of the
    /// highest-priority nonempty buffer; under global FIFO, the oldest
    /// arrival overall. Dummy when everything is empty.
    pub fn select(&self) -> Selection {
        let heads = self.queues.iter().map(|q| q.front().map(|b| b.index));
        match choose_buffer(self.discipline, &self.streams, heads) {
            Some(s) => Selection::Stream(s, *self.queues[s].front().expect("nonempty")),
            None => Selection::Dummy,
        }
    }

    /// Commits to the current selection for this step's channel use and
    /// returns it. The outcome must be reported through
    /// [`apply_feedback`](Self::apply_feedback) before the next selection.
    pub fn select_for_transmission(&mut self) -> Selection {
        let selection = self.select();
        self.in_flight = match selection {
            Selection::Stream(s, _) => Some(s),
            Selection::Dummy => None,
        };
        selection
    }

    /// Reports the outcome of the last committed transmission: on a
    /// reception the sent bit leaves its buffer. Safe to call after new
    /// arrivals, since the sent bit is still its buffer's head.
    pub fn apply_feedback(&mut self, received: bool) {
        if let Some(s) = self.in_flight.take() {
            if received {
                self.queues[s].pop_front();
            }
        }
    }

    /// One channel use at the current step: transmits the selected bit
    /// (dummy bits carry the value `false`), and pops the buffer head on a
    /// successful reception, which the unit-delay feedback reveals before
    /// the next selection.
    pub fn select_and_transmit(
        &mut self,
        channel: &ErasureChannel,
        rng: &mut impl Rng,
    ) -> ChannelEvent {
        let selection = self.select_for_transmission();
        let bit = match selection {
            Selection::Stream(_, b) => b.value,
            Selection::Dummy => false,
        };
        let event = channel.transmit(self.time, bit, rng);
        self.apply_feedback(matches!(event.output, ChannelOutput::Received(_)));
        event
    }
}

/// Delivery bookkeeping for one bit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DelayRecord {
    /// Stream id (not position).
    pub stream: usize,
    /// One-based arrival index within the stream.
    pub bit_index: u64,
    /// Arrival time `bit_index / rate`.
    pub arrival: f64,
    /// Time the decoder holds the bit: transmission step plus one.
    pub delivery: u64,
    /// `delivery - arrival`, always positive.
    pub delay: f64,
}

/// Decoder-side replica of the encoder buffers, fed only by channel events
/// and the shared arrival schedule. Tracks delivered prefixes, delay
/// records (optional, for bounded-memory runs), and delay histograms.
#[derive(Debug, Clone)]
pub struct DecoderMirror {
    streams: Vec<StreamSpec>,
    pipes: Vec<BitPipe>,
    queues: Vec<VecDeque<u64>>,
    delivered: Vec<Vec<(bool, u64)>>,
    delivered_count: Vec<u64>,
    delay_bins: Vec<Vec<u64>>,
    records: Option<Vec<DelayRecord>>,
    keep_values: bool,
    discipline: Discipline,
    time: u64,
}

impl DecoderMirror {
    /// Full-detail mirror: keeps per-bit values, delivery times, and delay
    /// records.
    pub fn new(streams: &[StreamSpec]) -> Result<Self, CodeError> {
        Self::build(streams, true, Discipline::StrictPriority)
    }

    /// Bounded-memory mirror for long runs: keeps queue replicas, delivery
    /// counts, and delay histograms only.
    pub fn new_compact(streams: &[StreamSpec]) -> Result<Self, CodeError> {
        Self::build(streams, false, Discipline::StrictPriority)
    }

    /// Full-detail mirror matching an encoder's service discipline.
    pub fn with_discipline(
        streams: &[StreamSpec],
        discipline: Discipline,
    ) -> Result<Self, CodeError> {
        Self::build(streams, true, discipline)
    }

    fn build(
        streams: &[StreamSpec],
        detailed: bool,
        discipline: Discipline,
    ) -> Result<Self, CodeError> {
        let streams = validate_streams(streams)?;
        let pipes = streams
            .iter()
            .map(|s| BitPipe::new(s.rate).expect("rate validated"))
            .collect();
        let k = streams.len();
        Ok(Self {
            streams,
            pipes,
            queues: vec![VecDeque::new(); k],
            delivered: vec![Vec::new(); k],
            delivered_count: vec![0; k],
            delay_bins: vec![Vec::new(); k],
            records: if detailed { Some(Vec::new()) } else { None },
            keep_values: detailed,
            discipline,
            time: 0,
        })
    }

    /// Streams in service order.
    pub fn streams(&self) -> &[StreamSpec] {
        &self.streams
    }

    /// Replica buffer lengths in service order.
    pub fn queue_lengths(&self) -> Vec<usize> {
        self.queues.iter().map(|q| q.len()).collect()
    }

    fn position(&self, stream_id: usize) -> Result<usize, CodeError> {
        self.streams
            .iter()
            .position(|s| s.id == stream_id)
            .ok_or(CodeError::UnknownStream(stream_id))
    }

    /// Processes the step-`t` channel event: replays the arrival schedule,
    /// attributes the channel use by the shared priority rule, and on a
    /// reception pops the replica head and logs the delivery at `t + 1`.
    pub fn mirror_update(&mut self, event: &ChannelEvent) {
        let t = event.t;
        assert_eq!(t, self.time + 1, "mirror_update must advance time by 1");
        for (s, pipe) in self.pipes.iter().enumerate() {
            let upto = pipe.cumulative(t);
            let from = pipe.cumulative(t - 1);
            for index in from + 1..=upto {
                self.queues[s].push_back(index);
            }
        }
        self.time = t;
        let heads = self.queues.iter().map(|q| q.front().copied());
        let target = choose_buffer(self.discipline, &self.streams, heads);
        if let (Some(s), ChannelOutput::Received(value)) = (target, event.output) {
            let index = self.queues[s].pop_front().expect("nonempty by choice");
            let spec = self.streams[s];
            let delivery = t + 1;
            let arrival = index as f64 / spec.rate;
            let delay = delivery as f64 - arrival;
            self.delivered_count[s] += 1;
            let bin = delay.floor() as usize;
            if self.delay_bins[s].len() <= bin {
                self.delay_bins[s].resize(bin + 1, 0);
            }
            self.delay_bins[s][bin] += 1;
            if self.keep_values {
                self.delivered[s].push((value, delivery));
            }
            if let Some(records) = &mut self.records {
                records.push(DelayRecord {
                    stream: spec.id,
                    bit_index: index,
                    arrival,
                    delivery,
                    delay,
                });
            }
        }
    }

    /// All delay records, in delivery order (detailed mirrors only).
    pub fn records(&self) -> &[DelayRecord] {
        self.records.as_deref().unwrap_or(&[])
    }

    /// Bits delivered so far for a stream id.
    pub fn delivered_count(&self, stream_id: usize) -> Result<u64, CodeError> {
        Ok(self.delivered_count[self.position(stream_id)?])
    }

    /// Histogram of `floor(delay)` for a stream id; entry `d` counts
    /// deliveries with delay in `[d, d + 1)`.
    pub fn delay_bins(&self, stream_id: usize) -> Result<&[u64], CodeError> {
        Ok(&self.delay_bins[self.position(stream_id)?])
    }

    /// Delivery time of bit `j` (one-based), if delivered. Deliveries are
    /// in order, so bit `j` is the `j`-th entry of the stream's prefix.
    pub fn delivery_time(&self, stream_id: usize, j: u64) -> Result<Option<u64>, CodeError> {
        let s = self.position(stream_id)?;
        Ok(self.delivered[s].get(j as usize - 1).map(|&(_, t)| t))
    }

    /// Estimate of the message prefix `1..=floor(R t)` using deliveries
    /// known by time `t`: delivered bits are exact, undelivered positions
    /// carry the default value `false`.
    pub fn anytime_estimate(&self, stream_id: usize, t: u64) -> Result<Vec<bool>, CodeError> {
        let s = self.position(stream_id)?;
        let len = self.pipes[s].cumulative(t) as usize;
        let mut out = vec![false; len];
        for (j, &(value, delivery)) in self.delivered[s].iter().enumerate().take(len) {
            if delivery <= t {
                out[j] = value;
            }
        }
        Ok(out)
    }

    /// The decoder's working estimate right now: every delivery so far
    /// (including one landing at `time + 1`), default-filled to the prefix
    /// of bits that have arrived at the encoder by the current step.
    pub fn current_estimate(&self, stream_id: usize) -> Result<Vec<bool>, CodeError> {
        let s = self.position(stream_id)?;
        let len = self.pipes[s].cumulative(self.time) as usize;
        let mut out = vec![false; len];
        for (j, &(value, _)) in self.delivered[s].iter().enumerate().take(len) {
            out[j] = value;
        }
        Ok(out)
    }

    /// Delivered bits so far for the stream at buffer `position`, as
    /// values only.
    pub fn delivered_values(&self, stream_id: usize) -> Result<Vec<bool>, CodeError> {
        let s = self.position(stream_id)?;
        Ok(self.delivered[s].iter().map(|&(v, _)| v).collect())
    }

    /// Borrowed view of the delivered prefix: `(value, delivery time)` in
    /// arrival order. Lets per-step consumers poll without copying the
    /// whole history. Detailed mirrors only; compact mirrors keep no
    /// values and return an empty slice.
    pub fn delivered_log(&self, stream_id: usize) -> Result<&[(bool, u64)], CodeError> {
        let s = self.position(stream_id)?;
        Ok(&self.delivered[s])
    }

    /// Whether every bit of the stream that arrived by time `t - d` is
    /// delivered by time `t`. This delivery-based event is what the delay
    /// tail P(D >= d) counts.
    pub fn prefix_settled(&self, stream_id: usize, t: u64, d: u64) -> Result<bool, CodeError> {
        let s = self.position(stream_id)?;
        if d > t {
            return Ok(true);
        }
        let horizon = self.pipes[s].cumulative(t - d);
        if horizon == 0 {
            return Ok(true);
        }
        match self.delivered[s].get(horizon as usize - 1) {
            Some(&(_, delivery)) => Ok(delivery <= t),
            None => Ok(false),
        }
    }
}

/// Empirical complementary delay distribution for one stream: map from
/// integer `d` to the fraction of delivered bits with delay at least `d`.
pub fn delay_tail(records: &[DelayRecord], stream_id: usize) -> BTreeMap<u64, f64> {
    let delays: Vec<f64> = records
        .iter()
        .filter(|r| r.stream == stream_id)
        .map(|r| r.delay)
        .collect();
    let mut bins: Vec<u64> = Vec::new();
    for &d in &delays {
        let b = d.floor() as usize;
        if bins.len() <= b {
            bins.resize(b + 1, 0);
        }
        bins[b] += 1;
    }
    tail_from_bins(&bins)
}

/// Complementary distribution from a `floor`-binned histogram: since
/// delays are positive, `P(D >= d)` for integer `d` is the mass of bins
/// `d` and beyond.
pub fn tail_from_bins(bins: &[u64]) -> BTreeMap<u64, f64> {
    let total: u64 = bins.iter().sum();
    let mut out = BTreeMap::new();
    if total == 0 {
        return out;
    }
    let mut above = total;
    out.insert(0, 1.0);
    for (d, &c) in bins.iter().enumerate() {
        above -= c;
        out.insert(d as u64 + 1, above as f64 / total as f64);
    }
    out
}

/// Least-squares exponent of a geometric tail: fits `log2 P(D >= d)`
/// against `d` over the points with positive mass in `[d_min, d_max]` and
/// returns the negated slope. The intercept absorbs any constant
/// prefactor.
pub fn fit_exponent(
    tail: &BTreeMap<u64, f64>,
    d_min: u64,
    d_max: u64,
) -> Result<f64, CodeError> {
    let pts: Vec<(f64, f64)> = tail
        .range(d_min..=d_max)
        .filter(|&(_, &p)| p > 0.0)
        .map(|(&d, &p)| (d as f64, p.log2()))
        .collect();
    if pts.len() < 5 {
        return Err(CodeError::InsufficientTailMass {
            available: pts.len(),
            d_min,
            d_max,
        });
    }
    let n = pts.len() as f64;
    let sx: f64 = pts.iter().map(|p| p.0).sum();
    let sy: f64 = pts.iter().map(|p| p.1).sum();
    let sxx: f64 = pts.iter().map(|p| p.0 * p.0).sum();
    let sxy: f64 = pts.iter().map(|p| p.0 * p.1).sum();
    let slope = (n * sxy - sx * sy) / (n * sxx - sx * sx);
    Ok(-slope)
}

/// Uniform iid bit source backed by a generator.
pub fn uniform_bits<R: Rng>(rng: &mut R) -> impl FnMut(usize, u64) -> bool + '_ {
    move |_, _| rng.gen()
}

/// Configuration of one queueing run.
#[derive(Debug, Clone, Copy)]
pub struct QueueExperiment {
    /// Erasure probability.
    pub beta: f64,
    /// Number of channel uses.
    pub steps: u64,
    /// Scenario seed.
    pub seed: u64,
    /// Trial index, selecting the randomness streams.
    pub trial: u64,
    /// Service discipline.
    pub discipline: Discipline,
}

/// Histogrammed results of a queueing run.
#[derive(Debug, Clone)]
pub struct QueueStats {
    /// Stream specs in service order.
    pub streams: Vec<StreamSpec>,
    /// Per stream, counts of `floor(delay)` over delivered bits.
    pub delay_bins: Vec<Vec<u64>>,
    /// Per stream, counts of the buffer length sampled after each step.
    pub queue_bins: Vec<Vec<u64>>,
    /// Per stream, delivered bit totals.
    pub delivered: Vec<u64>,
    /// Channel uses performed.
    pub steps: u64,
}

impl QueueStats {
    /// Complementary delay distribution for the stream at `position` in
    /// service order.
    pub fn delay_tail(&self, position: usize) -> BTreeMap<u64, f64> {
        tail_from_bins(&self.delay_bins[position])
    }

    /// Complementary queue-length distribution for the stream at
    /// `position`.
    pub fn queue_tail(&self, position: usize) -> BTreeMap<u64, f64> {
        tail_from_bins(&self.queue_bins[position])
    }
}

/// Runs encoder, channel, and mirror in lockstep with iid uniform message
/// bits, asserting mirror consistency at every step, and returns
/// bounded-memory histograms.
pub fn run_queue_experiment(
    streams: &[StreamSpec],
    cfg: QueueExperiment,
) -> Result<QueueStats, CodeError> {
    let channel = ErasureChannel::new(cfg.beta).expect("beta validated by caller");
    let mut enc = PriorityEncoder::with_discipline(streams, cfg.discipline)?;
    let mut dec = DecoderMirror::build(streams, false, cfg.discipline)?;
    let mut ch_rng = crate::channels::trial_rng(cfg.seed, cfg.trial, crate::channels::TAG_CHANNEL);
    let mut bit_rngs: Vec<_> = (0..enc.streams().len())
        .map(|s| crate::channels::trial_rng(cfg.seed, cfg.trial, crate::channels::TAG_BITS + s as u64))
        .collect();
    let k = enc.streams().len();
    let mut queue_bins: Vec<Vec<u64>> = vec![Vec::new(); k];
    for t in 1..=cfg.steps {
        enc.enqueue_arrivals(t, |s, _| bit_rngs[s].gen());
        let event = enc.select_and_transmit(&channel, &mut ch_rng);
        dec.mirror_update(&event);
        let enc_lens = enc.queue_lengths();
        assert_eq!(enc_lens, dec.queue_lengths(), "mirror diverged at t={t}");
        for (s, &len) in enc_lens.iter().enumerate() {
            if queue_bins[s].len() <= len {
                queue_bins[s].resize(len + 1, 0);
            }
            queue_bins[s][len] += 1;
        }
    }
    Ok(QueueStats {
        streams: enc.streams().to_vec(),
        delay_bins: (0..k)
            .map(|s| dec.delay_bins(dec.streams()[s].id).map(|b| b.to_vec()))
            .collect::<Result<_, _>>()?,
        queue_bins,
        delivered: (0..k)
            .map(|s| dec.delivered_count(dec.streams()[s].id))
            .collect::<Result<_, _>>()?,
        steps: cfg.steps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channels::{trial_rng, TAG_BITS, TAG_CHANNEL};

    fn two_streams() -> Vec<StreamSpec> {
        vec![
            StreamSpec {
                id: 0,
                rate: 0.341,
                priority: 0,
            },
            StreamSpec {
                id: 1,
                rate: 0.051,
                priority: 1,
            },
        ]
    }

    #[test]
    fn arrivals_follow_floor_schedule() {
        let mut enc = PriorityEncoder::new(&two_streams()).unwrap();
        for t in 1..=20 {
            enc.enqueue_arrivals(t, |_, _| false);
        }
        assert_eq!(enc.queue_lengths(), vec![6, 1]);
    }

    #[test]
    fn unit_rate_one_bit_per_step() {
        let spec = [StreamSpec {
            id: 0,
            rate: 1.0,
            priority: 0,
        }];
        let mut enc = PriorityEncoder::new(&spec).unwrap();
        for t in 1..=7 {
            let before = enc.pending_bits();
            enc.enqueue_arrivals(t, |_, _| true);
            assert_eq!(enc.pending_bits(), before + 1);
        }
    }

    #[test]
    fn strict_priority_selection() {
        let mut enc = PriorityEncoder::new(&two_streams()).unwrap();
        assert_eq!(enc.select(), Selection::Dummy);
        for t in 1..=20 {
            enc.enqueue_arrivals(t, |s, j| (s + j as usize) % 2 == 0);
        }
        match enc.select() {
            Selection::Stream(0, bit) => assert_eq!(bit.index, 1),
            other => panic!("expected high-priority head, got {other:?}"),
        }
        // Drain the high-priority buffer over a perfect channel; the next
        // selection must come from the low-priority stream.
        let channel = ErasureChannel::new(0.0).unwrap();
        let mut rng = trial_rng(1, 0, TAG_CHANNEL);
        for _ in 0..6 {
            enc.select_and_transmit(&channel, &mut rng);
        }
        match enc.select() {
            Selection::Stream(1, bit) => assert_eq!(bit.index, 1),
            other => panic!("expected low-priority head, got {other:?}"),
        }
    }

    #[test]
    fn dummy_leaves_state_unchanged() {
        let mut enc = PriorityEncoder::new(&two_streams()).unwrap();
        enc.enqueue_arrivals(1, |_, _| false);
        assert_eq!(enc.pending_bits(), 0);
        let channel = ErasureChannel::new(0.5).unwrap();
        let mut rng = trial_rng(2, 0, TAG_CHANNEL);
        let before = enc.clone();
        let ev = enc.select_and_transmit(&channel, &mut rng);
        assert!(!ev.input);
        assert_eq!(enc.queue_lengths(), before.queue_lengths());
    }

    #[test]
    fn work_conservation() {
        let streams = two_streams();
        let channel = ErasureChannel::new(0.4).unwrap();
        let mut enc = PriorityEncoder::new(&streams).unwrap();
        let mut ch_rng = trial_rng(3, 1, TAG_CHANNEL);
        let mut bits = trial_rng(3, 1, TAG_BITS);
        for t in 1..=5000 {
            enc.enqueue_arrivals(t, |_, _| bits.gen());
            if enc.pending_bits() > 0 {
                assert!(matches!(enc.select(), Selection::Stream(_, _)));
            }
            enc.select_and_transmit(&channel, &mut ch_rng);
        }
    }

    #[test]
    fn mirror_cosimulation_never_diverges() {
        let streams = two_streams();
        let channel = ErasureChannel::new(0.4).unwrap();
        let mut enc = PriorityEncoder::new(&streams).unwrap();
        let mut dec = DecoderMirror::new(&streams).unwrap();
        let mut ch_rng = trial_rng(4, 2, TAG_CHANNEL);
        let mut bits = trial_rng(4, 2, TAG_BITS);
        let mut sent: Vec<Vec<bool>> = vec![Vec::new(), Vec::new()];
        for t in 1..=100_000 {
            enc.enqueue_arrivals(t, |s, _| {
                let v = bits.gen();
                sent[s].push(v);
                v
            });
            let event = enc.select_and_transmit(&channel, &mut ch_rng);
            dec.mirror_update(&event);
            assert_eq!(
                enc.queue_lengths(),
                dec.queue_lengths(),
                "mirror diverged at t={t}"
            );
        }
        // Delivered prefixes match what the encoder enqueued, in order.
        for s in 0..2 {
            let got = dec.anytime_estimate(s, 100_000).unwrap();
            let delivered = dec.delivered_count(s).unwrap() as usize;
            assert_eq!(&got[..delivered], &sent[s][..delivered]);
        }
        // FIFO: records for each stream carry consecutive indices.
        for s in 0..2 {
            let mut expected = 1;
            for r in dec.records().iter().filter(|r| r.stream == s) {
                assert_eq!(r.bit_index, expected);
                expected += 1;
            }
        }
    }

    #[test]
    fn noiseless_unit_rate_delay_is_one() {
        let spec = [StreamSpec {
            id: 0,
            rate: 1.0,
            priority: 0,
        }];
        let channel = ErasureChannel::new(0.0).unwrap();
        let mut enc = PriorityEncoder::new(&spec).unwrap();
        let mut dec = DecoderMirror::new(&spec).unwrap();
        let mut ch_rng = trial_rng(5, 0, TAG_CHANNEL);
        let mut bits = trial_rng(5, 0, TAG_BITS);
        for t in 1..=200 {
            enc.enqueue_arrivals(t, |_, _| bits.gen());
            let event = enc.select_and_transmit(&channel, &mut ch_rng);
            dec.mirror_update(&event);
        }
        assert_eq!(dec.records().len(), 200);
        for r in dec.records() {
            assert_eq!(r.delay, 1.0);
        }
    }

    #[test]
    fn noiseless_quarter_rate_point_mass() {
        let spec = [StreamSpec {
            id: 0,
            rate: 0.25,
            priority: 0,
        }];
        let channel = ErasureChannel::new(0.0).unwrap();
        let mut enc = PriorityEncoder::new(&spec).unwrap();
        let mut dec = DecoderMirror::new(&spec).unwrap();
        let mut ch_rng = trial_rng(6, 0, TAG_CHANNEL);
        for t in 1..=400 {
            enc.enqueue_arrivals(t, |_, _| true);
            let event = enc.select_and_transmit(&channel, &mut ch_rng);
            dec.mirror_update(&event);
        }
        for r in dec.records() {
            assert_eq!(r.delay, 1.0, "bit {} delayed {}", r.bit_index, r.delay);
        }
    }

    #[test]
    fn delays_dominate_backlog_bound() {
        // Any bit must wait at least one step for itself plus one for each
        // bit ahead of it in service order at its arrival.
        let streams = two_streams();
        let channel = ErasureChannel::new(0.4).unwrap();
        let mut enc = PriorityEncoder::new(&streams).unwrap();
        let mut dec = DecoderMirror::new(&streams).unwrap();
        let mut ch_rng = trial_rng(7, 3, TAG_CHANNEL);
        let mut bits = trial_rng(7, 3, TAG_BITS);
        let mut ahead_at_arrival: Vec<std::collections::HashMap<u64, (u64, usize)>> =
            vec![Default::default(), Default::default()];
        for t in 1..=20_000 {
            let lens_before = enc.queue_lengths();
            let mut new_in_high = 0usize;
            enc.enqueue_arrivals(t, |s, j| {
                let ahead = match s {
                    0 => lens_before[0] + new_in_high,
                    _ => lens_before[0] + new_in_high + lens_before[1],
                };
                if s == 0 {
                    new_in_high += 1;
                }
                ahead_at_arrival[s].insert(j, (t, ahead));
                bits.gen()
            });
            let event = enc.select_and_transmit(&channel, &mut ch_rng);
            dec.mirror_update(&event);
        }
        for r in dec.records() {
            let s = r.stream;
            let (enqueue_step, ahead) = ahead_at_arrival[s][&r.bit_index];
            assert!(
                r.delivery >= enqueue_step + ahead as u64 + 1,
                "stream {s} bit {} delivered too early",
                r.bit_index
            );
        }
    }

    #[test]
    fn high_priority_queue_matches_isolated_queue() {
        let pair = two_streams();
        let solo = [StreamSpec {
            id: 0,
            rate: 0.341,
            priority: 0,
        }];
        let channel = ErasureChannel::new(0.4).unwrap();
        let mut enc_pair = PriorityEncoder::new(&pair).unwrap();
        let mut enc_solo = PriorityEncoder::new(&solo).unwrap();
        let mut rng_pair = trial_rng(8, 4, TAG_CHANNEL);
        let mut rng_solo = trial_rng(8, 4, TAG_CHANNEL);
        for t in 1..=50_000 {
            enc_pair.enqueue_arrivals(t, |_, _| true);
            enc_solo.enqueue_arrivals(t, |_, _| true);
            enc_pair.select_and_transmit(&channel, &mut rng_pair);
            enc_solo.select_and_transmit(&channel, &mut rng_solo);
            assert_eq!(
                enc_pair.queue_lengths()[0],
                enc_solo.queue_lengths()[0],
                "decoupled at t={t}"
            );
        }
    }

    #[test]
    fn estimate_settlement_bookkeeping() {
        // All-ones messages make estimate errors coincide with undelivered
        // prefixes; settlement must match recorded delivery times exactly.
        let spec = [StreamSpec {
            id: 0,
            rate: 0.5,
            priority: 0,
        }];
        let channel = ErasureChannel::new(0.5).unwrap();
        let mut enc = PriorityEncoder::new(&spec).unwrap();
        let mut dec = DecoderMirror::new(&spec).unwrap();
        let mut ch_rng = trial_rng(9, 5, TAG_CHANNEL);
        let horizon = 2000u64;
        for t in 1..=horizon {
            enc.enqueue_arrivals(t, |_, _| true);
            let event = enc.select_and_transmit(&channel, &mut ch_rng);
            dec.mirror_update(&event);
        }
        let pipe = BitPipe::new(0.5).unwrap();
        for t in (100..horizon).step_by(37) {
            for d in [0, 1, 5, 10, 20] {
                let settled = dec.prefix_settled(0, t, d).unwrap();
                let horizon_bits = pipe.cumulative(t - d);
                let by_delivery = if horizon_bits == 0 {
                    true
                } else {
                    matches!(dec.delivery_time(0, horizon_bits).unwrap(), Some(dt) if dt <= t)
                };
                assert_eq!(settled, by_delivery);
                let est = dec.anytime_estimate(0, t).unwrap();
                let prefix_ok = est[..horizon_bits as usize].iter().all(|&b| b);
                assert_eq!(prefix_ok, settled);
            }
        }
    }

    #[test]
    fn fit_recovers_exact_geometric_tail() {
        let alpha = 0.5146;
        let mut tail = BTreeMap::new();
        for d in 0..=30 {
            tail.insert(d, (2f64).powf(-alpha * d as f64));
        }
        let fitted = fit_exponent(&tail, 0, 30).unwrap();
        assert!((fitted - alpha).abs() < 1e-12);
    }

    #[test]
    fn fit_ignores_constant_prefactor() {
        let alpha = 1.1123302367197034;
        let k = 100.0;
        let mut tail = BTreeMap::new();
        for d in 7..=40 {
            tail.insert(d, k * (2f64).powf(-alpha * d as f64));
        }
        let fitted = fit_exponent(&tail, 7, 40).unwrap();
        assert!((fitted - alpha).abs() < 1e-10);
    }

    #[test]
    fn fit_requires_tail_mass() {
        let mut tail = BTreeMap::new();
        tail.insert(0, 1.0);
        tail.insert(1, 0.5);
        tail.insert(2, 0.0);
        tail.insert(3, 0.0);
        let err = fit_exponent(&tail, 0, 3).unwrap_err();
        assert!(matches!(err, CodeError::InsufficientTailMass { .. }));
    }

    #[test]
    fn tail_from_bins_is_monotone_from_one() {
        let bins = vec![10, 5, 3, 0, 2];
        let tail = tail_from_bins(&bins);
        assert_eq!(tail[&0], 1.0);
        assert_eq!(tail[&1], 0.5);
        assert_eq!(tail[&5], 0.0);
        let values: Vec<f64> = tail.values().copied().collect();
        for w in values.windows(2) {
            assert!(w[1] <= w[0]);
        }
    }

    #[test]
    fn experiment_histograms_are_consistent() {
        let stats = run_queue_experiment(
            &two_streams(),
            QueueExperiment {
                beta: 0.4,
                steps: 20_000,
                seed: 10,
                trial: 0,
                discipline: Discipline::StrictPriority,
            },
        )
        .unwrap();
        let total_queue_samples: u64 = stats.queue_bins[0].iter().sum();
        assert_eq!(total_queue_samples, 20_000);
        let delivered: u64 = stats.delay_bins[0].iter().sum();
        assert_eq!(delivered, stats.delivered[0]);
        assert!(stats.delivered[0] > 6000);
    }

    #[test]
    fn global_fifo_serves_by_arrival_time() {
        let streams = two_streams();
        let mut enc =
            PriorityEncoder::with_discipline(&streams, Discipline::GlobalFifo).unwrap();
        // After 21 steps: the fast stream holds bits 1..7, the slow one
        // holds bit 1, which arrived at 1/0.051 = 19.6, before the fast
        // stream's bit 7 at 7/0.341 = 20.5. Strict priority would drain
        // all seven fast bits first; global FIFO interleaves by age.
        for t in 1..=21 {
            enc.enqueue_arrivals(t, |_, _| true);
        }
        let channel = ErasureChannel::new(0.0).unwrap();
        let mut rng = trial_rng(12, 0, TAG_CHANNEL);
        let mut order = Vec::new();
        for _ in 0..8 {
            if let Selection::Stream(s, bit) = enc.select() {
                order.push((s, bit.index));
            }
            enc.select_and_transmit(&channel, &mut rng);
        }
        assert_eq!(
            order,
            vec![(0, 1), (0, 2), (0, 3), (0, 4), (0, 5), (0, 6), (1, 1), (0, 7)]
        );

        // The mirror with the same discipline tracks it.
        let mut enc2 =
            PriorityEncoder::with_discipline(&streams, Discipline::GlobalFifo).unwrap();
        let mut dec2 = DecoderMirror::with_discipline(&streams, Discipline::GlobalFifo).unwrap();
        let channel = ErasureChannel::new(0.4).unwrap();
        let mut ch_rng = trial_rng(13, 0, TAG_CHANNEL);
        let mut bits = trial_rng(13, 0, TAG_BITS);
        for t in 1..=30_000 {
            enc2.enqueue_arrivals(t, |_, _| bits.gen());
            let event = enc2.select_and_transmit(&channel, &mut ch_rng);
            dec2.mirror_update(&event);
            assert_eq!(enc2.queue_lengths(), dec2.queue_lengths());
        }
    }

    #[test]
    fn deferred_feedback_matches_synchronous_pop() {
        let streams = two_streams();
        let channel = ErasureChannel::new(0.4).unwrap();
        let mut sync = PriorityEncoder::new(&streams).unwrap();
        let mut deferred = PriorityEncoder::new(&streams).unwrap();
        let mut rng_a = trial_rng(14, 0, TAG_CHANNEL);
        let mut rng_b = trial_rng(14, 0, TAG_CHANNEL);
        let mut pending: Option<bool> = None;
        for t in 1..=5000 {
            sync.enqueue_arrivals(t, |s, j| (s as u64 + j) % 3 == 0);
            let _ = sync.select_and_transmit(&channel, &mut rng_a);

            deferred.enqueue_arrivals(t, |s, j| (s as u64 + j) % 3 == 0);
            if let Some(received) = pending.take() {
                deferred.apply_feedback(received);
            }
            let selection = deferred.select_for_transmission();
            let bit = match selection {
                Selection::Stream(_, b) => b.value,
                Selection::Dummy => false,
            };
            let event = channel.transmit(t, bit, &mut rng_b);
            pending = Some(matches!(event.output, ChannelOutput::Received(_)));
        }
        // One step of feedback lag means at most one in-flight difference;
        // settle it and compare.
        if let Some(received) = pending.take() {
            deferred.apply_feedback(received);
        }
        assert_eq!(sync.queue_lengths(), deferred.queue_lengths());
    }

    #[test]
    fn invalid_stream_sets_rejected() {
        assert_eq!(
            PriorityEncoder::new(&[]).unwrap_err(),
            CodeError::NoStreams
        );
        let dup = vec![
            StreamSpec {
                id: 0,
                rate: 0.3,
                priority: 0,
            },
            StreamSpec {
                id: 1,
                rate: 0.2,
                priority: 0,
            },
        ];
        assert_eq!(
            PriorityEncoder::new(&dup).unwrap_err(),
            CodeError::DuplicatePriority(0)
        );
        let bad_rate = vec![StreamSpec {
            id: 0,
            rate: 0.0,
            priority: 0,
        }];
        assert!(matches!(
            PriorityEncoder::new(&bad_rate).unwrap_err(),
            CodeError::InvalidRate { .. }
        ));
    }
}
