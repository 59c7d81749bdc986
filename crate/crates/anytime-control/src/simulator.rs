//! Monte Carlo harness around the closed loops: reproducible per-trial
//! randomness, disturbance policies up to the adversarial edge of the box,
//! moment curves with confidence widths, a finite-horizon growth verdict,
//! and paired scheme comparison on shared channel draws.
//!
//! Every trial owns three independent random streams derived from
//! `(seed, trial index)`: one for channel erasures, one for disturbances,
//! one for observation noise. A trace is therefore a pure function of the
//! scenario and the trial index, trials parallelize freely, and two
//! scenarios run against the same seed see byte-identical erasure
//! sequences, which is what makes paired comparisons sharp.
//!
//! Boundedness of a moment sequence is judged by a frozen finite-horizon
//! proxy: the per-step means over the last half of the horizon are grouped
//! into ten equal blocks, an ordinary least-squares line is fit to the
//! base-2 logs of the block means, and the sequence counts as growing when
//! the slope is positive with one-sided 95% confidence. Asymptotic
//! statements cannot be observed directly at any finite horizon, so
//! reports carry this verdict, never a limit claim.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::closed_loop::{build_closed_loop, ClosedLoop, LoopConfig, LoopError, Transport};
use crate::priority_code::StreamSpec;
use crate::state_space::StateSpaceModel;

/// Why a scenario cannot run.
#[derive(Debug, Error)]
pub enum SimulatorError {
    /// The scenario fields are inconsistent.
    #[error("invalid scenario: {0}")]
    Invalid(String),
    #[error(transparent)]
    Loop(#[from] LoopError),
}

/// How the process disturbance is produced each step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DisturbancePolicy {
    /// Independent uniform draws over the box, per coordinate and step.
    IidUniform,
    /// Full-strength pushes, `±Ω/2` per coordinate, signed to drive each
    /// tracked coordinate away from center: the per-mode window deviation
    /// for explicit-feedback loops, the plant state for output feedback.
    ExtremalAdversarial,
    /// The same vector every step.
    Fixed {
        /// Disturbance applied at each step; one entry per disturbance
        /// input, each within `±Ω/2`.
        values: Vec<f64>,
    },
}

/// A complete, runnable experiment description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    /// Plant being controlled.
    pub model: StateSpaceModel,
    /// Link carrying the label bits.
    pub transport: Transport,
    /// Per-stream rates and priorities, one stream per plant mode.
    pub streams: Vec<StreamSpec>,
    /// Loop wiring and slack.
    pub config: LoopConfig,
    /// Disturbance policy.
    pub disturbance: DisturbancePolicy,
    /// Steps per trial.
    pub horizon: u64,
    /// Independent trials.
    pub trials: u64,
    /// Moment order for the stability report.
    pub eta: f64,
    /// Root of every random stream.
    pub seed: u64,
}

impl Scenario {
    /// Checks the scalar invariants and builds the loop once to surface
    /// structural and rate problems before any trial runs.
    pub fn validate(&self) -> Result<(), SimulatorError> {
        if self.horizon < 1 {
            return Err(SimulatorError::Invalid(
                "horizon must be at least one step".into(),
            ));
        }
        if self.trials < 1 {
            return Err(SimulatorError::Invalid(
                "at least one trial is needed".into(),
            ));
        }
        if !(self.eta > 0.0) || !self.eta.is_finite() {
            return Err(SimulatorError::Invalid(format!(
                "moment order must be positive and finite, got {}",
                self.eta
            )));
        }
        if let DisturbancePolicy::Fixed { values } = &self.disturbance {
            if values.len() != self.model.m_w() {
                return Err(SimulatorError::Invalid(format!(
                    "fixed disturbance needs {} entries, got {}",
                    self.model.m_w(),
                    values.len()
                )));
            }
            let half = self.model.omega() / 2.0;
            if let Some(v) = values.iter().find(|v| !(v.abs() <= half)) {
                return Err(SimulatorError::Invalid(format!(
                    "fixed disturbance entry {v} outside the box of half width {half}"
                )));
            }
        }
        build_closed_loop(
            &self.model,
            self.transport,
            &self.streams,
            &self.config,
            self.eta,
        )?;
        Ok(())
    }
}

/// Everything observable about one trial, step by step.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulationTrace {
    /// Plant state after each step.
    pub states: Vec<Vec<f64>>,
    /// Controls applied during each step.
    pub controls: Vec<Vec<f64>>,
    /// Sensor reading used during each step.
    pub outputs: Vec<Vec<f64>>,
    /// Disturbance injected during each step.
    pub disturbances: Vec<Vec<f64>>,
    /// Whether the step's channel use came out erased.
    pub erased: Vec<bool>,
    /// Per-mode label groups still waiting for their control after each
    /// step.
    pub commit_lags: Vec<Vec<u64>>,
    /// Largest state sup norm over the trial.
    pub sup_norm: f64,
    /// Step at which the loop lost its certificate, if ever.
    pub diverged: Option<u64>,
}

impl SimulationTrace {
    /// Steps recorded.
    pub fn horizon(&self) -> usize {
        self.states.len()
    }
}

const TAG_CHANNEL: u64 = 0;
const TAG_DISTURBANCE: u64 = 1;
const TAG_NOISE: u64 = 2;

fn stream_rng(seed: u64, trial: u64, tag: u64) -> ChaCha12Rng {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream(trial * 8 + tag);
    rng
}

fn draw_disturbance(
    policy: &DisturbancePolicy,
    m_w: usize,
    omega: f64,
    push: &[f64],
    rng: &mut ChaCha12Rng,
) -> Vec<f64> {
    let half = omega / 2.0;
    match policy {
        DisturbancePolicy::IidUniform => (0..m_w).map(|_| rng.gen_range(-half..=half)).collect(),
        DisturbancePolicy::ExtremalAdversarial => (0..m_w)
            .map(|i| {
                if push[i % push.len()] >= 0.0 {
                    half
                } else {
                    -half
                }
            })
            .collect(),
        DisturbancePolicy::Fixed { values } => values.clone(),
    }
}

struct TrialOutcome {
    trace: Option<SimulationTrace>,
    eta_powers: Vec<f64>,
    sup_last_half: f64,
    diverged: Option<u64>,
}

fn run_trial(
    scenario: &Scenario,
    trial: u64,
    pair_seed: u64,
    record_full: bool,
) -> Result<TrialOutcome, SimulatorError> {
    let (lp, _report) = build_closed_loop(
        &scenario.model,
        scenario.transport,
        &scenario.streams,
        &scenario.config,
        scenario.eta,
    )?;
    let mut rng_channel = stream_rng(pair_seed, trial, TAG_CHANNEL);
    let mut rng_disturbance = stream_rng(pair_seed, trial, TAG_DISTURBANCE);
    let mut rng_noise = stream_rng(pair_seed, trial, TAG_NOISE);

    let horizon = scenario.horizon;
    let m_w = scenario.model.m_w();
    let m_y = scenario.model.m_y();
    let omega = scenario.model.omega();
    let gamma = scenario.model.gamma();
    let half_start = horizon / 2;

    let mut trace = record_full.then(|| SimulationTrace {
        states: Vec::with_capacity(horizon as usize),
        controls: Vec::with_capacity(horizon as usize),
        outputs: Vec::with_capacity(horizon as usize),
        disturbances: Vec::with_capacity(horizon as usize),
        erased: Vec::with_capacity(horizon as usize),
        commit_lags: Vec::with_capacity(horizon as usize),
        sup_norm: 0.0,
        diverged: None,
    });
    let mut eta_powers = Vec::with_capacity(horizon as usize);
    let mut sup_all = 0.0f64;
    let mut sup_last_half = 0.0f64;

    match lp {
        ClosedLoop::Diagonal(mut lp) => {
            for step in 0..horizon {
                let push = lp.window_states();
                let w = draw_disturbance(
                    &scenario.disturbance,
                    m_w,
                    omega,
                    &push,
                    &mut rng_disturbance,
                );
                lp.step(&w, &mut rng_channel);
                let states = lp.states();
                let sup = lp.sup_norm();
                sup_all = sup_all.max(sup);
                if step >= half_start {
                    sup_last_half = sup_last_half.max(sup);
                }
                eta_powers.push(sup_of(&states).powf(scenario.eta));
                if let Some(trace) = trace.as_mut() {
                    trace.outputs.push(states.clone());
                    trace.states.push(states);
                    trace.controls.push(lp.controls());
                    trace.disturbances.push(w);
                    trace.erased.push(lp.last_erased());
                    trace.commit_lags.push(lp.commit_lags());
                }
            }
            finish_trace(trace.as_mut(), sup_all, lp.diverged());
            Ok(TrialOutcome {
                trace,
                eta_powers,
                sup_last_half,
                diverged: lp.diverged(),
            })
        }
        ClosedLoop::Dance(mut lp) => {
            for step in 0..horizon {
                let x_pre = lp.state().clone();
                let push: Vec<f64> = x_pre.iter().copied().collect();
                let w = draw_disturbance(
                    &scenario.disturbance,
                    m_w,
                    omega,
                    &push,
                    &mut rng_disturbance,
                );
                let noise: DVector<f64> = if gamma > 0.0 {
                    DVector::from_fn(m_y, |_, _| rng_noise.gen_range(-gamma / 2.0..=gamma / 2.0))
                } else {
                    DVector::zeros(m_y)
                };
                let y_seen = scenario.model.c_y() * &x_pre + &noise;
                lp.step(&DVector::from_column_slice(&w), &noise, &mut rng_channel);
                let sup = lp.sup_norm();
                sup_all = sup_all.max(sup);
                if step >= half_start {
                    sup_last_half = sup_last_half.max(sup);
                }
                eta_powers.push(sup.powf(scenario.eta));
                if let Some(trace) = trace.as_mut() {
                    trace.states.push(lp.state().iter().copied().collect());
                    trace.controls.push(vec![lp.last_control()]);
                    trace.outputs.push(y_seen.iter().copied().collect());
                    trace.disturbances.push(w);
                    trace.erased.push(lp.last_erased());
                    trace.commit_lags.push(lp.commit_lags());
                }
            }
            finish_trace(trace.as_mut(), sup_all, lp.diverged());
            Ok(TrialOutcome {
                trace,
                eta_powers,
                sup_last_half,
                diverged: lp.diverged(),
            })
        }
    }
}

fn sup_of(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |acc, x| acc.max(x.abs()))
}

fn finish_trace(trace: Option<&mut SimulationTrace>, sup: f64, diverged: Option<u64>) {
    if let Some(trace) = trace {
        trace.sup_norm = sup;
        trace.diverged = diverged;
        debug_assert_eq!(trace.states.len(), trace.erased.len());
    }
}

/// Runs every trial of the scenario, in parallel, each trial a pure
/// function of `(seed, trial index)`.
pub fn run(scenario: &Scenario) -> Result<Vec<SimulationTrace>, SimulatorError> {
    scenario.validate()?;
    (0..scenario.trials)
        .into_par_iter()
        .map(|trial| {
            run_trial(scenario, trial, scenario.seed, true)
                .map(|outcome| outcome.trace.expect("full recording requested"))
        })
        .collect()
}

/// Empirical moment curve across trials.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentSeries {
    /// Moment order.
    pub eta: f64,
    /// Trials averaged.
    pub trials: usize,
    /// Per-step sample mean of the sup norm raised to `eta`.
    pub mean: Vec<f64>,
    /// Per-step 95% normal-approximation half-widths.
    pub half_width: Vec<f64>,
}

fn series_from_samples(per_trial: &[Vec<f64>], eta: f64) -> MomentSeries {
    assert!(
        per_trial.len() >= 2,
        "confidence widths need at least two trials"
    );
    let horizon = per_trial[0].len();
    assert!(
        per_trial.iter().all(|s| s.len() == horizon),
        "all trials must share the horizon"
    );
    let n = per_trial.len() as f64;
    let mut mean = Vec::with_capacity(horizon);
    let mut half_width = Vec::with_capacity(horizon);
    for t in 0..horizon {
        let m = per_trial.iter().map(|s| s[t]).sum::<f64>() / n;
        let var = per_trial.iter().map(|s| (s[t] - m).powi(2)).sum::<f64>() / (n - 1.0);
        mean.push(m);
        half_width.push(1.96 * (var / n).sqrt());
    }
    MomentSeries {
        eta,
        trials: per_trial.len(),
        mean,
        half_width,
    }
}

/// Per-step mean of `sup norm ^ eta` across traces, with 95% half-widths.
pub fn moment_series(traces: &[SimulationTrace], eta: f64) -> MomentSeries {
    let samples: Vec<Vec<f64>> = traces
        .iter()
        .map(|tr| tr.states.iter().map(|x| sup_of(x).powf(eta)).collect())
        .collect();
    series_from_samples(&samples, eta)
}

/// One-sided 95% critical value of the t distribution with 8 degrees of
/// freedom, matching the ten-block slope fit.
pub const SLOPE_T_CRIT: f64 = 1.8595;

/// Number of blocks the growth verdict averages over.
pub const SLOPE_BLOCKS: usize = 10;

/// Outcome of the finite-horizon growth test.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SlopeVerdict {
    /// Fitted slope of `log2(block mean)` per block.
    pub slope: f64,
    /// Studentized slope.
    pub t_stat: f64,
    /// Positive slope with one-sided 95% confidence.
    pub growing: bool,
}

/// Fits a least-squares line to the base-2 logs of ten block means over
/// the last half of the series and reports whether the slope is positive
/// with one-sided 95% confidence. A series that reaches a non-finite value
/// in the window is reported as growing outright.
pub fn log_slope_test(series: &MomentSeries) -> SlopeVerdict {
    let window = &series.mean[series.mean.len() / 2..];
    assert!(
        window.len() >= 2 * SLOPE_BLOCKS,
        "slope test needs at least {} points in the last half, got {}",
        2 * SLOPE_BLOCKS,
        window.len()
    );
    if window.iter().any(|m| !m.is_finite()) {
        return SlopeVerdict {
            slope: f64::INFINITY,
            t_stat: f64::INFINITY,
            growing: true,
        };
    }
    let nb = SLOPE_BLOCKS;
    let mut ys = Vec::with_capacity(nb);
    for b in 0..nb {
        let lo = b * window.len() / nb;
        let hi = (b + 1) * window.len() / nb;
        let m = window[lo..hi].iter().sum::<f64>() / (hi - lo) as f64;
        ys.push(m.max(f64::MIN_POSITIVE).log2());
    }
    let xbar = (nb as f64 - 1.0) / 2.0;
    let ybar = ys.iter().sum::<f64>() / nb as f64;
    let sxx: f64 = (0..nb).map(|b| (b as f64 - xbar).powi(2)).sum();
    let sxy: f64 = ys
        .iter()
        .enumerate()
        .map(|(b, y)| (b as f64 - xbar) * (y - ybar))
        .sum();
    let slope = sxy / sxx;
    let sse: f64 = ys
        .iter()
        .enumerate()
        .map(|(b, y)| (y - ybar - slope * (b as f64 - xbar)).powi(2))
        .sum();
    let se = (sse / (nb as f64 - 2.0) / sxx).sqrt();
    let t_stat = if se == 0.0 {
        if slope > 0.0 {
            f64::INFINITY
        } else {
            0.0
        }
    } else {
        slope / se
    };
    SlopeVerdict {
        slope,
        t_stat,
        growing: slope > 0.0 && t_stat > SLOPE_T_CRIT,
    }
}

/// One scheme's half of a paired comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct SchemeReport {
    /// Moment curve across the paired trials.
    pub moments: MomentSeries,
    /// Growth verdict on the moment curve.
    pub slope: SlopeVerdict,
    /// Survival curve of the per-trial largest sup norm over the last half
    /// of the horizon: pairs `(threshold, fraction of trials at or above)`.
    pub tail: Vec<(f64, f64)>,
    /// Trials whose loop lost its certificate.
    pub diverged_trials: u64,
}

/// Two schemes run against byte-identical channel randomness.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedReport {
    /// First scheme's summary.
    pub a: SchemeReport,
    /// Second scheme's summary.
    pub b: SchemeReport,
}

const TAIL_POINTS: usize = 24;

fn tail_curve(sups: &[f64]) -> Vec<(f64, f64)> {
    let n = sups.len() as f64;
    let finite: Vec<f64> = sups.iter().copied().filter(|s| *s > 0.0).collect();
    let Some(lo) = finite
        .iter()
        .copied()
        .reduce(f64::min)
        .filter(|l| l.is_finite())
    else {
        return Vec::new();
    };
    let hi = finite.iter().copied().fold(lo, f64::max);
    let points = if hi > lo { TAIL_POINTS } else { 1 };
    (0..points)
        .map(|j| {
            let x = if points == 1 {
                lo
            } else {
                lo * (hi / lo).powf(j as f64 / (points - 1) as f64)
            };
            let p = sups.iter().filter(|s| **s >= x).count() as f64 / n;
            (x, p)
        })
        .collect()
}

fn scheme_report(scenario: &Scenario, pair_seed: u64) -> Result<SchemeReport, SimulatorError> {
    let outcomes: Vec<TrialOutcome> = (0..scenario.trials)
        .into_par_iter()
        .map(|trial| run_trial(scenario, trial, pair_seed, false))
        .collect::<Result<_, _>>()?;
    let samples: Vec<Vec<f64>> = outcomes.iter().map(|o| o.eta_powers.clone()).collect();
    let moments = series_from_samples(&samples, scenario.eta);
    let slope = log_slope_test(&moments);
    let sups: Vec<f64> = outcomes.iter().map(|o| o.sup_last_half).collect();
    let diverged_trials = outcomes.iter().filter(|o| o.diverged.is_some()).count() as u64;
    Ok(SchemeReport {
        moments,
        slope,
        tail: tail_curve(&sups),
        diverged_trials,
    })
}

/// Runs both scenarios trial for trial against the same channel, noise,
/// and (policy permitting) disturbance draws, keyed by the first
/// scenario's seed, and summarizes each side. Horizons and trial counts
/// must match; identical scenarios produce identical reports.
pub fn compare_schemes(a: &Scenario, b: &Scenario) -> Result<PairedReport, SimulatorError> {
    a.validate()?;
    b.validate()?;
    if a.horizon != b.horizon {
        return Err(SimulatorError::Invalid(format!(
            "paired schemes must share the horizon, got {} and {}",
            a.horizon, b.horizon
        )));
    }
    if a.trials != b.trials {
        return Err(SimulatorError::Invalid(format!(
            "paired schemes must share the trial count, got {} and {}",
            a.trials, b.trials
        )));
    }
    Ok(PairedReport {
        a: scheme_report(a, a.seed)?,
        b: scheme_report(b, a.seed)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::closed_loop::FeedbackMode;
    use crate::priority_code::Discipline;
    use approx::assert_relative_eq;
    use nalgebra::DMatrix;

    fn scalar_scenario(transport: Transport, policy: DisturbancePolicy) -> Scenario {
        Scenario {
            model: StateSpaceModel::new(
                DMatrix::from_element(1, 1, 2.0),
                DMatrix::identity(1, 1),
                DMatrix::identity(1, 1),
                DMatrix::identity(1, 1),
                1.0,
                0.0,
                0.0,
            )
            .unwrap(),
            transport,
            streams: vec![StreamSpec {
                id: 0,
                rate: 2.0,
                priority: 0,
            }],
            config: LoopConfig {
                feedback: FeedbackMode::Explicit,
                superstep: 1,
                epsilon: 0.04,
                dance_factor: 3.0,
                discipline: Discipline::StrictPriority,
            },
            disturbance: policy,
            horizon: 400,
            trials: 4,
            eta: 2.0,
            seed: 7,
        }
    }

    fn two_priority_scenario(discipline: Discipline) -> Scenario {
        let l1 = 2f64.powf(0.34);
        let l2 = 2f64.powf(0.05);
        Scenario {
            model: StateSpaceModel::new(
                DMatrix::from_row_slice(2, 2, &[l1, 0.0, 0.0, l2]),
                DMatrix::identity(2, 2),
                DMatrix::identity(2, 2),
                DMatrix::identity(2, 2),
                1.0,
                0.0,
                0.0,
            )
            .unwrap(),
            transport: Transport::Bec { beta: 0.4 },
            streams: vec![
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
            ],
            config: LoopConfig {
                feedback: FeedbackMode::Explicit,
                superstep: 1,
                epsilon: 0.04,
                dance_factor: 3.0,
                discipline,
            },
            disturbance: DisturbancePolicy::IidUniform,
            horizon: 400,
            trials: 4,
            eta: 3.0,
            seed: 11,
        }
    }

    #[test]
    fn scenario_json_round_trips_and_rejects_unknown_keys() {
        let s = scalar_scenario(Transport::Bec { beta: 0.4 }, DisturbancePolicy::IidUniform);
        let text = serde_json::to_string_pretty(&s).unwrap();
        let back: Scenario = serde_json::from_str(&text).unwrap();
        assert_eq!(back, s);

        let mut value: serde_json::Value = serde_json::from_str(&text).unwrap();
        value["surprise"] = 1.into();
        let err = serde_json::from_value::<Scenario>(value).unwrap_err();
        assert!(err.to_string().contains("surprise"), "{err}");

        let policy: DisturbancePolicy =
            serde_json::from_str(r#"{"policy":"extremal-adversarial"}"#).unwrap();
        assert_eq!(policy, DisturbancePolicy::ExtremalAdversarial);
    }

    #[test]
    fn validation_catches_bad_scenarios() {
        let good = scalar_scenario(Transport::Pipe, DisturbancePolicy::IidUniform);
        good.validate().unwrap();

        let mut s = good.clone();
        s.horizon = 0;
        assert!(matches!(s.validate(), Err(SimulatorError::Invalid(_))));

        let mut s = good.clone();
        s.trials = 0;
        assert!(matches!(s.validate(), Err(SimulatorError::Invalid(_))));

        let mut s = good.clone();
        s.eta = 0.0;
        assert!(matches!(s.validate(), Err(SimulatorError::Invalid(_))));

        let mut s = good.clone();
        s.disturbance = DisturbancePolicy::Fixed {
            values: vec![0.2, 0.2],
        };
        assert!(matches!(s.validate(), Err(SimulatorError::Invalid(_))));

        let mut s = good.clone();
        s.disturbance = DisturbancePolicy::Fixed { values: vec![0.7] };
        assert!(matches!(s.validate(), Err(SimulatorError::Invalid(_))));

        let mut s = good.clone();
        s.streams[0].rate = 0.9;
        assert!(matches!(s.validate(), Err(SimulatorError::Loop(_))));
    }

    #[test]
    fn same_seed_gives_bit_identical_traces() {
        let s = scalar_scenario(Transport::Bec { beta: 0.4 }, DisturbancePolicy::IidUniform);
        let first = run(&s).unwrap();
        let second = run(&s).unwrap();
        assert_eq!(first, second);
        assert_eq!(first.len(), 4);
        assert!(first[0].erased.iter().any(|&e| e));
        assert!(first[0].erased.iter().any(|&e| !e));
        assert_ne!(first[0].erased, first[1].erased);
    }

    #[test]
    fn pipe_traces_respect_the_window_box() {
        for policy in [
            DisturbancePolicy::IidUniform,
            DisturbancePolicy::ExtremalAdversarial,
            DisturbancePolicy::Fixed { values: vec![0.5] },
        ] {
            let s = scalar_scenario(Transport::Pipe, policy);
            for trace in run(&s).unwrap() {
                assert_eq!(trace.diverged, None);
                assert!(
                    trace.sup_norm <= 1.0 + 1e-9,
                    "state escaped the certified box: {}",
                    trace.sup_norm
                );
                assert_eq!(trace.horizon(), 400);
                assert!(trace.erased.iter().all(|&e| !e));
                assert!(trace.commit_lags.iter().all(|l| l[0] == 0));
            }
        }
    }

    #[test]
    fn extremal_policy_pins_the_box_edge() {
        let s = scalar_scenario(Transport::Pipe, DisturbancePolicy::ExtremalAdversarial);
        let traces = run(&s).unwrap();
        for trace in &traces {
            for w in &trace.disturbances {
                assert_eq!(w[0].abs(), 0.5);
            }
        }
        assert_eq!(traces[0], traces[1]);

        let iid = scalar_scenario(Transport::Pipe, DisturbancePolicy::IidUniform);
        let traces = run(&iid).unwrap();
        assert!(traces[0]
            .disturbances
            .iter()
            .all(|w| w[0].abs() <= 0.5 + 1e-12));
        assert!(traces[0]
            .disturbances
            .windows(2)
            .any(|p| p[0][0] != p[1][0]));
    }

    #[test]
    fn moment_series_matches_constant_traces() {
        let constant = |c: f64| SimulationTrace {
            states: vec![vec![c]; 60],
            controls: vec![vec![0.0]; 60],
            outputs: vec![vec![c]; 60],
            disturbances: vec![vec![0.0]; 60],
            erased: vec![false; 60],
            commit_lags: vec![vec![0]; 60],
            sup_norm: c.abs(),
            diverged: None,
        };
        let traces = vec![constant(1.5), constant(1.5), constant(1.5)];
        let series = moment_series(&traces, 3.0);
        assert_eq!(series.trials, 3);
        for (m, h) in series.mean.iter().zip(&series.half_width) {
            assert_relative_eq!(*m, 1.5f64.powi(3), max_relative = 1e-12);
            assert_eq!(*h, 0.0);
        }
        assert!(series.mean.iter().all(|m| *m >= 0.0));
    }

    #[test]
    fn slope_test_flags_growth_and_passes_flat() {
        let series = |f: &dyn Fn(usize) -> f64| MomentSeries {
            eta: 3.0,
            trials: 10,
            mean: (0..400).map(f).collect(),
            half_width: vec![0.0; 400],
        };
        let growing = log_slope_test(&series(&|t| 2f64.powf(0.01 * t as f64)));
        assert!(growing.growing, "{growing:?}");

        let flat = log_slope_test(&series(&|t| 3.0 + 0.001 * (t % 7) as f64));
        assert!(!flat.growing, "{flat:?}");

        let decaying = log_slope_test(&series(&|t| 5.0 * 2f64.powf(-0.01 * t as f64)));
        assert!(!decaying.growing, "{decaying:?}");
        assert!(decaying.slope < 0.0);

        let blown = log_slope_test(&series(&|t| {
            if t > 300 {
                f64::INFINITY
            } else {
                1.0
            }
        }));
        assert!(blown.growing);
    }

    #[test]
    fn paired_schemes_share_the_erasure_sequence() {
        let a = two_priority_scenario(Discipline::StrictPriority);
        let b = two_priority_scenario(Discipline::GlobalFifo);
        let ta = run(&a).unwrap();
        let tb = run(&b).unwrap();
        for (x, y) in ta.iter().zip(&tb) {
            assert_eq!(x.erased, y.erased);
            assert_eq!(x.disturbances, y.disturbances);
        }

        let report = compare_schemes(&a, &b).unwrap();
        assert_eq!(report.a.moments.trials, 4);
        assert_eq!(report.b.moments.trials, 4);

        let same = compare_schemes(&a, &a).unwrap();
        assert_eq!(same.a, same.b);

        let mut short = b.clone();
        short.horizon = 200;
        assert!(matches!(
            compare_schemes(&a, &short),
            Err(SimulatorError::Invalid(_))
        ));
    }

    #[test]
    fn compare_matches_the_trace_path() {
        let a = two_priority_scenario(Discipline::StrictPriority);
        let report = compare_schemes(&a, &a).unwrap();
        let traces = run(&a).unwrap();
        let series = moment_series(&traces, a.eta);
        assert_eq!(report.a.moments, series);
        assert_eq!(report.a.diverged_trials, 0);
        assert!(!report.a.tail.is_empty());
        let (first, last) = (report.a.tail[0], *report.a.tail.last().unwrap());
        assert_relative_eq!(first.1, 1.0, max_relative = 1e-12);
        assert!(last.1 > 0.0);
        assert!(first.0 <= last.0);
    }
}
