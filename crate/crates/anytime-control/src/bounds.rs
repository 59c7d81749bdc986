//! Closed-form reliability/rate calculators for the binary erasure channel
//! with feedback, plus rate-region membership and stabilizability demands.
//!
//! The central object is the anytime capacity of the erasure channel with
//! erasure probability `beta`: the largest rate at which bits can be carried
//! so that the probability a bit is still wrong `d` steps after its arrival
//! decays like `2^{-alpha d}`. For the erasure channel with feedback it has
//! the closed form
//!
//! ```text
//! C_any(alpha) = alpha / (alpha + log2((1 - beta) / (1 - beta 2^alpha)))
//! ```
//!
//! valid for `0 < alpha < -log2(beta)`. The same curve is traced by the
//! parametric pair `alpha = E0(rho)`, `R = E0(rho)/rho`, where
//! `E0(rho) = -log2(beta + 2^{-rho}(1 - beta))` is the Gallager exponent of
//! the channel. A strict-priority scheme serving a high stream at `R_H` and
//! a low stream at `R_L` gives the low stream at least the exponent
//!
//! ```text
//! alpha_L = max_{rho <= rho_HL} E0(rho) - rho R_H ,
//! ```
//!
//! where `rho_HL` solves `E0(rho)/rho = R_H + R_L`. Whenever the stationary
//! point of `E0(rho) - rho R_H` falls inside the bracket, this maximum
//! equals the binary sphere-packing divergence `D(1 - R_H || beta)`.

use crate::state_space::{self, StateSpaceModel};
use thiserror::Error;

/// Default slack added to rate/reliability demands.
pub const DEFAULT_SLACK: f64 = 1e-3;

/// Bisection tolerance used by every root finder in this module.
const ROOT_TOL: f64 = 1e-10;
/// Iteration cap for bisection; 200 halvings shrink any practical bracket
/// far below `ROOT_TOL`.
const MAX_ITER: usize = 200;

/// Errors from bound evaluation.
#[derive(Debug, Error, PartialEq)]
pub enum BoundsError {
    /// `alpha >= -log2(beta)`: no positive rate sustains this exponent.
    #[error("reliability exponent {alpha} unattainable at positive rate for beta {beta}")]
    ReliabilityUnattainable { alpha: f64, beta: f64 },
    /// Rate outside the open interval where the function is defined.
    #[error("rate {rate} outside ({lo}, {hi})")]
    RateOutsideRange { rate: f64, lo: f64, hi: f64 },
    /// Parameter must lie in `[0, 1)`.
    #[error("erasure probability {0} outside [0, 1)")]
    InvalidBeta(f64),
    /// Parameter must be positive.
    #[error("{name} must be positive, got {value}")]
    NonPositive { name: &'static str, value: f64 },
    /// Reliability targets not sorted by descending exponent.
    #[error("targets must be sorted by descending alpha")]
    UnsortedTargets,
}

/// A (rate, reliability) pair demanded of one message stream.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReliabilityTarget {
    /// Message rate in bits per channel use.
    pub rate: f64,
    /// Anytime reliability exponent, base 2, per step of delay.
    pub alpha: f64,
}

/// A list of reliability targets ordered by descending exponent, ready for
/// rate-region membership tests.
#[derive(Debug, Clone, PartialEq)]
pub struct RateRegionQuery {
    targets: Vec<ReliabilityTarget>,
}

impl RateRegionQuery {
    /// Builds a query, rejecting lists that are not sorted by descending
    /// `alpha` or that contain non-positive rates or exponents.
    pub fn new(targets: Vec<ReliabilityTarget>) -> Result<Self, BoundsError> {
        for t in &targets {
            if t.rate <= 0.0 {
                return Err(BoundsError::NonPositive {
                    name: "rate",
                    value: t.rate,
                });
            }
            if t.alpha <= 0.0 {
                return Err(BoundsError::NonPositive {
                    name: "alpha",
                    value: t.alpha,
                });
            }
        }
        if targets.windows(2).any(|w| w[0].alpha < w[1].alpha) {
            return Err(BoundsError::UnsortedTargets);
        }
        Ok(Self { targets })
    }

    /// Builds a query from targets in any order, sorting by descending
    /// `alpha`.
    pub fn sorted(mut targets: Vec<ReliabilityTarget>) -> Result<Self, BoundsError> {
        targets.sort_by(|a, b| b.alpha.total_cmp(&a.alpha));
        Self::new(targets)
    }

    /// The targets, sorted by descending exponent.
    pub fn targets(&self) -> &[ReliabilityTarget] {
        &self.targets
    }
}

/// Per-eigenvalue rate/reliability demands for stabilizing a plant, plus
/// the scalar lumped-rate feasibility check.
#[derive(Debug, Clone, PartialEq)]
pub struct StabilizabilityDemand {
    /// One `(rate, alpha)` demand per unstable eigenvalue, ordered by
    /// descending eigenvalue magnitude: `rate = log2|lambda| + epsilon`,
    /// `alpha = eta * log2|lambda| + epsilon`.
    pub per_eigenvalue: Vec<ReliabilityTarget>,
    /// Moment order the demands are written for.
    pub eta: f64,
    /// Slack added to every demand.
    pub epsilon: f64,
    /// Total rate demand `sum_i log2|lambda_i| + epsilon`.
    pub scalar_rate: f64,
    /// Exponent demand for an undifferentiated code carrying all streams:
    /// `eta * max_i log2|lambda_i| + epsilon`.
    pub scalar_alpha: f64,
    /// Whether one code treating all bits alike can meet the demand on the
    /// erasure channel at hand: `scalar_rate < C_any(scalar_alpha)`.
    pub undifferentiated_feasible: bool,
    /// Anytime capacity at `scalar_alpha` (zero when unattainable).
    pub undifferentiated_capacity: f64,
    /// Feedback delay the demands are evaluated at: intrinsic delay plus
    /// one.
    pub feedback_delay: u64,
}

/// Gallager exponent of the erasure channel:
/// `E0(rho) = -log2(beta + 2^{-rho}(1 - beta))`.
///
/// Increasing and concave in `rho`, zero at `rho = 0`, saturating at
/// `-log2(beta)` as `rho -> inf`.
pub fn gallager_e0(rho: f64, beta: f64) -> f64 {
    -(beta + (-rho).exp2() * (1.0 - beta)).log2()
}

/// Anytime capacity of the erasure channel with feedback at reliability
/// exponent `alpha`.
///
/// Monotone decreasing in `alpha`, with `C_any -> 1 - beta` as
/// `alpha -> 0` and `C_any -> 0` as `alpha -> -log2(beta)`. Exponents at or
/// beyond `-log2(beta)` are unattainable at positive rate.
pub fn bec_anytime_capacity(alpha: f64, beta: f64) -> Result<f64, BoundsError> {
    check_beta(beta)?;
    if alpha <= 0.0 {
        return Err(BoundsError::NonPositive {
            name: "alpha",
            value: alpha,
        });
    }
    if beta > 0.0 && alpha >= -beta.log2() {
        return Err(BoundsError::ReliabilityUnattainable { alpha, beta });
    }
    Ok(alpha / (alpha + ((1.0 - beta) / (1.0 - beta * alpha.exp2())).log2()))
}

/// Inverse of [`bec_anytime_capacity`] in `alpha`: the exponent at which
/// the channel carries exactly rate `r`.
///
/// Solved by bisection to absolute tolerance `1e-10`; requires
/// `0 < r < 1 - beta` and `beta > 0` (for `beta = 0` the capacity is 1 at
/// every exponent and the inverse is undefined).
pub fn bec_anytime_capacity_inverse(r: f64, beta: f64) -> Result<f64, BoundsError> {
    check_beta(beta)?;
    let cap = 1.0 - beta;
    if beta == 0.0 || r <= 0.0 || r >= cap {
        return Err(BoundsError::RateOutsideRange {
            rate: r,
            lo: 0.0,
            hi: cap,
        });
    }
    let alpha_sup = -beta.log2();
    let mut lo = 0.0;
    let mut hi = alpha_sup;
    // C_any is decreasing: capacity above r keeps the root to the right.
    for _ in 0..MAX_ITER {
        let mid = 0.5 * (lo + hi);
        let c = bec_anytime_capacity(mid, beta).unwrap_or(0.0);
        if c > r {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < ROOT_TOL {
            break;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// One point of the parametric reliability/rate trade-off curve:
/// `(rate, alpha) = (E0(rho)/rho, E0(rho))`.
///
/// Sweeping `rho` over `(0, inf)` traces exactly the anytime-capacity
/// curve.
pub fn parametric_point(rho: f64, beta: f64) -> (f64, f64) {
    let e0 = gallager_e0(rho, beta);
    (e0 / rho, e0)
}

/// The unique `rho` solving `E0(rho)/rho = r_sum`.
///
/// `E0(rho)/rho` decreases strictly from `1 - beta` to 0, so bisection
/// with bracket expansion finds the root; requires `0 < r_sum < 1 - beta`.
pub fn rho_hl(r_sum: f64, beta: f64) -> Result<f64, BoundsError> {
    check_beta(beta)?;
    let cap = 1.0 - beta;
    if r_sum <= 0.0 || r_sum >= cap {
        return Err(BoundsError::RateOutsideRange {
            rate: r_sum,
            lo: 0.0,
            hi: cap,
        });
    }
    let ratio = |rho: f64| gallager_e0(rho, beta) / rho;
    let mut hi = 1.0;
    while ratio(hi) > r_sum {
        hi *= 2.0;
    }
    let mut lo = 0.0;
    for _ in 0..MAX_ITER {
        let mid = 0.5 * (lo + hi);
        if ratio(mid) > r_sum {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < ROOT_TOL {
            break;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Stationary point of `rho -> E0(rho) - rho r_h`: the `rho` where
/// `E0'(rho) = r_h`, in closed form for the erasure channel.
///
/// Positive exactly when `0 < r_h < 1 - beta`.
fn rho_stationary(r_h: f64, beta: f64) -> f64 {
    -(beta * r_h / ((1.0 - beta) * (1.0 - r_h))).log2()
}

/// Guaranteed reliability exponent of the low-priority stream in a strict
/// two-priority scheme at rates `(r_h, r_l)`:
/// `max over rho in (0, rho_HL] of E0(rho) - rho r_h`.
///
/// The objective is concave, so the maximum sits at the closed-form
/// stationary point clamped to the bracket. When the stationary point is
/// interior the value equals `sphere_packing(r_h, beta)` exactly.
pub fn low_priority_exponent(r_h: f64, r_l: f64, beta: f64) -> Result<f64, BoundsError> {
    check_beta(beta)?;
    let cap = 1.0 - beta;
    if r_h <= 0.0 || r_h >= cap {
        return Err(BoundsError::RateOutsideRange {
            rate: r_h,
            lo: 0.0,
            hi: cap,
        });
    }
    if r_l < 0.0 || r_h + r_l >= cap {
        return Err(BoundsError::RateOutsideRange {
            rate: r_l,
            lo: 0.0,
            hi: cap - r_h,
        });
    }
    let bracket = rho_hl(r_h + r_l, beta)?;
    let rho = rho_stationary(r_h, beta).min(bracket);
    Ok(gallager_e0(rho, beta) - rho * r_h)
}

/// Binary sphere-packing divergence at rate `r`:
/// `D(1 - r || beta) = (1-r) log2((1-r)/beta) + r log2(r/(1-beta))`.
///
/// Defined for `0 < r < 1` and `0 < beta < 1`; zero exactly at
/// `r = 1 - beta`.
pub fn sphere_packing(r: f64, beta: f64) -> f64 {
    (1.0 - r) * ((1.0 - r) / beta).log2() + r * (r / (1.0 - beta)).log2()
}

/// Sufficient rate-region test: every target met by one code when
/// `sum_j R_j < capacity(max_j alpha_j)`.
///
/// `capacity` maps an exponent to the largest sustainable rate (return 0
/// for unattainable exponents). An empty query is trivially inside.
pub fn inner_bound_contains(q: &RateRegionQuery, capacity: impl Fn(f64) -> f64) -> bool {
    let ts = q.targets();
    if ts.is_empty() {
        return true;
    }
    let sum: f64 = ts.iter().map(|t| t.rate).sum();
    let alpha_max = ts[0].alpha;
    sum < capacity(alpha_max)
}

/// Necessary rate-region test: with targets sorted by descending `alpha`,
/// every prefix sum must satisfy `sum_{j<=k} R_j <= capacity(alpha_k)`.
pub fn outer_bound_contains(q: &RateRegionQuery, capacity: impl Fn(f64) -> f64) -> bool {
    let mut prefix = 0.0;
    for t in q.targets() {
        prefix += t.rate;
        if prefix > capacity(t.alpha) {
            return false;
        }
    }
    true
}

/// Rate and reliability demands for stabilizing `model` in the `eta`-th
/// moment, one stream per unstable eigenvalue, with slack `epsilon`.
///
/// Also evaluates the lumped test for an undifferentiated code on an
/// erasure channel with parameter `beta`: total rate versus the anytime
/// capacity at the stiffest exponent. Stable plants yield an empty demand.
pub fn stabilizability_demand(
    model: &StateSpaceModel,
    eta: f64,
    epsilon: f64,
    beta: f64,
) -> Result<StabilizabilityDemand, BoundsError> {
    if eta <= 0.0 {
        return Err(BoundsError::NonPositive {
            name: "eta",
            value: eta,
        });
    }
    if epsilon <= 0.0 {
        return Err(BoundsError::NonPositive {
            name: "epsilon",
            value: epsilon,
        });
    }
    check_beta(beta)?;
    let spectrum = state_space::unstable_spectrum(model.a());
    let per_eigenvalue: Vec<ReliabilityTarget> = spectrum
        .log_magnitudes
        .iter()
        .map(|&l| ReliabilityTarget {
            rate: l + epsilon,
            alpha: eta * l + epsilon,
        })
        .collect();
    let sum_logs: f64 = spectrum.log_magnitudes.iter().sum();
    let max_log = spectrum.log_magnitudes.first().copied().unwrap_or(0.0);
    let scalar_rate = sum_logs + epsilon;
    let scalar_alpha = eta * max_log + epsilon;
    let undifferentiated_capacity = if per_eigenvalue.is_empty() {
        1.0 - beta
    } else {
        bec_anytime_capacity(scalar_alpha, beta).unwrap_or(0.0)
    };
    let undifferentiated_feasible =
        per_eigenvalue.is_empty() || scalar_rate < undifferentiated_capacity;
    let feedback_delay = if per_eigenvalue.is_empty() {
        1
    } else {
        1 + state_space::intrinsic_delay(model).map_or(0, |d| d as u64)
    };
    Ok(StabilizabilityDemand {
        per_eigenvalue,
        eta,
        epsilon,
        scalar_rate,
        scalar_alpha,
        undifferentiated_feasible,
        undifferentiated_capacity,
        feedback_delay,
    })
}

/// Samples the anytime-capacity curve on a uniform `alpha` grid, returning
/// `(alpha, rate)` rows suitable for CSV emission.
pub fn capacity_curve(beta: f64, alpha_max: f64, points: usize) -> Vec<(f64, f64)> {
    let sup = if beta > 0.0 {
        (-beta.log2()).min(alpha_max)
    } else {
        alpha_max
    };
    (1..=points)
        .map(|i| {
            let alpha = sup * i as f64 / (points as f64 + 1.0);
            let rate = bec_anytime_capacity(alpha, beta).unwrap_or(0.0);
            (alpha, rate)
        })
        .collect()
}

/// Samples the sphere-packing divergence on a uniform rate grid, returning
/// `(rate, exponent)` rows.
pub fn sphere_packing_curve(beta: f64, points: usize) -> Vec<(f64, f64)> {
    let cap = 1.0 - beta;
    (1..=points)
        .map(|i| {
            let r = cap * i as f64 / (points as f64 + 1.0);
            (r, sphere_packing(r, beta))
        })
        .collect()
}

/// Samples the low-priority exponent against `r_l` for a fixed `r_h`,
/// returning `(r_l, exponent)` rows.
pub fn low_priority_curve(r_h: f64, beta: f64, points: usize) -> Vec<(f64, f64)> {
    let span = 1.0 - beta - r_h;
    (0..points)
        .map(|i| {
            let r_l = span * i as f64 / points as f64;
            let e = low_priority_exponent(r_h, r_l, beta).unwrap_or(0.0);
            (r_l, e)
        })
        .collect()
}

/// Sweeps the parametric trade-off curve over a log-spaced `rho` grid,
/// returning `(rho, rate, alpha)` rows.
pub fn parametric_curve(beta: f64, rho_min: f64, rho_max: f64, points: usize) -> Vec<(f64, f64, f64)> {
    let lmin = rho_min.ln();
    let lmax = rho_max.ln();
    (0..points)
        .map(|i| {
            let rho = (lmin + (lmax - lmin) * i as f64 / (points as f64 - 1.0)).exp();
            let (rate, alpha) = parametric_point(rho, beta);
            (rho, rate, alpha)
        })
        .collect()
}

fn check_beta(beta: f64) -> Result<(), BoundsError> {
    if !(0.0..1.0).contains(&beta) {
        return Err(BoundsError::InvalidBeta(beta));
    }
    Ok(())
}
