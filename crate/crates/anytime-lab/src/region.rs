//! The `rate-region` subcommand: evaluates a target list against the
//! inner (single code) and outer (prefix sums) region bounds.

use std::path::Path;

use anytime_control::bounds::{
    bec_anytime_capacity, inner_bound_contains, outer_bound_contains, RateRegionQuery,
    ReliabilityTarget,
};
use serde::Deserialize;

use crate::emit::read_json;
use crate::Failure;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RegionConfig {
    beta: f64,
    targets: Vec<TargetRow>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct TargetRow {
    rate: f64,
    alpha: f64,
}

pub(crate) fn rate_region(config: &Path) -> Result<(), Failure> {
    let cfg: RegionConfig = read_json(config)?;
    if !(0.0..1.0).contains(&cfg.beta) {
        return Err(Failure::Config(format!(
            "beta must lie in [0, 1), got {}",
            cfg.beta
        )));
    }
    let beta = cfg.beta;
    let query = RateRegionQuery::sorted(
        cfg.targets
            .iter()
            .map(|t| ReliabilityTarget {
                rate: t.rate,
                alpha: t.alpha,
            })
            .collect(),
    )?;
    let capacity = |alpha: f64| bec_anytime_capacity(alpha, beta).unwrap_or(0.0);

    for t in query.targets() {
        println!(
            "target rate {} at exponent {}: capacity there is {:.4}",
            t.rate,
            t.alpha,
            capacity(t.alpha)
        );
    }
    let inner = inner_bound_contains(&query, capacity);
    let outer = outer_bound_contains(&query, capacity);
    let sum: f64 = query.targets().iter().map(|t| t.rate).sum();
    println!("inner bound (sum rate under the stiffest exponent's capacity): {inner}");
    println!("outer bound (every prefix sum within its exponent's capacity): {outer}");
    let verdict = match (inner, outer) {
        (true, true) => "inside: one priority-free code carries every stream",
        (false, true) => {
            "between the bounds: no single code carries the sum, differentiated service required"
        }
        (false, false) => "outside: unattainable at these exponents by any code",
        (true, false) => unreachable!("inner bound implies the outer bound"),
    };
    println!("verdict (sum rate {sum}): {verdict}");
    Ok(())
}
