//! The `necessity-roundtrip` subcommand: embeds seeded random bit streams
//! into a coupled block, decodes them back stream by stream, and checks
//! the exact cross-stream deviation against its certified bound.

use std::path::Path;

use anytime_control::embedding::{
    embed, propagation_bound, successive_decode, worst_case_deviation, EmbeddingParams,
};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::Deserialize;

use crate::emit::read_json;
use crate::Failure;

fn default_eps_prime() -> f64 {
    0.25
}

fn default_delay_max() -> u64 {
    20
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RoundtripConfig {
    /// Upper-triangular block with a constant diagonal, rows outer.
    block: Vec<Vec<f64>>,
    /// Message rate per stream, bits per step.
    rate: f64,
    /// Disturbance budget each stream's injections must fit inside.
    omega: f64,
    /// Steps to run before decoding.
    horizon: u64,
    /// Seed for the message bits.
    seed: u64,
    /// Slack exponent of the propagation certificate.
    #[serde(default = "default_eps_prime")]
    eps_prime: f64,
    /// Largest unsettled-suffix age checked against the certificate.
    #[serde(default = "default_delay_max")]
    delay_max: u64,
}

pub(crate) fn necessity_roundtrip(config: &Path) -> Result<(), Failure> {
    let cfg: RoundtripConfig = read_json(config)?;
    let n = cfg.block.len();
    if n == 0 || cfg.block.iter().any(|row| row.len() != n) {
        return Err(Failure::Config(
            "block must be square with at least one row".into(),
        ));
    }
    let block = DMatrix::from_row_iterator(n, n, cfg.block.iter().flatten().copied());
    let lambda = block[(0, 0)];
    let params = vec![EmbeddingParams::new(lambda, cfg.rate, cfg.omega)?; n];
    if cfg.horizon < 1 {
        return Err(Failure::Config("horizon must be at least one step".into()));
    }

    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
    let bits = params[0].bits_released(cfg.horizon);
    let symbols: Vec<Vec<i8>> = (0..n)
        .map(|_| {
            (0..bits)
                .map(|_| if rng.gen::<bool>() { 1i8 } else { -1 })
                .collect()
        })
        .collect();

    let state = embed(&params, &block, &symbols, cfg.horizon)?;
    let decoded = successive_decode(&params, &block, &(-state), cfg.horizon)?;
    let mut wrong = 0usize;
    for (stream, (got, sent)) in decoded.iter().zip(&symbols).enumerate() {
        let mismatches = got.iter().zip(sent).filter(|(g, s)| g != s).count();
        wrong += mismatches;
        println!(
            "stream {stream}: {}/{} bits recovered",
            sent.len() - mismatches,
            sent.len()
        );
    }

    let mut violations = 0usize;
    let mut worst_ratio = 0.0f64;
    for source in 1..n {
        for target in 0..source {
            for d in 1..=cfg.delay_max {
                let worst =
                    worst_case_deviation(&block, &params, source, target, cfg.horizon, d)?;
                let bound =
                    propagation_bound(&block, &params, source, target, d as f64, cfg.eps_prime)?;
                if worst > bound {
                    violations += 1;
                } else if bound > 0.0 {
                    worst_ratio = worst_ratio.max(worst / bound);
                }
            }
        }
    }
    if n > 1 {
        println!(
            "propagation certificate over {} stream pairs, delays 1..={}: {} violations, tightest ratio {worst_ratio:.3}",
            n * (n - 1) / 2,
            cfg.delay_max,
            violations
        );
    } else {
        println!("single stream: no cross-stream propagation to certify");
    }

    if wrong > 0 {
        return Err(Failure::Tolerance(format!(
            "{wrong} of {} embedded bits decoded wrongly",
            bits * n
        )));
    }
    if violations > 0 {
        return Err(Failure::Tolerance(format!(
            "{violations} propagation checks exceeded the certified bound"
        )));
    }
    println!("round trip complete: 100% of bits recovered");
    Ok(())
}
