//! The `bounds-curve` subcommand: samples the closed-form reliability and
//! rate bounds of one erasure channel and writes them as plot-ready CSV
//! files.

use std::path::Path;

use anytime_control::bounds::{
    bec_anytime_capacity_inverse, capacity_curve, gallager_e0, low_priority_curve, rho_hl,
    sphere_packing, sphere_packing_curve,
};

use crate::emit::{pair_rows, write_csv};
use crate::Failure;

/// Widest exponent sampled when the channel itself imposes no ceiling.
const ALPHA_SPAN: f64 = 16.0;

pub(crate) fn bounds_curve(
    beta: f64,
    rh: f64,
    eta: f64,
    points: usize,
    out: &Path,
) -> Result<(), Failure> {
    if !(0.0..1.0).contains(&beta) {
        return Err(Failure::Config(format!(
            "beta must lie in [0, 1), got {beta}"
        )));
    }
    if !(rh > 0.0 && rh < 1.0 - beta) {
        return Err(Failure::Config(format!(
            "rh must lie in (0, {}), got {rh}",
            1.0 - beta
        )));
    }
    if !(eta > 0.0) || !eta.is_finite() {
        return Err(Failure::Config(format!(
            "eta must be positive and finite, got {eta}"
        )));
    }
    if points < 2 {
        return Err(Failure::Config(format!(
            "at least two points per curve are needed, got {points}"
        )));
    }

    let capacity: Vec<String> = capacity_curve(beta, ALPHA_SPAN, points)
        .into_iter()
        .map(|(alpha, rate)| format!("{rate},{alpha}"))
        .collect();
    write_csv(&out.join("capacity.csv"), "rate,alpha", capacity)?;

    let line_max = 1.0 - beta;
    let line: Vec<String> = (0..=points)
        .map(|i| {
            let r = line_max * i as f64 / points as f64;
            format!("{r},{}", eta * r)
        })
        .collect();
    write_csv(&out.join("slope_line.csv"), "rate,alpha", line)?;

    if beta == 0.0 {
        write_csv(&out.join("sphere_packing.csv"), "rate,alpha", [] as [&str; 0])?;
        write_csv(&out.join("low_priority.csv"), "low_rate,alpha", [] as [&str; 0])?;
        write_csv(&out.join("rho_sweep.csv"), "rho,low_rate,alpha", [] as [&str; 0])?;
        write_csv(&out.join("anchors.csv"), "name,rate,alpha", [] as [&str; 0])?;
        println!(
            "wrote capacity and slope-line curves to {}; the channel is noiseless, so the delay bounds are vacuous and their files carry headers only",
            out.display()
        );
        return Ok(());
    }

    write_csv(
        &out.join("sphere_packing.csv"),
        "rate,alpha",
        pair_rows(&sphere_packing_curve(beta, points)),
    )?;
    write_csv(
        &out.join("low_priority.csv"),
        "low_rate,alpha",
        pair_rows(&low_priority_curve(rh, beta, points)),
    )?;

    let rho_max = rho_hl(rh, beta)?;
    let sweep: Vec<(f64, f64, f64)> = (1..=points)
        .map(|i| {
            let rho = rho_max * i as f64 / points as f64;
            let e0 = gallager_e0(rho, beta);
            (rho, e0 / rho - rh, e0 - rho * rh)
        })
        .collect();
    write_csv(
        &out.join("rho_sweep.csv"),
        "rho,low_rate,alpha",
        sweep.iter().map(|(r, l, a)| format!("{r},{l},{a}")),
    )?;

    let alpha_high = bec_anytime_capacity_inverse(rh, beta)?;
    let sp_high = sphere_packing(rh, beta);
    let peak = sweep
        .iter()
        .copied()
        .max_by(|x, y| x.2.total_cmp(&y.2))
        .expect("at least two sweep points");
    let anchors = [
        format!("high_rate_exponent,{rh},{alpha_high}"),
        format!("sphere_packing_at_high_rate,{rh},{sp_high}"),
        format!("low_priority_peak,{},{}", peak.1, peak.2),
    ];
    write_csv(&out.join("anchors.csv"), "name,rate,alpha", anchors)?;

    println!(
        "wrote 6 curve files to {} (beta {beta}, rh {rh}): exponent at the high rate {alpha_high:.4}, low-priority peak {:.4}",
        out.display(),
        peak.2
    );
    Ok(())
}
