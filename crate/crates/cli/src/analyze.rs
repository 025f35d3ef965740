//! `analyze-ortho`: orthogonality of quantized Haar matrices.
//!
//! CSV files written to the output directory:
//!
//! - `ortho_study.csv`: `n,k,seed,residual,sv_ratio,bound_rhs,sigma_lo,sigma_hi,sigma_min,sigma_max`
//!   with `sigma_lo`/`sigma_hi` the bound values, one row per sample and `k`.
//! - `ortho_summary.csv`: `n,k,samples,median_sv_ratio,bound_violations`.
//! - `power_distance.csv`: `n,k,seed,T,distance`.
//! - `power_summary.csv`: `n,k,T,median_distance`.

use std::fs::{self, File};
use std::path::Path;

use qornn::numerics::format_g17;
use qornn::ortho::{median, orthogonality_study, power_distance_study, PowerRecord, StudyRecord};
use serde::Serialize;

use crate::error::{CliError, CliResult};

pub const STUDY_FILE: &str = "ortho_study.csv";
pub const STUDY_SUMMARY_FILE: &str = "ortho_summary.csv";
pub const POWER_FILE: &str = "power_distance.csv";
pub const POWER_SUMMARY_FILE: &str = "power_summary.csv";

/// Slack on the proven bounds for floating-point evaluation of the residual
/// and singular values.
pub const BOUND_SLACK: f64 = 1e-9;

#[derive(Clone, Debug)]
pub struct AnalyzeArgs {
    pub n: usize,
    pub bits: Vec<u32>,
    pub samples: usize,
    pub powers: Vec<u32>,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BitSummary {
    pub k: u32,
    pub median_sv_ratio: f64,
    pub bound_violations: usize,
    /// `(T, median distance)` for every requested power.
    pub median_power_distance: Vec<(u32, f64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AnalyzeSummary {
    pub n: usize,
    pub samples: usize,
    pub per_bits: Vec<BitSummary>,
}

fn study_row(r: &StudyRecord) -> Vec<String> {
    let d = &r.diagnostics;
    let mut row = vec![r.n.to_string(), r.bits.to_string(), r.seed.to_string()];
    row.extend(
        [d.residual, d.sv_ratio, d.bound_residual_rhs, d.bound_sigma_lo, d.bound_sigma_hi, d.sigma_min, d.sigma_max]
            .map(format_g17),
    );
    row
}

fn power_row(r: &PowerRecord) -> Vec<String> {
    vec![
        r.n.to_string(),
        r.bits.to_string(),
        r.seed.to_string(),
        r.power.to_string(),
        format_g17(r.distance),
    ]
}

fn write_rows(path: &Path, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> CliResult<()> {
    let mut w = csv::Writer::from_writer(File::create(path)?);
    w.write_record(header)?;
    for row in rows {
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn cmd_analyze_ortho(args: &AnalyzeArgs, outdir: &Path) -> CliResult<AnalyzeSummary> {
    if args.n < 2 {
        return Err(CliError::Config("analyze-ortho needs n ≥ 2".into()));
    }
    if args.samples == 0 || args.bits.is_empty() {
        return Err(CliError::Config("analyze-ortho needs samples ≥ 1 and at least one k".into()));
    }
    if args.powers.contains(&0) {
        return Err(CliError::Config("powers must be ≥ 1".into()));
    }
    fs::create_dir_all(outdir)?;
    let study = orthogonality_study(args.n, &args.bits, args.samples, args.seed)?;
    let powers = if args.powers.is_empty() {
        Vec::new()
    } else {
        power_distance_study(args.n, &args.bits, &args.powers, args.samples, args.seed)?
    };

    write_rows(
        &outdir.join(STUDY_FILE),
        &["n", "k", "seed", "residual", "sv_ratio", "bound_rhs", "sigma_lo", "sigma_hi", "sigma_min", "sigma_max"],
        study.iter().map(study_row),
    )?;
    write_rows(&outdir.join(POWER_FILE), &["n", "k", "seed", "T", "distance"], powers.iter().map(power_row))?;

    let mut per_bits = Vec::new();
    for &k in &args.bits {
        let rows: Vec<&StudyRecord> = study.iter().filter(|r| r.bits == k).collect();
        let ratios: Vec<f64> = rows.iter().map(|r| r.diagnostics.sv_ratio).collect();
        let violations = rows.iter().filter(|r| !r.diagnostics.within_bounds(BOUND_SLACK)).count();
        let mut ts: Vec<u32> = args.powers.clone();
        ts.sort_unstable();
        ts.dedup();
        let median_power_distance = ts
            .iter()
            .map(|&t| {
                let d: Vec<f64> = powers.iter().filter(|p| p.bits == k && p.power == t).map(|p| p.distance).collect();
                (t, median(&d))
            })
            .collect();
        per_bits.push(BitSummary {
            k,
            median_sv_ratio: median(&ratios),
            bound_violations: violations,
            median_power_distance,
        });
    }
    write_rows(
        &outdir.join(STUDY_SUMMARY_FILE),
        &["n", "k", "samples", "median_sv_ratio", "bound_violations"],
        per_bits.iter().map(|b| {
            vec![
                args.n.to_string(),
                b.k.to_string(),
                args.samples.to_string(),
                format_g17(b.median_sv_ratio),
                b.bound_violations.to_string(),
            ]
        }),
    )?;
    write_rows(
        &outdir.join(POWER_SUMMARY_FILE),
        &["n", "k", "T", "median_distance"],
        per_bits.iter().flat_map(|b| {
            b.median_power_distance
                .iter()
                .map(|&(t, d)| vec![args.n.to_string(), b.k.to_string(), t.to_string(), format_g17(d)])
                .collect::<Vec<_>>()
        }),
    )?;
    Ok(AnalyzeSummary {
        n: args.n,
        samples: args.samples,
        per_bits,
    })
}
