//! Analytic steady states, error norms and mesh-pair convergence tables.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model_core::{trapezoid_sum, ModelParams, TumblingResponse, TwoStreamField};

/// Below this exponent magnitude the profiles use their constant limit.
const FLAT_EXPONENT: f64 = 1e-12;

/// `rho(x) = a M e^{a x} / (e^{a L} - 1)`, the normalized exponential profile.
fn exp_profile(x: f64, rate: f64, mass: f64, length: f64) -> f64 {
    if (rate * length).abs() < FLAT_EXPONENT {
        return mass / length;
    }
    rate * mass * (rate * x).exp() / (rate * length).exp_m1()
}

/// Steady state of the Keller-Segel limit with no-flux walls on `[0, L]`.
///
/// `p(x) = G L'(0) M / (L(0) (1 - e^{-G L'(0) L / L(0)})) e^{-G L'(0) x / L(0)}`.
pub fn steady_ks(x: f64, params: &ModelParams, mass: f64, length: f64) -> f64 {
    let resp = params.response();
    let rate = -params.g * resp.slope_at_zero() / resp.rate(0.0);
    exp_profile(x, rate, mass, length)
}

/// Steady state `f = f+ = f-` of the two-stream kinetic limit on `[0, L]`
/// with tumbling rate `lambda0 Lambda(+-G)`; the density is `2 f`.
pub fn steady_hyp(x: f64, params: &ModelParams, mass: f64, length: f64) -> f64 {
    let resp = params.response();
    let rate = 0.5 * params.lambda0 * (resp.rate(-params.g) - resp.rate(params.g));
    exp_profile(x, rate, mass, length)
}

/// Trapezoidal-in-x mass of a kinetic field.
pub fn discrete_mass(field: &TwoStreamField) -> f64 {
    field.density().mass()
}

/// Scale node values so that their trapezoidal integral with spacing `dx` is 1.
pub fn unit_normalize(rho: &[f64], dx: f64) -> Vec<f64> {
    let total = trapezoid_sum(rho) * dx;
    if total == 0.0 {
        return rho.to_vec();
    }
    rho.iter().map(|r| r / total).collect()
}

/// Scale bin values so that `sum rho dx = 1`.
pub fn unit_normalize_bins(rho: &[f64], dx: f64) -> Vec<f64> {
    let total: f64 = rho.iter().sum::<f64>() * dx;
    if total == 0.0 {
        return rho.to_vec();
    }
    rho.iter().map(|r| r / total).collect()
}

/// Average of neighbouring nodes, i.e. node values mapped to cell centres.
pub fn nodes_to_bins(rho: &[f64]) -> Vec<f64> {
    rho.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect()
}

/// `max_i |rho_c,i - rho_f,ri| / rho_f,ri` over the coarse nodes, after
/// normalizing both node profiles to unit mass. `r = I' / I`.
pub fn linf_rel_error(coarse: &[f64], fine: &[f64]) -> Result<f64> {
    let (ic, jf) = (coarse.len().saturating_sub(1), fine.len().saturating_sub(1));
    if ic == 0 || jf == 0 || jf % ic != 0 {
        return Err(Error::MeshIncompatible { coarse: ic, fine: jf });
    }
    let ratio = jf / ic;
    let c = unit_normalize(coarse, 1.0 / ic as f64);
    let f = unit_normalize(fine, 1.0 / jf as f64);
    Ok(c
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let reference = f[i * ratio];
            (v - reference).abs() / reference
        })
        .fold(0.0, f64::max))
}

/// `max_i |a_i - b_i| / b_i` for profiles already on the same points.
pub fn max_rel_deviation(a: &[f64], reference: &[f64]) -> f64 {
    a.iter()
        .zip(reference)
        .map(|(x, r)| (x - r).abs() / r.abs())
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvergenceRow {
    pub param_value: f64,
    pub i: usize,
    pub i_prime: usize,
    pub linf_rel_err: f64,
}

/// Mesh-pair errors of one scheme over a parameter sweep.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvergenceReport {
    pub scheme: String,
    pub param_name: String,
    pub rows: Vec<ConvergenceRow>,
}

pub const TABLE_HEADER: &str = "scheme,param_name,param_value,I,I_prime,linf_rel_err";

impl ConvergenceReport {
    pub fn get(&self, param_value: f64, i: usize, i_prime: usize) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.param_value == param_value && r.i == i && r.i_prime == i_prime)
            .map(|r| r.linf_rel_err)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(TABLE_HEADER);
        out.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{:.16e},{},{},{:.16e}",
                self.scheme, self.param_name, r.param_value, r.i, r.i_prime, r.linf_rel_err
            );
        }
        out
    }
}

/// Run every distinct `(parameter, mesh)` once, in parallel, and tabulate the
/// mesh-pair errors. `profile(value, I)` returns the density on `I + 1` nodes.
pub fn convergence_table<F>(
    scheme: &str,
    param_name: &str,
    values: &[f64],
    pairs: &[(usize, usize)],
    profile: F,
) -> Result<ConvergenceReport>
where
    F: Fn(f64, usize) -> Result<Vec<f64>> + Sync,
{
    for &(i, ip) in pairs {
        if i == 0 || ip % i != 0 {
            return Err(Error::MeshIncompatible { coarse: i, fine: ip });
        }
    }
    let mut jobs: Vec<(usize, usize)> = Vec::new();
    for (vi, _) in values.iter().enumerate() {
        for &(i, ip) in pairs {
            for mesh in [i, ip] {
                if !jobs.contains(&(vi, mesh)) {
                    jobs.push((vi, mesh));
                }
            }
        }
    }
    // largest meshes first so the parallel tail is short
    jobs.sort_by_key(|&(_, mesh)| std::cmp::Reverse(mesh));
    let results: Vec<((usize, usize), Vec<f64>)> = jobs
        .par_iter()
        .with_max_len(1)
        .map(|&(vi, mesh)| profile(values[vi], mesh).map(|p| ((vi, mesh), p)))
        .collect::<Result<_>>()?;
    let profiles: BTreeMap<(usize, usize), Vec<f64>> = results.into_iter().collect();

    let mut rows = Vec::new();
    for (vi, &value) in values.iter().enumerate() {
        for &(i, ip) in pairs {
            let err = linf_rel_error(&profiles[&(vi, i)], &profiles[&(vi, ip)])?;
            rows.push(ConvergenceRow {
                param_value: value,
                i,
                i_prime: ip,
                linf_rel_err: err,
            });
        }
    }
    Ok(ConvergenceReport {
        scheme: scheme.to_string(),
        param_name: param_name.to_string(),
        rows,
    })
}
