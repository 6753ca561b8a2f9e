//! Common driver interface for all time-stepping schemes.

use log::debug;
use nalgebra::{DMatrix, DVector};

use crate::diagnostics::unit_normalize;
use crate::error::{Error, Result};
use crate::model_core::{GridSpec, MacroDensity, TwoStreamField};

/// A scheme advanced by fixed time steps.
///
/// `time` is expressed in the scheme's own time variable: diffusive time for
/// diffusive-scaling schemes, physical time otherwise.
pub trait Simulation {
    fn step(&mut self) -> Result<()>;
    fn time(&self) -> f64;
    fn dt(&self) -> f64;
    /// Spacing of the x-nodes on which [`Simulation::density`] lives.
    fn dx(&self) -> f64;
    fn density(&self) -> MacroDensity;

    /// Mass lost during the last step (only nonzero for schemes that can leak).
    fn mass_defect(&self) -> f64 {
        0.0
    }

    /// All unknowns as one flat vector.
    fn state(&self) -> Vec<f64>;

    /// Overwrite the unknowns with a vector produced by [`Simulation::state`].
    fn set_state(&mut self, state: &[f64]);

    /// Jump to the exact fixed point of the step, keeping the total of the
    /// unknowns. `None` when the scheme has no direct solver.
    fn solve_steady(&mut self) -> Option<Result<()>> {
        None
    }

    /// The kinetic unknowns, when the scheme has them.
    fn kinetic(&self) -> Option<(&TwoStreamField, &GridSpec)> {
        None
    }
}

/// Step until `time >= t` (within half a step).
pub fn run_until(sim: &mut dyn Simulation, t: f64) -> Result<()> {
    while sim.time() < t - 0.5 * sim.dt() {
        sim.step()?;
    }
    Ok(())
}

/// Termination rule for steady-state runs.
///
/// The unit-normalized profile `r` is compared over windows of `m` steps;
/// the run stops once `|r^{n+m} - r^n|_inf / (m dt) <= tol * |r^n|_inf`.
/// Comparing normalized profiles keeps the rule meaningful when the scheme
/// slowly leaks mass, and the window lifts the per-step difference above
/// rounding noise.
///
/// With `extrapolate = k > 0`, every `k + 1` windows the iterates (scaled to
/// unit sum) are combined by reduced-rank extrapolation of order `k`, which removes the slowly decaying modes of the
/// linear step map. The stopping test is still evaluated on plain steps taken
/// from the extrapolated state, so the accepted state is a fixed point of the
/// scheme to the same tolerance.
///
/// With `direct`, schemes that support it first jump to the exact fixed point
/// of their step by a sparse solve; the windowed test then only confirms it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SteadyCriterion {
    pub tol: f64,
    pub t_max: f64,
    /// Window length in the scheme's time unit.
    pub window: f64,
    pub extrapolate: usize,
    pub direct: bool,
}

impl Default for SteadyCriterion {
    fn default() -> Self {
        SteadyCriterion {
            tol: 1e-10,
            t_max: 20.0,
            window: 0.01,
            extrapolate: 0,
            direct: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SteadyOutcome {
    pub converged: bool,
    pub time: f64,
    /// Last measured normalized rate of change.
    pub rate: f64,
}

fn sup_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |acc, x| acc.max(x.abs()))
}

pub fn run_to_steady(sim: &mut dyn Simulation, crit: &SteadyCriterion) -> Result<SteadyOutcome> {
    let dt = sim.dt();
    let m = ((crit.window / dt).round() as u64).max(1);
    let dx = sim.dx();
    if crit.direct {
        match sim.solve_steady() {
            Some(Ok(())) => debug!("direct steady solve done at t = {}", sim.time()),
            Some(Err(Error::Solver(msg))) => log::warn!("direct steady solve skipped ({msg}); time stepping instead"),
            Some(Err(e)) => return Err(e),
            None => {}
        }
    }
    let mut prev = unit_normalize(&sim.density().rho, dx);
    let mut rate = f64::INFINITY;
    let mut snapshots = Vec::new();
    if crit.extrapolate > 0 {
        snapshots.push(normalized_state(sim));
    }
    while sim.time() < crit.t_max - 0.5 * dt {
        for _ in 0..m {
            sim.step()?;
        }
        let cur = unit_normalize(&sim.density().rho, dx);
        let diff = prev.iter().zip(&cur).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        rate = diff / (m as f64 * dt);
        let converged = rate <= crit.tol * sup_norm(&prev);
        log::trace!("t = {} rate {rate:e}", sim.time());
        prev = cur;
        if converged {
            debug!("steady state at t = {} (rate {rate:e})", sim.time());
            return Ok(SteadyOutcome {
                converged: true,
                time: sim.time(),
                rate,
            });
        }
        if crit.extrapolate > 0 {
            snapshots.push(normalized_state(sim));
            if snapshots.len() > crit.extrapolate + 1 {
                if let Some(mut x) = reduced_rank_extrapolation(&snapshots) {
                    // keep the current total so a leaking run stays continuous
                    let total: f64 = sim.state().iter().sum();
                    x.iter_mut().for_each(|v| *v *= total);
                    sim.set_state(&x);
                    prev = unit_normalize(&sim.density().rho, dx);
                    debug!("extrapolated at t = {} (rate before {rate:e})", sim.time());
                }
                snapshots.clear();
                snapshots.push(normalized_state(sim));
            }
        }
    }
    log::warn!(
        "steady state not reached by t = {} (normalized rate {rate:e})",
        sim.time()
    );
    Ok(SteadyOutcome {
        converged: false,
        time: sim.time(),
        rate,
    })
}

/// State scaled to unit sum. Extrapolating these rather than the raw states
/// targets the dominant mode, which is the steady profile both for
/// conservative schemes and for runs that slowly lose mass.
fn normalized_state(sim: &dyn Simulation) -> Vec<f64> {
    let mut x = sim.state();
    let total: f64 = x.iter().sum();
    if total != 0.0 {
        x.iter_mut().for_each(|v| *v /= total);
    }
    x
}

/// Combine iterates `x_0..x_k` of a linear fixed-point map into
/// `sum_j g_j x_{j+1}` with `sum_j g_j = 1` chosen to minimize
/// `|sum_j g_j (x_{j+1} - x_j)|`. Returns `None` when the differences carry no
/// usable information.
pub fn reduced_rank_extrapolation(snapshots: &[Vec<f64>]) -> Option<Vec<f64>> {
    let k = snapshots.len().checked_sub(1)?;
    if k < 2 {
        return None;
    }
    let diffs: Vec<Vec<f64>> = snapshots
        .windows(2)
        .map(|w| w[1].iter().zip(&w[0]).map(|(b, a)| b - a).collect())
        .collect();
    // eliminate the constraint: g_last = 1 - sum c_j, so the residual is
    // d_last + sum_j c_j (d_j - d_last)
    let last = &diffs[k - 1];
    let cols: Vec<Vec<f64>> = diffs[..k - 1]
        .iter()
        .map(|d| d.iter().zip(last).map(|(a, b)| a - b).collect())
        .collect();
    let norms: Vec<f64> = cols.iter().map(|c| c.iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
    if norms.iter().any(|&s| s == 0.0 || !s.is_finite()) {
        return None;
    }
    let n = last.len();
    let mat = DMatrix::from_fn(n, k - 1, |r, j| cols[j][r] / norms[j]);
    let rhs = DVector::from_iterator(n, last.iter().map(|v| -v));
    let c = mat.svd(true, true).solve(&rhs, 1e-12).ok()?;
    let mut g: Vec<f64> = c.iter().zip(&norms).map(|(c, s)| c / s).collect();
    g.push(1.0 - g.iter().sum::<f64>());
    if g.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let mut out = vec![0.0; snapshots[0].len()];
    for (g, x) in g.iter().zip(&snapshots[1..]) {
        out.iter_mut().zip(x).for_each(|(o, v)| *o += g * v);
    }
    Some(out)
}
