//! Asymptotic-preserving scheme at diffusive scaling.
//!
//! One step is an implicit upwind projection of each y-column toward `y = 0`
//! followed by a well-balanced transport/relaxation step along the
//! characteristic direction `(dx, dy)`. The transport step couples `p+` at
//! `(i, k)` with `p-` at `(i+1, k+1)` through a 2-by-2 system that is inverted
//! in closed form.
//!
//! Time is the diffusive time `t`; the physical time of the particle model is
//! `t / eps`.

use log::warn;
use rayon::prelude::*;

use crate::diagnostics::discrete_mass;
use crate::error::{Error, Result};
use crate::model_core::{
    lambda_bar, trapezoid_sum, GridSpec, MacroDensity, ModelParams, TumblingResponse, TwoStreamField,
};
use crate::run::Simulation;
use crate::steady::SplitStep;
use crate::sweep::SinkSweep;

/// Columns below this many cells are stepped without rayon.
const PAR_THRESHOLD: usize = 1 << 15;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ApDiffConfig {
    pub params: ModelParams,
    pub grid: GridSpec,
    /// Use `tau dy` in the projection and `G / tau` in the transport step.
    pub modified_tau: bool,
    /// Half-width of the y-domain in units of `|G|` (modified variant only).
    pub extension: f64,
}

impl ApDiffConfig {
    /// Standard variant on the mesh `dy = |G| dx`.
    pub fn new(params: ModelParams, i_cells: usize, dt: f64) -> Result<Self> {
        let grid = GridSpec::ap_diff(i_cells, &params, dt)?;
        let cfg = ApDiffConfig {
            params,
            grid,
            modified_tau: false,
            extension: 1.0,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Variant for a general adaptation time on the mesh `dy = (|G| / tau) dx`.
    /// `extension` defaults to [`default_extension`].
    pub fn modified(params: ModelParams, i_cells: usize, dt: f64, extension: Option<f64>) -> Result<Self> {
        let extension = extension.unwrap_or_else(|| default_extension(params.tau));
        let grid = GridSpec::ap_diff_modified(i_cells, &params, dt, extension)?;
        let cfg = ApDiffConfig {
            params,
            grid,
            modified_tau: true,
            extension,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Effective gradient seen by the transport step.
    pub fn g_eff(&self) -> f64 {
        if self.modified_tau {
            self.params.g.abs() / self.params.tau
        } else {
            self.params.g.abs()
        }
    }

    /// Factor multiplying `dy` in the projection step.
    fn y_factor(&self) -> f64 {
        if self.modified_tau {
            self.params.tau
        } else {
            1.0
        }
    }

    /// Experiment default `dt = 0.1 dx^2`.
    pub fn default_dt(i_cells: usize) -> f64 {
        let dx = 1.0 / i_cells as f64;
        0.1 * dx * dx
    }

    pub fn validate(&self) -> Result<()> {
        self.params.validate()?;
        let expected = self.g_eff() * self.grid.dx;
        if (self.grid.dy - expected).abs() > 1e-9 * expected {
            return Err(Error::GridMismatch(format!(
                "dy = {} but the characteristic mesh requires dy = {expected}",
                self.grid.dy
            )));
        }
        let dt_max = cfl_dt_diff(self);
        if self.grid.dt > dt_max * (1.0 + 1e-12) {
            return Err(Error::Cfl {
                dt: self.grid.dt,
                dt_max,
                rule: "dt <= Lambda_min dx^2 / 2",
            });
        }
        Ok(())
    }
}

/// Extended y half-width (in units of `|G|`) used by the modified variant:
/// 4 for `tau <= 0.01`, 3 for `tau <= 0.02`, otherwise the standard domain.
pub fn default_extension(tau: f64) -> f64 {
    if tau <= 0.01 + 1e-12 {
        4.0
    } else if tau <= 0.02 + 1e-12 {
        3.0
    } else if tau < 1.0 {
        2.0
    } else {
        1.0
    }
}

/// Minimum of `Lambda` over `[lo, hi]`.
pub fn lambda_min(params: &ModelParams, lo: f64, hi: f64) -> f64 {
    params.response().min_on(lo, hi)
}

/// Largest positivity-preserving step, `Lambda_min dx^2 / 2`.
///
/// The minimum is taken over every cell the transport stencil touches,
/// i.e. `[y_{-K-1}, y_{K+1}]`.
pub fn cfl_dt_diff(cfg: &ApDiffConfig) -> f64 {
    let reach = cfg.grid.y_halfwidth + cfg.grid.dy;
    let lmin = lambda_min(&cfg.params, -reach, reach);
    0.5 * lmin * cfg.grid.dx * cfg.grid.dx
}

/// Precomputed coefficients of one AP-diff step.
#[derive(Debug, Clone)]
pub struct ApDiffOperator {
    cfg: ApDiffConfig,
    sweep: SinkSweep,
    /// `a_{k-1/2}` stored at `k + K`, for `k = -K..=K+1`.
    a_half: Vec<f64>,
    w: f64,
    /// `G < 0` is handled by mirroring `y`.
    flip: bool,
}

impl ApDiffOperator {
    pub fn new(cfg: &ApDiffConfig) -> Result<Self> {
        cfg.validate()?;
        let grid = &cfg.grid;
        let p = &cfg.params;
        let flip = p.g < 0.0;
        // with y mirrored the response becomes Lambda(-y)
        let mirrored = ModelParams {
            g: p.g.abs(),
            chi: if flip { -p.chi } else { p.chi },
            ..*p
        };
        let k = grid.k_half as i64;
        let g_eff = cfg.g_eff();
        let eps = p.epsilon;
        let a_half = (-k..=k + 1)
            .map(|kk| {
                let lb = lambda_bar(kk, grid, &mirrored)?;
                Ok(2.0 * grid.dt * g_eff / (grid.dx * (2.0 * eps * g_eff + lb)))
            })
            .collect::<Result<Vec<_>>>()?;
        let c = grid.dt / (eps * grid.dx);
        let kappa = grid.dt / (eps * cfg.y_factor());
        Ok(ApDiffOperator {
            cfg: *cfg,
            sweep: SinkSweep::new(grid.ny(), grid.k_half, kappa),
            a_half,
            w: c / (1.0 + 2.0 * c),
            flip,
        })
    }

    pub fn config(&self) -> &ApDiffConfig {
        &self.cfg
    }

    fn check(&self, field: &TwoStreamField) -> Result<()> {
        if !field.matches(&self.cfg.grid) {
            return Err(Error::GridMismatch(format!(
                "field is {}x{} but the grid is {}x{}",
                field.nx(),
                field.ny(),
                self.cfg.grid.nx(),
                self.cfg.grid.ny()
            )));
        }
        Ok(())
    }

    /// Implicit upwind projection toward `y = 0`, in place.
    pub fn project(&self, field: &mut TwoStreamField) {
        let ny = field.ny();
        let sweep = &self.sweep;
        if field.p_plus.len() >= PAR_THRESHOLD {
            let block = 8 * ny * (field.nx() / (8 * rayon::current_num_threads()) + 1);
            field.p_plus.par_chunks_mut(block).for_each(|c| sweep.solve_columns(c));
            field.p_minus.par_chunks_mut(block).for_each(|c| sweep.solve_columns(c));
        } else {
            sweep.solve_columns(&mut field.p_plus);
            sweep.solve_columns(&mut field.p_minus);
        }
    }

    /// Well-balanced transport/relaxation from `half` into `out`; returns the
    /// mass that left through `k = +-(K + 1/2)`.
    pub fn transport(&self, half: &TwoStreamField, out: &mut TwoStreamField) -> f64 {
        let ny = half.ny();
        let nx = half.nx();
        let last = nx - 1;
        let a = &self.a_half;
        let w = self.w;
        let (hp, hm) = (&half.p_plus, &half.p_minus);

        let column = |i: usize, op: &mut [f64], om: &mut [f64]| {
            let pp = &hp[i * ny..(i + 1) * ny];
            let pm = &hm[i * ny..(i + 1) * ny];
            // A needs p+ at (i-1, k-1); B needs p- at (i+1, k+1)
            let left = (i > 0).then(|| &hp[(i - 1) * ny..i * ny]);
            let right = (i < last).then(|| &hm[(i + 1) * ny..(i + 2) * ny]);
            let a_at = |j: usize| {
                let upwind = match left {
                    Some(l) if j > 0 => l[j - 1],
                    _ => 0.0,
                };
                pp[j] + a[j] * (upwind - pm[j])
            };
            let b_at = |j: usize| {
                let upwind = match right {
                    Some(r) if j + 1 < ny => r[j + 1],
                    _ => 0.0,
                };
                pm[j] + a[j + 1] * (upwind - pp[j])
            };
            if i == last {
                for j in 0..ny {
                    let v = a_at(j);
                    op[j] = v;
                    om[j] = v;
                }
            } else if i == 0 {
                for j in 0..ny {
                    let v = b_at(j);
                    op[j] = v;
                    om[j] = v;
                }
            } else {
                let (l, r) = (left.unwrap(), right.unwrap());
                // interior fast path: edges first, then the branch-free bulk
                for j in [0, ny - 1] {
                    let (av, bv) = (a_at(j), b_at(j));
                    op[j] = av + w * (bv - av);
                    om[j] = bv + w * (av - bv);
                }
                let n = ny - 2;
                let (pp, pm, l, r) = (&pp[1..=n], &pm[1..=n], &l[..n], &r[2..n + 2]);
                let (a_lo, a_hi) = (&a[1..=n], &a[2..n + 2]);
                let (op, om) = (&mut op[1..=n], &mut om[1..=n]);
                for j in 0..n {
                    let av = pp[j] + a_lo[j] * (l[j] - pm[j]);
                    let bv = pm[j] + a_hi[j] * (r[j] - pp[j]);
                    op[j] = av + w * (bv - av);
                    om[j] = bv + w * (av - bv);
                }
            }
        };

        if hp.len() >= PAR_THRESHOLD {
            out.p_plus
                .par_chunks_mut(ny)
                .zip(out.p_minus.par_chunks_mut(ny))
                .enumerate()
                .for_each(|(i, (op, om))| column(i, op, om));
        } else {
            out.p_plus
                .chunks_mut(ny)
                .zip(out.p_minus.chunks_mut(ny))
                .enumerate()
                .for_each(|(i, (op, om))| column(i, op, om));
        }

        let bottom: f64 = (1..nx).map(|i| hm[i * ny]).sum();
        let top: f64 = (0..last).map(|i| hp[i * ny + ny - 1]).sum();
        a[0] * bottom + a[ny] * top
    }

    /// Full step `p^n -> p^{n+1}` using `scratch` as the output buffer; returns
    /// the mass defect of the step.
    pub fn step_into(&self, field: &mut TwoStreamField, scratch: &mut TwoStreamField) -> f64 {
        if self.flip {
            field.flip_y();
        }
        self.project(field);
        let defect = self.transport(field, scratch);
        std::mem::swap(field, scratch);
        if self.flip {
            field.flip_y();
        }
        defect
    }
}

/// Implicit upwind projection step (column sums preserved).
pub fn projection_step(field: &TwoStreamField, cfg: &ApDiffConfig) -> Result<TwoStreamField> {
    let op = ApDiffOperator::new(cfg)?;
    op.check(field)?;
    let mut out = field.clone();
    if op.flip {
        out.flip_y();
    }
    op.project(&mut out);
    if op.flip {
        out.flip_y();
    }
    Ok(out)
}

/// Well-balanced transport/relaxation step applied to a projected field.
pub fn transport_relax_step(field_half: &TwoStreamField, cfg: &ApDiffConfig) -> Result<TwoStreamField> {
    let op = ApDiffOperator::new(cfg)?;
    op.check(field_half)?;
    let mut half = field_half.clone();
    let mut out = TwoStreamField::zeros(&cfg.grid);
    if op.flip {
        half.flip_y();
    }
    op.transport(&half, &mut out);
    if op.flip {
        out.flip_y();
    }
    Ok(out)
}

/// One full step of the scheme.
pub fn ap_diff_step(field: &TwoStreamField, cfg: &ApDiffConfig) -> Result<TwoStreamField> {
    let op = ApDiffOperator::new(cfg)?;
    op.check(field)?;
    let mut out = field.clone();
    let mut scratch = TwoStreamField::zeros(&cfg.grid);
    op.step_into(&mut out, &mut scratch);
    Ok(out)
}

/// Time-stepping driver that owns its buffers.
#[derive(Debug, Clone)]
pub struct ApDiff {
    op: ApDiffOperator,
    field: TwoStreamField,
    scratch: TwoStreamField,
    steps: u64,
    /// Mass lost through the top/bottom y-cells during the last step.
    pub last_mass_defect: f64,
    /// Accumulated mass defect since the start.
    pub total_mass_defect: f64,
    warned: bool,
}

impl ApDiff {
    pub fn new(cfg: &ApDiffConfig, initial: TwoStreamField) -> Result<Self> {
        let op = ApDiffOperator::new(cfg)?;
        op.check(&initial)?;
        Ok(ApDiff {
            scratch: TwoStreamField::zeros(&cfg.grid),
            field: initial,
            op,
            steps: 0,
            last_mass_defect: 0.0,
            total_mass_defect: 0.0,
            warned: false,
        })
    }

    pub fn field(&self) -> &TwoStreamField {
        &self.field
    }

    /// Replace the state by the exact fixed point of the step (the slowest
    /// mode when mass leaks), keeping the current discrete mass.
    pub fn solve_steady(&mut self) -> Result<()> {
        let op = &self.op;
        let grid = &op.cfg.grid;
        let mut guess = self.field.clone();
        if op.flip {
            guess.flip_y();
        }
        op.project(&mut guess);
        let e = op.sweep.implicit_entries();
        let implicit = [e.clone(), e];
        let explicit = |a: &TwoStreamField, b: &mut TwoStreamField| {
            op.transport(a, b);
        };
        let step = SplitStep {
            nx: grid.nx(),
            k_half: grid.k_half,
            implicit,
            explicit: &explicit,
        };
        let z = step.solve(&guess.to_vec())?;
        guess.load(&z);
        let mut x = TwoStreamField::zeros(grid);
        op.transport(&guess, &mut x);
        if op.flip {
            x.flip_y();
        }
        let scale = discrete_mass(&self.field) / discrete_mass(&x);
        x.p_plus.iter_mut().chain(x.p_minus.iter_mut()).for_each(|v| *v *= scale);
        self.field = x;
        Ok(())
    }

    pub fn config(&self) -> &ApDiffConfig {
        self.op.config()
    }

    pub fn advance(&mut self) {
        let defect = self.op.step_into(&mut self.field, &mut self.scratch);
        self.steps += 1;
        self.last_mass_defect = defect;
        self.total_mass_defect += defect;
        if defect > 0.0 && !self.warned {
            let mass = trapezoid_sum(&self.field.density().rho);
            if defect > 1e-14 * mass {
                warn!(
                    "AP-diff mass is not conserved: the top/bottom y-cells are occupied \
                     (defect {defect:e} at step {}); consider a wider y-domain",
                    self.steps
                );
                self.warned = true;
            }
        }
    }
}

impl Simulation for ApDiff {
    fn step(&mut self) -> Result<()> {
        self.advance();
        Ok(())
    }

    fn time(&self) -> f64 {
        self.steps as f64 * self.op.cfg.grid.dt
    }

    fn dt(&self) -> f64 {
        self.op.cfg.grid.dt
    }

    fn dx(&self) -> f64 {
        self.op.cfg.grid.dx
    }

    fn density(&self) -> MacroDensity {
        self.field.density()
    }

    fn mass_defect(&self) -> f64 {
        self.last_mass_defect
    }

    fn state(&self) -> Vec<f64> {
        self.field.to_vec()
    }

    fn set_state(&mut self, state: &[f64]) {
        self.field.load(state);
    }

    fn solve_steady(&mut self) -> Option<Result<()>> {
        Some(ApDiff::solve_steady(self))
    }

    fn kinetic(&self) -> Option<(&TwoStreamField, &GridSpec)> {
        Some((&self.field, &self.op.cfg.grid))
    }
}
