//! Limiting schemes of the two AP schemes and the naive splitting scheme.
//!
//! All macroscopic schemes are written in flux form on the x-nodes with the
//! half-cell closure `rho_0 -= 2 F_{1/2}`, `rho_I += 2 F_{I-1/2}`, which
//! conserves the trapezoidal mass and is the limit of the kinetic schemes'
//! wall treatment.

use crate::ap_diff::lambda_min;
use crate::ap_hyp::Relaxation;
use crate::error::{Error, Result};
use crate::model_core::{
    lambda_bar, trapezoid_sum, GridSpec, MacroDensity, ModelParams, TumblingResponse, TwoStreamField,
};
use crate::run::Simulation;

/// Macroscopic unknowns on the x-nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct MacroState {
    pub rho: Vec<f64>,
    pub p_bar_plus: Vec<f64>,
    pub p_bar_minus: Vec<f64>,
}

impl MacroState {
    /// Density-only state with both streams set to `rho / 2`.
    pub fn from_rho(rho: Vec<f64>) -> Self {
        let half: Vec<f64> = rho.iter().map(|r| 0.5 * r).collect();
        MacroState {
            rho,
            p_bar_plus: half.clone(),
            p_bar_minus: half,
        }
    }

    pub fn from_streams(p_bar_plus: Vec<f64>, p_bar_minus: Vec<f64>) -> Self {
        let rho = p_bar_plus.iter().zip(&p_bar_minus).map(|(a, b)| a + b).collect();
        MacroState {
            rho,
            p_bar_plus,
            p_bar_minus,
        }
    }

    /// Column sums of a kinetic field.
    pub fn from_field(field: &TwoStreamField) -> Self {
        let (p, m) = field.column_sums();
        Self::from_streams(p, m)
    }

    pub fn mass(&self) -> f64 {
        trapezoid_sum(&self.rho)
    }

    pub fn density(&self) -> MacroDensity {
        MacroDensity { rho: self.rho.clone() }
    }
}

/// Mesh and parameters of a macroscopic scheme on `x in [0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LimitConfig {
    pub params: ModelParams,
    pub i_cells: usize,
    pub dt: f64,
}

impl LimitConfig {
    pub fn new(params: ModelParams, i_cells: usize, dt: f64) -> Result<Self> {
        params.validate()?;
        if i_cells < 2 {
            return Err(Error::GridMismatch(format!("need at least 2 x-intervals, got {i_cells}")));
        }
        if !(dt > 0.0) {
            return Err(Error::GridMismatch(format!("dt must be positive, got {dt}")));
        }
        Ok(LimitConfig { params, i_cells, dt })
    }

    pub fn dx(&self) -> f64 {
        1.0 / self.i_cells as f64
    }

    /// The diffusive-limit bound `Lambda_min dx^2 / 2` with `Lambda_min` over `[-|G|, |G|]`.
    pub fn diffusive_dt_max(&self) -> f64 {
        let g = self.params.g.abs();
        0.5 * lambda_min(&self.params, -g, g) * self.dx().powi(2)
    }

    fn check_diffusive(&self) -> Result<()> {
        let dt_max = self.diffusive_dt_max();
        if self.dt > dt_max * (1.0 + 1e-12) {
            return Err(Error::Cfl {
                dt: self.dt,
                dt_max,
                rule: "dt <= Lambda_min dx^2 / 2",
            });
        }
        Ok(())
    }

    fn check_kinetic(&self) -> Result<()> {
        if self.dt > self.dx() * (1.0 + 1e-12) {
            return Err(Error::Cfl {
                dt: self.dt,
                dt_max: self.dx(),
                rule: "dt <= dx",
            });
        }
        Ok(())
    }

    fn check_len(&self, n: usize) -> Result<()> {
        if n != self.i_cells + 1 {
            return Err(Error::GridMismatch(format!(
                "state has {n} nodes but the mesh has {}",
                self.i_cells + 1
            )));
        }
        Ok(())
    }
}

/// Apply interface fluxes `F_{i+1/2}` (stored at `i`) with the half-cell wall closure.
fn apply_fluxes(rho: &[f64], flux: impl Fn(usize) -> f64) -> Vec<f64> {
    let last = rho.len() - 1;
    let f: Vec<f64> = (0..last).map(flux).collect();
    (0..=last)
        .map(|i| {
            if i == 0 {
                rho[0] - 2.0 * f[0]
            } else if i == last {
                rho[last] + 2.0 * f[last - 1]
            } else {
                rho[i] + f[i - 1] - f[i]
            }
        })
        .collect()
}

/// Cell integrals `(Lambda_bar_{1/2}, Lambda_bar_{-1/2})` on the mesh `dy = |G| dx`,
/// with `y` mirrored when `G < 0`.
fn interface_integrals(cfg: &LimitConfig) -> Result<(f64, f64)> {
    let p = cfg.params;
    let mirrored = ModelParams {
        g: p.g.abs(),
        chi: if p.g < 0.0 { -p.chi } else { p.chi },
        ..p
    };
    let grid = GridSpec::new(cfg.i_cells, 1, p.g.abs() * cfg.dx(), cfg.dt)?;
    Ok((lambda_bar(1, &grid, &mirrored)?, lambda_bar(0, &grid, &mirrored)?))
}

/// Limit of the AP-diff scheme as `eps -> 0`.
pub fn ks_limit_step(state: &MacroState, cfg: &LimitConfig) -> Result<MacroState> {
    cfg.check_len(state.rho.len())?;
    cfg.check_diffusive()?;
    let (up, down) = interface_integrals(cfg)?;
    let coef = cfg.dt * cfg.params.g.abs() / cfg.dx();
    let rho = &state.rho;
    Ok(MacroState::from_rho(apply_fluxes(rho, |i| {
        coef * (rho[i] / up - rho[i + 1] / down)
    })))
}

/// Centered finite differences for the Keller-Segel equation.
pub fn ks_centered_step(state: &MacroState, cfg: &LimitConfig) -> Result<MacroState> {
    cfg.check_len(state.rho.len())?;
    cfg.check_diffusive()?;
    let p = &cfg.params;
    let resp = p.response();
    let l0 = resp.rate(0.0);
    let dx = cfg.dx();
    let diff = cfg.dt / (dx * dx * l0);
    // drift term -dt G Lambda'(0) / (2 dx Lambda(0)^2)
    let drift = -cfg.dt * p.g * resp.slope_at_zero() / (2.0 * dx * l0 * l0);
    let rho = &state.rho;
    Ok(MacroState::from_rho(apply_fluxes(rho, |i| {
        diff * (rho[i] - rho[i + 1]) + drift * (rho[i] + rho[i + 1])
    })))
}

/// Limit of the naive splitting scheme: a weighted Laplacian without the
/// correct drift.
pub fn naive_limit_step(state: &MacroState, cfg: &LimitConfig) -> Result<MacroState> {
    cfg.check_len(state.rho.len())?;
    let resp = cfg.params.response();
    let g = cfg.params.g;
    let (lg, lmg) = (resp.rate(g), resp.rate(-g));
    let coef = cfg.dt / cfg.dx().powi(2);
    let rho = &state.rho;
    Ok(MacroState::from_rho(apply_fluxes(rho, |i| {
        coef * (rho[i] / lg - rho[i + 1] / lmg)
    })))
}

/// Limit of the AP-hyp scheme as `tau -> 0`: the two-stream kinetic scheme
/// with tumbling rates `lambda0 Lambda(+-G)`.
pub fn kinetic_limit_step(state: &MacroState, cfg: &LimitConfig) -> Result<MacroState> {
    cfg.check_len(state.p_bar_plus.len())?;
    cfg.check_len(state.p_bar_minus.len())?;
    cfg.check_kinetic()?;
    let p = &cfg.params;
    let resp = p.response();
    let dx = cfg.dx();
    let q = cfg.dt / dx;
    let d = |y: f64| cfg.dt / (dx * (1.0 + 0.5 * p.lambda0 * resp.rate(y) * dx));
    let (dp, dm) = (d(p.g), d(-p.g));
    let (pp, pm) = (&state.p_bar_plus, &state.p_bar_minus);
    let last = pp.len() - 1;
    let mut np = vec![0.0; last + 1];
    let mut nm = vec![0.0; last + 1];
    for i in 1..=last {
        np[i] = pp[i] - q * (pp[i] - pm[i]) + dp * pp[i - 1] - dm * pm[i];
    }
    for i in 0..last {
        nm[i] = pm[i] + q * (pp[i] - pm[i]) + dm * pm[i + 1] - dp * pp[i];
    }
    nm[last] = np[last];
    np[0] = nm[0];
    Ok(MacroState::from_streams(np, nm))
}

/// Which macroscopic scheme a [`LimitSim`] runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LimitKind {
    KsLimit,
    KsCentered,
    KineticLimit,
    NaiveLimit,
}

/// Time-stepping driver for the macroscopic schemes.
#[derive(Debug, Clone)]
pub struct LimitSim {
    kind: LimitKind,
    cfg: LimitConfig,
    state: MacroState,
    steps: u64,
}

impl LimitSim {
    pub fn new(kind: LimitKind, cfg: LimitConfig, state: MacroState) -> Result<Self> {
        let sim = LimitSim {
            kind,
            cfg,
            state,
            steps: 0,
        };
        // validate once up front
        sim.apply()?;
        Ok(sim)
    }

    fn apply(&self) -> Result<MacroState> {
        match self.kind {
            LimitKind::KsLimit => ks_limit_step(&self.state, &self.cfg),
            LimitKind::KsCentered => ks_centered_step(&self.state, &self.cfg),
            LimitKind::KineticLimit => kinetic_limit_step(&self.state, &self.cfg),
            LimitKind::NaiveLimit => naive_limit_step(&self.state, &self.cfg),
        }
    }

    pub fn state(&self) -> &MacroState {
        &self.state
    }
}

impl Simulation for LimitSim {
    fn step(&mut self) -> Result<()> {
        self.state = self.apply()?;
        self.steps += 1;
        Ok(())
    }

    fn time(&self) -> f64 {
        self.steps as f64 * self.cfg.dt
    }

    fn dt(&self) -> f64 {
        self.cfg.dt
    }

    fn dx(&self) -> f64 {
        self.cfg.dx()
    }

    fn state(&self) -> Vec<f64> {
        let st = &self.state;
        [&st.rho[..], &st.p_bar_plus[..], &st.p_bar_minus[..]].concat()
    }

    fn set_state(&mut self, state: &[f64]) {
        let n = self.state.rho.len();
        self.state.rho.copy_from_slice(&state[..n]);
        self.state.p_bar_plus.copy_from_slice(&state[n..2 * n]);
        self.state.p_bar_minus.copy_from_slice(&state[2 * n..]);
    }

    fn density(&self) -> MacroDensity {
        self.state.density()
    }
}

/// Configuration of the naive splitting scheme: diffusive parameters on the
/// mesh `dy = |G| dx`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NaiveConfig {
    pub params: ModelParams,
    pub grid: GridSpec,
}

impl NaiveConfig {
    pub fn new(params: ModelParams, i_cells: usize, dt: f64) -> Result<Self> {
        params.validate()?;
        let grid = GridSpec::ap_diff(i_cells, &params, dt)?;
        let g = params.g.abs();
        let dt_max = 0.5 * lambda_min(&params, -g, g) * grid.dx * grid.dx;
        if dt > dt_max * (1.0 + 1e-12) {
            return Err(Error::Cfl {
                dt,
                dt_max,
                rule: "dt <= Lambda_min dx^2 / 2",
            });
        }
        Ok(NaiveConfig { params, grid })
    }
}

/// Precomputed coefficients of the naive splitting scheme.
#[derive(Debug, Clone)]
pub struct NaiveOperator {
    cfg: NaiveConfig,
    relax: Relaxation,
    /// `dt / (dx (eps + Lambda(y_k) dx / 2))`.
    d: Vec<f64>,
    w: f64,
    flip: bool,
}

impl NaiveOperator {
    pub fn new(cfg: &NaiveConfig) -> Result<Self> {
        let grid = &cfg.grid;
        let p = &cfg.params;
        let flip = p.g < 0.0;
        let mut resp = p.response();
        if flip {
            resp = resp.reflected();
        }
        let eps = p.epsilon;
        let k = grid.k_half as i64;
        let d = (-k..=k)
            .map(|kk| grid.dt / (grid.dx * (eps + 0.5 * resp.rate(grid.y(kk)) * grid.dx)))
            .collect();
        let c = grid.dt / (eps * grid.dx);
        Ok(NaiveOperator {
            cfg: *cfg,
            relax: Relaxation::new(grid.ny(), grid.dt / eps),
            d,
            w: c / (1.0 + 2.0 * c),
            flip,
        })
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

    /// Closed-form solution of the implicit x-transport/tumbling step.
    pub fn transport(&self, half: &TwoStreamField, out: &mut TwoStreamField) {
        let ny = half.ny();
        let last = half.nx() - 1;
        let (hp, hm) = (&half.p_plus, &half.p_minus);
        let (d, w) = (&self.d, self.w);
        for i in 0..=last {
            let pp = &hp[i * ny..(i + 1) * ny];
            let pm = &hm[i * ny..(i + 1) * ny];
            let op = &mut out.p_plus[i * ny..(i + 1) * ny];
            let om = &mut out.p_minus[i * ny..(i + 1) * ny];
            if i == 0 {
                let r = &hm[ny..2 * ny];
                for j in 0..ny {
                    let b = pm[j] + d[j] * (r[j] - pp[j]);
                    op[j] = b;
                    om[j] = b;
                }
            } else if i == last {
                let l = &hp[(i - 1) * ny..i * ny];
                for j in 0..ny {
                    let a = pp[j] + d[j] * (l[j] - pm[j]);
                    op[j] = a;
                    om[j] = a;
                }
            } else {
                let l = &hp[(i - 1) * ny..i * ny];
                let r = &hm[(i + 1) * ny..(i + 2) * ny];
                for j in 0..ny {
                    let a = pp[j] + d[j] * (l[j] - pm[j]);
                    let b = pm[j] + d[j] * (r[j] - pp[j]);
                    op[j] = a + w * (b - a);
                    om[j] = b + w * (a - b);
                }
            }
        }
    }

    pub fn step_into(&self, field: &mut TwoStreamField, scratch: &mut TwoStreamField) {
        if self.flip {
            field.flip_y();
        }
        self.relax.apply(field);
        self.transport(field, scratch);
        std::mem::swap(field, scratch);
        if self.flip {
            field.flip_y();
        }
    }
}

/// One step of the naive splitting scheme.
pub fn naive_split_step(field: &TwoStreamField, cfg: &NaiveConfig) -> Result<TwoStreamField> {
    let op = NaiveOperator::new(cfg)?;
    op.check(field)?;
    let mut out = field.clone();
    let mut scratch = TwoStreamField::zeros(&cfg.grid);
    op.step_into(&mut out, &mut scratch);
    Ok(out)
}

/// Only the second (transport/tumbling) half of the naive scheme.
pub fn naive_transport_step(field_half: &TwoStreamField, cfg: &NaiveConfig) -> Result<TwoStreamField> {
    let op = NaiveOperator::new(cfg)?;
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

#[derive(Debug, Clone)]
pub struct NaiveSplit {
    op: NaiveOperator,
    field: TwoStreamField,
    scratch: TwoStreamField,
    steps: u64,
}

impl NaiveSplit {
    pub fn new(cfg: &NaiveConfig, initial: TwoStreamField) -> Result<Self> {
        let op = NaiveOperator::new(cfg)?;
        op.check(&initial)?;
        Ok(NaiveSplit {
            scratch: TwoStreamField::zeros(&cfg.grid),
            field: initial,
            op,
            steps: 0,
        })
    }

    pub fn field(&self) -> &TwoStreamField {
        &self.field
    }

    pub fn advance(&mut self) {
        self.op.step_into(&mut self.field, &mut self.scratch);
        self.steps += 1;
    }
}

impl Simulation for NaiveSplit {
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

    fn state(&self) -> Vec<f64> {
        self.field.to_vec()
    }

    fn set_state(&mut self, state: &[f64]) {
        self.field.load(state);
    }

    fn density(&self) -> MacroDensity {
        self.field.density()
    }

    fn kinetic(&self) -> Option<(&TwoStreamField, &GridSpec)> {
        Some((&self.field, &self.op.cfg.grid))
    }
}
