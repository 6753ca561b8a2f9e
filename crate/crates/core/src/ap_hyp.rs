//! Asymptotic-preserving scheme at hyperbolic scaling.
//!
//! Each step relaxes `p+` toward `y = G` and `p-` toward `y = -G` with an
//! implicit upwind scheme, then applies an explicit well-balanced transport
//! step in x on every y-slice. The tumbling rate is `lambda0 * Lambda(y_k)`
//! evaluated at the nodes. Time is physical time.

use crate::diagnostics::discrete_mass;
use crate::error::{Error, Result};
use crate::model_core::{GridSpec, MacroDensity, ModelParams, TumblingResponse, TwoStreamField};
use crate::run::Simulation;
use crate::steady::SplitStep;
use crate::sweep::SinkSweep;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ApHypConfig {
    pub params: ModelParams,
    pub grid: GridSpec,
}

impl ApHypConfig {
    /// Mesh `dy = dx` on `[-|G|, |G|]`.
    pub fn new(params: ModelParams, i_cells: usize, dt: f64) -> Result<Self> {
        let grid = GridSpec::ap_hyp(i_cells, &params, dt)?;
        let cfg = ApHypConfig { params, grid };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.params.validate()?;
        let g = &self.grid;
        if (g.k_half as f64 * g.dy - self.params.g.abs()).abs() > 1e-9 * self.params.g.abs() {
            return Err(Error::GridMismatch(format!(
                "the relaxation targets +-G = +-{} must be grid nodes (K dy = {})",
                self.params.g.abs(),
                g.k_half as f64 * g.dy
            )));
        }
        if g.dt > g.dx * (1.0 + 1e-12) {
            return Err(Error::Cfl {
                dt: g.dt,
                dt_max: g.dx,
                rule: "dt <= dx",
            });
        }
        Ok(())
    }
}

/// Implicit relaxation of both streams toward `+-G` with stiffness `dt / eps`.
#[derive(Debug, Clone)]
pub(crate) struct Relaxation {
    plus: SinkSweep,
    minus: SinkSweep,
}

impl Relaxation {
    /// `ny = 2K + 1` nodes with `+G` at the top node (after any y-mirroring).
    pub(crate) fn new(ny: usize, kappa: f64) -> Self {
        Relaxation {
            plus: SinkSweep::new(ny, ny - 1, kappa),
            minus: SinkSweep::new(ny, 0, kappa),
        }
    }

    pub(crate) fn apply(&self, field: &mut TwoStreamField) {
        self.plus.solve_columns(&mut field.p_plus);
        self.minus.solve_columns(&mut field.p_minus);
    }
}

/// Precomputed coefficients of one AP-hyp step.
#[derive(Debug, Clone)]
pub struct ApHypOperator {
    cfg: ApHypConfig,
    relax: Relaxation,
    /// `dt / (dx (1 + lambda0 Lambda(y_k) dx / 2))` indexed by `k + K`.
    d: Vec<f64>,
    q: f64,
    flip: bool,
}

impl ApHypOperator {
    pub fn new(cfg: &ApHypConfig) -> Result<Self> {
        cfg.validate()?;
        let grid = &cfg.grid;
        let p = &cfg.params;
        let flip = p.g < 0.0;
        let mut resp = p.response();
        if flip {
            resp = resp.reflected();
        }
        let k = grid.k_half as i64;
        let d = (-k..=k)
            .map(|kk| grid.dt / (grid.dx * (1.0 + 0.5 * p.lambda0 * resp.rate(grid.y(kk)) * grid.dx)))
            .collect();
        Ok(ApHypOperator {
            cfg: *cfg,
            relax: Relaxation::new(grid.ny(), grid.dt / p.tau),
            d,
            q: grid.dt / grid.dx,
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

    pub fn relax(&self, field: &mut TwoStreamField) {
        self.relax.apply(field);
    }

    /// Explicit well-balanced transport from `half` into `out`.
    ///
    /// At the walls the stream entering the wall is updated with the full
    /// formula and the reflected stream is set equal to it.
    pub fn transport(&self, half: &TwoStreamField, out: &mut TwoStreamField) {
        let ny = half.ny();
        let last = half.nx() - 1;
        let (hp, hm) = (&half.p_plus, &half.p_minus);
        let (d, q) = (&self.d, self.q);
        for i in 0..=last {
            let pp = &hp[i * ny..(i + 1) * ny];
            let pm = &hm[i * ny..(i + 1) * ny];
            let op = &mut out.p_plus[i * ny..(i + 1) * ny];
            let om = &mut out.p_minus[i * ny..(i + 1) * ny];
            if i == 0 {
                let r = &hm[ny..2 * ny];
                for j in 0..ny {
                    let m = pm[j] + q * (pp[j] - pm[j]) + d[j] * (r[j] - pp[j]);
                    op[j] = m;
                    om[j] = m;
                }
            } else if i == last {
                let l = &hp[(i - 1) * ny..i * ny];
                for j in 0..ny {
                    let p = pp[j] - q * (pp[j] - pm[j]) + d[j] * (l[j] - pm[j]);
                    op[j] = p;
                    om[j] = p;
                }
            } else {
                let l = &hp[(i - 1) * ny..i * ny];
                let r = &hm[(i + 1) * ny..(i + 2) * ny];
                let (d, op, om) = (&d[..ny], &mut op[..ny], &mut om[..ny]);
                for j in 0..ny {
                    let exch = q * (pp[j] - pm[j]);
                    op[j] = pp[j] - exch + d[j] * (l[j] - pm[j]);
                    om[j] = pm[j] + exch + d[j] * (r[j] - pp[j]);
                }
            }
        }
    }

    pub fn step_into(&self, field: &mut TwoStreamField, scratch: &mut TwoStreamField) {
        if self.flip {
            field.flip_y();
        }
        self.relax(field);
        self.transport(field, scratch);
        std::mem::swap(field, scratch);
        if self.flip {
            field.flip_y();
        }
    }
}

/// Implicit upwind relaxation toward `+-G`.
pub fn relax_step(field: &TwoStreamField, cfg: &ApHypConfig) -> Result<TwoStreamField> {
    let op = ApHypOperator::new(cfg)?;
    op.check(field)?;
    let mut out = field.clone();
    if op.flip {
        out.flip_y();
    }
    op.relax(&mut out);
    if op.flip {
        out.flip_y();
    }
    Ok(out)
}

/// Explicit well-balanced transport step.
pub fn wb_transport_step(field_half: &TwoStreamField, cfg: &ApHypConfig) -> Result<TwoStreamField> {
    let op = ApHypOperator::new(cfg)?;
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

pub fn ap_hyp_step(field: &TwoStreamField, cfg: &ApHypConfig) -> Result<TwoStreamField> {
    let op = ApHypOperator::new(cfg)?;
    op.check(field)?;
    let mut out = field.clone();
    let mut scratch = TwoStreamField::zeros(&cfg.grid);
    op.step_into(&mut out, &mut scratch);
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct ApHyp {
    op: ApHypOperator,
    field: TwoStreamField,
    scratch: TwoStreamField,
    steps: u64,
}

impl ApHyp {
    pub fn new(cfg: &ApHypConfig, initial: TwoStreamField) -> Result<Self> {
        let op = ApHypOperator::new(cfg)?;
        op.check(&initial)?;
        Ok(ApHyp {
            scratch: TwoStreamField::zeros(&cfg.grid),
            field: initial,
            op,
            steps: 0,
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
        op.relax(&mut guess);
        let implicit = [op.relax.plus.implicit_entries(), op.relax.minus.implicit_entries()];
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

    pub fn advance(&mut self) {
        self.op.step_into(&mut self.field, &mut self.scratch);
        self.steps += 1;
    }
}

impl Simulation for ApHyp {
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

    fn solve_steady(&mut self) -> Option<Result<()>> {
        Some(ApHyp::solve_steady(self))
    }

    fn density(&self) -> MacroDensity {
        self.field.density()
    }

    fn kinetic(&self) -> Option<(&TwoStreamField, &GridSpec)> {
        Some((&self.field, &self.op.cfg.grid))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model_core::{apply_mirror_bc, initial_condition};
    use nalgebra::{DMatrix, DVector};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_field(grid: &GridSpec, rng: &mut ChaCha8Rng) -> TwoStreamField {
        let mut f = TwoStreamField::zeros(grid);
        f.p_plus.iter_mut().for_each(|v| *v = rng.gen::<f64>());
        f.p_minus.iter_mut().for_each(|v| *v = rng.gen::<f64>());
        f
    }

    fn cfg(i: usize, tau: f64, dt: f64) -> ApHypConfig {
        let params = ModelParams::hyperbolic(1.0, 0.5, 10.0, tau).unwrap();
        ApHypConfig::new(params, i, dt).unwrap()
    }

    #[test]
    fn direct_steady_state_is_a_fixed_point() {
        for g in [1.0, -1.0] {
            let params = ModelParams::hyperbolic(g, 0.5, 10.0, 0.1).unwrap();
            let cfg = ApHypConfig::new(params, 16, 1.0 / 16.0).unwrap();
            let mut f = initial_condition(&cfg.grid, &ModelParams { g: 1.0, ..params }).unwrap();
            if g < 0.0 {
                f.flip_y();
            }
            let mass = discrete_mass(&f);
            let mut sim = ApHyp::new(&cfg, f).unwrap();
            sim.solve_steady().unwrap();
            let x = sim.field().clone();
            assert!(x.p_plus.iter().chain(&x.p_minus).all(|v| *v >= -1e-14));
            assert!((discrete_mass(&x) - mass).abs() < 1e-12 * mass);
            sim.advance();
            let scale = x.to_vec().iter().fold(0.0f64, |a, v| a.max(v.abs()));
            let diff = x
                .to_vec()
                .iter()
                .zip(sim.field().to_vec())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(diff < 1e-12 * scale, "{diff}");
        }
    }

    fn dense_relax(col: &[f64], grid: &GridSpec, target: f64, tau: f64) -> Vec<f64> {
        let n = col.len();
        let k = grid.k_half as i64;
        let drift = |j: usize| target - (j as i64 - k) as f64 * grid.dy;
        let r = grid.dt / (tau * grid.dy);
        let mut m = DMatrix::<f64>::identity(n, n);
        for j in 0..n - 1 {
            let plus = drift(j).max(0.0);
            let minus = (-drift(j + 1)).max(0.0);
            m[(j, j)] += r * plus;
            m[(j, j + 1)] -= r * minus;
            m[(j + 1, j)] -= r * plus;
            m[(j + 1, j + 1)] += r * minus;
        }
        m.lu().solve(&DVector::from_column_slice(col)).unwrap().as_slice().to_vec()
    }

    #[test]
    fn relax_matches_dense_oracle() {
        let c = cfg(2, 1.0, 0.3);
        assert_eq!(c.grid.k_half, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f = random_field(&c.grid, &mut rng);
        let out = relax_step(&f, &c).unwrap();
        for i in 0..c.grid.nx() {
            let wp = dense_relax(f.plus_column(i), &c.grid, 1.0, 1.0);
            let wm = dense_relax(f.minus_column(i), &c.grid, -1.0, 1.0);
            for (a, b) in out.plus_column(i).iter().zip(&wp) {
                assert!((a - b).abs() < 1e-12);
            }
            for (a, b) in out.minus_column(i).iter().zip(&wm) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn occupied_targets_are_fixed() {
        let c = cfg(4, 0.5, 0.1);
        let k = c.grid.k_half as i64;
        let mut f = TwoStreamField::zeros(&c.grid);
        for i in 0..c.grid.nx() {
            f.set(i, k, 1.0, 0.0);
            f.set(i, -k, 0.0, 2.0);
        }
        assert_eq!(relax_step(&f, &c).unwrap(), f);
    }

    #[test]
    fn relax_concentrates_for_tiny_tau() {
        let c = cfg(8, 1e-10, 0.1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let f = random_field(&c.grid, &mut rng);
        let out = relax_step(&f, &c).unwrap();
        let top = c.grid.ny() - 1;
        for i in 0..c.grid.nx() {
            let (p, m) = (out.plus_column(i), out.minus_column(i));
            let (sp, sm): (f64, f64) = (p.iter().sum(), m.iter().sum());
            assert!(sp - p[top] <= 1e-8 * sp);
            assert!(sm - m[0] <= 1e-8 * sm);
        }
    }

    #[test]
    fn interior_mass_vanishes_as_tau_shrinks() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let base = cfg(6, 1.0, 0.1);
        let f = random_field(&base.grid, &mut rng);
        let k = base.grid.k_half;
        let inner = |tau: f64| -> f64 {
            let out = relax_step(&f, &cfg(6, tau, 0.1)).unwrap();
            (0..out.nx()).map(|i| out.plus_column(i)[1..2 * k].iter().sum::<f64>()).sum()
        };
        let start: f64 = (0..f.nx()).map(|i| f.plus_column(i)[1..2 * k].iter().sum::<f64>()).sum();
        assert!(inner(10.0) > 0.5 * start);
        assert!(inner(1e-4) < 1e-2 * start);
        assert!(inner(1e-8) < 1e-6 * start);
    }

    /// Direct transcription of the transport formulas on one y-slice.
    fn slice_update(plus: &[f64], minus: &[f64], lam: f64, dt: f64, dx: f64) -> (Vec<f64>, Vec<f64>) {
        let n = plus.len();
        let q = dt / dx;
        let d = dt / (dx * (1.0 + 0.5 * lam * dx));
        let mut p_new = vec![0.0; n];
        let mut m_new = vec![0.0; n];
        for i in 1..n {
            p_new[i] = plus[i] - q * (plus[i] - minus[i]) + d * (plus[i - 1] - minus[i]);
        }
        for i in 0..n - 1 {
            m_new[i] = minus[i] + q * (plus[i] - minus[i]) + d * (minus[i + 1] - plus[i]);
        }
        m_new[n - 1] = p_new[n - 1];
        p_new[0] = m_new[0];
        (p_new, m_new)
    }

    #[test]
    fn transport_matches_slice_transcription() {
        let c = cfg(7, 0.3, 0.05);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let f = random_field(&c.grid, &mut rng);
        let out = wb_transport_step(&f, &c).unwrap();
        let k = c.grid.k_half as i64;
        for kk in -k..=k {
            let plus: Vec<f64> = (0..c.grid.nx()).map(|i| f.plus(i, kk)).collect();
            let minus: Vec<f64> = (0..c.grid.nx()).map(|i| f.minus(i, kk)).collect();
            let lam = 10.0 * (1.0 - 0.5 * c.grid.y(kk).atan());
            let (pn, mn) = slice_update(&plus, &minus, lam, c.grid.dt, c.grid.dx);
            for i in 0..c.grid.nx() {
                assert!((out.plus(i, kk) - pn[i]).abs() < 1e-15);
                assert!((out.minus(i, kk) - mn[i]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn flat_response_keeps_uniform_equal_streams() {
        let params = ModelParams::hyperbolic(1.0, 0.0, 10.0, 1.0).unwrap();
        let c = ApHypConfig::new(params, 10, 0.05).unwrap();
        let mut f = TwoStreamField::zeros(&c.grid);
        f.p_plus.iter_mut().for_each(|v| *v = 0.4);
        f.p_minus.iter_mut().for_each(|v| *v = 0.4);
        let out = wb_transport_step(&f, &c).unwrap();
        for v in out.p_plus.iter().chain(&out.p_minus) {
            assert!((v - 0.4).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_stays_zero() {
        let c = cfg(5, 0.1, 0.1);
        let f = TwoStreamField::zeros(&c.grid);
        assert_eq!(ap_hyp_step(&f, &c).unwrap(), f);
    }

    #[test]
    fn rejects_cfl_violation() {
        let params = ModelParams::hyperbolic(1.0, 0.5, 10.0, 1.0).unwrap();
        assert!(matches!(ApHypConfig::new(params, 10, 0.2), Err(Error::Cfl { .. })));
    }

    #[test]
    fn conserves_mass_over_many_steps() {
        let c = cfg(20, 0.05, 0.05);
        let params = c.params;
        let f = initial_condition(&c.grid, &params).unwrap();
        let m0 = f.density().mass();
        let mut sim = ApHyp::new(&c, f).unwrap();
        for _ in 0..500 {
            let before = sim.field().density().mass();
            sim.advance();
            let after = sim.field().density().mass();
            assert!((after - before).abs() <= 1e-12 * m0);
        }
        assert!(sim.field().is_nonnegative());
    }

    #[test]
    fn negative_gradient_mirrors_positive() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let pos = ApHypConfig::new(ModelParams::hyperbolic(1.0, 0.5, 10.0, 0.2).unwrap(), 5, 0.1).unwrap();
        let neg = ApHypConfig::new(ModelParams::hyperbolic(-1.0, -0.5, 10.0, 0.2).unwrap(), 5, 0.1).unwrap();
        let f = random_field(&pos.grid, &mut rng);
        let mut flipped = f.clone();
        flipped.flip_y();
        let mut a = ap_hyp_step(&f, &pos).unwrap();
        let b = ap_hyp_step(&flipped, &neg).unwrap();
        a.flip_y();
        for (x, y) in a.p_minus.iter().zip(&b.p_minus) {
            assert!((x - y).abs() < 1e-14);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]
        #[test]
        fn positive_and_conservative_at_cfl_limit(seed in any::<u64>(), tau in 1e-8f64..10.0, i in 2usize..12) {
            let c = cfg(i, tau, 1.0 / i as f64);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let f = apply_mirror_bc(random_field(&c.grid, &mut rng));
            let m0 = f.density().mass();
            let out = ap_hyp_step(&f, &c).unwrap();
            prop_assert!(out.is_nonnegative());
            prop_assert!((out.density().mass() - m0).abs() <= 1e-12 * m0);
        }
    }
}
