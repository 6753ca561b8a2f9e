//! Parameters, grids and field containers shared by every scheme.
//!
//! The unknowns are point values `p±(t, x_i, y_k)` on a cartesian grid with
//! `x_i = i dx` (`i = 0..=I`) and `y_k = k dy` (`k = -K..=K`). All discrete
//! functionals (column sums, the local density `rho_i`, the trapezoidal mass)
//! are pure sums over grid values without quadrature weights.

use std::f64::consts::FRAC_PI_2;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative slack used when checking that a mesh relation holds exactly.
const MESH_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scaling {
    /// `sigma = eps^2`, `lambda0 = 1/eps`, `tau = 1` (or a fixed `tau` in the modified variant).
    Diffusive,
    /// `sigma = 1`, `lambda0` fixed, `tau = eps`.
    Hyperbolic,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    /// Signed gradient of the methylation equilibrium.
    pub g: f64,
    /// Modulation amplitude of the tumbling response.
    pub chi: f64,
    /// Mean tumbling frequency.
    pub lambda0: f64,
    /// Stiffness parameter of the active scaling.
    pub epsilon: f64,
    /// Adaptation time.
    pub tau: f64,
    pub scaling: Scaling,
}

impl ModelParams {
    /// Diffusive scaling with `eps = 1/lambda0` and `tau = 1`.
    pub fn diffusive(g: f64, chi: f64, lambda0: f64) -> Result<Self> {
        Self::diffusive_with_tau(g, chi, lambda0, 1.0)
    }

    /// Diffusive scaling with an explicit adaptation time.
    pub fn diffusive_with_tau(g: f64, chi: f64, lambda0: f64, tau: f64) -> Result<Self> {
        if !(lambda0 > 0.0) {
            return Err(Error::ParameterDomain(format!("lambda0 must be positive, got {lambda0}")));
        }
        let p = ModelParams {
            g,
            chi,
            lambda0,
            epsilon: 1.0 / lambda0,
            tau,
            scaling: Scaling::Diffusive,
        };
        p.validate()?;
        Ok(p)
    }

    /// Hyperbolic scaling: `eps = tau`, tumbling rate `lambda0 * Lambda(y)`.
    pub fn hyperbolic(g: f64, chi: f64, lambda0: f64, tau: f64) -> Result<Self> {
        let p = ModelParams {
            g,
            chi,
            lambda0,
            epsilon: tau,
            tau,
            scaling: Scaling::Hyperbolic,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.g.is_finite() || self.g == 0.0 {
            return Err(Error::ParameterDomain(format!("G must be finite and nonzero, got {}", self.g)));
        }
        check_chi(self.chi)?;
        for (name, v) in [("epsilon", self.epsilon), ("tau", self.tau), ("lambda0", self.lambda0)] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::ParameterDomain(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }

    pub fn response(&self) -> ArctanResponse {
        ArctanResponse { chi: self.chi }
    }
}

fn check_chi(chi: f64) -> Result<()> {
    if !chi.is_finite() || chi.abs() * FRAC_PI_2 >= 1.0 {
        return Err(Error::ParameterDomain(format!(
            "|chi| * pi/2 must be below 1 so that the tumbling rate stays positive, got chi = {chi}"
        )));
    }
    Ok(())
}

/// A positive tumbling-rate modulation `Lambda(y)`.
///
/// Only [`TumblingResponse::rate`] is required; cell integrals fall back to
/// composite Gauss-Legendre quadrature.
pub trait TumblingResponse: Send + Sync {
    fn rate(&self, y: f64) -> f64;

    fn cell_integral(&self, lo: f64, hi: f64) -> f64 {
        gauss_legendre(|y| self.rate(y), lo, hi, 16)
    }

    /// Lower bound of the rate on `[lo, hi]`, sampled.
    fn min_on(&self, lo: f64, hi: f64) -> f64 {
        let n = 512;
        (0..=n)
            .map(|j| self.rate(lo + (hi - lo) * j as f64 / n as f64))
            .fold(f64::INFINITY, f64::min)
    }

    fn max_on(&self, lo: f64, hi: f64) -> f64 {
        let n = 512;
        (0..=n)
            .map(|j| self.rate(lo + (hi - lo) * j as f64 / n as f64))
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

/// `Lambda(y) = 1 - chi * atan(y)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ArctanResponse {
    pub chi: f64,
}

impl ArctanResponse {
    fn antiderivative(&self, y: f64) -> f64 {
        y - self.chi * (y * y.atan() - 0.5 * y.mul_add(y, 1.0).ln())
    }

    /// `Lambda'(0)`.
    pub fn slope_at_zero(&self) -> f64 {
        -self.chi
    }

    /// The response seen under `y -> -y`.
    pub fn reflected(&self) -> Self {
        ArctanResponse { chi: -self.chi }
    }
}

impl TumblingResponse for ArctanResponse {
    #[inline]
    fn rate(&self, y: f64) -> f64 {
        1.0 - self.chi * y.atan()
    }

    fn cell_integral(&self, lo: f64, hi: f64) -> f64 {
        self.antiderivative(hi) - self.antiderivative(lo)
    }

    // monotone, so the extremes sit at the endpoints
    fn min_on(&self, lo: f64, hi: f64) -> f64 {
        self.rate(lo).min(self.rate(hi))
    }

    fn max_on(&self, lo: f64, hi: f64) -> f64 {
        self.rate(lo).max(self.rate(hi))
    }
}

const GL5_NODES: [f64; 5] = [
    -0.906_179_845_938_664,
    -0.538_469_310_105_683,
    0.0,
    0.538_469_310_105_683,
    0.906_179_845_938_664,
];
const GL5_WEIGHTS: [f64; 5] = [
    0.236_926_885_056_189_1,
    0.478_628_670_499_366_5,
    0.568_888_888_888_888_9,
    0.478_628_670_499_366_5,
    0.236_926_885_056_189_1,
];

/// Composite 5-point Gauss-Legendre rule over `panels` equal panels.
pub fn gauss_legendre(f: impl Fn(f64) -> f64, lo: f64, hi: f64, panels: usize) -> f64 {
    let h = (hi - lo) / panels as f64;
    let mut total = 0.0;
    for p in 0..panels {
        let mid = lo + (p as f64 + 0.5) * h;
        let half = 0.5 * h;
        total += GL5_NODES
            .iter()
            .zip(GL5_WEIGHTS.iter())
            .map(|(n, w)| w * f(mid + half * n))
            .sum::<f64>()
            * half;
    }
    total
}

/// `Lambda(y) = 1 - chi * atan(y)`, rejecting amplitudes that make the rate vanish.
pub fn tumbling_response(y: f64, chi: f64) -> Result<f64> {
    check_chi(chi)?;
    Ok(ArctanResponse { chi }.rate(y))
}

/// Cartesian `(x, y)` mesh plus the time step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    /// Number of x-intervals; nodes are `x_i = i dx`, `i = 0..=I`, on `[0, 1]`.
    pub i_cells: usize,
    /// Half-count of y-nodes; `y_k = k dy`, `k = -K..=K`.
    pub k_half: usize,
    pub dx: f64,
    pub dy: f64,
    pub dt: f64,
    pub y_halfwidth: f64,
}

impl GridSpec {
    pub fn new(i_cells: usize, k_half: usize, dy: f64, dt: f64) -> Result<Self> {
        if i_cells < 2 {
            return Err(Error::GridMismatch(format!("need at least 2 x-intervals, got {i_cells}")));
        }
        if k_half < 1 {
            return Err(Error::GridMismatch("need at least one y-cell on each side".into()));
        }
        if !(dy > 0.0) || !(dt > 0.0) {
            return Err(Error::GridMismatch(format!("dy and dt must be positive (dy={dy}, dt={dt})")));
        }
        Ok(GridSpec {
            i_cells,
            k_half,
            dx: 1.0 / i_cells as f64,
            dy,
            dt,
            y_halfwidth: k_half as f64 * dy,
        })
    }

    /// AP-diff mesh: `dy = |G| dx` on `[-|G|, |G|]`, hence `K = I`.
    pub fn ap_diff(i_cells: usize, params: &ModelParams, dt: f64) -> Result<Self> {
        let dx = 1.0 / i_cells as f64;
        Self::new(i_cells, i_cells, params.g.abs() * dx, dt)
    }

    /// Modified AP-diff mesh: `dy = (|G|/tau) dx` on `[-ext |G|, ext |G|]`.
    pub fn ap_diff_modified(i_cells: usize, params: &ModelParams, dt: f64, extension: f64) -> Result<Self> {
        if !(extension >= 1.0) {
            return Err(Error::GridMismatch(format!("y-domain extension must be >= 1, got {extension}")));
        }
        let dx = 1.0 / i_cells as f64;
        let dy = params.g.abs() / params.tau * dx;
        let k = integral_count(extension * params.g.abs() / dy, "extended y half-width / dy")?;
        Self::new(i_cells, k, dy, dt)
    }

    /// AP-hyp mesh: `dy = dx` on `[-|G|, |G|]`, so `|G| I` must be an integer.
    pub fn ap_hyp(i_cells: usize, params: &ModelParams, dt: f64) -> Result<Self> {
        let dx = 1.0 / i_cells as f64;
        let k = integral_count(params.g.abs() / dx, "|G| / dx")?;
        Self::new(i_cells, k, dx, dt)
    }

    pub fn nx(&self) -> usize {
        self.i_cells + 1
    }

    pub fn ny(&self) -> usize {
        2 * self.k_half + 1
    }

    pub fn x(&self, i: usize) -> f64 {
        i as f64 * self.dx
    }

    pub fn y(&self, k: i64) -> f64 {
        k as f64 * self.dy
    }

    /// Index of `y = target` on the y-grid, if it is a node.
    pub fn node_of(&self, target: f64) -> Option<i64> {
        let k = (target / self.dy).round();
        let on_grid = (k * self.dy - target).abs() <= MESH_TOL * target.abs().max(self.dy);
        (on_grid && k.abs() <= self.k_half as f64).then_some(k as i64)
    }

    pub fn with_dt(mut self, dt: f64) -> Self {
        self.dt = dt;
        self
    }
}

fn integral_count(ratio: f64, what: &str) -> Result<usize> {
    let n = ratio.round();
    if n < 1.0 || (ratio - n).abs() > MESH_TOL * ratio.max(1.0) {
        return Err(Error::GridMismatch(format!("{what} = {ratio} must be a positive integer")));
    }
    Ok(n as usize)
}

/// `Lambda_bar_{k-1/2} = int_{y_{k-1}}^{y_k} Lambda(y) dy` for `k = k_upper`.
///
/// Valid for `-K <= k_upper <= K + 1`; the two outermost cells extend one
/// mesh width past the y-domain and are integrated over their full width.
pub fn lambda_bar(k_upper: i64, grid: &GridSpec, params: &ModelParams) -> Result<f64> {
    let k_max = grid.k_half as i64;
    if k_upper < -k_max || k_upper > k_max + 1 {
        return Err(Error::GridMismatch(format!(
            "interface {k_upper} - 1/2 lies outside [-K - 1/2, K + 1/2] with K = {k_max}"
        )));
    }
    Ok(params.response().cell_integral(grid.y(k_upper - 1), grid.y(k_upper)))
}

/// Two-stream distribution `p±` on the `(I+1) x (2K+1)` grid, stored row-major
/// in `i` so that each x-node owns a contiguous y-column.
#[derive(Debug, Clone, PartialEq)]
pub struct TwoStreamField {
    nx: usize,
    k_half: usize,
    pub p_plus: Vec<f64>,
    pub p_minus: Vec<f64>,
}

impl TwoStreamField {
    pub fn zeros(grid: &GridSpec) -> Self {
        Self::zeros_sized(grid.nx(), grid.k_half)
    }

    pub fn zeros_sized(nx: usize, k_half: usize) -> Self {
        let n = nx * (2 * k_half + 1);
        TwoStreamField {
            nx,
            k_half,
            p_plus: vec![0.0; n],
            p_minus: vec![0.0; n],
        }
    }

    pub fn nx(&self) -> usize {
        self.nx
    }

    pub fn ny(&self) -> usize {
        2 * self.k_half + 1
    }

    pub fn k_half(&self) -> usize {
        self.k_half
    }

    #[inline]
    pub fn index(&self, i: usize, k: i64) -> usize {
        debug_assert!(i < self.nx && k.unsigned_abs() as usize <= self.k_half);
        i * self.ny() + (k + self.k_half as i64) as usize
    }

    pub fn plus(&self, i: usize, k: i64) -> f64 {
        self.p_plus[self.index(i, k)]
    }

    pub fn minus(&self, i: usize, k: i64) -> f64 {
        self.p_minus[self.index(i, k)]
    }

    pub fn set(&mut self, i: usize, k: i64, plus: f64, minus: f64) {
        let j = self.index(i, k);
        self.p_plus[j] = plus;
        self.p_minus[j] = minus;
    }

    pub fn plus_column(&self, i: usize) -> &[f64] {
        let ny = self.ny();
        &self.p_plus[i * ny..(i + 1) * ny]
    }

    pub fn minus_column(&self, i: usize) -> &[f64] {
        let ny = self.ny();
        &self.p_minus[i * ny..(i + 1) * ny]
    }

    pub fn same_shape(&self, other: &TwoStreamField) -> bool {
        self.nx == other.nx && self.k_half == other.k_half
    }

    pub fn matches(&self, grid: &GridSpec) -> bool {
        self.nx == grid.nx() && self.k_half == grid.k_half
    }

    /// `p-bar±_i = sum_k p±_{i,k}`.
    pub fn column_sums(&self) -> (Vec<f64>, Vec<f64>) {
        let ny = self.ny();
        let plus = self.p_plus.chunks_exact(ny).map(|c| c.iter().sum()).collect();
        let minus = self.p_minus.chunks_exact(ny).map(|c| c.iter().sum()).collect();
        (plus, minus)
    }

    /// `rho_i = sum_k (p+_{i,k} + p-_{i,k})`.
    pub fn density(&self) -> MacroDensity {
        let (plus, minus) = self.column_sums();
        MacroDensity {
            rho: plus.iter().zip(&minus).map(|(a, b)| a + b).collect(),
        }
    }

    pub fn min_value(&self) -> f64 {
        self.p_plus
            .iter()
            .chain(&self.p_minus)
            .copied()
            .fold(f64::INFINITY, f64::min)
    }

    pub fn is_nonnegative(&self) -> bool {
        self.p_plus.iter().chain(&self.p_minus).all(|&v| v >= 0.0)
    }

    /// `p+` followed by `p-` as one flat vector.
    pub fn to_vec(&self) -> Vec<f64> {
        [&self.p_plus[..], &self.p_minus[..]].concat()
    }

    /// Inverse of [`TwoStreamField::to_vec`].
    pub fn load(&mut self, flat: &[f64]) {
        let n = self.p_plus.len();
        assert_eq!(flat.len(), 2 * n, "flat state has the wrong length");
        self.p_plus.copy_from_slice(&flat[..n]);
        self.p_minus.copy_from_slice(&flat[n..]);
    }

    /// Mirror the field under `y -> -y` (streams are kept).
    pub fn flip_y(&mut self) {
        let ny = self.ny();
        for col in self.p_plus.chunks_exact_mut(ny) {
            col.reverse();
        }
        for col in self.p_minus.chunks_exact_mut(ny) {
            col.reverse();
        }
    }
}

/// Local density on the x-nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct MacroDensity {
    pub rho: Vec<f64>,
}

impl MacroDensity {
    /// Trapezoidal mass `(rho_0 + rho_I)/2 + sum_{0<i<I} rho_i`.
    pub fn mass(&self) -> f64 {
        trapezoid_sum(&self.rho)
    }
}

pub(crate) fn trapezoid_sum(values: &[f64]) -> f64 {
    match values {
        [] => 0.0,
        [only] => *only,
        [first, inner @ .., last] => 0.5 * (first + last) + inner.iter().sum::<f64>(),
    }
}

/// Uniform-in-x initial state: `p± = 1/G` where `|y_k| <= G/2`, zero elsewhere.
pub fn initial_condition(grid: &GridSpec, params: &ModelParams) -> Result<TwoStreamField> {
    if !(params.g > 0.0) {
        return Err(Error::ParameterDomain(format!(
            "the initial condition is defined for G > 0, got {}",
            params.g
        )));
    }
    let half_support = 0.5 * params.g;
    if grid.y_halfwidth < half_support * (1.0 - MESH_TOL) {
        return Err(Error::GridMismatch(format!(
            "y-domain half-width {} is narrower than the initial support G/2 = {half_support}",
            grid.y_halfwidth
        )));
    }
    let mut field = TwoStreamField::zeros(grid);
    let value = 1.0 / params.g;
    let k_max = grid.k_half as i64;
    for i in 0..grid.nx() {
        for k in -k_max..=k_max {
            if grid.y(k).abs() <= half_support * (1.0 + MESH_TOL) {
                field.set(i, k, value, value);
            }
        }
    }
    Ok(field)
}

/// Impose the reflecting walls: the stream leaving a wall equals the stream
/// arriving at it, `p+_{0,k} := p-_{0,k}` and `p-_{I,k} := p+_{I,k}`.
pub fn apply_mirror_bc(mut field: TwoStreamField) -> TwoStreamField {
    let ny = field.ny();
    let last = (field.nx - 1) * ny;
    let (plus, minus) = (&mut field.p_plus, &mut field.p_minus);
    plus[..ny].copy_from_slice(&minus[..ny]);
    minus[last..last + ny].copy_from_slice(&plus[last..last + ny]);
    field
}

/// Net stream imbalance `sum_k (p+ - p-)` at node `i`.
pub fn net_flux(field: &TwoStreamField, i: usize) -> f64 {
    field
        .plus_column(i)
        .iter()
        .zip(field.minus_column(i))
        .map(|(a, b)| a - b)
        .sum()
}
