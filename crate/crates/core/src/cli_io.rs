//! Experiment driver: configuration files, scheme dispatch and CSV output.
//!
//! A configuration is a TOML document:
//!
//! ```toml
//! scheme = "ap_diff"          # required
//! snapshots = [0.5, 2.0]      # output times in the scheme's time unit
//! probes = [0.5]              # x-locations of the y-distribution files
//! output = "fig3a"            # output directory, relative to the output root
//! seed = 7                    # particle runs only
//!
//! [params]                    # defaults G = 1, chi = 0.5, lambda0 = 10
//! lambda0 = 10.0
//!
//! [grid]
//! i_cells = 100               # dt defaults to the scheme's usual choice
//!
//! [steady]                    # optional run to steady state after the snapshots
//! enabled = true
//!
//! [table]                     # only used by `table`
//! param = "lambda0"
//! values = [10.0, 100.0]
//! pairs = [[50, 200], [100, 200]]
//! ```
//!
//! Diffusive-scaling schemes measure time in diffusive units, the hyperbolic
//! ones in physical units. Particle runs convert diffusive snapshot times by
//! `T = lambda0 t` unless `monte_carlo.time = "physical"`.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::ap_diff::{ApDiff, ApDiffConfig};
use crate::ap_hyp::{ApHyp, ApHypConfig};
use crate::diagnostics::{
    convergence_table, linf_rel_error, max_rel_deviation, nodes_to_bins, unit_normalize, unit_normalize_bins,
    ConvergenceReport,
};
use crate::error::{Error, Result};
use crate::limit_solvers::{LimitConfig, LimitKind, LimitSim, MacroState, NaiveConfig, NaiveSplit};
use crate::model_core::{initial_condition, GridSpec, ModelParams, TwoStreamField};
use crate::monte_carlo::{advance, density_histogram, init_particles, y_histogram, ParticleEnsemble};
use crate::run::{run_to_steady, run_until, Simulation, SteadyCriterion};

/// Name of the marker file left in the output directory of a failed run.
pub const FAILURE_MARKER: &str = "FAILED";
pub const COMPARE_FILE: &str = "compare.csv";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    ApDiff,
    ApDiffModified,
    ApHyp,
    NaiveSplit,
    KsLimit,
    KsCentered,
    KineticLimit,
    MonteCarlo,
}

const SCHEME_NAMES: &str =
    "ap_diff, ap_diff_modified, ap_hyp, naive_split, ks_limit, ks_centered, kinetic_limit, monte_carlo";

impl Scheme {
    pub fn name(self) -> &'static str {
        match self {
            Scheme::ApDiff => "ap_diff",
            Scheme::ApDiffModified => "ap_diff_modified",
            Scheme::ApHyp => "ap_hyp",
            Scheme::NaiveSplit => "naive_split",
            Scheme::KsLimit => "ks_limit",
            Scheme::KsCentered => "ks_centered",
            Scheme::KineticLimit => "kinetic_limit",
            Scheme::MonteCarlo => "monte_carlo",
        }
    }

    fn hyperbolic(self) -> bool {
        matches!(self, Scheme::ApHyp | Scheme::KineticLimit)
    }

    /// `0.1 dx^2` for the diffusive schemes, `dx` for the hyperbolic ones and
    /// `1e-4` for particles.
    pub fn default_dt(self, i_cells: usize) -> f64 {
        let dx = 1.0 / i_cells as f64;
        match self {
            Scheme::MonteCarlo => 1e-4,
            s if s.hyperbolic() => dx,
            _ => 0.1 * dx * dx,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ParamsSection {
    pub g: f64,
    pub chi: f64,
    pub lambda0: f64,
    /// Adaptation time; only read by the schemes that use it (default 1).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tau: Option<f64>,
}

impl Default for ParamsSection {
    fn default() -> Self {
        ParamsSection {
            g: 1.0,
            chi: 0.5,
            lambda0: 10.0,
            tau: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSection {
    pub i_cells: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dt: Option<f64>,
    /// Half-width of the y-domain in units of `|G|` (ap_diff_modified only).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub extension: Option<f64>,
}

impl Default for GridSection {
    fn default() -> Self {
        GridSection {
            i_cells: 100,
            dt: None,
            extension: None,
        }
    }
}

/// Steady-state run; unset fields take scheme-dependent defaults.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SteadySection {
    pub enabled: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tol: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub t_max: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub window: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub extrapolate: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub direct: Option<bool>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimeUnit {
    /// Snapshot times are diffusive and multiplied by `lambda0`.
    Diffusive,
    Physical,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MonteCarloSection {
    pub particles: usize,
    pub time: TimeUnit,
    /// Bins of the y-distribution files over `[-|G|, |G|]`.
    pub y_bins: usize,
}

impl Default for MonteCarloSection {
    fn default() -> Self {
        MonteCarloSection {
            particles: 1_200_000,
            time: TimeUnit::Diffusive,
            y_bins: 40,
        }
    }
}

/// Mesh-pair convergence study over one parameter. Every run goes to steady
/// state on the scheme's default time step for its mesh.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TableSection {
    pub param: String,
    pub values: Vec<f64>,
    pub pairs: Vec<(usize, usize)>,
}

const TABLE_PARAMS: [&str; 4] = ["lambda0", "tau", "chi", "g"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub scheme: Scheme,
    #[serde(default)]
    pub snapshots: Vec<f64>,
    #[serde(default)]
    pub probes: Vec<f64>,
    #[serde(default = "default_output")]
    pub output: PathBuf,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub params: ParamsSection,
    #[serde(default)]
    pub grid: GridSection,
    #[serde(default)]
    pub steady: SteadySection,
    #[serde(default)]
    pub monte_carlo: MonteCarloSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub table: Option<TableSection>,
}

fn default_output() -> PathBuf {
    PathBuf::from("run")
}

impl ExperimentConfig {
    /// A configuration with every optional field at its default.
    pub fn new(scheme: Scheme) -> Self {
        ExperimentConfig {
            scheme,
            snapshots: Vec::new(),
            probes: Vec::new(),
            output: default_output(),
            seed: 0,
            params: ParamsSection::default(),
            grid: GridSection::default(),
            steady: SteadySection::default(),
            monte_carlo: MonteCarloSection::default(),
            table: None,
        }
    }

    pub fn dt(&self) -> f64 {
        self.grid.dt.unwrap_or_else(|| self.scheme.default_dt(self.grid.i_cells))
    }

    /// Model parameters in the scaling the scheme works in.
    pub fn model_params(&self) -> Result<ModelParams> {
        let p = &self.params;
        match self.scheme {
            Scheme::ApDiff | Scheme::NaiveSplit | Scheme::KsLimit | Scheme::KsCentered => {
                if p.tau.is_some() {
                    return Err(Error::config(
                        "params.tau",
                        format!("{} has tau = 1 built in; use ap_diff_modified for other values", self.scheme.name()),
                    ));
                }
                ModelParams::diffusive(p.g, p.chi, p.lambda0)
            }
            Scheme::ApDiffModified | Scheme::MonteCarlo => {
                ModelParams::diffusive_with_tau(p.g, p.chi, p.lambda0, p.tau.unwrap_or(1.0))
            }
            Scheme::ApHyp | Scheme::KineticLimit => ModelParams::hyperbolic(p.g, p.chi, p.lambda0, p.tau.unwrap_or(1.0)),
        }
    }

    /// Check the schema rules and the scheme's mesh and stability constraints.
    pub fn validate(&self) -> Result<()> {
        if self.grid.extension.is_some() && self.scheme != Scheme::ApDiffModified {
            return Err(Error::config("grid.extension", "only used by ap_diff_modified"));
        }
        if let Some(dt) = self.grid.dt {
            if !(dt > 0.0) || !dt.is_finite() {
                return Err(Error::config("grid.dt", format!("must be positive, got {dt}")));
            }
        }
        if let Some(t) = self.snapshots.iter().find(|t| !(**t >= 0.0) || !t.is_finite()) {
            return Err(Error::config("snapshots", format!("times must be finite and >= 0, got {t}")));
        }
        if let Some(x) = self.probes.iter().find(|x| !(0.0..=1.0).contains(*x)) {
            return Err(Error::config("probes", format!("x-locations must lie in [0, 1], got {x}")));
        }
        if self.output.as_os_str().is_empty() {
            return Err(Error::config("output", "must not be empty"));
        }
        if self.scheme == Scheme::MonteCarlo {
            if self.steady.enabled {
                return Err(Error::config("steady.enabled", "not available for monte_carlo"));
            }
            if self.monte_carlo.particles == 0 || self.monte_carlo.y_bins == 0 {
                return Err(Error::config("monte_carlo", "particles and y_bins must be positive"));
            }
            if self.grid.i_cells == 0 {
                return Err(Error::config("grid.i_cells", "must be positive"));
            }
            // an empty ensemble runs every parameter and step check
            let p = self.model_params()?;
            advance(&mut init_particles(0, p.g, 0), &p, self.dt(), 0)?;
        } else {
            build_simulation(self)?;
        }
        if let Some(table) = &self.table {
            self.validate_table(table)?;
        }
        Ok(())
    }

    fn validate_table(&self, table: &TableSection) -> Result<()> {
        if self.scheme == Scheme::MonteCarlo {
            return Err(Error::config("table", "convergence tables need a deterministic scheme"));
        }
        if !TABLE_PARAMS.contains(&table.param.as_str()) {
            return Err(Error::config(
                "table.param",
                format!("unknown parameter {:?}; expected one of {}", table.param, TABLE_PARAMS.join(", ")),
            ));
        }
        if table.values.is_empty() || table.pairs.is_empty() {
            return Err(Error::config("table", "values and pairs must not be empty"));
        }
        for &(coarse, fine) in &table.pairs {
            if coarse == 0 || fine % coarse != 0 {
                return Err(Error::MeshIncompatible { coarse, fine });
            }
        }
        for &value in &table.values {
            for &(coarse, fine) in &table.pairs {
                for mesh in [coarse, fine] {
                    table_run_config(self, &table.param, value, mesh)?.validate_scheme()?;
                }
            }
        }
        Ok(())
    }

    fn validate_scheme(&self) -> Result<()> {
        build_simulation(self).map(|_| ())
    }

    /// Steady-state rule with the scheme defaults filled in.
    pub fn steady_criterion(&self) -> SteadyCriterion {
        let s = &self.steady;
        let (window, t_max) = if self.scheme.hyperbolic() { (0.1, 500.0) } else { (0.001, 20.0) };
        SteadyCriterion {
            tol: s.tol.unwrap_or(1e-10),
            t_max: s.t_max.unwrap_or(t_max),
            window: s.window.unwrap_or(window),
            extrapolate: s.extrapolate.unwrap_or(6),
            direct: s.direct.unwrap_or(true),
        }
    }
}

/// Parse and validate a configuration.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let table: toml::Table = text.parse().map_err(|e: toml::de::Error| toml_error(text, e))?;
    if !table.contains_key("scheme") {
        return Err(Error::config(
            "scheme",
            format!("required field is missing; expected one of {SCHEME_NAMES}"),
        ));
    }
    let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| toml_error(text, e))?;
    cfg.validate()?;
    Ok(cfg)
}

/// The configuration as TOML text accepted by [`parse_config`].
pub fn to_toml(cfg: &ExperimentConfig) -> Result<String> {
    toml::to_string(cfg).map_err(|e| Error::config("config", e.to_string()))
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text)
}

/// Name the offending key when the parser points at one.
fn toml_error(text: &str, e: toml::de::Error) -> Error {
    let field = e
        .span()
        .and_then(|s| text.get(s))
        .map(|s| s.trim().trim_matches('"').to_string())
        .filter(|s| !s.is_empty() && s.len() < 64 && !s.contains('\n'))
        .unwrap_or_else(|| "config".to_string());
    Error::config(field, e.message().trim().to_string())
}

/// Start of a kinetic run: the standard initial condition, mirrored in `y` for `G < 0`.
fn kinetic_initial(grid: &GridSpec, params: &ModelParams) -> Result<TwoStreamField> {
    let upward = ModelParams {
        g: params.g.abs(),
        ..*params
    };
    let mut field = initial_condition(grid, &upward)?;
    if params.g < 0.0 {
        field.flip_y();
    }
    Ok(field)
}

/// The time-stepping simulation described by a deterministic configuration.
pub fn build_simulation(cfg: &ExperimentConfig) -> Result<Box<dyn Simulation>> {
    let p = cfg.model_params()?;
    let i = cfg.grid.i_cells;
    let dt = cfg.dt();
    let limit = |kind: LimitKind| -> Result<Box<dyn Simulation>> {
        let c = LimitConfig::new(p, i, dt)?;
        Ok(Box::new(LimitSim::new(kind, c, MacroState::from_rho(vec![1.0; i + 1]))?))
    };
    match cfg.scheme {
        Scheme::ApDiff => {
            let c = ApDiffConfig::new(p, i, dt)?;
            Ok(Box::new(ApDiff::new(&c, kinetic_initial(&c.grid, &p)?)?))
        }
        Scheme::ApDiffModified => {
            let c = ApDiffConfig::modified(p, i, dt, cfg.grid.extension)?;
            Ok(Box::new(ApDiff::new(&c, kinetic_initial(&c.grid, &p)?)?))
        }
        Scheme::ApHyp => {
            let c = ApHypConfig::new(p, i, dt)?;
            Ok(Box::new(ApHyp::new(&c, kinetic_initial(&c.grid, &p)?)?))
        }
        Scheme::NaiveSplit => {
            let c = NaiveConfig::new(p, i, dt)?;
            Ok(Box::new(NaiveSplit::new(&c, kinetic_initial(&c.grid, &p)?)?))
        }
        Scheme::KsLimit => limit(LimitKind::KsLimit),
        Scheme::KsCentered => limit(LimitKind::KsCentered),
        Scheme::KineticLimit => limit(LimitKind::KineticLimit),
        Scheme::MonteCarlo => Err(Error::config("scheme", "monte_carlo is not a time-stepping scheme")),
    }
}

/// Files written by a run.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunSummary {
    pub files: Vec<PathBuf>,
    /// Whether the steady-state rule was met, when a steady run was requested.
    pub steady_converged: Option<bool>,
}

/// Label used in file names: the shortest decimal form of `v`.
pub fn tag(v: f64) -> String {
    format!("{v}")
}

/// Run the experiment and write its CSV files into `out_dir`. On failure the
/// files written so far are kept next to a [`FAILURE_MARKER`] file holding
/// the error.
pub fn run_experiment(cfg: &ExperimentConfig, out_dir: &Path) -> Result<RunSummary> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let marker = out_dir.join(FAILURE_MARKER);
    if marker.exists() {
        fs::remove_file(&marker).map_err(|e| Error::io(&marker, e))?;
    }
    let result = write_config(cfg, out_dir).and_then(|config_file| {
        let mut summary = if cfg.scheme == Scheme::MonteCarlo {
            run_particles(cfg, out_dir)?
        } else {
            run_scheme(cfg, out_dir)?
        };
        summary.files.insert(0, config_file);
        Ok(summary)
    });
    if let Err(e) = &result {
        fs::write(&marker, format!("{e}\n")).map_err(|io| Error::io(&marker, io))?;
    }
    result
}

fn write_config(cfg: &ExperimentConfig, out_dir: &Path) -> Result<PathBuf> {
    let path = out_dir.join("config.toml");
    fs::write(&path, to_toml(cfg)?).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

fn sorted_snapshots(cfg: &ExperimentConfig) -> Vec<f64> {
    let mut times = cfg.snapshots.clone();
    times.sort_by(f64::total_cmp);
    times.dedup();
    times
}

fn run_scheme(cfg: &ExperimentConfig, out_dir: &Path) -> Result<RunSummary> {
    let mut sim = build_simulation(cfg)?;
    let mut summary = RunSummary::default();
    let mass0 = sim.density().mass();
    let mut mass_rows = vec![[0.0, mass0, 0.0]];
    let nodes = |sim: &dyn Simulation| -> Vec<f64> { (0..sim.density().rho.len()).map(|i| i as f64 * sim.dx()).collect() };

    for t in sorted_snapshots(cfg) {
        run_until(sim.as_mut(), t)?;
        let rho = sim.density().rho;
        let path = out_dir.join(format!("rho_t{}.csv", tag(t)));
        write_columns(&path, "x,rho", &[&nodes(sim.as_ref()), &rho])?;
        summary.files.push(path);
        let mass = sim.density().mass();
        mass_rows.push([sim.time(), mass, mass0 - mass]);
    }
    if cfg.steady.enabled {
        let outcome = run_to_steady(sim.as_mut(), &cfg.steady_criterion())?;
        if !outcome.converged {
            log::warn!(
                "steady-state rule not met by t = {} (rate {:e}); writing the last state",
                outcome.time,
                outcome.rate
            );
        }
        let path = out_dir.join("rho_steady.csv");
        write_columns(&path, "x,rho", &[&nodes(sim.as_ref()), &sim.density().rho])?;
        summary.files.push(path);
        let path = out_dir.join("steady.csv");
        let converged = if outcome.converged { 1.0 } else { 0.0 };
        write_columns(&path, "t,converged,rate", &[&[outcome.time], &[converged], &[outcome.rate]])?;
        summary.files.push(path);
        summary.steady_converged = Some(outcome.converged);
        let mass = sim.density().mass();
        mass_rows.push([sim.time(), mass, mass0 - mass]);
    }
    let path = out_dir.join("mass.csv");
    write_rows(&path, "t,mass,mass_defect", &mass_rows)?;
    summary.files.push(path);

    if let Some((field, grid)) = sim.kinetic() {
        for &x in &cfg.probes {
            let i = ((x / grid.dx).round() as usize).min(grid.i_cells);
            let k = grid.k_half as i64;
            let ys: Vec<f64> = (-k..=k).map(|k| grid.y(k)).collect();
            let path = out_dir.join(format!("ydist_x{}.csv", tag(x)));
            write_columns(&path, "y,p_plus,p_minus", &[&ys, field.plus_column(i), field.minus_column(i)])?;
            summary.files.push(path);
        }
    } else if !cfg.probes.is_empty() {
        log::warn!("{} has no internal state; probes are ignored", cfg.scheme.name());
    }
    Ok(summary)
}

fn run_particles(cfg: &ExperimentConfig, out_dir: &Path) -> Result<RunSummary> {
    let p = cfg.model_params()?;
    let dt = cfg.dt();
    let bins = cfg.grid.i_cells;
    let scale = match cfg.monte_carlo.time {
        TimeUnit::Diffusive => p.lambda0,
        TimeUnit::Physical => 1.0,
    };
    let mut ens = init_particles(cfg.monte_carlo.particles, p.g, cfg.seed);
    let mut summary = RunSummary::default();
    let centres: Vec<f64> = (0..bins).map(|b| (b as f64 + 0.5) / bins as f64).collect();
    let mass = |ens: &ParticleEnsemble| density_histogram(ens, bins).rho.iter().sum::<f64>() / bins as f64;
    let mut mass_rows = vec![[0.0, mass(&ens), 0.0]];

    for t in sorted_snapshots(cfg) {
        let target = (t * scale / dt).round() as u64;
        let remaining = target.saturating_sub(ens.steps());
        advance(&mut ens, &p, dt, remaining)?;
        let path = out_dir.join(format!("rho_t{}.csv", tag(t)));
        write_columns(&path, "x,rho", &[&centres, &density_histogram(&ens, bins).rho])?;
        summary.files.push(path);
        mass_rows.push([t, mass(&ens), 0.0]);
    }
    let path = out_dir.join("mass.csv");
    write_rows(&path, "t,mass,mass_defect", &mass_rows)?;
    summary.files.push(path);

    let g = p.g.abs();
    for &x in &cfg.probes {
        let h = 0.5 / bins as f64;
        let hist = y_histogram(&ens, (x - h, x + h), (-g, g), cfg.monte_carlo.y_bins);
        let path = out_dir.join(format!("ydist_x{}.csv", tag(x)));
        write_columns(&path, "y,p_plus,p_minus", &[&hist.centers, &hist.plus, &hist.minus])?;
        summary.files.push(path);
    }
    Ok(summary)
}

/// The configuration of one table cell: `param = value` on `mesh` intervals
/// with the default time step.
fn table_run_config(cfg: &ExperimentConfig, param: &str, value: f64, mesh: usize) -> Result<ExperimentConfig> {
    let mut run = cfg.clone();
    run.grid.i_cells = mesh;
    run.grid.dt = None;
    run.table = None;
    match param {
        "lambda0" => run.params.lambda0 = value,
        "tau" => run.params.tau = Some(value),
        "chi" => run.params.chi = value,
        "g" => run.params.g = value,
        other => return Err(Error::config("table.param", format!("unknown parameter {other:?}"))),
    }
    Ok(run)
}

/// Steady density of a deterministic configuration.
pub fn steady_profile(cfg: &ExperimentConfig) -> Result<Vec<f64>> {
    let mut sim = build_simulation(cfg)?;
    let outcome = run_to_steady(sim.as_mut(), &cfg.steady_criterion())?;
    if !outcome.converged {
        log::warn!(
            "{} I={}: steady-state rule not met by t = {} (rate {:e})",
            cfg.scheme.name(),
            cfg.grid.i_cells,
            outcome.time,
            outcome.rate
        );
    }
    Ok(sim.density().rho)
}

/// Mesh-pair convergence table of a configuration with a `[table]` section,
/// written to `table_<scheme>_<param>.csv` in `out_dir`.
pub fn run_table(cfg: &ExperimentConfig, out_dir: &Path) -> Result<ConvergenceReport> {
    let table = cfg
        .table
        .as_ref()
        .ok_or_else(|| Error::config("table", "the configuration has no [table] section"))?;
    cfg.validate_table(table)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let marker = out_dir.join(FAILURE_MARKER);
    let result = convergence_table(cfg.scheme.name(), &table.param, &table.values, &table.pairs, |value, mesh| {
        steady_profile(&table_run_config(cfg, &table.param, value, mesh)?)
    })
    .and_then(|report| {
        let path = out_dir.join(format!("table_{}_{}.csv", cfg.scheme.name(), table.param));
        fs::write(&path, report.to_csv()).map_err(|e| Error::io(&path, e))?;
        Ok(report)
    });
    match &result {
        Err(e) => fs::write(&marker, format!("{e}\n")).map_err(|io| Error::io(&marker, io))?,
        Ok(_) if marker.exists() => fs::remove_file(&marker).map_err(|e| Error::io(&marker, e))?,
        Ok(_) => {}
    }
    result
}

/// One line of `compare.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProfileComparison {
    pub profile: String,
    pub linf_rel_err: f64,
}

/// Compare every density profile present in both run directories, relative
/// to `run_b`, and write `compare.csv` into `out_dir`.
///
/// Profiles are unit-normalized first. Node profiles on nested meshes are
/// compared at the coarse nodes; a node profile against a histogram is first
/// averaged onto cell centres.
pub fn compare_runs(run_a: &Path, run_b: &Path, out_dir: &Path) -> Result<Vec<ProfileComparison>> {
    let mut names: Vec<String> = fs::read_dir(run_a)
        .map_err(|e| Error::io(run_a, e))?
        .filter_map(|entry| entry.ok()?.file_name().into_string().ok())
        .filter(|n| n.starts_with("rho_") && n.ends_with(".csv") && run_b.join(n).is_file())
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(Error::Data {
            path: format!("{} and {}", run_a.display(), run_b.display()),
            message: "no density profile file is present in both runs".into(),
        });
    }
    let mut rows = Vec::with_capacity(names.len());
    for name in names {
        let (xa, ra) = read_profile(&run_a.join(&name))?;
        let (xb, rb) = read_profile(&run_b.join(&name))?;
        let err = compare_profiles(&xa, &ra, &xb, &rb).map_err(|e| Error::Data {
            path: name.clone(),
            message: e.to_string(),
        })?;
        rows.push(ProfileComparison {
            profile: name.trim_end_matches(".csv").to_string(),
            linf_rel_err: err,
        });
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut text = String::from("profile,linf_rel_err\n");
    for r in &rows {
        let _ = writeln!(text, "{},{:.16e}", r.profile, r.linf_rel_err);
    }
    let path = out_dir.join(COMPARE_FILE);
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(rows)
}

/// Node profiles start at `x = 0`; histograms are stored at cell centres.
fn is_nodes(x: &[f64]) -> bool {
    x.first() == Some(&0.0)
}

fn normalized(x: &[f64], rho: &[f64]) -> Vec<f64> {
    if is_nodes(x) {
        unit_normalize(rho, 1.0 / (rho.len() - 1) as f64)
    } else {
        unit_normalize_bins(rho, 1.0 / rho.len() as f64)
    }
}

/// L-infinity relative difference of profile `a` from reference `b`.
pub fn compare_profiles(xa: &[f64], ra: &[f64], xb: &[f64], rb: &[f64]) -> Result<f64> {
    if ra.len() < 2 || rb.len() < 2 {
        return Err(Error::GridMismatch("profiles need at least two points".into()));
    }
    match (is_nodes(xa), is_nodes(xb)) {
        (true, true) if ra.len() == rb.len() => Ok(max_rel_deviation(&normalized(xa, ra), &normalized(xb, rb))),
        (true, true) if ra.len() < rb.len() => linf_rel_error(ra, rb),
        (true, true) => {
            // reference on the coarse nodes of a
            let (ic, jf) = (rb.len() - 1, ra.len() - 1);
            if jf % ic != 0 {
                return Err(Error::MeshIncompatible { coarse: ic, fine: jf });
            }
            let fine = normalized(xa, ra);
            let coarse = normalized(xb, rb);
            let sub: Vec<f64> = (0..=ic).map(|i| fine[i * (jf / ic)]).collect();
            Ok(max_rel_deviation(&sub, &coarse))
        }
        (na, nb) => {
            let to_bins = |x: &[f64], r: &[f64], nodes: bool| {
                if nodes {
                    let bins = nodes_to_bins(r);
                    unit_normalize_bins(&bins, 1.0 / bins.len() as f64)
                } else {
                    normalized(x, r)
                }
            };
            let a = to_bins(xa, ra, na);
            let b = to_bins(xb, rb, nb);
            if a.len() != b.len() {
                return Err(Error::GridMismatch(format!(
                    "profiles have {} and {} cells",
                    a.len(),
                    b.len()
                )));
            }
            Ok(max_rel_deviation(&a, &b))
        }
    }
}

/// Read a two-column `x,rho` file.
pub fn read_profile(path: &Path) -> Result<(Vec<f64>, Vec<f64>)> {
    let columns = read_csv(path)?;
    match <[Vec<f64>; 2]>::try_from(columns) {
        Ok([x, rho]) => Ok((x, rho)),
        Err(c) => Err(Error::Data {
            path: path.display().to_string(),
            message: format!("expected 2 columns, found {}", c.len()),
        }),
    }
}

/// Columns of a numeric CSV file with one header line.
pub fn read_csv(path: &Path) -> Result<Vec<Vec<f64>>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let bad = |message: String| Error::Data {
        path: path.display().to_string(),
        message,
    };
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| bad("empty file".into()))?;
    let width = header.split(',').count();
    let mut columns = vec![Vec::new(); width];
    for (n, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != width {
            return Err(bad(format!("line {}: expected {width} fields", n + 2)));
        }
        for (col, f) in columns.iter_mut().zip(fields) {
            col.push(f.trim().parse().map_err(|_| bad(format!("line {}: not a number: {f:?}", n + 2)))?);
        }
    }
    Ok(columns)
}

fn write_columns(path: &Path, header: &str, columns: &[&[f64]]) -> Result<()> {
    let n = columns[0].len();
    let rows: Vec<Vec<f64>> = (0..n).map(|i| columns.iter().map(|c| c[i]).collect()).collect();
    write_rows(path, header, &rows)
}

/// Write rows at full double precision (17 significant digits).
fn write_rows<R: AsRef<[f64]>>(path: &Path, header: &str, rows: &[R]) -> Result<()> {
    let mut text = String::with_capacity(32 * rows.len() * 3);
    text.push_str(header);
    text.push('\n');
    for row in rows {
        let cells: Vec<String> = row.as_ref().iter().map(|v| format!("{v:.16e}")).collect();
        text.push_str(&cells.join(","));
        text.push('\n');
    }
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(text.as_bytes())
        .and_then(|_| file.flush())
        .map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fig3a() -> &'static str {
        "scheme = \"ap_diff\"\nsnapshots = [0.5, 2.0]\nprobes = [0.5]\n[params]\nlambda0 = 10.0\n[grid]\ni_cells = 20\n"
    }

    #[test]
    fn empty_file_reports_missing_scheme() {
        match parse_config("") {
            Err(Error::Config { field, .. }) => assert_eq!(field, "scheme"),
            other => panic!("expected a scheme error, got {other:?}"),
        }
    }

    #[test]
    fn defaults_fill_the_model_parameters() {
        let cfg = parse_config("scheme = \"ks_limit\"").unwrap();
        assert_eq!(cfg.params, ParamsSection::default());
        assert_eq!((cfg.params.g, cfg.params.chi), (1.0, 0.5));
        assert_eq!(cfg.grid.i_cells, 100);
        assert_eq!(cfg.dt(), 1e-5);
    }

    #[test]
    fn config_round_trips() {
        let cfg = parse_config(fig3a()).unwrap();
        let again = parse_config(&to_toml(&cfg).unwrap()).unwrap();
        assert_eq!(cfg, again);

        let mut full = ExperimentConfig::new(Scheme::ApDiffModified);
        full.params.tau = Some(0.1);
        full.grid = GridSection {
            i_cells: 40,
            dt: Some(1e-5),
            extension: Some(2.0),
        };
        full.steady = SteadySection {
            enabled: true,
            extrapolate: Some(4),
            ..Default::default()
        };
        full.table = Some(TableSection {
            param: "lambda0".into(),
            values: vec![10.0, 100.0],
            pairs: vec![(10, 40), (20, 40)],
        });
        assert_eq!(parse_config(&to_toml(&full).unwrap()).unwrap(), full);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = parse_config("scheme = \"ap_diff\"\nlambda = 3.0\n").unwrap_err();
        assert!(matches!(&err, Error::Config { field, .. } if field == "lambda"), "{err}");
        let err = parse_config("scheme = \"ap_diff\"\n[grid]\nI = 3\n").unwrap_err();
        assert!(matches!(&err, Error::Config { field, .. } if field == "I"), "{err}");
        assert!(parse_config("scheme = \"upwind\"").unwrap_err().is_validation());
    }

    #[test]
    fn cfl_violation_names_the_admissible_step() {
        let err = parse_config("scheme = \"ap_diff\"\n[grid]\ni_cells = 10\ndt = 0.01\n").unwrap_err();
        match &err {
            Error::Cfl { dt_max, rule, .. } => {
                assert!(*dt_max < 0.01);
                assert!(rule.contains("dx^2"));
            }
            other => panic!("expected a CFL error, got {other:?}"),
        }
        assert!(err.to_string().contains("admissible dt"));
        let err = parse_config("scheme = \"ap_hyp\"\n[grid]\ni_cells = 10\ndt = 0.2\n").unwrap_err();
        assert!(matches!(err, Error::Cfl { .. }));
    }

    #[test]
    fn scheme_specific_fields_are_checked() {
        assert!(parse_config("scheme = \"ap_diff\"\n[params]\ntau = 0.1\n").is_err());
        assert!(parse_config("scheme = \"ap_hyp\"\n[grid]\nextension = 2.0\n").is_err());
        assert!(parse_config("scheme = \"ap_diff_modified\"\n[params]\ntau = 0.1\n[grid]\ni_cells = 20\n").is_ok());
        assert!(parse_config("scheme = \"monte_carlo\"\n[steady]\nenabled = true\n").is_err());
        // one tumble per step at most
        assert!(parse_config("scheme = \"monte_carlo\"\n[params]\nlambda0 = 1e6\n").is_err());
        let bad_pair = "scheme = \"ks_limit\"\n[table]\nparam = \"lambda0\"\nvalues = [10.0]\npairs = [[30, 100]]\n";
        assert!(matches!(parse_config(bad_pair), Err(Error::MeshIncompatible { .. })));
    }

    #[test]
    fn snapshots_produce_one_profile_each() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = parse_config(fig3a()).unwrap();
        cfg.snapshots = vec![0.5, 2.0, 8.0];
        cfg.grid.i_cells = 8;
        let summary = run_experiment(&cfg, dir.path()).unwrap();
        for t in ["0.5", "2", "8"] {
            let (x, rho) = read_profile(&dir.path().join(format!("rho_t{t}.csv"))).unwrap();
            assert_eq!((x.len(), rho.len()), (9, 9));
        }
        let mass = read_csv(&dir.path().join("mass.csv")).unwrap();
        assert_eq!(mass[0].len(), 4);
        let ydist = read_csv(&dir.path().join("ydist_x0.5.csv")).unwrap();
        assert_eq!(ydist.len(), 3);
        assert_eq!(ydist[0].len(), 17);
        assert!(summary.files.iter().all(|f| f.exists()));
        assert!(!dir.path().join(FAILURE_MARKER).exists());
    }

    #[test]
    fn values_are_written_at_full_precision() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.csv");
        let v = [std::f64::consts::PI, 1.0 / 3.0, 1e-300, -2.5e17];
        write_columns(&path, "a", &[&v]).unwrap();
        assert_eq!(read_csv(&path).unwrap()[0], v);
    }

    #[test]
    fn particle_runs_repeat_for_equal_seeds() {
        let text = "scheme = \"monte_carlo\"\nsnapshots = [0.05]\nprobes = [0.5]\nseed = 11\n\
                    [grid]\ni_cells = 10\ndt = 1e-3\n[monte_carlo]\nparticles = 5000\n";
        let cfg = parse_config(text).unwrap();
        let (a, b, c) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        run_experiment(&cfg, a.path()).unwrap();
        run_experiment(&cfg, b.path()).unwrap();
        let mut other = cfg.clone();
        other.seed = 12;
        run_experiment(&other, c.path()).unwrap();
        for name in ["rho_t0.05.csv", "ydist_x0.5.csv", "mass.csv"] {
            let fa = fs::read(a.path().join(name)).unwrap();
            assert_eq!(fa, fs::read(b.path().join(name)).unwrap(), "{name}");
        }
        assert_ne!(
            fs::read(a.path().join("rho_t0.05.csv")).unwrap(),
            fs::read(c.path().join("rho_t0.05.csv")).unwrap()
        );
        let (_, rho) = read_profile(&a.path().join("rho_t0.05.csv")).unwrap();
        assert!((rho.iter().sum::<f64>() / 10.0 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn run_compared_with_itself_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = parse_config(fig3a()).unwrap();
        run_experiment(&cfg, dir.path()).unwrap();
        let rows = compare_runs(dir.path(), dir.path(), dir.path()).unwrap();
        assert_eq!(rows.len(), 2);
        assert!(rows.iter().all(|r| r.linf_rel_err == 0.0));
        let written = read_csv(&dir.path().join(COMPARE_FILE));
        // the profile column is text
        assert!(written.is_err());
        assert!(fs::read_to_string(dir.path().join(COMPARE_FILE)).unwrap().starts_with("profile,linf_rel_err\n"));
    }

    #[test]
    fn profiles_on_different_meshes_are_compared() {
        let nodes = |n: usize| (0..=n).map(|i| i as f64 / n as f64).collect::<Vec<_>>();
        let f = |x: &f64| (0.3 * x).exp();
        let (x4, x8) = (nodes(4), nodes(8));
        let (r4, r8): (Vec<f64>, Vec<f64>) = (x4.iter().map(f).collect(), x8.iter().map(f).collect());
        let forward = compare_profiles(&x4, &r4, &x8, &r8).unwrap();
        let backward = compare_profiles(&x8, &r8, &x4, &r4).unwrap();
        assert!(forward < 1e-2 && backward < 1e-2);
        // a histogram of the averaged nodes matches exactly
        let centres: Vec<f64> = (0..8).map(|b| (b as f64 + 0.5) / 8.0).collect();
        let bins: Vec<f64> = nodes_to_bins(&r8).iter().map(|v| 3.0 * v).collect();
        assert!(compare_profiles(&x8, &r8, &centres, &bins).unwrap() < 1e-14);
        assert!(compare_profiles(&x4, &r4, &centres, &bins).is_err());
    }

    #[test]
    fn failed_runs_leave_a_marker() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = ExperimentConfig::new(Scheme::ApDiff);
        cfg.grid.i_cells = 8;
        cfg.grid.dt = Some(1.0);
        assert!(run_experiment(&cfg, dir.path()).is_err());
        let marker = fs::read_to_string(dir.path().join(FAILURE_MARKER)).unwrap();
        assert!(marker.contains("stability bound"));
        assert!(dir.path().join("config.toml").exists());
        cfg.grid.dt = None;
        run_experiment(&cfg, dir.path()).unwrap();
        assert!(!dir.path().join(FAILURE_MARKER).exists());
    }

    #[test]
    fn table_mode_writes_the_convergence_csv() {
        let dir = tempfile::tempdir().unwrap();
        let text = "scheme = \"ks_limit\"\n[table]\nparam = \"lambda0\"\nvalues = [10.0]\npairs = [[4, 16], [8, 16]]\n";
        let cfg = parse_config(text).unwrap();
        let report = run_table(&cfg, dir.path()).unwrap();
        assert_eq!(report.rows.len(), 2);
        let csv = fs::read_to_string(dir.path().join("table_ks_limit_lambda0.csv")).unwrap();
        assert!(csv.starts_with(crate::diagnostics::TABLE_HEADER));
        assert!(report.get(10.0, 4, 16).unwrap() > report.get(10.0, 8, 16).unwrap());
    }
}
