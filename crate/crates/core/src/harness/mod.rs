//! Experiment configuration, replication grid, rate fits and reports.

mod rate;
mod report;

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use rate::{fit_rate, RateFit, RatePoint};
pub use report::{Format, PlotSpec, ResultTable};

use crate::bias_potential::{entropy_gap_check, fit, sample_model, BiasModel, FitConfig, PotentialRep};
use crate::error::{param, Error, Result};
use crate::gmmd::{barron_gmmd_vs_gaussian, expected_rate_bound, gmmd, mmd_vs_gaussian, McEstimate, OptimizerConfig};
use crate::measures::{sample, DistributionSpec, RngSeed};
use crate::mfg_lq::{nash_gap, solve_mfg_lq_discrete, LqGameParams};
use crate::particle_sde::{brownian, gmmd_sup_vs_laws, modulus, simulate_particles, LinearMv};
use crate::special::mean_se;
use crate::test_classes::{ClassKind, KernelKind, NeuronParams, TestClassSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    IidRate,
    DimSweep,
    MvRate,
    Biaspot,
    MfgGap,
    Modulus,
    Tail,
}

impl ExperimentKind {
    pub fn tag(&self) -> &'static str {
        match self {
            ExperimentKind::IidRate => "iid_rate",
            ExperimentKind::DimSweep => "dim_sweep",
            ExperimentKind::MvRate => "mv_rate",
            ExperimentKind::Biaspot => "biaspot",
            ExperimentKind::MfgGap => "mfg_gap",
            ExperimentKind::Modulus => "modulus",
            ExperimentKind::Tail => "tail",
        }
    }

    fn id(&self) -> u64 {
        *self as u64
    }

    fn fits_rates(&self) -> bool {
        matches!(self, ExperimentKind::IidRate | ExperimentKind::DimSweep | ExperimentKind::MvRate | ExperimentKind::MfgGap)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MvConfig {
    pub model: LinearMv,
    pub steps: usize,
    /// GMMD is evaluated every `stride` grid steps (and at the horizon).
    pub stride: usize,
}

impl Default for MvConfig {
    fn default() -> Self {
        MvConfig { model: LinearMv::default(), steps: 1000, stride: 50 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetNeuron {
    pub coeff: f64,
    pub omega: Vec<f64>,
    pub b: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BiaspotConfig {
    pub base: DistributionSpec,
    pub target: Vec<TargetNeuron>,
    /// Class budget of the fit; the target's total variation when absent.
    pub budget: Option<f64>,
    /// Size of the reference sample as a multiple of `n`.
    pub reference_factor: usize,
    pub fit: FitConfig,
}

impl Default for BiaspotConfig {
    fn default() -> Self {
        BiaspotConfig {
            base: DistributionSpec::uniform(-1.0, 1.0),
            target: vec![TargetNeuron { coeff: 1.5, omega: vec![0.8], b: 0.6 }],
            budget: None,
            reference_factor: 10,
            fit: FitConfig::default(),
        }
    }
}

impl BiaspotConfig {
    pub fn target_potential(&self) -> Result<PotentialRep> {
        let terms = self
            .target
            .iter()
            .map(|t| Ok((t.coeff, NeuronParams::normalized(t.omega.clone(), t.b)?)))
            .collect::<Result<Vec<_>>>()?;
        let tv: f64 = terms.iter().map(|(c, _)| c.abs()).sum();
        let rep = PotentialRep::NeuronSum { terms, budget: self.budget.unwrap_or(tv) };
        rep.validate()?;
        Ok(rep)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MfgConfig {
    pub game: LqGameParams,
    pub steps: usize,
    /// Also run the same game with every interaction switched off.
    pub control: bool,
}

impl Default for MfgConfig {
    fn default() -> Self {
        MfgConfig { game: LqGameParams::coupled(), steps: 100, control: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModulusConfig {
    pub steps: usize,
    pub sigma: f64,
    pub horizon: f64,
    /// Window sizes `h = horizon * 2^-k` for every listed `k`.
    pub k: Vec<u32>,
}

impl Default for ModulusConfig {
    fn default() -> Self {
        ModulusConfig { steps: 1024, sigma: 1.0, horizon: 1.0, k: (2..=7).collect() }
    }
}

/// Settings of the concentration experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConcentrationConfig {
    /// T1 constant of the sampled law. For a standard Gaussian the
    /// transport inequality holds with `kappa = 1`.
    pub kappa: f64,
    pub thresholds: Vec<f64>,
}

impl Default for ConcentrationConfig {
    fn default() -> Self {
        ConcentrationConfig { kappa: 1.0, thresholds: (1..=10).map(|i| 0.01 * i as f64).collect() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Tolerances {
    /// Multiplier on standard errors in bound checks.
    pub se_multiplier: f64,
    /// Additive slack on the entropy inequality.
    pub entropy_slack: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances { se_multiplier: 3.0, entropy_slack: 0.02 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    #[serde(default = "barron_kind")]
    pub class: ClassKind,
    /// Sampled law for `iid_rate`, `dim_sweep` and `tail`; a standard
    /// Gaussian in each listed dimension when absent.
    #[serde(default)]
    pub distribution: Option<DistributionSpec>,
    #[serde(default)]
    pub n: Vec<usize>,
    #[serde(default = "default_dims")]
    pub d: Vec<usize>,
    #[serde(default = "default_reps")]
    pub reps: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub output: Option<PathBuf>,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub mv: MvConfig,
    #[serde(default)]
    pub biaspot: BiaspotConfig,
    #[serde(default)]
    pub mfg: MfgConfig,
    #[serde(default)]
    pub modulus: ModulusConfig,
    #[serde(default)]
    pub tail: ConcentrationConfig,
    #[serde(default)]
    pub tolerance: Tolerances,
}

fn barron_kind() -> ClassKind {
    ClassKind::Barron
}

fn default_dims() -> Vec<usize> {
    vec![1]
}

fn default_reps() -> usize {
    32
}

impl ExperimentConfig {
    pub fn new(experiment: ExperimentKind, n: Vec<usize>) -> Self {
        ExperimentConfig {
            experiment,
            class: ClassKind::Barron,
            distribution: None,
            n,
            d: default_dims(),
            reps: default_reps(),
            seed: 0,
            output: None,
            optimizer: OptimizerConfig::default(),
            mv: MvConfig::default(),
            biaspot: BiaspotConfig::default(),
            mfg: MfgConfig::default(),
            modulus: ModulusConfig::default(),
            tail: ConcentrationConfig::default(),
            tolerance: Tolerances::default(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    /// The fully resolved configuration, defaults included.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.reps == 0 || self.reps >= 1 << 32 {
            return param("reps must be in [1, 2^32)");
        }
        if self.d.is_empty() || self.d.contains(&0) || self.d.len() >= 1 << 12 {
            return param("dimension list must be non-empty with positive entries");
        }
        if self.n.len() >= 1 << 16 || self.n.contains(&0) {
            return param("sample sizes must be positive");
        }
        if self.n.windows(2).any(|w| w[0] >= w[1]) {
            return param("n list must be strictly increasing");
        }
        let needs_n = !matches!(self.experiment, ExperimentKind::Modulus);
        if needs_n && self.n.is_empty() {
            return param("n list must not be empty");
        }
        if self.experiment.fits_rates() && self.n.len() < 3 {
            return param("rate experiments need at least three sample sizes");
        }
        if let Some(dist) = &self.distribution {
            dist.validate()?;
            if self.d.iter().any(|d| *d != dist.dim()) {
                return param("distribution dimension must match every entry of d");
            }
        }
        TestClassSpec::from_kind(self.class.clone())?;
        match self.experiment {
            ExperimentKind::MfgGap => {
                self.mfg.game.validate()?;
                if self.n.iter().any(|n| *n < 2) {
                    return param("the game needs at least two players");
                }
            }
            ExperimentKind::Biaspot => {
                self.biaspot.target_potential()?;
                if self.biaspot.base.dim() != 1 {
                    return param("bias potential experiments are one-dimensional");
                }
            }
            ExperimentKind::MvRate => {
                if self.mv.steps == 0 {
                    return param("need at least one time step");
                }
            }
            ExperimentKind::Modulus => {
                let m = &self.modulus;
                if m.steps == 0 || m.k.is_empty() || !(m.horizon > 0.0) {
                    return param("modulus experiment needs steps, horizon and k values");
                }
            }
            ExperimentKind::Tail if !(self.tail.kappa > 0.0) || self.tail.thresholds.is_empty() => {
                return param("tail experiment needs kappa > 0 and thresholds");
            }
            _ => {}
        }
        Ok(())
    }

    /// Seed of grid cell `(series, n_index, rep)`. Distinct cells get
    /// distinct stream ids: experiment, series, n index and rep occupy
    /// disjoint bit ranges.
    pub fn cell_seed(&self, series: usize, n_index: usize, rep: usize) -> RngSeed {
        let stream = (self.experiment.id() << 60) | ((series as u64) << 48) | ((n_index as u64) << 32) | rep as u64;
        RngSeed::with_stream(self.seed, stream)
    }

    fn class_for_dim(&self, d: usize) -> Result<TestClassSpec> {
        let kind = match &self.class {
            ClassKind::Rkhs { kernel } => {
                let mut k = *kernel;
                k.dim = d;
                ClassKind::Rkhs { kernel: k }
            }
            other => other.clone(),
        };
        TestClassSpec::from_kind(kind)
    }

    fn distribution_for_dim(&self, d: usize) -> DistributionSpec {
        self.distribution.clone().unwrap_or_else(|| DistributionSpec::standard_gaussian(d))
    }
}

struct Cell {
    series: usize,
    n_index: usize,
    reps: usize,
}

struct CellOutcome {
    values: Vec<Vec<f64>>,
    errors: Vec<String>,
}

/// Runs every `(cell, rep)` task on the current pool. Results are gathered
/// in grid order, so the output does not depend on scheduling.
fn run_grid(cfg: &ExperimentConfig, cells: &[Cell], f: impl Fn(&Cell, usize, RngSeed) -> Result<Vec<f64>> + Sync) -> Vec<CellOutcome> {
    let tasks: Vec<(usize, usize)> = cells.iter().enumerate().flat_map(|(c, cell)| (0..cell.reps).map(move |r| (c, r))).collect();
    let results: Vec<Result<Vec<f64>>> = tasks
        .par_iter()
        .map(|&(c, r)| {
            let cell = &cells[c];
            f(cell, r, cfg.cell_seed(cell.series, cell.n_index, r))
        })
        .collect();
    let mut out: Vec<CellOutcome> = cells.iter().map(|_| CellOutcome { values: Vec::new(), errors: Vec::new() }).collect();
    for (&(c, r), res) in tasks.iter().zip(results) {
        match res {
            Ok(v) => out[c].values.push(v),
            Err(e) => out[c].errors.push(format!("rep {r}: {e}")),
        }
    }
    out
}

fn column_stats(values: &[Vec<f64>], j: usize) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    mean_se(&values.iter().map(|v| v[j]).collect::<Vec<_>>())
}

fn record_failures(table: &mut ResultTable, label: &str, outcome: &CellOutcome) {
    for e in &outcome.errors {
        table.failures.push(format!("{label} {e}"));
    }
}

fn add_fit(table: &mut ResultTable, label: String, points: &[(f64, f64, f64)]) {
    match fit_rate(points) {
        Ok(f) => table.fits.push((label, f)),
        Err(e) => table.meta.push(format!("fit {label}: unavailable ({e})")),
    }
}

/// One discrepancy draw between the sampled law and its `n`-point empirical
/// measure. Gaussian laws are compared exactly where the class allows it,
/// otherwise against an independent sample of the same size.
fn iid_draw(cfg: &ExperimentConfig, class: &TestClassSpec, dist: &DistributionSpec, n: usize, seed: RngSeed) -> Result<f64> {
    let x = sample(dist, n, seed.child(0))?;
    let opt = cfg.optimizer.with_seed(seed.child(2));
    if let DistributionSpec::Gaussian(g) = dist {
        match &class.kind {
            ClassKind::Barron => return Ok(barron_gmmd_vs_gaussian(g, &x, &opt)?.value),
            ClassKind::Rkhs { kernel } if matches!(kernel.kind, KernelKind::Gaussian { .. }) => {
                return Ok(mmd_vs_gaussian(kernel, g, &x)?.value)
            }
            _ => {}
        }
    }
    let y = sample(dist, n, seed.child(1))?;
    Ok(gmmd(class, &y, &x, &opt)?.value)
}

fn run_iid(cfg: &ExperimentConfig) -> Result<ResultTable> {
    let mut table = ResultTable::new(cfg.experiment.tag(), &["d", "n", "mean", "se", "bound", "within_bound", "reps_ok"]);
    let classes = cfg.d.iter().map(|d| cfg.class_for_dim(*d)).collect::<Result<Vec<_>>>()?;
    let cells: Vec<Cell> =
        (0..cfg.d.len()).flat_map(|s| (0..cfg.n.len()).map(move |i| Cell { series: s, n_index: i, reps: cfg.reps })).collect();
    let outcomes = run_grid(cfg, &cells, |cell, _, seed| {
        let d = cfg.d[cell.series];
        Ok(vec![iid_draw(cfg, &classes[cell.series], &cfg.distribution_for_dim(d), cfg.n[cell.n_index], seed)?])
    });
    let mut fits: Vec<Vec<(f64, f64, f64)>> = vec![Vec::new(); cfg.d.len()];
    for (cell, out) in cells.iter().zip(&outcomes) {
        let (d, n) = (cfg.d[cell.series], cfg.n[cell.n_index]);
        record_failures(&mut table, &format!("d={d} n={n}"), out);
        let (mean, se) = column_stats(&out.values, 0);
        let m2 = cfg.distribution_for_dim(d).second_moment();
        let bound = expected_rate_bound(classes[cell.series].constants.a3, m2, n);
        let within = if mean <= bound + cfg.tolerance.se_multiplier * se { 1.0 } else { 0.0 };
        table.rows.push(vec![d as f64, n as f64, mean, se, bound, within, out.values.len() as f64]);
        fits[cell.series].push((n as f64, mean, se));
    }
    for (s, pts) in fits.iter().enumerate() {
        add_fit(&mut table, format!("d={}", cfg.d[s]), pts);
    }
    table.plot = Some(PlotSpec { x: "n".into(), y: "mean".into(), series: Some("d".into()) });
    Ok(table)
}

fn run_mv(cfg: &ExperimentConfig) -> Result<ResultTable> {
    let mut table = ResultTable::new(
        cfg.experiment.tag(),
        &["n", "mean", "se", "terminal_mean", "terminal_se", "terminal_x_mean", "terminal_x_var", "reps_ok"],
    );
    let class = cfg.class_for_dim(1)?;
    let model = cfg.mv.model.model();
    let laws = cfg.mv.model.euler_laws(cfg.mv.steps);
    let cells: Vec<Cell> = (0..cfg.n.len()).map(|i| Cell { series: 0, n_index: i, reps: cfg.reps }).collect();
    let outcomes = run_grid(cfg, &cells, |cell, _, seed| {
        let ens = simulate_particles(&model, cfg.n[cell.n_index], cfg.mv.steps, seed.child(0))?;
        let sup = gmmd_sup_vs_laws(&ens, &laws, &class, &cfg.optimizer.with_seed(seed.child(1)), cfg.mv.stride)?;
        let terminal = sup.per_step.last().map(|p| p.1).unwrap_or(f64::NAN);
        let (m, v) = ens.moments(cfg.mv.steps);
        Ok(vec![sup.value * sup.value, terminal, m[0], v[0]])
    });
    let mut pts = Vec::new();
    for (cell, out) in cells.iter().zip(&outcomes) {
        let n = cfg.n[cell.n_index];
        record_failures(&mut table, &format!("n={n}"), out);
        let (mean, se) = column_stats(&out.values, 0);
        let (tm, tse) = column_stats(&out.values, 1);
        let (xm, _) = column_stats(&out.values, 2);
        let (xv, _) = column_stats(&out.values, 3);
        table.rows.push(vec![n as f64, mean, se, tm, tse, xm, xv, out.values.len() as f64]);
        pts.push((n as f64, mean, se));
    }
    add_fit(&mut table, "mean".into(), &pts);
    table.plot = Some(PlotSpec { x: "n".into(), y: "mean".into(), series: None });
    Ok(table)
}

fn run_biaspot(cfg: &ExperimentConfig) -> Result<ResultTable> {
    let mut table = ResultTable::new(cfg.experiment.tag(), &["n", "rep", "lhs", "rhs", "epsilon", "holds"]);
    let bp = &cfg.biaspot;
    let truth_v = bp.target_potential()?;
    let truth = BiasModel::new(bp.base.clone(), truth_v.clone())?;
    let template = PotentialRep::NeuronSum { terms: Vec::new(), budget: truth_v.budget() };
    let class = TestClassSpec::barron();
    let cells: Vec<Cell> = (0..cfg.n.len()).map(|i| Cell { series: 0, n_index: i, reps: cfg.reps }).collect();
    let outcomes = run_grid(cfg, &cells, |cell, _, seed| {
        let n = cfg.n[cell.n_index];
        let nu = sample_model(&truth, n, seed.child(0))?.measure;
        let reference = sample_model(&truth, bp.reference_factor * n, seed.child(1))?.measure;
        let fitted = fit(&nu, &bp.base, &template, &bp.fit)?;
        let r = entropy_gap_check(&fitted, &truth_v, &nu, &class, Some(&reference))?;
        let holds = r.lhs <= r.rhs + cfg.tolerance.entropy_slack + 2.0 * r.epsilon;
        Ok(vec![r.lhs, r.rhs, r.epsilon, if holds { 1.0 } else { 0.0 }])
    });
    for (cell, out) in cells.iter().zip(&outcomes) {
        let n = cfg.n[cell.n_index];
        record_failures(&mut table, &format!("n={n}"), out);
        for (rep, v) in out.values.iter().enumerate() {
            table.rows.push(vec![n as f64, rep as f64, v[0], v[1], v[2], v[3]]);
        }
        let held = out.values.iter().filter(|v| v[3] == 1.0).count();
        table.meta.push(format!("n={n}: inequality held in {held} of {} replications", out.values.len()));
    }
    table.plot = Some(PlotSpec { x: "rhs".into(), y: "lhs".into(), series: Some("n".into()) });
    Ok(table)
}

fn run_mfg(cfg: &ExperimentConfig) -> Result<ResultTable> {
    let mut table = ResultTable::new(cfg.experiment.tag(), &["control", "n", "gap", "gap_se", "cost", "cost_se", "mean_field_cost"]);
    let mut games = vec![cfg.mfg.game.clone()];
    if cfg.mfg.control {
        games.push(LqGameParams { c: 0.0, s: 0.0, s_terminal: 0.0, ..cfg.mfg.game.clone() });
    }
    let sols = games.iter().map(|g| solve_mfg_lq_discrete(g, cfg.mfg.steps)).collect::<Result<Vec<_>>>()?;
    let cells: Vec<Cell> =
        (0..games.len()).flat_map(|s| (0..cfg.n.len()).map(move |i| Cell { series: s, n_index: i, reps: 1 })).collect();
    let outcomes = run_grid(cfg, &cells, |cell, _, seed| {
        let g = nash_gap(&games[cell.series], &sols[cell.series], cfg.n[cell.n_index], cfg.reps, seed)?;
        Ok(vec![g.gap.mean, g.gap.std_err, g.cost.mean, g.cost.std_err, g.mean_field_cost])
    });
    let mut pts = vec![Vec::new(); games.len()];
    for (cell, out) in cells.iter().zip(&outcomes) {
        let n = cfg.n[cell.n_index];
        record_failures(&mut table, &format!("control={} n={n}", cell.series), out);
        let v = out.values.first().cloned().unwrap_or_else(|| vec![f64::NAN; 5]);
        table.rows.push(vec![cell.series as f64, n as f64, v[0], v[1], v[2], v[3], v[4]]);
        pts[cell.series].push((n as f64, v[0], v[1]));
    }
    for (s, p) in pts.iter().enumerate() {
        add_fit(&mut table, format!("control={s}"), p);
    }
    table.plot = Some(PlotSpec { x: "n".into(), y: "gap".into(), series: Some("control".into()) });
    Ok(table)
}

fn run_modulus(cfg: &ExperimentConfig) -> Result<ResultTable> {
    let mut table = ResultTable::new(cfg.experiment.tag(), &["h", "mean", "se", "paths_ok"]);
    let m = &cfg.modulus;
    let model = brownian(1, m.sigma, m.horizon);
    let ens = simulate_particles(&model, cfg.reps, m.steps, cfg.cell_seed(0, 0, 0))?;
    let dt = ens.dt();
    let cells = [Cell { series: 0, n_index: 0, reps: cfg.reps }];
    let outcomes = run_grid(cfg, &cells, |_, rep, _| {
        let path = ens.path(rep);
        m.k.iter()
            .map(|k| {
                let h = m.horizon * 2f64.powi(-(*k as i32));
                let delta = modulus(&path, 1, dt, h)?;
                Ok(delta * delta / (h * (2.0 * m.horizon / h).ln()))
            })
            .collect()
    });
    let out = &outcomes[0];
    record_failures(&mut table, "modulus", out);
    let mut ratios = Vec::new();
    for (j, k) in m.k.iter().enumerate() {
        let h = m.horizon * 2f64.powi(-(*k as i32));
        let (mean, se) = column_stats(&out.values, j);
        ratios.push(mean);
        table.rows.push(vec![h, mean, se, out.values.len() as f64]);
    }
    let hi = ratios.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lo = ratios.iter().cloned().fold(f64::INFINITY, f64::min);
    table.meta.push(format!("max/min normalized modulus ratio: {}", hi / lo));
    table.plot = Some(PlotSpec { x: "h".into(), y: "mean".into(), series: None });
    Ok(table)
}

fn run_tail(cfg: &ExperimentConfig) -> Result<ResultTable> {
    let mut table = ResultTable::new(cfg.experiment.tag(), &["d", "n", "a", "frequency", "bound", "dominated"]);
    let classes = cfg.d.iter().map(|d| cfg.class_for_dim(*d)).collect::<Result<Vec<_>>>()?;
    let cells: Vec<Cell> =
        (0..cfg.d.len()).flat_map(|s| (0..cfg.n.len()).map(move |i| Cell { series: s, n_index: i, reps: cfg.reps })).collect();
    let outcomes = run_grid(cfg, &cells, |cell, _, seed| {
        let d = cfg.d[cell.series];
        Ok(vec![iid_draw(cfg, &classes[cell.series], &cfg.distribution_for_dim(d), cfg.n[cell.n_index], seed)?])
    });
    let kappa = cfg.tail.kappa;
    for (cell, out) in cells.iter().zip(&outcomes) {
        let (d, n) = (cfg.d[cell.series], cfg.n[cell.n_index]);
        record_failures(&mut table, &format!("d={d} n={n}"), out);
        let (mean, _) = column_stats(&out.values, 0);
        let a1 = classes[cell.series].constants.a1;
        let total = out.values.len() as f64;
        for a in &cfg.tail.thresholds {
            let freq = out.values.iter().filter(|v| v[0] - mean >= *a).count() as f64 / total;
            let bound = (-(n as f64) * a * a / (2.0 * a1 * a1 * kappa * kappa)).exp();
            table.rows.push(vec![d as f64, n as f64, *a, freq, bound, if freq <= bound { 1.0 } else { 0.0 }]);
        }
    }
    table.plot = Some(PlotSpec { x: "a".into(), y: "bound".into(), series: Some("n".into()) });
    Ok(table)
}

/// Runs the experiment on the current rayon pool. Failures inside a cell are
/// recorded in the table and the remaining cells still run.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ResultTable> {
    cfg.validate()?;
    let mut table = match cfg.experiment {
        ExperimentKind::IidRate | ExperimentKind::DimSweep => run_iid(cfg)?,
        ExperimentKind::MvRate => run_mv(cfg)?,
        ExperimentKind::Biaspot => run_biaspot(cfg)?,
        ExperimentKind::MfgGap => run_mfg(cfg)?,
        ExperimentKind::Modulus => run_modulus(cfg)?,
        ExperimentKind::Tail => run_tail(cfg)?,
    };
    let mut header: Vec<String> = cfg.to_toml()?.lines().map(|l| l.to_string()).collect();
    for (label, f) in &table.fits {
        header.push(format!("fit {label}: slope = {}, slope_se = {}, intercept = {}, r2 = {}", f.slope, f.slope_se, f.intercept, f.r2));
    }
    header.append(&mut table.meta);
    for fail in &table.failures {
        header.push(format!("failed {fail}"));
    }
    table.meta = header;
    Ok(table)
}

/// As [`run_experiment`] on a dedicated pool of `threads` workers.
pub fn run_experiment_with_threads(cfg: &ExperimentConfig, threads: usize) -> Result<ResultTable> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Parameter(format!("thread pool: {e}")))?;
    pool.install(|| run_experiment(cfg))
}

/// Writes `<dir>/<experiment>.csv` and `<dir>/<experiment>.svg`.
pub fn write_outputs(table: &ResultTable, dir: &Path) -> Result<(PathBuf, PathBuf)> {
    std::fs::create_dir_all(dir)?;
    let csv = dir.join(format!("{}.csv", table.experiment));
    let svg = dir.join(format!("{}.svg", table.experiment));
    table.emit(Format::Csv, &csv)?;
    table.emit(Format::Svg, &svg)?;
    Ok((csv, svg))
}

/// Mean and standard error of a column of a finished table.
pub fn summarize(table: &ResultTable, column: &str) -> Option<McEstimate> {
    table.values(column).map(|v| McEstimate::from_values(&v))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_defaults_and_validation() {
        let cfg = ExperimentConfig::from_toml("experiment = \"iid_rate\"\nn = [16, 32, 64]\n").unwrap();
        assert_eq!(cfg.reps, 32);
        assert_eq!(cfg.class, ClassKind::Barron);
        assert!(ExperimentConfig::from_toml("experiment = \"iid_rate\"\nn = [16, 64, 32]\n").is_err());
        assert!(ExperimentConfig::from_toml("experiment = \"iid_rate\"\nn = [16, 32]\n").is_err());
        assert!(ExperimentConfig::from_toml("experiment = \"tail\"\nn = [16]\n").is_ok());
        assert!(ExperimentConfig::from_toml("experiment = \"iid_rate\"\nn = [16, 32, 64]\nbogus = 1\n").is_err());
        let rkhs = "experiment = \"iid_rate\"\nn = [8, 16, 32]\n[class]\nkind = \"rkhs\"\n[class.kernel]\nkind = \"gaussian\"\nlengthscale = 1.0\ndim = 1\n";
        assert!(matches!(ExperimentConfig::from_toml(rkhs).unwrap().class, ClassKind::Rkhs { .. }));
    }

    #[test]
    fn resolved_config_round_trips() {
        let cfg = ExperimentConfig::new(ExperimentKind::MfgGap, vec![4, 8, 16]);
        let back = ExperimentConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn cell_seeds_are_distinct() {
        let cfg = ExperimentConfig::new(ExperimentKind::IidRate, vec![4, 8, 16]);
        let mut seen = std::collections::HashSet::new();
        for s in 0..4 {
            for i in 0..3 {
                for r in 0..50 {
                    assert!(seen.insert(cfg.cell_seed(s, i, r)));
                }
            }
        }
        let other = ExperimentConfig::new(ExperimentKind::Tail, vec![4]);
        assert!(!seen.contains(&other.cell_seed(0, 0, 0)));
    }

    #[test]
    fn small_iid_run_is_deterministic() {
        let mut cfg = ExperimentConfig::new(ExperimentKind::IidRate, vec![16, 32, 64]);
        cfg.reps = 4;
        let a = run_experiment(&cfg).unwrap();
        let b = run_experiment_with_threads(&cfg, 2).unwrap();
        let (mut ca, mut cb) = (Vec::new(), Vec::new());
        a.write_csv(&mut ca).unwrap();
        b.write_csv(&mut cb).unwrap();
        assert_eq!(ca, cb);
        assert!(a.succeeded());
        assert_eq!(a.rows.len(), 3);
        assert_eq!(a.fits.len(), 1);
    }

    #[test]
    fn failures_are_recorded_per_cell() {
        // a flow embedding too small for the data dimension fails in every cell
        let mut cfg = ExperimentConfig::new(ExperimentKind::IidRate, vec![8, 16, 32]);
        cfg.reps = 2;
        cfg.class = ClassKind::Flow { embed_dim: 2, layers: 1 };
        let t = run_experiment(&cfg).unwrap();
        assert_eq!(t.failures.len(), 6);
        assert_eq!(t.rows.len(), 3);
        assert!(t.rows.iter().all(|r| r[6] == 0.0));
    }
}
