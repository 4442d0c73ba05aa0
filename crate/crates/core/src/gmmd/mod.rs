//! Discrepancy estimators `D(mu, nu) = sup_{f in class} |E_mu f - E_nu f|`,
//! Rademacher complexities and the associated rate bounds.

mod flow;
mod neuron;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use flow::FlowShape;
pub(crate) use neuron::SignedObjective;

use crate::error::{check_dim, param, Error, Result};
use crate::measures::{DiagGaussian, EmpiricalMeasure, RngSeed};
use crate::special::mean_se;
use crate::test_classes::{ClassKind, FlowRep, KernelKind, KernelSpec, NeuronParams, TestClassSpec};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub restarts: usize,
    pub steps: usize,
    /// Initial angular step (radians) of the projected ascent.
    pub step_size: f64,
    /// The step is halved every `decay_every` iterations.
    pub decay_every: usize,
    /// Relative improvement threshold used during refinement.
    pub tolerance: f64,
    pub seed: RngSeed,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig { restarts: 32, steps: 200, step_size: 0.2, decay_every: 50, tolerance: 1e-10, seed: RngSeed::new(0) }
    }
}

impl OptimizerConfig {
    pub fn with_seed(mut self, seed: RngSeed) -> Self {
        self.seed = seed;
        self
    }

    fn validate(&self) -> Result<()> {
        if self.restarts == 0 || self.steps == 0 || !(self.step_size > 0.0) {
            return param("optimizer needs restarts > 0, steps > 0 and a positive step size");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    /// Closed-form value, exact up to floating point.
    ExactClosedForm,
    /// Exact one-dimensional sweep over all activation patterns.
    ExactSweep,
    /// Value attained by an explicit witness; a certified lower bound.
    OptimizedLowerBound,
    /// Maximum over a deterministic grid; see `error_bound`.
    GridOracle,
}

impl EstimatorKind {
    pub fn tag(&self) -> &'static str {
        match self {
            EstimatorKind::ExactClosedForm => "exact_closed_form",
            EstimatorKind::ExactSweep => "exact_sweep",
            EstimatorKind::OptimizedLowerBound => "optimized_lower_bound",
            EstimatorKind::GridOracle => "grid_oracle",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Witness {
    Neuron(NeuronParams),
    Flow(FlowRep),
}

#[derive(Debug, Clone, PartialEq)]
pub struct GmmdResult {
    pub value: f64,
    pub kind: EstimatorKind,
    pub witness: Option<Witness>,
    /// For grid oracles: the true supremum lies in `[value, value + error_bound]`.
    pub error_bound: Option<f64>,
}

impl GmmdResult {
    fn exact(value: f64) -> Self {
        GmmdResult { value, kind: EstimatorKind::ExactClosedForm, witness: None, error_bound: None }
    }
}

/// Monte Carlo mean with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub mean: f64,
    pub std_err: f64,
    pub trials: usize,
}

impl McEstimate {
    pub fn from_values(values: &[f64]) -> Self {
        let (mean, std_err) = mean_se(values);
        McEstimate { mean, std_err, trials: values.len() }
    }
}

fn same_dim(x: &EmpiricalMeasure, y: &EmpiricalMeasure) -> Result<()> {
    check_dim(x.dim(), y.dim())
}

fn cross_sum(k: &KernelSpec, x: &EmpiricalMeasure, y: &EmpiricalMeasure) -> f64 {
    let mut acc = 0.0;
    for (a, wa) in x.iter() {
        let mut row = 0.0;
        for (b, wb) in y.iter() {
            row += wb * k.eval_raw(a, b);
        }
        acc += wa * row;
    }
    acc
}

fn off_diagonal_sum(k: &KernelSpec, x: &EmpiricalMeasure) -> (f64, f64) {
    let mut acc = 0.0;
    let mut sq = 0.0;
    for i in 0..x.len() {
        let (xi, wi) = (x.point(i), x.weights()[i]);
        sq += wi * wi;
        for j in (i + 1)..x.len() {
            acc += 2.0 * wi * x.weights()[j] * k.eval_raw(xi, x.point(j));
        }
    }
    (acc, sq)
}

/// Biased (V-statistic) MMD: the exact discrepancy between the two measures
/// over the unit ball of the kernel's RKHS.
pub fn mmd_rkhs(k: &KernelSpec, x: &EmpiricalMeasure, y: &EmpiricalMeasure) -> Result<GmmdResult> {
    k.validate()?;
    same_dim(x, y)?;
    check_dim(k.dim, x.dim())?;
    let v = cross_sum(k, x, x) + cross_sum(k, y, y) - 2.0 * cross_sum(k, x, y);
    Ok(GmmdResult::exact(v.max(0.0).sqrt()))
}

/// Unbiased estimate of `MMD^2` (U-statistic; weighted atoms use the
/// normalized off-diagonal form, which reduces to the usual one for uniform weights).
pub fn mmd2_unbiased(k: &KernelSpec, x: &EmpiricalMeasure, y: &EmpiricalMeasure) -> Result<f64> {
    k.validate()?;
    same_dim(x, y)?;
    check_dim(k.dim, x.dim())?;
    if x.len() < 2 || y.len() < 2 {
        return param("unbiased MMD needs at least two atoms per sample");
    }
    let (ox, sx) = off_diagonal_sum(k, x);
    let (oy, sy) = off_diagonal_sum(k, y);
    Ok(ox / (1.0 - sx) + oy / (1.0 - sy) - 2.0 * cross_sum(k, x, y))
}

/// Exact MMD between a diagonal Gaussian and an empirical measure for the Gaussian kernel.
pub fn mmd_vs_gaussian(k: &KernelSpec, g: &DiagGaussian, y: &EmpiricalMeasure) -> Result<GmmdResult> {
    k.validate()?;
    check_dim(k.dim, g.dim())?;
    check_dim(k.dim, y.dim())?;
    let l2 = match k.kind {
        KernelKind::Gaussian { lengthscale } => lengthscale * lengthscale,
        _ => return Err(Error::Unsupported("closed-form MMD against a Gaussian needs the gaussian kernel".into())),
    };
    let gg: f64 = g.var.iter().map(|v| (l2 / (l2 + 2.0 * v)).sqrt()).product();
    let mut gy = 0.0;
    for (p, w) in y.iter() {
        let mut e = 1.0;
        for kk in 0..g.dim() {
            let s = l2 + g.var[kk];
            e *= (l2 / s).sqrt() * (-(p[kk] - g.mean[kk]).powi(2) / (2.0 * s)).exp();
        }
        gy += w * e;
    }
    let yy = cross_sum(k, y, y);
    Ok(GmmdResult::exact((gg + yy - 2.0 * gy).max(0.0).sqrt()))
}

fn neuron_objective(x: &EmpiricalMeasure, y: &EmpiricalMeasure) -> SignedObjective {
    let mut obj = SignedObjective::new(x.dim());
    obj.push_points(x.points(), x.weights(), 1.0);
    obj.push_points(y.points(), y.weights(), -1.0);
    obj
}

fn neuron_result(theta: Vec<f64>, value: f64, kind: EstimatorKind) -> GmmdResult {
    GmmdResult { value, kind, witness: Some(Witness::Neuron(NeuronParams::from_theta(&theta))), error_bound: None }
}

pub(crate) fn sup_signed(obj: &SignedObjective, cfg: &OptimizerConfig) -> (Vec<f64>, f64, EstimatorKind) {
    if obj.dim == 1 {
        let (t, v) = neuron::sweep_1d(obj);
        (t, v, EstimatorKind::ExactSweep)
    } else {
        let (t, v) = neuron::optimize(obj, cfg);
        (t, v, EstimatorKind::OptimizedLowerBound)
    }
}

/// Barron-ball discrepancy by multi-start projected ascent over single
/// neurons. The value is attained by the returned witness, so it never
/// exceeds the true supremum.
pub fn barron_gmmd(x: &EmpiricalMeasure, y: &EmpiricalMeasure, cfg: &OptimizerConfig) -> Result<GmmdResult> {
    same_dim(x, y)?;
    cfg.validate()?;
    let (t, v) = neuron::optimize(&neuron_objective(x, y), cfg);
    Ok(neuron_result(t, v, EstimatorKind::OptimizedLowerBound))
}

/// Exact Barron-ball discrepancy for one-dimensional measures.
pub fn barron_gmmd_exact_1d(x: &EmpiricalMeasure, y: &EmpiricalMeasure) -> Result<GmmdResult> {
    same_dim(x, y)?;
    if x.dim() != 1 {
        return Err(Error::Unsupported("the exact sweep is one-dimensional".into()));
    }
    let (t, v) = neuron::sweep_1d(&neuron_objective(x, y));
    Ok(neuron_result(t, v, EstimatorKind::ExactSweep))
}

/// Exact sweep in one dimension, optimizer otherwise.
pub fn barron_gmmd_auto(x: &EmpiricalMeasure, y: &EmpiricalMeasure, cfg: &OptimizerConfig) -> Result<GmmdResult> {
    same_dim(x, y)?;
    let (t, v, kind) = sup_signed(&neuron_objective(x, y), cfg);
    Ok(neuron_result(t, v, kind))
}

/// Barron-ball discrepancy between a diagonal Gaussian and an empirical
/// measure, using closed-form Gaussian expectations of each neuron.
pub fn barron_gmmd_vs_gaussian(g: &DiagGaussian, y: &EmpiricalMeasure, cfg: &OptimizerConfig) -> Result<GmmdResult> {
    check_dim(g.dim(), y.dim())?;
    let mut obj = SignedObjective::new(y.dim());
    obj.push_gaussian(1.0, g.clone());
    obj.push_points(y.points(), y.weights(), -1.0);
    let (t, v, kind) = sup_signed(&obj, cfg);
    Ok(neuron_result(t, v, kind))
}

/// Brute-force grid maximum for `d` in `{1, 2}`. The objective is
/// `L`-Lipschitz on the sphere with `L = sum_i |c_i| |(x_i, 1)|`, so the true
/// supremum is at most `value + L * covering_radius`.
pub fn barron_gmmd_grid(x: &EmpiricalMeasure, y: &EmpiricalMeasure, resolution: usize) -> Result<GmmdResult> {
    same_dim(x, y)?;
    if x.dim() > 2 {
        return Err(Error::Unsupported("grid oracle supports d = 1 or 2".into()));
    }
    if resolution < 4 {
        return param("grid resolution must be at least 4");
    }
    let obj = neuron_objective(x, y);
    let (t, v, r) = neuron::grid_max(&obj, resolution);
    let mut res = neuron_result(t, v, EstimatorKind::GridOracle);
    res.error_bound = Some(obj.lipschitz() * r);
    Ok(res)
}

/// Lower bound over the flow-induced unit ball; the witness has norm bound 1.
pub fn flow_gmmd_lower(
    x: &EmpiricalMeasure,
    y: &EmpiricalMeasure,
    shape: &FlowShape,
    cfg: &OptimizerConfig,
) -> Result<GmmdResult> {
    same_dim(x, y)?;
    cfg.validate()?;
    if shape.embed_dim < x.dim() + 2 {
        return param("flow embedding dimension must be at least d + 2");
    }
    let obj = neuron_objective(x, y);
    flow_signed(&obj, shape, cfg)
}

fn flow_signed(obj: &SignedObjective, shape: &FlowShape, cfg: &OptimizerConfig) -> Result<GmmdResult> {
    let (theta, _, _) = sup_signed(obj, cfg);
    let prob = flow::FlowProblem { dim: obj.dim, points: &obj.points, coeffs: &obj.coeffs };
    let (v, rep) = flow::flow_sup(&prob, shape, Some(&theta), cfg);
    Ok(GmmdResult { value: v, kind: EstimatorKind::OptimizedLowerBound, witness: Some(Witness::Flow(rep)), error_bound: None })
}

/// Class dispatch used by the harness and CLI.
pub fn gmmd(class: &TestClassSpec, x: &EmpiricalMeasure, y: &EmpiricalMeasure, cfg: &OptimizerConfig) -> Result<GmmdResult> {
    match &class.kind {
        ClassKind::Rkhs { kernel } => mmd_rkhs(kernel, x, y),
        ClassKind::Barron => barron_gmmd_auto(x, y, cfg),
        ClassKind::Flow { embed_dim, layers } => flow_gmmd_lower(x, y, &FlowShape::new(*embed_dim, *layers), cfg),
    }
}

/// `(A3 / n) sqrt(sum_i (|x_i|^2 + 1))`.
pub fn rademacher_bound(class: &TestClassSpec, x: &EmpiricalMeasure) -> f64 {
    let n = x.len() as f64;
    let s: f64 = x.points().chunks(x.dim()).map(|p| p.iter().map(|v| v * v).sum::<f64>() + 1.0).sum();
    class.constants.a3 / n * s.sqrt()
}

/// `2 A3 sqrt(m2 + 1) / sqrt(n)` with `m2 = E |X|^2`.
pub fn expected_rate_bound(a3: f64, second_moment: f64, n: usize) -> f64 {
    2.0 * a3 * (second_moment + 1.0).sqrt() / (n as f64).sqrt()
}

/// Monte Carlo estimate of the empirical Rademacher complexity
/// `E_xi sup_f |(1/n) sum_i xi_i f(x_i)|`.
pub fn rademacher_mc(class: &TestClassSpec, x: &EmpiricalMeasure, trials: usize, cfg: &OptimizerConfig) -> Result<McEstimate> {
    if trials == 0 {
        return param("at least one trial is required");
    }
    let n = x.len();
    let inv = 1.0 / n as f64;
    let mut values = Vec::with_capacity(trials);
    for t in 0..trials {
        let seed = cfg.seed.child(t as u64);
        let mut rng = seed.rng();
        let xi: Vec<f64> = (0..n).map(|_| if rng.random::<bool>() { inv } else { -inv }).collect();
        let tcfg = cfg.with_seed(seed.child(u64::MAX));
        let v = match &class.kind {
            ClassKind::Rkhs { kernel } => {
                check_dim(kernel.dim, x.dim())?;
                let mut q = 0.0;
                for i in 0..n {
                    for j in 0..n {
                        q += xi[i] * xi[j] * kernel.eval_raw(x.point(i), x.point(j));
                    }
                }
                q.max(0.0).sqrt()
            }
            ClassKind::Barron => {
                let mut obj = SignedObjective::new(x.dim());
                obj.push_points(x.points(), &xi, 1.0);
                sup_signed(&obj, &tcfg).1
            }
            ClassKind::Flow { embed_dim, layers } => {
                let mut obj = SignedObjective::new(x.dim());
                obj.push_points(x.points(), &xi, 1.0);
                flow_signed(&obj, &FlowShape::new(*embed_dim, *layers), &tcfg)?.value
            }
        };
        values.push(v);
    }
    Ok(McEstimate::from_values(&values))
}
