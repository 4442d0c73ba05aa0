//! Bias-potential models `M_P(V)(dx) = exp(-V(x)) P(dx) / Z` on the real line,
//! the loss `E_nu V + log E_P exp(-V)`, its minimization over a norm ball of
//! potentials, and the entropy bound that controls the fitted model.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, param, Error, Result};
use crate::gmmd::{mmd_rkhs, SignedObjective};
use crate::measures::{DistributionSpec, EmpiricalMeasure, RngSeed};
use crate::quadrature::composite_rule;
use crate::special::{dot, log_sum_exp};
use crate::test_classes::{ClassKind, KernelSpec, NeuronParams, TestClassSpec};
use crate::transport_entropy::{relative_entropy_1d, Density1D};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PotentialRep {
    /// `V(x) = sum_j a_j relu(omega_j x + b_j)` with `sum |a_j| <= budget`.
    NeuronSum { terms: Vec<(f64, NeuronParams)>, budget: f64 },
    /// `V(x) = sum_j a_j k(c_j, x)` with RKHS norm at most `budget`.
    RkhsExpansion { kernel: KernelSpec, centers: Vec<Vec<f64>>, coeffs: Vec<f64>, budget: f64 },
}

impl PotentialRep {
    pub fn eval(&self, x: &[f64]) -> f64 {
        match self {
            PotentialRep::NeuronSum { terms, .. } => terms.iter().map(|(a, p)| a * p.eval(x)).sum(),
            PotentialRep::RkhsExpansion { kernel, centers, coeffs, .. } => {
                centers.iter().zip(coeffs).map(|(c, a)| a * kernel.eval_raw(c, x)).sum()
            }
        }
    }

    pub fn budget(&self) -> f64 {
        match self {
            PotentialRep::NeuronSum { budget, .. } | PotentialRep::RkhsExpansion { budget, .. } => *budget,
        }
    }

    /// Norm in the potential's own class: total variation of the coefficients,
    /// or the RKHS norm.
    pub fn class_norm(&self) -> f64 {
        match self {
            PotentialRep::NeuronSum { terms, .. } => terms.iter().map(|t| t.0.abs()).sum(),
            PotentialRep::RkhsExpansion { kernel, centers, coeffs, .. } => {
                let mut q = 0.0;
                for (ci, ai) in centers.iter().zip(coeffs) {
                    for (cj, aj) in centers.iter().zip(coeffs) {
                        q += ai * aj * kernel.eval_raw(ci, cj);
                    }
                }
                q.max(0.0).sqrt()
            }
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            PotentialRep::NeuronSum { terms, .. } => terms.first().map_or(1, |t| t.1.dim()),
            PotentialRep::RkhsExpansion { kernel, .. } => kernel.dim,
        }
    }

    /// Points where a one-dimensional potential is not smooth.
    pub fn kinks(&self) -> Vec<f64> {
        match self {
            PotentialRep::NeuronSum { terms, .. } => terms
                .iter()
                .filter(|(a, p)| *a != 0.0 && p.omega[0] != 0.0)
                .map(|(_, p)| -p.b / p.omega[0])
                .collect(),
            PotentialRep::RkhsExpansion { .. } => Vec::new(),
        }
    }

    fn check_budget(&self) -> Result<()> {
        let n = self.class_norm();
        if n > self.budget() * (1.0 + 1e-9) + 1e-12 {
            return param(format!("potential norm {n} exceeds budget {}", self.budget()));
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.budget() >= 0.0) {
            return param("budget must be non-negative");
        }
        match self {
            PotentialRep::NeuronSum { terms, .. } => {
                let d = self.dim();
                for (_, p) in terms {
                    check_dim(d, p.dim())?;
                }
            }
            PotentialRep::RkhsExpansion { kernel, centers, coeffs, .. } => {
                kernel.validate()?;
                check_dim(centers.len(), coeffs.len())?;
                for c in centers {
                    check_dim(kernel.dim, c.len())?;
                }
            }
        }
        self.check_budget()
    }
}

pub const DEFAULT_NODES: usize = 2048;

/// Integration domain and log-density of a one-dimensional base measure.
fn base_domain(base: &DistributionSpec) -> Result<(f64, f64, f64)> {
    base.validate()?;
    if base.dim() != 1 {
        return Err(Error::Unsupported("bias potentials are integrated in one dimension only".into()));
    }
    match base {
        DistributionSpec::UniformBox { lo, hi } => Ok((lo[0], hi[0], f64::INFINITY)),
        DistributionSpec::Gaussian(g) => {
            let s = g.var[0].sqrt();
            if !(s > 0.0) {
                return param("gaussian base needs positive variance");
            }
            Ok((g.mean[0] - 12.0 * s, g.mean[0] + 12.0 * s, 0.5 * s))
        }
        _ => Err(Error::Unsupported("base must be a uniform interval or a gaussian".into())),
    }
}

fn base_log_density(base: &DistributionSpec, x: f64) -> f64 {
    match base {
        DistributionSpec::UniformBox { lo, hi } => {
            if x < lo[0] || x > hi[0] {
                f64::NEG_INFINITY
            } else {
                -(hi[0] - lo[0]).ln()
            }
        }
        DistributionSpec::Gaussian(g) => {
            let (m, v) = (g.mean[0], g.var[0]);
            -0.5 * (x - m).powi(2) / v - 0.5 * (2.0 * std::f64::consts::PI * v).ln()
        }
        _ => f64::NEG_INFINITY,
    }
}

/// Quadrature nodes with `log(weight * base density)`.
fn base_rule(base: &DistributionSpec, kinks: &[f64], nodes: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let (lo, hi, width) = base_domain(base)?;
    let (x, w) = composite_rule(lo, hi, kinks, nodes, width);
    let lw = x.iter().zip(&w).map(|(x, w)| w.ln() + base_log_density(base, *x)).collect();
    Ok((x, lw))
}

pub fn log_partition(v: &PotentialRep, base: &DistributionSpec, nodes: usize) -> Result<f64> {
    let (x, lw) = base_rule(base, &v.kinks(), nodes)?;
    Ok(log_sum_exp(x.iter().zip(&lw).map(|(x, l)| l - v.eval(&[*x]))))
}

/// `E_nu V + log E_P exp(-V)`.
pub fn loss(v: &PotentialRep, nu: &EmpiricalMeasure, base: &DistributionSpec, nodes: usize) -> Result<f64> {
    v.validate()?;
    check_dim(v.dim(), nu.dim())?;
    let mean: f64 = nu.iter().map(|(x, w)| w * v.eval(x)).sum();
    Ok(mean + log_partition(v, base, nodes)?)
}

#[derive(Debug, Clone)]
pub struct BiasModel {
    pub base: DistributionSpec,
    pub potential: PotentialRep,
    pub log_partition: f64,
}

impl BiasModel {
    pub fn new(base: DistributionSpec, potential: PotentialRep) -> Result<Self> {
        potential.validate()?;
        let log_partition = log_partition(&potential, &base, DEFAULT_NODES)?;
        Ok(BiasModel { base, potential, log_partition })
    }

    pub fn log_density(&self, x: f64) -> f64 {
        base_log_density(&self.base, x) - self.potential.eval(&[x]) - self.log_partition
    }

    pub fn density(&self) -> Result<Density1D> {
        let (lo, hi, _) = base_domain(&self.base)?;
        let base = self.base.clone();
        let pot = self.potential.clone();
        let lz = self.log_partition;
        let mut bp = pot.kinks();
        if let DistributionSpec::Gaussian(g) = &base {
            let s = g.var[0].sqrt();
            bp.extend((-24..=24).map(|k| g.mean[0] + 0.5 * s * k as f64));
        }
        Ok(Density1D::new(lo, hi, true, move |x| base_log_density(&base, x) - pot.eval(&[x]) - lz)?.with_breakpoints(bp))
    }

    /// The model as quadrature atoms, with panel edges at the given extra kinks.
    pub fn quadrature_measure(&self, extra_kinks: &[f64], nodes: usize) -> Result<EmpiricalMeasure> {
        let mut kinks = self.potential.kinks();
        kinks.extend_from_slice(extra_kinks);
        let (x, lw) = base_rule(&self.base, &kinks, nodes)?;
        let lp: Vec<f64> = x.iter().zip(&lw).map(|(x, l)| l - self.potential.eval(&[*x])).collect();
        let lz = log_sum_exp(lp.iter().copied());
        let mut w: Vec<f64> = lp.iter().map(|l| (l - lz).exp()).collect();
        let s: f64 = w.iter().sum();
        w.iter_mut().for_each(|v| *v /= s);
        if w.iter().any(|v| !v.is_finite()) {
            return param("model weights are not finite; potential too large for the base measure");
        }
        EmpiricalMeasure::new(1, x, w)
    }

    /// `E_model f` by quadrature.
    pub fn expect(&self, f: impl Fn(f64) -> f64, kinks: &[f64]) -> Result<f64> {
        let q = self.quadrature_measure(kinks, DEFAULT_NODES)?;
        Ok(q.iter().map(|(x, w)| w * f(x[0])).sum())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    /// Maximum conditional-gradient iterations (each adds one dictionary element).
    pub outer_steps: usize,
    /// Projected-gradient iterations for the coefficients per outer step.
    pub inner_steps: usize,
    /// Stop once the duality gap falls below this value.
    pub tolerance: f64,
    pub nodes: usize,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig { outer_steps: 60, inner_steps: 400, tolerance: 1e-6, nodes: DEFAULT_NODES }
    }
}

#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub model: BiasModel,
    /// Certified bound on `loss(fitted) - inf over the budget ball`.
    pub epsilon: f64,
    pub iterations: usize,
}

/// Euclidean projection onto `{a : sum |a_j| <= r}`.
fn project_l1(a: &mut [f64], r: f64) {
    let l1: f64 = a.iter().map(|v| v.abs()).sum();
    if l1 <= r {
        return;
    }
    let mut u: Vec<f64> = a.iter().map(|v| v.abs()).collect();
    u.sort_by(|x, y| y.total_cmp(x));
    let mut css = 0.0;
    let mut theta = 0.0;
    for (i, ui) in u.iter().enumerate() {
        css += ui;
        let t = (css - r) / (i + 1) as f64;
        if *ui > t {
            theta = t;
        }
    }
    for v in a.iter_mut() {
        *v = v.signum() * (v.abs() - theta).max(0.0);
    }
}

struct Dictionary {
    thetas: Vec<[f64; 2]>,
    data_means: Vec<f64>,
}

impl Dictionary {
    fn kinks(&self) -> Vec<f64> {
        self.thetas.iter().filter(|t| t[0] != 0.0).map(|t| -t[1] / t[0]).collect()
    }

    fn potential(&self, a: &[f64], budget: f64) -> PotentialRep {
        let terms = self
            .thetas
            .iter()
            .zip(a)
            .filter(|(_, a)| **a != 0.0)
            .map(|(t, a)| (*a, NeuronParams { omega: vec![t[0]], b: t[1] }))
            .collect();
        PotentialRep::NeuronSum { terms, budget }
    }
}

fn relu1(t: &[f64; 2], x: f64) -> f64 {
    (t[0] * x + t[1]).max(0.0)
}

/// Coefficient solve on a fixed dictionary and quadrature rule.
fn fit_coefficients(dict: &Dictionary, a: &mut Vec<f64>, x: &[f64], lw: &[f64], budget: f64, steps: usize) {
    let j = dict.thetas.len();
    a.resize(j, 0.0);
    let feats: Vec<Vec<f64>> = x.iter().map(|xk| dict.thetas.iter().map(|t| relu1(t, *xk)).collect()).collect();
    let eval = |a: &[f64]| -> (f64, Vec<f64>) {
        let lp: Vec<f64> = feats.iter().zip(lw).map(|(f, l)| l - dot(f, a)).collect();
        let lz = log_sum_exp(lp.iter().copied());
        let mut g = dict.data_means.clone();
        for (f, l) in feats.iter().zip(&lp) {
            let q = (l - lz).exp();
            for (gj, fj) in g.iter_mut().zip(f) {
                *gj -= q * fj;
            }
        }
        (dot(&dict.data_means, a) + lz, g)
    };
    let (mut val, mut grad) = eval(a);
    let mut eta = 1.0;
    for _ in 0..steps {
        let mut moved = false;
        while eta > 1e-12 {
            let mut cand: Vec<f64> = a.iter().zip(&grad).map(|(ai, gi)| ai - eta * gi).collect();
            project_l1(&mut cand, budget);
            let diff: Vec<f64> = cand.iter().zip(a.iter()).map(|(c, ai)| c - ai).collect();
            let dn2 = dot(&diff, &diff);
            if dn2 < 1e-30 {
                return;
            }
            let (cv, cg) = eval(&cand);
            if cv <= val + dot(&grad, &diff) + dn2 / (2.0 * eta) {
                *a = cand;
                val = cv;
                grad = cg;
                eta *= 1.5;
                moved = true;
                break;
            }
            eta *= 0.5;
        }
        if !moved {
            return;
        }
    }
}

/// Duality gap of the current potential over the budget ball and the maximizing direction.
fn gap(model: &BiasModel, nu: &EmpiricalMeasure, budget: f64, nodes: usize) -> Result<(f64, [f64; 2])> {
    let q = model.quadrature_measure(&[], nodes)?;
    let mut obj = SignedObjective::new(1);
    obj.push_points(nu.points(), nu.weights(), 1.0);
    obj.push_points(q.points(), q.weights(), -1.0);
    let (th, h, _) = crate::gmmd::sup_signed(&obj, &Default::default());
    let theta = [th[0], th[1]];
    // re-integrate the selected neuron with its kink as a panel edge
    let kink = if theta[0] != 0.0 { vec![-theta[1] / theta[0]] } else { vec![] };
    let q2 = model.quadrature_measure(&kink, nodes)?;
    let ev = |m: &EmpiricalMeasure| -> f64 { m.iter().map(|(x, w)| w * relu1(&theta, x[0])).sum() };
    let h2 = (ev(nu) - ev(&q2)).abs();
    let v_nu: f64 = nu.iter().map(|(x, w)| w * model.potential.eval(x)).sum();
    let v_model: f64 = q.iter().map(|(x, w)| w * model.potential.eval(x)).sum();
    Ok(((v_nu - v_model) + budget * h.max(h2), theta))
}

/// Minimizes the loss over potentials of the template's class and budget.
///
/// Neuron sums are fitted by a fully corrective conditional-gradient method
/// whose linear step is the exact Barron discrepancy between `nu` and the
/// current model; the final duality gap is reported as `epsilon`. RKHS
/// expansions keep the template's centers and fit the coefficients under the
/// RKHS-norm constraint.
pub fn fit(nu: &EmpiricalMeasure, base: &DistributionSpec, template: &PotentialRep, cfg: &FitConfig) -> Result<FitOutcome> {
    template.validate()?;
    check_dim(1, nu.dim())?;
    base_domain(base)?;
    match template {
        PotentialRep::NeuronSum { budget, .. } => fit_neurons(nu, base, *budget, cfg),
        PotentialRep::RkhsExpansion { kernel, centers, budget, .. } => fit_rkhs(nu, base, kernel, centers, *budget, cfg),
    }
}

fn fit_neurons(nu: &EmpiricalMeasure, base: &DistributionSpec, budget: f64, cfg: &FitConfig) -> Result<FitOutcome> {
    let mut dict = Dictionary { thetas: Vec::new(), data_means: Vec::new() };
    let mut a: Vec<f64> = Vec::new();
    let mut model = BiasModel::new(base.clone(), dict.potential(&a, budget))?;
    let mut iterations = 0;
    let (mut eps, mut theta) = gap(&model, nu, budget, cfg.nodes)?;
    while iterations < cfg.outer_steps && eps > cfg.tolerance && budget > 0.0 {
        iterations += 1;
        if dict.thetas.iter().any(|t| (t[0] - theta[0]).abs() + (t[1] - theta[1]).abs() < 1e-12) {
            break;
        }
        dict.data_means.push(nu.iter().map(|(x, w)| w * relu1(&theta, x[0])).sum());
        dict.thetas.push(theta);
        let (x, lw) = base_rule(base, &dict.kinks(), cfg.nodes)?;
        fit_coefficients(&dict, &mut a, &x, &lw, budget, cfg.inner_steps);
        // keep the dictionary small
        let keep: Vec<usize> = (0..a.len()).filter(|&i| a[i] != 0.0).collect();
        dict.thetas = keep.iter().map(|&i| dict.thetas[i]).collect();
        dict.data_means = keep.iter().map(|&i| dict.data_means[i]).collect();
        a = keep.iter().map(|&i| a[i]).collect();
        model = BiasModel::new(base.clone(), dict.potential(&a, budget))?;
        (eps, theta) = gap(&model, nu, budget, cfg.nodes)?;
    }
    Ok(FitOutcome { model, epsilon: eps.max(0.0), iterations })
}

fn fit_rkhs(
    nu: &EmpiricalMeasure,
    base: &DistributionSpec,
    kernel: &KernelSpec,
    centers: &[Vec<f64>],
    budget: f64,
    cfg: &FitConfig,
) -> Result<FitOutcome> {
    use nalgebra::{DMatrix, DVector};
    let m = centers.len();
    if m == 0 {
        return param("rkhs template needs at least one center");
    }
    let gram = DMatrix::from_fn(m, m, |i, j| kernel.eval_raw(&centers[i], &centers[j]));
    let jitter = 1e-10 * gram.diagonal().max();
    let chol = (gram.clone() + DMatrix::identity(m, m) * jitter)
        .cholesky()
        .ok_or_else(|| Error::Parameter("kernel matrix is not positive definite".into()))?;
    let (x, lw) = base_rule(base, &[], cfg.nodes)?;
    let feats: Vec<DVector<f64>> =
        x.iter().map(|xk| DVector::from_fn(m, |j, _| kernel.eval_raw(&centers[j], &[*xk]))).collect();
    let data_mean = DVector::from_fn(m, |j, _| nu.iter().map(|(p, w)| w * kernel.eval_raw(&centers[j], p)).sum::<f64>());
    let eval = |a: &DVector<f64>| -> (f64, DVector<f64>) {
        let lp: Vec<f64> = feats.iter().zip(&lw).map(|(f, l)| l - f.dot(a)).collect();
        let lz = log_sum_exp(lp.iter().copied());
        let mut g = data_mean.clone();
        for (f, l) in feats.iter().zip(&lp) {
            g -= f * (l - lz).exp();
        }
        (data_mean.dot(a) + lz, g)
    };
    // linear minimization over {a : a' K a <= B^2}: a = -B K^{-1} g / sqrt(g' K^{-1} g)
    let lmo = |g: &DVector<f64>| -> DVector<f64> {
        let kg = chol.solve(g);
        let s = g.dot(&kg).max(0.0).sqrt();
        if s > 0.0 {
            -kg * (budget / s)
        } else {
            DVector::zeros(m)
        }
    };
    let mut a = DVector::zeros(m);
    let (mut val, mut g) = eval(&a);
    let mut eps = f64::INFINITY;
    let mut iterations = 0;
    while iterations < cfg.outer_steps * 10 {
        let s = lmo(&g);
        let dir = &s - &a;
        eps = -g.dot(&dir);
        if eps <= cfg.tolerance {
            break;
        }
        iterations += 1;
        // exact line search on [0, 1] by golden section (the loss is convex along the segment)
        let (mut lo, mut hi) = (0.0f64, 1.0f64);
        let phi = 0.5 * (5f64.sqrt() - 1.0);
        for _ in 0..60 {
            let m1 = hi - phi * (hi - lo);
            let m2 = lo + phi * (hi - lo);
            if eval(&(&a + &dir * m1)).0 <= eval(&(&a + &dir * m2)).0 {
                hi = m2;
            } else {
                lo = m1;
            }
        }
        let step = 0.5 * (lo + hi);
        let cand = &a + &dir * step;
        let (cv, cg) = eval(&cand);
        if cv > val {
            break;
        }
        a = cand;
        val = cv;
        g = cg;
    }
    let potential = PotentialRep::RkhsExpansion {
        kernel: *kernel,
        centers: centers.to_vec(),
        coeffs: a.iter().copied().collect(),
        budget: budget * (1.0 + 1e-9),
    };
    let model = BiasModel::new(base.clone(), potential)?;
    Ok(FitOutcome { model, epsilon: eps.max(0.0), iterations })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EntropyGapReport {
    /// `H(mu | nu')` for the true model `mu` and the fitted model `nu'`.
    pub lhs: f64,
    /// `2 * budget * D(mu, nu)` over the unit ball of the class.
    pub rhs: f64,
    pub discrepancy: f64,
    pub epsilon: f64,
    pub holds: bool,
}

/// Checks `H(mu | nu') <= 2 D(mu, nu) + epsilon`, where `mu = M_P(true_v)`,
/// `nu` is the sample the model was fitted to, and `D` is taken over the
/// budget-scaled class. The population side of `D` uses `reference` when
/// given (it must hold at least ten times as many atoms as `nu`), otherwise
/// quadrature atoms of `mu`.
pub fn entropy_gap_check(
    fitted: &FitOutcome,
    true_v: &PotentialRep,
    nu: &EmpiricalMeasure,
    class: &TestClassSpec,
    reference: Option<&EmpiricalMeasure>,
) -> Result<EntropyGapReport> {
    true_v.validate()?;
    let budget = fitted.model.potential.budget();
    if true_v.class_norm() > budget * (1.0 + 1e-9) {
        return param("true potential lies outside the fitted class ball");
    }
    let truth = BiasModel::new(fitted.model.base.clone(), true_v.clone())?;
    let lhs = relative_entropy_1d(&truth.density()?, &fitted.model.density()?, DEFAULT_NODES)?;
    let population = match reference {
        Some(r) => {
            if r.len() < 10 * nu.len() {
                return param("reference sample must be at least ten times larger than nu");
            }
            r.clone()
        }
        None => truth.quadrature_measure(&[], 4 * DEFAULT_NODES)?,
    };
    let discrepancy = match &class.kind {
        ClassKind::Barron => {
            let mut obj = SignedObjective::new(1);
            obj.push_points(population.points(), population.weights(), 1.0);
            obj.push_points(nu.points(), nu.weights(), -1.0);
            crate::gmmd::sup_signed(&obj, &Default::default()).1
        }
        ClassKind::Rkhs { kernel } => mmd_rkhs(kernel, &population, nu)?.value,
        ClassKind::Flow { .. } => return Err(Error::Unsupported("flow-class bias potentials".into())),
    };
    let rhs = 2.0 * budget * discrepancy;
    Ok(EntropyGapReport { lhs, rhs, discrepancy, epsilon: fitted.epsilon, holds: lhs <= rhs + fitted.epsilon })
}

#[derive(Debug, Clone)]
pub struct ModelSample {
    pub measure: EmpiricalMeasure,
    pub ess: f64,
    /// Set when the importance-sampling effective sample size is below `n`.
    pub low_ess: bool,
}

/// `n` draws from the model by importance resampling of `50 n` base proposals.
pub fn sample_model(model: &BiasModel, n: usize, seed: RngSeed) -> Result<ModelSample> {
    if n == 0 {
        return param("sample size must be positive");
    }
    let proposals = crate::measures::sample(&model.base, 50 * n, seed.child(0))?;
    let lw: Vec<f64> = proposals.points().iter().map(|x| -model.potential.eval(&[*x])).collect();
    let lz = log_sum_exp(lw.iter().copied());
    let w: Vec<f64> = lw.iter().map(|l| (l - lz).exp()).collect();
    let ess = 1.0 / w.iter().map(|v| v * v).sum::<f64>();
    let mut cum = Vec::with_capacity(w.len());
    let mut acc = 0.0;
    for v in &w {
        acc += v;
        cum.push(acc);
    }
    let mut rng = seed.child(1).rng();
    let mut pts = Vec::with_capacity(n);
    for _ in 0..n {
        let u: f64 = rng.random::<f64>() * acc;
        let i = cum.partition_point(|c| *c < u).min(w.len() - 1);
        pts.push(proposals.points()[i]);
    }
    let low_ess = ess < n as f64;
    if low_ess {
        log::warn!("importance resampling effective sample size {ess:.1} is below n = {n}");
    }
    Ok(ModelSample { measure: EmpiricalMeasure::uniform(1, pts)?, ess, low_ess })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn identity_potential(budget: f64) -> PotentialRep {
        PotentialRep::NeuronSum {
            terms: vec![(1.0, NeuronParams::new(vec![1.0], 0.0).unwrap()), (-1.0, NeuronParams::new(vec![-1.0], 0.0).unwrap())],
            budget,
        }
    }

    #[test]
    fn linear_potential_on_uniform() {
        let base = DistributionSpec::uniform(-1.0, 1.0);
        let model = BiasModel::new(base.clone(), identity_potential(2.0)).unwrap();
        let e = std::f64::consts::E;
        let sinh1 = 1f64.sinh();
        assert_abs_diff_eq!(model.log_partition, sinh1.ln(), epsilon = 1e-13);
        let mean = model.expect(|x| x, &[]).unwrap();
        assert_abs_diff_eq!(mean, -1.0 / e / sinh1, epsilon = 1e-12);
        assert_abs_diff_eq!(mean, -0.3130, epsilon = 1e-4);
        let q = model.quadrature_measure(&[], 4096).unwrap();
        let l = loss(&identity_potential(2.0), &q, &base, DEFAULT_NODES).unwrap();
        assert_abs_diff_eq!(l, -1.0 / e / sinh1 + sinh1.ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(l, -0.1516, epsilon = 1e-4);
    }

    #[test]
    fn entropy_two_ways() {
        // H(M | P) = -loss at nu = M, and H(P | M) = loss at nu = P
        let base = DistributionSpec::uniform(-1.0, 1.0);
        let v = PotentialRep::NeuronSum {
            terms: vec![(1.7, NeuronParams::normalized(vec![1.0], -0.3).unwrap()), (-0.6, NeuronParams::normalized(vec![-0.4], 0.2).unwrap())],
            budget: 3.0,
        };
        let model = BiasModel::new(base.clone(), v.clone()).unwrap();
        let p = BiasModel::new(base.clone(), PotentialRep::NeuronSum { terms: vec![], budget: 3.0 }).unwrap();
        let m_atoms = model.quadrature_measure(&[], 8192).unwrap();
        let p_atoms = p.quadrature_measure(&v.kinks(), 8192).unwrap();
        let h_mp = relative_entropy_1d(&model.density().unwrap(), &p.density().unwrap(), 4096).unwrap();
        let h_pm = relative_entropy_1d(&p.density().unwrap(), &model.density().unwrap(), 4096).unwrap();
        assert_abs_diff_eq!(h_mp, -loss(&v, &m_atoms, &base, 4096).unwrap(), epsilon = 1e-10);
        assert_abs_diff_eq!(h_pm, loss(&v, &p_atoms, &base, 4096).unwrap(), epsilon = 1e-10);
    }

    #[test]
    fn gaussian_base_partition() {
        // E exp(-x) under N(0, 1) is exp(1/2)
        let base = DistributionSpec::standard_gaussian(1);
        assert_abs_diff_eq!(log_partition(&identity_potential(2.0), &base, DEFAULT_NODES).unwrap(), 0.5, epsilon = 1e-12);
    }

    #[test]
    fn budget_violation_rejected() {
        let base = DistributionSpec::uniform(-1.0, 1.0);
        let nu = EmpiricalMeasure::uniform(1, vec![0.0]).unwrap();
        assert!(loss(&identity_potential(1.0), &nu, &base, 64).is_err());
        assert!(matches!(
            log_partition(&identity_potential(2.0), &DistributionSpec::standard_gaussian(2), 64),
            Err(Error::Unsupported(_))
        ));
    }

    #[test]
    fn fit_recovers_model_from_its_own_quadrature() {
        let base = DistributionSpec::uniform(-1.0, 1.0);
        let truth = PotentialRep::NeuronSum { terms: vec![(1.5, NeuronParams::normalized(vec![1.0], -0.2).unwrap())], budget: 2.0 };
        let mu = BiasModel::new(base.clone(), truth.clone()).unwrap();
        let nu = mu.quadrature_measure(&[], 4096).unwrap();
        let tmpl = PotentialRep::NeuronSum { terms: vec![], budget: 2.0 };
        let out = fit(&nu, &base, &tmpl, &FitConfig::default()).unwrap();
        let best = loss(&truth, &nu, &base, 4096).unwrap();
        let got = loss(&out.model.potential, &nu, &base, 4096).unwrap();
        assert!(got <= best + out.epsilon + 1e-9, "{got} vs {best} + {}", out.epsilon);
        assert!(out.epsilon < 1e-4, "{}", out.epsilon);
        let h = relative_entropy_1d(&mu.density().unwrap(), &out.model.density().unwrap(), 4096).unwrap();
        assert!(h < 1e-3, "{h}");
    }

    #[test]
    fn rkhs_fit_reduces_loss() {
        let base = DistributionSpec::uniform(-1.0, 1.0);
        let truth = BiasModel::new(base.clone(), identity_potential(2.0)).unwrap();
        let nu = sample_model(&truth, 2000, RngSeed::new(4)).unwrap().measure;
        let kernel = KernelSpec::gaussian(0.8, 1);
        let centers: Vec<Vec<f64>> = (0..9).map(|i| vec![-1.0 + 0.25 * i as f64]).collect();
        let tmpl = PotentialRep::RkhsExpansion { kernel, centers, coeffs: vec![0.0; 9], budget: 3.0 };
        let out = fit(&nu, &base, &tmpl, &FitConfig::default()).unwrap();
        let zero = PotentialRep::RkhsExpansion { kernel, centers: vec![vec![0.0]], coeffs: vec![0.0], budget: 3.0 };
        let l0 = loss(&zero, &nu, &base, 1024).unwrap();
        let l1 = loss(&out.model.potential, &nu, &base, 1024).unwrap();
        assert!(l1 < l0 - 0.05, "{l1} vs {l0}");
        assert!(out.model.potential.class_norm() <= 3.0 * (1.0 + 1e-6));
    }

    #[test]
    fn low_ess_is_flagged() {
        let base = DistributionSpec::uniform(-1.0, 1.0);
        let v = PotentialRep::NeuronSum { terms: vec![(500.0, NeuronParams::normalized(vec![1.0], 0.98).unwrap())], budget: 500.0 };
        let model = BiasModel::new(base, v).unwrap();
        let s = sample_model(&model, 200, RngSeed::new(1)).unwrap();
        assert!(s.low_ess, "ess {}", s.ess);
        let fine = BiasModel::new(DistributionSpec::uniform(-1.0, 1.0), identity_potential(2.0)).unwrap();
        assert!(!sample_model(&fine, 200, RngSeed::new(1)).unwrap().low_ess);
    }

    #[test]
    fn resampled_mean_matches_quadrature() {
        let model = BiasModel::new(DistributionSpec::uniform(-1.0, 1.0), identity_potential(2.0)).unwrap();
        let s = sample_model(&model, 20_000, RngSeed::new(2)).unwrap();
        let m = s.measure.mean()[0];
        let sd = (model.expect(|x| x * x, &[]).unwrap() - (-0.3130f64).powi(2)).sqrt();
        assert!((m - model.expect(|x| x, &[]).unwrap()).abs() < 4.0 * sd / (20_000f64).sqrt());
    }

    proptest! {
        #[test]
        fn l1_projection_is_feasible_and_idempotent(v in proptest::collection::vec(-5f64..5.0, 1..10), r in 0.1f64..4.0) {
            let mut a = v.clone();
            project_l1(&mut a, r);
            prop_assert!(a.iter().map(|x| x.abs()).sum::<f64>() <= r * (1.0 + 1e-12));
            let mut b = a.clone();
            project_l1(&mut b, r);
            for (x, y) in a.iter().zip(&b) { prop_assert!((x - y).abs() < 1e-12); }
        }

        #[test]
        fn loss_is_convex_in_coefficients(a1 in -1f64..1.0, a2 in -1f64..1.0, t in 0f64..1.0) {
            let base = DistributionSpec::uniform(-1.0, 1.0);
            let nu = EmpiricalMeasure::uniform(1, vec![-0.3, 0.1, 0.7]).unwrap();
            let p = NeuronParams::normalized(vec![1.0], 0.1).unwrap();
            let mk = |a: f64| PotentialRep::NeuronSum { terms: vec![(a, p.clone())], budget: 2.0 };
            let la = loss(&mk(a1), &nu, &base, 256).unwrap();
            let lb = loss(&mk(a2), &nu, &base, 256).unwrap();
            let lm = loss(&mk(t * a1 + (1.0 - t) * a2), &nu, &base, 256).unwrap();
            prop_assert!(lm <= t * la + (1.0 - t) * lb + 1e-12);
        }
    }
}
