//! Wasserstein distances and relative entropy, mostly as oracles and as the
//! comparison quantities in the bias-potential bounds.

use std::sync::Arc;

use crate::error::{check_dim, param, Error, Result};
use crate::measures::EmpiricalMeasure;
use crate::quadrature::composite_rule;
use crate::special::{log_sum_exp, sq_dist};

fn sorted_atoms(mu: &EmpiricalMeasure) -> Vec<(f64, f64)> {
    let mut v: Vec<(f64, f64)> = mu.iter().map(|(x, w)| (x[0], w)).collect();
    v.sort_by(|a, b| a.0.total_cmp(&b.0));
    v
}

fn require_1d(x: &EmpiricalMeasure, y: &EmpiricalMeasure) -> Result<()> {
    check_dim(1, x.dim())?;
    check_dim(1, y.dim())
}

/// `W1 = integral |F_x - F_y|` for weighted one-dimensional measures.
pub fn wasserstein1_1d(x: &EmpiricalMeasure, y: &EmpiricalMeasure) -> Result<f64> {
    require_1d(x, y)?;
    let mut events: Vec<(f64, f64)> = sorted_atoms(x);
    events.extend(sorted_atoms(y).into_iter().map(|(p, w)| (p, -w)));
    events.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut diff = 0.0;
    let mut acc = 0.0;
    for w in events.windows(2) {
        diff += w[0].1;
        acc += diff.abs() * (w[1].0 - w[0].0);
    }
    Ok(acc)
}

/// `W2` via the monotone (quantile) coupling.
pub fn wasserstein2_1d(x: &EmpiricalMeasure, y: &EmpiricalMeasure) -> Result<f64> {
    require_1d(x, y)?;
    let (a, b) = (sorted_atoms(x), sorted_atoms(y));
    let (mut i, mut j) = (0, 0);
    let (mut ra, mut rb) = (a[0].1, b[0].1);
    let mut acc = 0.0;
    while i < a.len() && j < b.len() {
        let m = ra.min(rb);
        acc += m * (a[i].0 - b[j].0).powi(2);
        ra -= m;
        rb -= m;
        if ra <= 1e-15 {
            i += 1;
            if i < a.len() {
                ra += a[i].1;
            }
        }
        if rb <= 1e-15 {
            j += 1;
            if j < b.len() {
                rb += b[j].1;
            }
        }
    }
    Ok(acc.sqrt())
}

/// Exact `W2` between equal-size uniform empirical measures by solving the
/// assignment problem.
pub fn wasserstein2_exact(x: &EmpiricalMeasure, y: &EmpiricalMeasure) -> Result<f64> {
    check_dim(x.dim(), y.dim())?;
    if x.len() != y.len() || !x.is_uniform() || !y.is_uniform() {
        return param("exact W2 requires equal-size uniformly weighted samples");
    }
    if x.len() > 512 {
        return param("exact W2 is limited to 512 atoms");
    }
    let n = x.len();
    let mut cost = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            cost.push(sq_dist(x.point(i), y.point(j)));
        }
    }
    let (rows, cols) =
        lsap::solve(n, n, &cost, false).map_err(|e| Error::Parameter(format!("assignment failed: {e:?}")))?;
    let total: f64 = rows.iter().zip(&cols).map(|(&i, &j)| cost[i * n + j]).sum();
    Ok((total / n as f64).sqrt())
}

/// Log-density on `[lo, hi]`, possibly unnormalized. `breakpoints` lists
/// points where the density is not smooth; quadrature panels split there.
#[derive(Clone)]
pub struct Density1D {
    log_density: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
    pub lo: f64,
    pub hi: f64,
    pub normalized: bool,
    pub breakpoints: Vec<f64>,
}

impl std::fmt::Debug for Density1D {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Density1D")
            .field("lo", &self.lo)
            .field("hi", &self.hi)
            .field("normalized", &self.normalized)
            .field("breakpoints", &self.breakpoints)
            .finish()
    }
}

impl Density1D {
    pub fn new(lo: f64, hi: f64, normalized: bool, log_density: impl Fn(f64) -> f64 + Send + Sync + 'static) -> Result<Self> {
        if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
            return param("density support must be a finite interval lo < hi");
        }
        Ok(Density1D { log_density: Arc::new(log_density), lo, hi, normalized, breakpoints: Vec::new() })
    }

    pub fn with_breakpoints(mut self, bp: Vec<f64>) -> Self {
        self.breakpoints = bp;
        self
    }

    pub fn gaussian(mean: f64, sd: f64, lo: f64, hi: f64) -> Result<Self> {
        if !(sd > 0.0) {
            return param("standard deviation must be positive");
        }
        Density1D::new(lo, hi, false, move |x| -0.5 * ((x - mean) / sd).powi(2))
    }

    pub fn log_density(&self, x: f64) -> f64 {
        if x < self.lo || x > self.hi {
            f64::NEG_INFINITY
        } else {
            (self.log_density)(x)
        }
    }

    pub(crate) fn rule(&self, nodes: usize) -> (Vec<f64>, Vec<f64>) {
        composite_rule(self.lo, self.hi, &self.breakpoints, nodes, f64::INFINITY)
    }

    /// `log integral exp(log_density)`.
    pub fn log_normalizer(&self, nodes: usize) -> f64 {
        let (x, w) = self.rule(nodes);
        log_sum_exp(x.iter().zip(&w).map(|(x, w)| w.ln() + self.log_density(*x)))
    }
}

/// `H(mu | nu) = integral p_mu log(p_mu / p_nu)` by composite Gauss-Legendre on
/// the support of `mu`, normalizing both densities numerically.
pub fn relative_entropy_1d(mu: &Density1D, nu: &Density1D, nodes: usize) -> Result<f64> {
    if nodes == 0 {
        return param("need at least one quadrature node");
    }
    let lz_mu = mu.log_normalizer(nodes);
    let lz_nu = nu.log_normalizer(nodes);
    if !lz_mu.is_finite() || !lz_nu.is_finite() {
        return param("density does not integrate to a finite positive value");
    }
    let mut bp = mu.breakpoints.clone();
    bp.extend(&nu.breakpoints);
    bp.extend([nu.lo, nu.hi]);
    let (x, w) = composite_rule(mu.lo, mu.hi, &bp, nodes, f64::INFINITY);
    let mut acc = 0.0;
    for (x, w) in x.iter().zip(&w) {
        let lp = mu.log_density(*x) - lz_mu;
        if lp == f64::NEG_INFINITY {
            continue;
        }
        let lq = nu.log_density(*x) - lz_nu;
        if lq == f64::NEG_INFINITY {
            return Ok(f64::INFINITY);
        }
        acc += w * lp.exp() * (lp - lq);
    }
    Ok(acc.max(0.0))
}

/// `W1 = integral |F_mu - F_nu|` between two densities, with CDFs accumulated
/// over `cells` equal cells spanning both supports.
pub fn wasserstein1_densities(mu: &Density1D, nu: &Density1D, cells: usize) -> Result<f64> {
    if cells < 2 {
        return param("need at least two cells");
    }
    let lo = mu.lo.min(nu.lo);
    let hi = mu.hi.max(nu.hi);
    let (lz_mu, lz_nu) = (mu.log_normalizer(4096), nu.log_normalizer(4096));
    let h = (hi - lo) / cells as f64;
    let mut bp: Vec<f64> = (0..=cells).map(|i| lo + h * i as f64).collect();
    bp.extend(&mu.breakpoints);
    bp.extend(&nu.breakpoints);
    bp.extend([mu.lo, mu.hi, nu.lo, nu.hi]);
    bp.sort_by(f64::total_cmp);
    bp.dedup();
    let (mut fm, mut fn_) = (0.0f64, 0.0f64);
    let mut acc = 0.0;
    for e in bp.windows(2) {
        let (a, b) = (e[0], e[1]);
        if b <= a {
            continue;
        }
        let (x, w) = composite_rule(a, b, &[], 1, f64::INFINITY);
        let before = (fm - fn_).abs();
        for (x, w) in x.iter().zip(&w) {
            fm += w * (mu.log_density(*x) - lz_mu).exp();
            fn_ += w * (nu.log_density(*x) - lz_nu).exp();
        }
        acc += 0.5 * (before + (fm - fn_).abs()) * (b - a);
    }
    Ok(acc)
}
