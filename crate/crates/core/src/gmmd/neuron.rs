//! Suprema of `|J(theta)|` over the unit sphere in `R^(d+1)`, where
//! `J(theta) = sum_i c_i relu(theta . (x_i, 1)) + sum_g w_g E_g relu(theta . (X, 1))`
//! mixes a signed point set with diagonal Gaussians. Every Barron-ball
//! supremum in this crate (discrepancies, Rademacher sums, bias-potential
//! directions) reduces to this form.

use std::f64::consts::{PI, TAU};

use rand::Rng;
use rand_distr::StandardNormal;

use super::OptimizerConfig;
use crate::measures::DiagGaussian;
use crate::special::{norm2, relu, relu_gaussian};

#[derive(Debug, Clone)]
pub(crate) struct SignedObjective {
    pub dim: usize,
    pub points: Vec<f64>,
    pub coeffs: Vec<f64>,
    pub gaussians: Vec<(f64, DiagGaussian)>,
}

impl SignedObjective {
    pub fn new(dim: usize) -> Self {
        SignedObjective { dim, points: Vec::new(), coeffs: Vec::new(), gaussians: Vec::new() }
    }

    pub fn push_points(&mut self, points: &[f64], weights: &[f64], sign: f64) {
        self.points.extend_from_slice(points);
        self.coeffs.extend(weights.iter().map(|w| sign * w));
    }

    pub fn push_gaussian(&mut self, weight: f64, g: DiagGaussian) {
        self.gaussians.push((weight, g));
    }

    /// Sum of `|c_i| |(x_i, 1)|` plus the Gaussian analogue: a Lipschitz
    /// constant of `J` on the sphere.
    pub fn lipschitz(&self) -> f64 {
        let d = self.dim;
        let disc: f64 = self
            .points
            .chunks(d)
            .zip(&self.coeffs)
            .map(|(x, c)| c.abs() * (x.iter().map(|v| v * v).sum::<f64>() + 1.0).sqrt())
            .sum();
        let gauss: f64 = self
            .gaussians
            .iter()
            .map(|(w, g)| w.abs() * (g.mean.iter().zip(&g.var).map(|(m, v)| m * m + v).sum::<f64>() + 1.0).sqrt())
            .sum();
        disc + gauss
    }

    pub fn value(&self, theta: &[f64]) -> f64 {
        let d = self.dim;
        let (om, b) = (&theta[..d], theta[d]);
        let mut acc = 0.0;
        for (x, c) in self.points.chunks_exact(d).zip(&self.coeffs) {
            let mut a = b;
            for k in 0..d {
                a += om[k] * x[k];
            }
            if a > 0.0 {
                acc += c * a;
            }
        }
        for (w, g) in &self.gaussians {
            let (m, s) = gaussian_projection(om, b, g);
            acc += w * relu_gaussian(m, s).0;
        }
        acc
    }

    /// Value and gradient with respect to `theta` (subgradient 0 at kinks).
    pub fn value_grad(&self, theta: &[f64], grad: &mut [f64]) -> f64 {
        let d = self.dim;
        let (om, b) = (&theta[..d], theta[d]);
        grad.iter_mut().for_each(|g| *g = 0.0);
        let mut acc = 0.0;
        for (x, c) in self.points.chunks_exact(d).zip(&self.coeffs) {
            let mut a = b;
            for k in 0..d {
                a += om[k] * x[k];
            }
            if a > 0.0 {
                acc += c * a;
                for k in 0..d {
                    grad[k] += c * x[k];
                }
                grad[d] += c;
            }
        }
        for (w, g) in &self.gaussians {
            let (m, s) = gaussian_projection(om, b, g);
            let (v, dm, ds) = relu_gaussian(m, s);
            acc += w * v;
            for k in 0..d {
                let dsk = if s > 0.0 { om[k] * g.var[k] / s } else { 0.0 };
                grad[k] += w * (dm * g.mean[k] + ds * dsk);
            }
            grad[d] += w * dm;
        }
        acc
    }

    fn pooled_points(&self) -> Vec<&[f64]> {
        let mut v: Vec<&[f64]> = self.points.chunks_exact(self.dim).collect();
        v.extend(self.gaussians.iter().map(|(_, g)| g.mean.as_slice()));
        v
    }

    /// Signed first moment `sum c_i x_i + sum w_g m_g`.
    fn first_moment(&self) -> Vec<f64> {
        let d = self.dim;
        let mut m = vec![0.0; d];
        for (x, c) in self.points.chunks_exact(d).zip(&self.coeffs) {
            for k in 0..d {
                m[k] += c * x[k];
            }
        }
        for (w, g) in &self.gaussians {
            for k in 0..d {
                m[k] += w * g.mean[k];
            }
        }
        m
    }
}

fn gaussian_projection(om: &[f64], b: f64, g: &DiagGaussian) -> (f64, f64) {
    let mut m = b;
    let mut s2 = 0.0;
    for k in 0..om.len() {
        m += om[k] * g.mean[k];
        s2 += om[k] * om[k] * g.var[k];
    }
    (m, s2.sqrt())
}

fn normalize(v: &mut [f64]) -> bool {
    let n = norm2(v);
    if !(n > 0.0) || !n.is_finite() {
        return false;
    }
    v.iter_mut().for_each(|x| *x /= n);
    true
}

fn principal_direction(pts: &[&[f64]], d: usize) -> Vec<f64> {
    if d == 1 {
        return vec![1.0];
    }
    let n = pts.len().max(1) as f64;
    let mut mean = vec![0.0; d];
    for x in pts {
        for k in 0..d {
            mean[k] += x[k] / n;
        }
    }
    let mut u: Vec<f64> = (0..d).map(|k| 1.0 + 0.1 * k as f64).collect();
    normalize(&mut u);
    for _ in 0..50 {
        let mut next = vec![0.0; d];
        for x in pts {
            let p: f64 = (0..d).map(|k| (x[k] - mean[k]) * u[k]).sum();
            for k in 0..d {
                next[k] += p * (x[k] - mean[k]);
            }
        }
        if !normalize(&mut next) {
            break;
        }
        u = next;
    }
    u
}

fn candidate_pool(obj: &SignedObjective, rng: &mut impl Rng, random: usize) -> Vec<Vec<f64>> {
    let d = obj.dim;
    let pts = obj.pooled_points();
    let mut out = Vec::new();
    let mut constant = vec![0.0; d + 1];
    constant[d] = 1.0;
    out.push(constant.clone());
    constant[d] = -1.0;
    out.push(constant);

    let mut dirs = vec![principal_direction(&pts, d)];
    let mut fm = obj.first_moment();
    if normalize(&mut fm) {
        dirs.push(fm);
    }
    for u in &dirs {
        let mut proj: Vec<f64> = pts.iter().map(|x| x.iter().zip(u).map(|(a, b)| a * b).sum()).collect();
        proj.sort_by(f64::total_cmp);
        if proj.is_empty() {
            continue;
        }
        let q = 9;
        for j in 0..q {
            let t = proj[((j as f64 + 0.5) / q as f64 * proj.len() as f64) as usize];
            for s in [1.0, -1.0] {
                let mut th: Vec<f64> = u.iter().map(|v| s * v).collect();
                th.push(-s * t);
                if normalize(&mut th) {
                    out.push(th);
                }
            }
        }
    }
    let stride = (pts.len() / 48).max(1);
    for x in pts.iter().step_by(stride) {
        for s in [1.0, -1.0] {
            let mut th: Vec<f64> = x.iter().map(|v| s * v).collect();
            th.push(s);
            if normalize(&mut th) {
                out.push(th);
            }
        }
    }
    for _ in 0..random {
        out.push(random_unit(rng, d + 1));
    }
    out
}

pub(crate) fn random_unit(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    loop {
        let mut v: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        if normalize(&mut v) {
            return v;
        }
    }
}

/// Ascent on `s * J` over the sphere with a fixed, periodically halved
/// angular step. Returns the best point seen and its signed value.
fn ascend(obj: &SignedObjective, start: &[f64], s: f64, cfg: &OptimizerConfig) -> (Vec<f64>, f64) {
    let n = start.len();
    let mut th = start.to_vec();
    let mut g = vec![0.0; n];
    let mut best = th.clone();
    let mut best_v = s * obj.value(&th);
    let mut step = cfg.step_size;
    for it in 0..cfg.steps {
        if it > 0 && cfg.decay_every > 0 && it % cfg.decay_every == 0 {
            step *= 0.5;
        }
        let v = s * obj.value_grad(&th, &mut g);
        if v > best_v {
            best_v = v;
            best.copy_from_slice(&th);
        }
        let radial: f64 = g.iter().zip(&th).map(|(a, b)| a * b).sum();
        for k in 0..n {
            g[k] = s * (g[k] - radial * th[k]);
        }
        let gn = norm2(&g);
        if !(gn > 1e-300) {
            break;
        }
        for k in 0..n {
            th[k] += step * g[k] / gn;
        }
        normalize(&mut th);
    }
    let v = s * obj.value(&th);
    if v > best_v {
        best_v = v;
        best.copy_from_slice(&th);
    }
    (best, best_v)
}

/// Monotone refinement: fixed-point steps `theta <- grad / |grad|` (exact for
/// positively homogeneous objectives on a fixed activation pattern) and
/// backtracking projected-gradient steps, each accepted only on improvement.
fn polish(obj: &SignedObjective, start: &[f64], s: f64, tol: f64) -> (Vec<f64>, f64) {
    let n = start.len();
    let mut th = start.to_vec();
    let mut g = vec![0.0; n];
    let mut v = s * obj.value_grad(&th, &mut g);
    let mut step = 0.05;
    for _ in 0..400 {
        let mut improved = false;
        let mut fp: Vec<f64> = g.iter().map(|x| s * x).collect();
        if normalize(&mut fp) {
            let fv = s * obj.value(&fp);
            if fv > v + tol * 1e-3 * v.abs().max(1e-300) {
                th = fp;
                v = s * obj.value_grad(&th, &mut g);
                improved = true;
            }
        }
        if !improved {
            let radial: f64 = g.iter().zip(&th).map(|(a, b)| a * b).sum();
            let mut dir: Vec<f64> = (0..n).map(|k| s * (g[k] - radial * th[k])).collect();
            if normalize(&mut dir) {
                while step > 1e-12 {
                    let mut cand: Vec<f64> = (0..n).map(|k| th[k] + step * dir[k]).collect();
                    normalize(&mut cand);
                    let cv = s * obj.value(&cand);
                    if cv > v {
                        th = cand;
                        v = s * obj.value_grad(&th, &mut g);
                        improved = true;
                        step *= 1.5;
                        break;
                    }
                    step *= 0.5;
                }
            }
        }
        if !improved || step <= 1e-12 {
            break;
        }
    }
    (th, v)
}

/// Multi-start lower bound on `sup |J|`; returns `(theta, |J(theta)|)`.
pub(crate) fn optimize(obj: &SignedObjective, cfg: &OptimizerConfig) -> (Vec<f64>, f64) {
    let mut rng = cfg.seed.rng();
    let random = (cfg.restarts * 4).max(4);
    let pool = candidate_pool(obj, &mut rng, random);
    let vals: Vec<f64> = pool.iter().map(|t| obj.value(t)).collect();
    let per_sign = cfg.restarts.div_ceil(2).max(1);
    let mut runs: Vec<(Vec<f64>, f64, f64)> = Vec::new();
    for s in [1.0, -1.0] {
        let mut idx: Vec<usize> = (0..pool.len()).collect();
        idx.sort_by(|&a, &b| (s * vals[b]).total_cmp(&(s * vals[a])));
        // keep half the starts from the best screened candidates and half
        // from the purely random part of the pool for diversity
        let n_best = per_sign.div_ceil(2);
        let mut chosen: Vec<usize> = idx.iter().copied().take(n_best).collect();
        let rand_start = pool.len() - random;
        let mut r = rand_start;
        while chosen.len() < per_sign && r < pool.len() {
            if !chosen.contains(&r) {
                chosen.push(r);
            }
            r += 1;
        }
        for i in chosen {
            let (th, v) = ascend(obj, &pool[i], s, cfg);
            runs.push((th, v, s));
        }
    }
    runs.sort_by(|a, b| b.1.total_cmp(&a.1));
    let mut best: (Vec<f64>, f64) = (runs[0].0.clone(), runs[0].1);
    for (th, _, s) in runs.iter().take(4) {
        let (pt, pv) = polish(obj, th, *s, cfg.tolerance);
        if pv > best.1 {
            best = (pt, pv);
        }
    }
    (best.0, best.1.abs())
}

fn theta_of(phi: f64) -> [f64; 2] {
    [phi.cos(), phi.sin()]
}

fn wrap(phi: f64) -> f64 {
    let r = phi.rem_euclid(TAU);
    if r >= TAU {
        0.0
    } else {
        r
    }
}

/// Exact `sup |J|` for `d = 1` by sweeping the circle.
///
/// The discrete part is `A cos(phi) + B sin(phi)` between consecutive kink
/// angles, so its extrema are found in closed form; Gaussian parts are smooth
/// and handled by bisection on the derivative within short sub-arcs.
pub(crate) fn sweep_1d(obj: &SignedObjective) -> (Vec<f64>, f64) {
    assert_eq!(obj.dim, 1);
    let mut events: Vec<(f64, usize, bool)> = Vec::with_capacity(2 * obj.coeffs.len());
    let mut a_sum = 0.0;
    let mut b_sum = 0.0;
    for (i, (&z, &c)) in obj.points.iter().zip(&obj.coeffs).enumerate() {
        if c == 0.0 {
            continue;
        }
        let on = wrap(-z.atan());
        let off = wrap(on + PI);
        if on > off {
            a_sum += c * z;
            b_sum += c;
        }
        events.push((on, i, true));
        events.push((off, i, false));
    }
    events.sort_by(|a, b| a.0.total_cmp(&b.0));

    let gauss_val = |phi: f64| -> f64 {
        let th = theta_of(phi);
        obj.gaussians
            .iter()
            .map(|(w, g)| {
                let (m, s) = gaussian_projection(&th[..1], th[1], g);
                w * relu_gaussian(m, s).0
            })
            .sum()
    };
    let gauss_deriv = |phi: f64| -> f64 {
        let (sn, cs) = phi.sin_cos();
        obj.gaussians
            .iter()
            .map(|(w, g)| {
                let sd = g.var[0].sqrt();
                let m = cs * g.mean[0] + sn;
                let s = cs.abs() * sd;
                let (_, dm, ds) = relu_gaussian(m, s);
                let dmdphi = -sn * g.mean[0] + cs;
                let dsdphi = -cs.signum() * sn * sd;
                w * (dm * dmdphi + ds * dsdphi)
            })
            .sum()
    };
    let has_gauss = !obj.gaussians.is_empty();

    let mut best_phi = 0.0;
    let mut best_abs = f64::NEG_INFINITY;
    let mut consider = |phi: f64, a: f64, b: f64| {
        let v = a * phi.cos() + b * phi.sin() + if has_gauss { gauss_val(phi) } else { 0.0 };
        if v.abs() > best_abs {
            best_abs = v.abs();
            best_phi = phi;
        }
    };

    let mut arc_start = 0.0;
    let mut e = 0;
    loop {
        let arc_end = if e < events.len() { events[e].0 } else { TAU };
        if arc_end > arc_start {
            consider(arc_start, a_sum, b_sum);
            consider(arc_end, a_sum, b_sum);
            if has_gauss {
                let pieces = ((arc_end - arc_start) / (PI / 32.0)).ceil().max(1.0) as usize;
                let h = (arc_end - arc_start) / pieces as f64;
                let deriv = |phi: f64| -a_sum * phi.sin() + b_sum * phi.cos() + gauss_deriv(phi);
                for p in 0..pieces {
                    let (mut lo, mut hi) = (arc_start + h * p as f64, arc_start + h * (p + 1) as f64);
                    let (mut dlo, dhi) = (deriv(lo), deriv(hi));
                    if dlo == 0.0 {
                        consider(lo, a_sum, b_sum);
                    }
                    if dlo * dhi < 0.0 {
                        for _ in 0..80 {
                            let mid = 0.5 * (lo + hi);
                            let dm = deriv(mid);
                            if dm * dlo > 0.0 {
                                lo = mid;
                                dlo = dm;
                            } else {
                                hi = mid;
                            }
                        }
                        consider(0.5 * (lo + hi), a_sum, b_sum);
                    }
                }
            } else {
                let peak = wrap(b_sum.atan2(a_sum));
                for cand in [peak, wrap(peak + PI)] {
                    if cand > arc_start && cand < arc_end {
                        consider(cand, a_sum, b_sum);
                    }
                }
            }
        }
        if e >= events.len() {
            break;
        }
        // apply every event at this exact angle
        let angle = events[e].0;
        while e < events.len() && events[e].0 == angle {
            let (_, i, on) = events[e];
            let (z, c) = (obj.points[i], obj.coeffs[i]);
            let sign = if on { 1.0 } else { -1.0 };
            a_sum += sign * c * z;
            b_sum += sign * c;
            e += 1;
        }
        arc_start = angle;
    }
    // re-evaluate directly to avoid reporting accumulated rounding
    let th = theta_of(best_phi).to_vec();
    let exact = obj.value(&th).abs();
    (th, exact)
}

/// Brute-force `max |J|` over a deterministic grid on the sphere (`d` = 1 or 2)
/// together with the covering radius of the grid.
pub(crate) fn grid_max(obj: &SignedObjective, resolution: usize) -> (Vec<f64>, f64, f64) {
    let d = obj.dim;
    let mut best = (vec![0.0; d + 1], f64::NEG_INFINITY);
    let mut eval = |th: &[f64]| {
        let mut acc = 0.0;
        for (x, c) in obj.points.chunks_exact(d).zip(&obj.coeffs) {
            let a: f64 = th[d] + (0..d).map(|k| th[k] * x[k]).sum::<f64>();
            acc += c * relu(a);
        }
        for (w, g) in &obj.gaussians {
            let (m, s) = gaussian_projection(&th[..d], th[d], g);
            acc += w * relu_gaussian(m, s).0;
        }
        if acc.abs() > best.1 {
            best = (th.to_vec(), acc.abs());
        }
    };
    let radius = if d == 1 {
        for k in 0..resolution {
            let phi = TAU * k as f64 / resolution as f64;
            eval(&theta_of(phi));
        }
        PI / resolution as f64
    } else {
        let polar = (resolution / 2).max(1);
        for i in 0..=polar {
            let beta = PI * i as f64 / polar as f64;
            let (sb, cb) = beta.sin_cos();
            let az = if i == 0 || i == polar { 1 } else { resolution };
            for j in 0..az {
                let alpha = TAU * j as f64 / resolution as f64;
                let (sa, ca) = alpha.sin_cos();
                eval(&[sb * ca, sb * sa, cb]);
            }
        }
        (2.0f64).sqrt() * PI / resolution as f64
    };
    (best.0, best.1, radius)
}
