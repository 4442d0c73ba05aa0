//! Linear-quadratic mean-field game with mean coupling:
//! `dX = (b1 X + c m_t + b2 alpha) dt + sigma dW`, running cost
//! `q |X - s m_t|^2 / 2 + r |alpha|^2 / 2`, terminal cost `q_T |X_T - s_T m_T|^2 / 2`.
//!
//! All matrices are scalar multiples of the identity, so the Riccati equation
//! stays scalar and coordinates decouple.

use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{param, Error, Result};
use crate::gmmd::McEstimate;
use crate::measures::{DiagGaussian, DistributionSpec, RngSeed};
use crate::particle_sde::{AffineDrift, Functional, MeanFieldModel, MeanFlow, StepSchedule};
use crate::special::relu_gaussian;
use crate::test_classes::{NeuronParams, TestClassSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LqGameParams {
    #[serde(default = "one_usize")]
    pub dim: usize,
    #[serde(default)]
    pub b1: f64,
    #[serde(default = "one")]
    pub b2: f64,
    #[serde(default)]
    pub c: f64,
    #[serde(default = "one")]
    pub q: f64,
    #[serde(default = "one")]
    pub r: f64,
    #[serde(default = "one")]
    pub q_terminal: f64,
    #[serde(default)]
    pub s: f64,
    #[serde(default)]
    pub s_terminal: f64,
    #[serde(default = "one")]
    pub sigma: f64,
    #[serde(default = "one")]
    pub horizon: f64,
    #[serde(default = "default_init_mean")]
    pub init_mean: Vec<f64>,
    #[serde(default = "default_init_var")]
    pub init_var: Vec<f64>,
}

fn one() -> f64 {
    1.0
}

fn one_usize() -> usize {
    1
}

fn default_init_mean() -> Vec<f64> {
    vec![1.0]
}

fn default_init_var() -> Vec<f64> {
    vec![0.25]
}

impl LqGameParams {
    /// Coupled instance: `q = r = 1`, `c = s = 0.5`, `sigma = 1`, `T = 1`, `d = 1`.
    pub fn coupled() -> Self {
        LqGameParams {
            dim: 1,
            b1: 0.0,
            b2: 1.0,
            c: 0.5,
            q: 1.0,
            r: 1.0,
            q_terminal: 1.0,
            s: 0.5,
            s_terminal: 0.5,
            sigma: 1.0,
            horizon: 1.0,
            init_mean: vec![1.0],
            init_var: vec![0.25],
        }
    }

    /// Same instance without any interaction (`c = s = s_T = 0`).
    pub fn decoupled() -> Self {
        LqGameParams { c: 0.0, s: 0.0, s_terminal: 0.0, ..Self::coupled() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.r > 0.0) {
            return param("control cost r must be positive");
        }
        if !(self.q >= 0.0 && self.q_terminal >= 0.0) {
            return param("state costs q and q_T must be non-negative");
        }
        if !(self.horizon > 0.0) || !(self.sigma >= 0.0) {
            return param("need a positive horizon and non-negative sigma");
        }
        if self.dim == 0 || self.init_mean.len() != self.dim || self.init_var.len() != self.dim {
            return param("initial mean and variance must have length dim");
        }
        if self.init_var.iter().any(|v| !(*v >= 0.0)) {
            return param("initial variances must be non-negative");
        }
        Ok(())
    }

    pub fn init(&self) -> DiagGaussian {
        DiagGaussian { mean: self.init_mean.clone(), var: self.init_var.clone() }
    }
}

/// Continuous-time equilibrium on a uniform grid of `steps + 1` times.
#[derive(Debug, Clone, PartialEq)]
pub struct MfgSolution {
    pub times: Vec<f64>,
    pub riccati: Vec<f64>,
    /// `offset[k][j]`: coordinate `j` of `eta(t_k)`.
    pub offset: Vec<Vec<f64>>,
    pub mean: Vec<Vec<f64>>,
    pub iterations: usize,
    pub residual: f64,
    b2_over_r: f64,
}

impl MfgSolution {
    /// `alpha(t_k, x) = -(b2 / r)(P(t_k) x + eta(t_k))`.
    pub fn feedback(&self, k: usize, x: &[f64]) -> Vec<f64> {
        x.iter().zip(&self.offset[k]).map(|(xi, e)| -self.b2_over_r * (self.riccati[k] * xi + e)).collect()
    }
}

fn rk4_step(y: f64, h: f64, f0: f64, f: impl Fn(f64, usize) -> f64) -> f64 {
    // f(y, stage) with stage 0: start, 1: midpoint, 2: end
    let k1 = f0;
    let k2 = f(y + 0.5 * h * k1, 1);
    let k3 = f(y + 0.5 * h * k2, 1);
    let k4 = f(y + h * k3, 2);
    y + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
}

/// Riccati curve on a grid of `2 * steps + 1` points (half steps), by backward RK4.
fn riccati_half_grid(p: &LqGameParams, steps: usize) -> Vec<f64> {
    let al = p.b2 * p.b2 / p.r;
    let f = |v: f64| al * v * v - 2.0 * p.b1 * v - p.q;
    let m = 2 * steps;
    let h = p.horizon / m as f64;
    let mut out = vec![0.0; m + 1];
    out[m] = p.q_terminal;
    for k in (0..m).rev() {
        let y = out[k + 1];
        out[k] = rk4_step(y, -h, f(y), |z, _| f(z));
    }
    out
}

/// Solves the equilibrium: backward RK4 for the Riccati curve, then a damped
/// Picard iteration on the mean flow (offset backward, mean forward).
pub fn solve_mfg_lq(p: &LqGameParams, steps: usize) -> Result<MfgSolution> {
    p.validate()?;
    if steps < 100 {
        return param("at least 100 steps are required");
    }
    let h = p.horizon / steps as f64;
    let al = p.b2 * p.b2 / p.r;
    let ph = riccati_half_grid(p, steps);
    let pk = |k: usize, stage: usize| ph[2 * k + stage];
    let n = steps;
    let mut mean: Vec<Vec<f64>> = (0..=n).map(|_| p.init_mean.clone()).collect();
    let mut offset = vec![vec![0.0; p.dim]; n + 1];
    let damping = 0.5;
    let mut residual = f64::INFINITY;
    let mut iterations = 0;
    while iterations < 1000 {
        iterations += 1;
        for j in 0..p.dim {
            offset[n][j] = -p.q_terminal * p.s_terminal * mean[n][j];
            for k in (0..n).rev() {
                let m0 = mean[k + 1][j];
                let m1 = mean[k][j];
                let mm = 0.5 * (m0 + m1);
                // integrate from t_{k+1} back to t_k; stage 0 at t_{k+1}
                let f = |e: f64, t_idx: usize, m: f64| -(p.b1 - al * pk(k, t_idx)) * e - (pk(k, t_idx) * p.c - p.q * p.s) * m;
                let y = offset[k + 1][j];
                offset[k][j] = rk4_step(y, -h, f(y, 2, m0), |z, st| if st == 1 { f(z, 1, mm) } else { f(z, 0, m1) });
            }
        }
        let mut next = vec![p.init_mean.clone(); n + 1];
        for j in 0..p.dim {
            for k in 0..n {
                let e0 = offset[k][j];
                let e1 = offset[k + 1][j];
                let em = 0.5 * (e0 + e1);
                let f = |m: f64, t_idx: usize, e: f64| (p.b1 + p.c - al * pk(k, t_idx)) * m - al * e;
                let y = next[k][j];
                next[k + 1][j] = rk4_step(y, h, f(y, 0, e0), |z, st| if st == 1 { f(z, 1, em) } else { f(z, 2, e1) });
            }
        }
        residual = 0.0f64;
        for k in 0..=n {
            for j in 0..p.dim {
                residual = residual.max((next[k][j] - mean[k][j]).abs());
                mean[k][j] = (1.0 - damping) * mean[k][j] + damping * next[k][j];
            }
        }
        if residual < 1e-8 {
            break;
        }
    }
    if residual >= 1e-8 {
        return Err(Error::NonConvergence { iterations, residual });
    }
    Ok(MfgSolution {
        times: (0..=n).map(|k| k as f64 * h).collect(),
        riccati: (0..=n).map(|k| ph[2 * k]).collect(),
        offset,
        mean,
        iterations,
        residual,
        b2_over_r: p.b2 / p.r,
    })
}

/// Backward solution of a scalar discrete-time tracking problem
/// `x' = a x + e_k + beta u + sigma sqrt(dt) Z` with running cost
/// `(q (g x - s xi_k)^2 + r u^2) dt / 2` and terminal cost `q_T (g_T x - s_T xi_N)^2 / 2`.
#[derive(Debug, Clone)]
struct Tracking {
    p: Vec<f64>,
    eta: Vec<f64>,
    kappa: Vec<f64>,
    gain: Vec<f64>,
    shift: Vec<f64>,
    curvature: Vec<f64>,
}

struct TrackSpec<'a> {
    a: f64,
    beta: f64,
    g: f64,
    g_t: f64,
    dt: f64,
    e: &'a [f64],
    xi: &'a [f64],
}

fn solve_tracking(pr: &LqGameParams, t: &TrackSpec) -> Tracking {
    let n = t.e.len();
    let (q, r, qt, s, st) = (pr.q, pr.r, pr.q_terminal, pr.s, pr.s_terminal);
    let mut p = vec![0.0; n + 1];
    let mut eta = vec![0.0; n + 1];
    let mut kappa = vec![0.0; n + 1];
    let mut gain = vec![0.0; n];
    let mut shift = vec![0.0; n];
    let mut curvature = vec![0.0; n];
    p[n] = qt * t.g_t * t.g_t;
    eta[n] = -qt * t.g_t * st * t.xi[n];
    kappa[n] = 0.5 * qt * st * st * t.xi[n] * t.xi[n];
    let (a, b, dt) = (t.a, t.beta, t.dt);
    for k in (0..n).rev() {
        let (pn, en, kn) = (p[k + 1], eta[k + 1], kappa[k + 1]);
        let ek = t.e[k];
        let h = r * dt + b * b * pn;
        let lin = pn * ek + en;
        curvature[k] = h;
        gain[k] = b * pn * a / h;
        shift[k] = b * lin / h;
        p[k] = q * t.g * t.g * dt + a * a * pn - (b * pn * a).powi(2) / h;
        eta[k] = -q * t.g * s * t.xi[k] * dt + a * lin * r * dt / h;
        kappa[k] = 0.5 * q * s * s * t.xi[k] * t.xi[k] * dt + 0.5 * pn * pr.sigma * pr.sigma * dt + 0.5 * pn * ek * ek + en * ek + kn
            - (b * lin).powi(2) / (2.0 * h);
    }
    Tracking { p, eta, kappa, gain, shift, curvature }
}

/// Equilibrium of the Euler-discretized game: feedback `alpha_k = -K_k x - j_k`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteMfgSolution {
    pub steps: usize,
    pub dt: f64,
    pub riccati: Vec<f64>,
    pub gain: Vec<f64>,
    /// `shift[j][k]` for coordinate `j`.
    pub shift: Vec<Vec<f64>>,
    /// `mean[j][k]` for coordinate `j`.
    pub mean: Vec<Vec<f64>>,
    /// Expected cost of a representative player at equilibrium.
    pub cost: f64,
    pub iterations: usize,
}

pub fn solve_mfg_lq_discrete(p: &LqGameParams, steps: usize) -> Result<DiscreteMfgSolution> {
    p.validate()?;
    if steps == 0 {
        return param("at least one step is required");
    }
    let dt = p.horizon / steps as f64;
    let a = 1.0 + p.b1 * dt;
    let beta = p.b2 * dt;
    let mut shift = Vec::new();
    let mut mean_all = Vec::new();
    let mut gain = Vec::new();
    let mut riccati = Vec::new();
    let mut cost = 0.0;
    let mut iters_max = 0;
    for j in 0..p.dim {
        let mut m = vec![p.init_mean[j]; steps + 1];
        let damping = 0.5;
        let mut iterations = 0;
        let mut tr;
        loop {
            iterations += 1;
            let e: Vec<f64> = m[..steps].iter().map(|v| p.c * v * dt).collect();
            tr = solve_tracking(p, &TrackSpec { a, beta, g: 1.0, g_t: 1.0, dt, e: &e, xi: &m });
            let mut next = vec![p.init_mean[j]; steps + 1];
            for k in 0..steps {
                next[k + 1] = (a - beta * tr.gain[k]) * next[k] + e[k] - beta * tr.shift[k];
            }
            let res = next.iter().zip(&m).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
            if res < 1e-12 {
                break;
            }
            if iterations >= 1000 {
                return Err(Error::NonConvergence { iterations, residual: res });
            }
            for (mk, nk) in m.iter_mut().zip(&next) {
                *mk = (1.0 - damping) * *mk + damping * nk;
            }
        }
        iters_max = iters_max.max(iterations);
        let (m0, v0) = (p.init_mean[j], p.init_var[j]);
        cost += 0.5 * tr.p[0] * (v0 + m0 * m0) + tr.eta[0] * m0 + tr.kappa[0];
        gain = tr.gain.clone();
        riccati = tr.p.clone();
        shift.push(tr.shift);
        mean_all.push(m);
    }
    Ok(DiscreteMfgSolution { steps, dt, riccati, gain, shift, mean: mean_all, cost, iterations: iters_max })
}

/// Interacting model driven by the continuous-time feedback, for simulation
/// through `particle_sde`. The mean coupling is written as
/// `c (E relu(X) - E relu(-X))` in one dimension.
pub fn feedback_model(p: &LqGameParams, sol: &MfgSolution) -> Result<MeanFieldModel> {
    if p.dim != 1 {
        return Err(Error::Unsupported("feedback model export is one-dimensional".into()));
    }
    let steps = sol.times.len() - 1;
    let k = p.b2 * p.b2 / p.r;
    Ok(MeanFieldModel {
        dim: 1,
        functionals: vec![
            Functional::Neuron(NeuronParams { omega: vec![1.0], b: 0.0 }),
            Functional::Neuron(NeuronParams { omega: vec![-1.0], b: 0.0 }),
        ],
        drift: AffineDrift { offset: vec![0.0], self_coef: p.b1, mean_coef: vec![p.c, -p.c] },
        schedule: Some(StepSchedule {
            self_coef: (0..steps).map(|i| -k * sol.riccati[i]).collect(),
            offset: (0..steps).map(|i| vec![-k * sol.offset[i][0]]).collect(),
        }),
        sigma: p.sigma,
        lipschitz: p.b1.abs() + 2.0 * p.c.abs() + k * sol.riccati.iter().cloned().fold(0.0, f64::max),
        horizon: p.horizon,
        init: DistributionSpec::Gaussian(p.init()),
        class: TestClassSpec::barron(),
    })
}

/// Functional means of the equilibrium flow, with the state variance
/// propagated along the Euler scheme.
pub fn equilibrium_flow(p: &LqGameParams, sol: &MfgSolution) -> MeanFlow {
    let steps = sol.times.len() - 1;
    let dt = p.horizon / steps as f64;
    let k = p.b2 * p.b2 / p.r;
    let mut v = p.init_var[0];
    let mut values = Vec::with_capacity(steps + 1);
    for i in 0..=steps {
        let (m, s) = (sol.mean[i][0], v.sqrt());
        values.push(vec![relu_gaussian(m, s).0, relu_gaussian(-m, s).0]);
        if i < steps {
            v = (1.0 + (p.b1 - k * sol.riccati[i]) * dt).powi(2) * v + p.sigma * p.sigma * dt;
        }
    }
    MeanFlow { values }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NashGap {
    pub n: usize,
    /// `J(alpha_bar) - J(best response)` for the deviating player.
    pub gap: McEstimate,
    /// The deviating player's expected cost under the mean-field feedback.
    pub cost: McEstimate,
    /// Equilibrium cost of the limiting game.
    pub mean_field_cost: f64,
}

struct PlayerCosts {
    gap: f64,
    cost: f64,
}

/// Exact expected costs of `player` given the others' realized paths.
///
/// With the others frozen, the player's own state enters the empirical mean
/// with weight `1/n`, so the player faces a tracking problem with drift
/// `b1 + c/n`, tracking weight `1 - s/n` and exogenous reference `xi` (the
/// others' sum divided by `n`). The cost of the mean-field feedback exceeds
/// the best response by `sum_k H_k E(alpha_k - alpha*_k)^2 / 2` under the
/// feedback's own state law.
fn player_costs(p: &LqGameParams, sol: &DiscreteMfgSolution, n: usize, coord: usize, xi: &[f64]) -> PlayerCosts {
    let steps = sol.steps;
    let dt = sol.dt;
    let nf = n as f64;
    let a = 1.0 + (p.b1 + p.c / nf) * dt;
    let beta = p.b2 * dt;
    let e: Vec<f64> = xi[..steps].iter().map(|v| p.c * v * dt).collect();
    let spec = TrackSpec { a, beta, g: 1.0 - p.s / nf, g_t: 1.0 - p.s_terminal / nf, dt, e: &e, xi };
    let tr = solve_tracking(p, &spec);
    let (mut m1, mut m2) = (p.init_mean[coord], p.init_var[coord] + p.init_mean[coord].powi(2));
    let best = 0.5 * tr.p[0] * m2 + tr.eta[0] * m1 + tr.kappa[0];
    let mut gap = 0.0;
    for k in 0..steps {
        let dk = sol.gain[k] - tr.gain[k];
        let dj = sol.shift[coord][k] - tr.shift[k];
        gap += 0.5 * tr.curvature[k] * (dk * dk * m2 + 2.0 * dk * dj * m1 + dj * dj);
        let lin = a - beta * sol.gain[k];
        let off = e[k] - beta * sol.shift[coord][k];
        let m2n = lin * lin * m2 + 2.0 * lin * off * m1 + off * off + p.sigma * p.sigma * dt;
        m1 = lin * m1 + off;
        m2 = m2n;
    }
    PlayerCosts { gap, cost: best + gap }
}

/// Simulates the `n`-player game under the mean-field feedback and returns
/// one replication's `(gap, cost)` for the chosen player.
fn replicate(p: &LqGameParams, sol: &DiscreteMfgSolution, n: usize, seed: RngSeed, player: usize) -> (f64, f64) {
    let steps = sol.steps;
    let dt = sol.dt;
    let sq = p.sigma * dt.sqrt();
    let init = p.init();
    let mut gap = 0.0;
    let mut cost = 0.0;
    let mut rngs: Vec<_> = (0..n).map(|i| seed.child(i as u64).rng()).collect();
    let mut x: Vec<Vec<f64>> = rngs
        .iter_mut()
        .map(|r| init.mean.iter().zip(&init.var).map(|(m, v)| {
            let z: f64 = StandardNormal.sample(r);
            m + v.sqrt() * z
        }).collect::<Vec<f64>>())
        .collect();
    let mut others: Vec<Vec<f64>> = vec![Vec::with_capacity(steps + 1); p.dim];
    let nf = n as f64;
    for k in 0..=steps {
        for j in 0..p.dim {
            let total: f64 = x.iter().map(|xi| xi[j]).sum();
            others[j].push((total - x[player][j]) / nf);
        }
        if k == steps {
            break;
        }
        let mean: Vec<f64> = (0..p.dim).map(|j| x.iter().map(|xi| xi[j]).sum::<f64>() / nf).collect();
        for (xi, r) in x.iter_mut().zip(rngs.iter_mut()) {
            for j in 0..p.dim {
                let u = -sol.gain[k] * xi[j] - sol.shift[j][k];
                let z: f64 = StandardNormal.sample(r);
                xi[j] += (p.b1 * xi[j] + p.c * mean[j] + p.b2 * u) * dt + sq * z;
            }
        }
    }
    for (j, xi) in others.iter().enumerate() {
        let pc = player_costs(p, sol, n, j, xi);
        gap += pc.gap;
        cost += pc.cost;
    }
    (gap, cost)
}

/// Deviation gap of player 1 under the mean-field feedback profile, averaged
/// over `reps` independent simulations of the `n`-player game.
pub fn nash_gap(p: &LqGameParams, sol: &DiscreteMfgSolution, n: usize, reps: usize, seed: RngSeed) -> Result<NashGap> {
    nash_gap_for_player(p, sol, n, reps, seed, 0)
}

/// As [`nash_gap`], with an arbitrary deviating player (0-based).
pub fn nash_gap_for_player(
    p: &LqGameParams,
    sol: &DiscreteMfgSolution,
    n: usize,
    reps: usize,
    seed: RngSeed,
    player: usize,
) -> Result<NashGap> {
    p.validate()?;
    if n < 2 {
        return param("the game needs at least two players");
    }
    if player >= n || reps == 0 {
        return param("player index out of range or no replications");
    }
    if sol.mean.len() != p.dim {
        return param("solution does not match the game dimension");
    }
    let out: Vec<(f64, f64)> =
        (0..reps).into_par_iter().map(|r| replicate(p, sol, n, seed.child(r as u64), player)).collect();
    let gaps: Vec<f64> = out.iter().map(|v| v.0).collect();
    let costs: Vec<f64> = out.iter().map(|v| v.1).collect();
    Ok(NashGap { n, gap: McEstimate::from_values(&gaps), cost: McEstimate::from_values(&costs), mean_field_cost: sol.cost })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::particle_sde::simulate_reference;
    use approx::assert_abs_diff_eq;

    fn riccati_closed_form(p: &LqGameParams, t: f64) -> f64 {
        let al = p.b2 * p.b2 / p.r;
        let disc = (p.b1 * p.b1 + al * p.q).sqrt();
        let (pp, pm) = ((p.b1 + disc) / al, (p.b1 - disc) / al);
        let tau = p.horizon - t;
        let u = (p.q_terminal - pp) / (p.q_terminal - pm) * (-al * (pp - pm) * tau).exp();
        (pp - u * pm) / (1.0 - u)
    }

    #[test]
    fn riccati_matches_closed_form() {
        let p = LqGameParams { b1: 0.3, q: 2.0, q_terminal: 0.5, ..LqGameParams::decoupled() };
        let sol = solve_mfg_lq(&p, 200).unwrap();
        for (t, pv) in sol.times.iter().zip(&sol.riccati) {
            assert_abs_diff_eq!(*pv, riccati_closed_form(&p, *t), epsilon = 1e-6);
        }
        assert!(sol.riccati.iter().all(|v| *v >= 0.0));
    }

    #[test]
    fn uncontrolled_game() {
        let p = LqGameParams { q: 0.0, q_terminal: 0.0, ..LqGameParams::coupled() };
        let sol = solve_mfg_lq(&p, 100).unwrap();
        assert!(sol.riccati.iter().all(|v| *v == 0.0));
        assert!(sol.offset.iter().all(|v| v[0] == 0.0));
        assert_eq!(sol.feedback(10, &[3.0]), vec![0.0]);
    }

    #[test]
    fn picard_solution_is_consistent() {
        let p = LqGameParams::coupled();
        let sol = solve_mfg_lq(&p, 400).unwrap();
        assert!(sol.residual < 1e-8);
        assert_eq!(sol.riccati[400], p.q_terminal);
        assert_abs_diff_eq!(sol.offset[400][0], -p.q_terminal * p.s_terminal * sol.mean[400][0], epsilon = 1e-7);
        // mean satisfies its ODE by central differences
        let al = p.b2 * p.b2 / p.r;
        let h = p.horizon / 400.0;
        for k in 1..400 {
            let deriv = (sol.mean[k + 1][0] - sol.mean[k - 1][0]) / (2.0 * h);
            let rhs = (p.b1 + p.c - al * sol.riccati[k]) * sol.mean[k][0] - al * sol.offset[k][0];
            assert!((deriv - rhs).abs() < 1e-4, "k {k}: {deriv} vs {rhs}");
        }
    }

    #[test]
    fn discrete_solution_tracks_continuous() {
        let p = LqGameParams::coupled();
        let cont = solve_mfg_lq(&p, 1000).unwrap();
        let disc = solve_mfg_lq_discrete(&p, 1000).unwrap();
        for k in (0..=1000).step_by(50) {
            assert!((cont.mean[k][0] - disc.mean[0][k]).abs() < 5e-3, "k {k}");
        }
        // feedback coefficients agree to first order in dt
        for k in (0..1000).step_by(50) {
            let cont_gain = p.b2 / p.r * cont.riccati[k];
            assert!((disc.gain[k] - cont_gain).abs() < 1e-2, "k {k}: {} vs {cont_gain}", disc.gain[k]);
            let cont_shift = p.b2 / p.r * cont.offset[k][0];
            assert!((disc.shift[0][k] - cont_shift).abs() < 1e-2, "k {k}");
        }
    }

    #[test]
    fn completion_of_squares_matches_direct_cost() {
        // direct moment recursion for an arbitrary affine policy against the identity
        let p = LqGameParams::coupled();
        let sol = solve_mfg_lq_discrete(&p, 50).unwrap();
        let xi: Vec<f64> = (0..=50).map(|k| 0.4 + 0.01 * k as f64).collect();
        let n = 8;
        let pc = player_costs(&p, &sol, n, 0, &xi);
        let nf = n as f64;
        let dt = sol.dt;
        let a = 1.0 + (p.b1 + p.c / nf) * dt;
        let g = 1.0 - p.s / nf;
        let gt = 1.0 - p.s_terminal / nf;
        let (mut m1, mut m2) = (p.init_mean[0], p.init_var[0] + p.init_mean[0].powi(2));
        let mut cost = 0.0;
        for k in 0..50 {
            let (kk, jj) = (sol.gain[k], sol.shift[0][k]);
            let e_gx = g * g * m2 - 2.0 * g * p.s * xi[k] * m1 + p.s * p.s * xi[k] * xi[k];
            let e_u2 = kk * kk * m2 + 2.0 * kk * jj * m1 + jj * jj;
            cost += 0.5 * (p.q * e_gx + p.r * e_u2) * dt;
            let lin = a - p.b2 * dt * kk;
            let off = p.c * xi[k] * dt - p.b2 * dt * jj;
            let m2n = lin * lin * m2 + 2.0 * lin * off * m1 + off * off + p.sigma * p.sigma * dt;
            m1 = lin * m1 + off;
            m2 = m2n;
        }
        cost += 0.5 * p.q_terminal * (gt * gt * m2 - 2.0 * gt * p.s_terminal * xi[50] * m1 + (p.s_terminal * xi[50]).powi(2));
        assert_abs_diff_eq!(pc.cost, cost, epsilon = 1e-12);
        assert!(pc.gap > 0.0);
    }

    #[test]
    fn decoupled_gap_vanishes() {
        let p = LqGameParams::decoupled();
        let sol = solve_mfg_lq_discrete(&p, 100).unwrap();
        let g = nash_gap(&p, &sol, 16, 8, RngSeed::new(1)).unwrap();
        assert!(g.gap.mean.abs() < 1e-12, "{:?}", g.gap);
    }

    #[test]
    fn players_are_symmetric() {
        let p = LqGameParams::coupled();
        let sol = solve_mfg_lq_discrete(&p, 100).unwrap();
        let a = nash_gap_for_player(&p, &sol, 16, 64, RngSeed::new(4), 0).unwrap();
        let b = nash_gap_for_player(&p, &sol, 16, 64, RngSeed::new(4), 15).unwrap();
        let pooled = (a.cost.std_err.powi(2) + b.cost.std_err.powi(2)).sqrt();
        assert!((a.cost.mean - b.cost.mean).abs() < 3.0 * pooled, "{:?} {:?}", a.cost, b.cost);
    }

    #[test]
    fn rejects_single_player() {
        let p = LqGameParams::coupled();
        let sol = solve_mfg_lq_discrete(&p, 10).unwrap();
        assert!(nash_gap(&p, &sol, 1, 4, RngSeed::new(0)).is_err());
        assert!(solve_mfg_lq(&p, 50).is_err());
        assert!(LqGameParams { r: 0.0, ..p }.validate().is_err());
    }

    #[test]
    fn equilibrium_mean_is_self_consistent_under_simulation() {
        let p = LqGameParams::coupled();
        let steps = 200;
        let sol = solve_mfg_lq(&p, steps).unwrap();
        let model = feedback_model(&p, &sol).unwrap();
        let flow = equilibrium_flow(&p, &sol);
        let n = 10_000;
        let ens = simulate_reference(&model, &flow, n, steps, RngSeed::new(21)).unwrap();
        let mut worst: f64 = 0.0;
        for k in 0..=steps {
            let (m, v) = ens.moments(k);
            let se = (v[0] / n as f64).sqrt();
            worst = worst.max((m[0] - sol.mean[k][0]).abs() / se);
        }
        assert!(worst < 3.0, "max standardized deviation {worst}");
    }
}
