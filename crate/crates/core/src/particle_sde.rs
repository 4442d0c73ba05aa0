//! Interacting particle systems of McKean-Vlasov type,
//! `dX = B(t, X, m_t) dt + sigma dW` where `m_t` collects the means of a few
//! test functionals under the current law, simulated by Euler-Maruyama.

use std::collections::VecDeque;
use std::io::{Read, Write};

use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, param, Error, Result};
use crate::gmmd::{barron_gmmd_auto, barron_gmmd_vs_gaussian, flow_gmmd_lower, mmd_rkhs, mmd_vs_gaussian, FlowShape, OptimizerConfig};
use crate::measures::{DiagGaussian, DistributionSpec, EmpiricalMeasure, RngSeed};
use crate::special::{norm2, relu_gaussian, sq_dist};
use crate::test_classes::{ClassKind, KernelSpec, NeuronParams, TestClassSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Functional {
    Neuron(NeuronParams),
    KernelSection { kernel: KernelSpec, center: Vec<f64> },
}

impl Functional {
    pub fn eval(&self, x: &[f64]) -> f64 {
        match self {
            Functional::Neuron(p) => p.eval(x),
            Functional::KernelSection { kernel, center } => kernel.eval_raw(center, x),
        }
    }
}

/// `B(x, m) = offset + self_coef * x + G m`, with `G` stored row-major (`d x K`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffineDrift {
    pub offset: Vec<f64>,
    pub self_coef: f64,
    pub mean_coef: Vec<f64>,
}

/// Extra per-step drift `self_coef[k] * x + offset[k]`, e.g. a feedback control.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepSchedule {
    pub self_coef: Vec<f64>,
    pub offset: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanFieldModel {
    pub dim: usize,
    pub functionals: Vec<Functional>,
    pub drift: AffineDrift,
    pub schedule: Option<StepSchedule>,
    /// Scalar diffusion coefficient (times the identity).
    pub sigma: f64,
    /// Declared Lipschitz constant of `B` in `(x, law)` with respect to `|x| + D`.
    pub lipschitz: f64,
    pub horizon: f64,
    pub init: DistributionSpec,
    /// Class used for the law-distance in the Lipschitz condition.
    pub class: TestClassSpec,
}

impl MeanFieldModel {
    pub fn validate(&self) -> Result<()> {
        let d = self.dim;
        let k = self.functionals.len();
        if d == 0 {
            return param("dimension must be positive");
        }
        check_dim(d, self.drift.offset.len())?;
        check_dim(d * k, self.drift.mean_coef.len())?;
        check_dim(d, self.init.dim())?;
        self.init.validate()?;
        if !(self.horizon > 0.0) || !(self.sigma >= 0.0) || !(self.lipschitz >= 0.0) {
            return param("need horizon > 0, sigma >= 0 and a non-negative Lipschitz constant");
        }
        for f in &self.functionals {
            match f {
                Functional::Neuron(p) => check_dim(d, p.dim())?,
                Functional::KernelSection { kernel, center } => {
                    check_dim(d, kernel.dim)?;
                    check_dim(d, center.len())?;
                }
            }
        }
        Ok(())
    }

    fn drift_into(&self, step: usize, x: &[f64], m: &[f64], out: &mut [f64]) {
        let d = self.dim;
        let k = self.functionals.len();
        let (sc, off) = match &self.schedule {
            Some(s) => (s.self_coef[step], Some(&s.offset[step])),
            None => (0.0, None),
        };
        for i in 0..d {
            let mut v = self.drift.offset[i] + (self.drift.self_coef + sc) * x[i];
            for j in 0..k {
                v += self.drift.mean_coef[i * k + j] * m[j];
            }
            if let Some(o) = off {
                v += o[i];
            }
            out[i] = v;
        }
    }

    /// Drift evaluated against a whole measure.
    pub fn drift_at(&self, step: usize, x: &[f64], mu: &EmpiricalMeasure) -> Vec<f64> {
        let m: Vec<f64> = self.functionals.iter().map(|f| mu.iter().map(|(p, w)| w * f.eval(p)).sum()).collect();
        let mut out = vec![0.0; self.dim];
        self.drift_into(step, x, &m, &mut out);
        out
    }

    fn functional_means(&self, states: &[f64], n: usize) -> Vec<f64> {
        let d = self.dim;
        self.functionals
            .iter()
            .map(|f| states.chunks_exact(d).map(|x| f.eval(x)).sum::<f64>() / n as f64)
            .collect()
    }
}

/// `dX = (a E[X] + b X) dt + sigma dW`, `X_0 = x0`. The mean is written as
/// `E relu(X) - E relu(-X)` so the interaction runs through two unit neurons.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LinearMv {
    pub a: f64,
    pub b: f64,
    pub sigma: f64,
    pub x0: f64,
    pub horizon: f64,
}

impl Default for LinearMv {
    fn default() -> Self {
        LinearMv { a: 0.5, b: -1.0, sigma: 1.0, x0: 1.0, horizon: 1.0 }
    }
}

impl LinearMv {
    pub fn model(&self) -> MeanFieldModel {
        MeanFieldModel {
            dim: 1,
            functionals: vec![
                Functional::Neuron(NeuronParams { omega: vec![1.0], b: 0.0 }),
                Functional::Neuron(NeuronParams { omega: vec![-1.0], b: 0.0 }),
            ],
            drift: AffineDrift { offset: vec![0.0], self_coef: self.b, mean_coef: vec![self.a, -self.a] },
            schedule: None,
            sigma: self.sigma,
            lipschitz: (self.b * self.b + 4.0 * self.a * self.a).sqrt(),
            horizon: self.horizon,
            init: DistributionSpec::Dirac { point: vec![self.x0] },
            class: TestClassSpec::barron(),
        }
    }

    /// Law of the limiting process at time `t`.
    pub fn law(&self, t: f64) -> DiagGaussian {
        let mean = self.x0 * ((self.a + self.b) * t).exp();
        let var = if self.b == 0.0 {
            self.sigma * self.sigma * t
        } else {
            self.sigma * self.sigma * ((2.0 * self.b * t).exp() - 1.0) / (2.0 * self.b)
        };
        DiagGaussian { mean: vec![mean], var: vec![var] }
    }

    /// Law of the Euler scheme's mean-field limit after each of `steps` steps.
    pub fn euler_laws(&self, steps: usize) -> Vec<DiagGaussian> {
        let dt = self.horizon / steps as f64;
        let (mut m, mut v) = (self.x0, 0.0);
        let mut out = Vec::with_capacity(steps + 1);
        out.push(DiagGaussian { mean: vec![m], var: vec![v] });
        for _ in 0..steps {
            m *= 1.0 + (self.a + self.b) * dt;
            v = (1.0 + self.b * dt).powi(2) * v + self.sigma * self.sigma * dt;
            out.push(DiagGaussian { mean: vec![m], var: vec![v] });
        }
        out
    }
}

/// Functional means `m_k` at every grid time.
#[derive(Debug, Clone, PartialEq)]
pub struct MeanFlow {
    pub values: Vec<Vec<f64>>,
}

impl MeanFlow {
    /// Flow of the linear model computed from Gaussian marginals.
    pub fn from_laws(laws: &[DiagGaussian]) -> Self {
        MeanFlow {
            values: laws
                .iter()
                .map(|g| {
                    let s = g.var[0].sqrt();
                    vec![relu_gaussian(g.mean[0], s).0, relu_gaussian(-g.mean[0], s).0]
                })
                .collect(),
        }
    }

    /// Flow estimated from a (pilot) particle ensemble.
    pub fn from_ensemble(model: &MeanFieldModel, ens: &PathEnsemble) -> Self {
        MeanFlow { values: (0..=ens.steps).map(|k| model.functional_means(ens.slice_values(k), ens.n)).collect() }
    }
}

/// Particle trajectories on a uniform time grid, stored time-major:
/// `values[(k * n + i) * d + j]` is coordinate `j` of particle `i` at step `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct PathEnsemble {
    pub n: usize,
    pub steps: usize,
    pub dim: usize,
    pub horizon: f64,
    pub seed: RngSeed,
    pub values: Vec<f64>,
}

impl PathEnsemble {
    pub fn dt(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    fn slice_values(&self, k: usize) -> &[f64] {
        let w = self.n * self.dim;
        &self.values[k * w..(k + 1) * w]
    }

    pub fn slice(&self, k: usize) -> Result<EmpiricalMeasure> {
        if k > self.steps {
            return param("time index out of range");
        }
        EmpiricalMeasure::uniform(self.dim, self.slice_values(k).to_vec())
    }

    pub fn path(&self, i: usize) -> Vec<f64> {
        let d = self.dim;
        let mut out = Vec::with_capacity((self.steps + 1) * d);
        for k in 0..=self.steps {
            let base = (k * self.n + i) * d;
            out.extend_from_slice(&self.values[base..base + d]);
        }
        out
    }

    /// Per-coordinate sample mean and (unbiased) variance at step `k`.
    pub fn moments(&self, k: usize) -> (Vec<f64>, Vec<f64>) {
        let d = self.dim;
        let s = self.slice_values(k);
        let n = self.n as f64;
        let mut mean = vec![0.0; d];
        for x in s.chunks_exact(d) {
            for j in 0..d {
                mean[j] += x[j] / n;
            }
        }
        let mut var = vec![0.0; d];
        for x in s.chunks_exact(d) {
            for j in 0..d {
                var[j] += (x[j] - mean[j]).powi(2) / (n - 1.0).max(1.0);
            }
        }
        (mean, var)
    }

    /// Binary layout: little-endian `u64 n, u64 steps, u64 d, f64 T, u64 seed,
    /// u64 stream`, then all values as `f64` in time-major order.
    pub fn write_binary<W: Write>(&self, mut out: W) -> Result<()> {
        for v in [self.n as u64, self.steps as u64, self.dim as u64] {
            out.write_all(&v.to_le_bytes())?;
        }
        out.write_all(&self.horizon.to_le_bytes())?;
        out.write_all(&self.seed.seed.to_le_bytes())?;
        out.write_all(&self.seed.stream.to_le_bytes())?;
        let mut buf = Vec::with_capacity(self.values.len() * 8);
        for v in &self.values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        out.write_all(&buf)?;
        Ok(())
    }

    pub fn read_binary<R: Read>(mut input: R) -> Result<Self> {
        let mut word = [0u8; 8];
        let mut next = |input: &mut R| -> Result<[u8; 8]> {
            input.read_exact(&mut word)?;
            Ok(word)
        };
        let n = u64::from_le_bytes(next(&mut input)?) as usize;
        let steps = u64::from_le_bytes(next(&mut input)?) as usize;
        let dim = u64::from_le_bytes(next(&mut input)?) as usize;
        let horizon = f64::from_le_bytes(next(&mut input)?);
        let seed = u64::from_le_bytes(next(&mut input)?);
        let stream = u64::from_le_bytes(next(&mut input)?);
        let count = n
            .checked_mul(steps + 1)
            .and_then(|v| v.checked_mul(dim))
            .ok_or_else(|| Error::Format("ensemble header overflows".into()))?;
        let mut raw = Vec::new();
        input.read_to_end(&mut raw)?;
        if raw.len() != count * 8 {
            return Err(Error::Format(format!("expected {} value bytes, found {}", count * 8, raw.len())));
        }
        let values = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        Ok(PathEnsemble { n, steps, dim, horizon, seed: RngSeed { seed, stream }, values })
    }

    /// CSV of per-step moments: `t,mean1..meand,var1..vard`.
    pub fn write_moments_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(out);
        let mut header = vec!["t".to_string()];
        header.extend((1..=self.dim).map(|j| format!("mean{j}")));
        header.extend((1..=self.dim).map(|j| format!("var{j}")));
        wtr.write_record(&header)?;
        for k in 0..=self.steps {
            let (m, v) = self.moments(k);
            let mut rec = vec![(k as f64 * self.dt()).to_string()];
            rec.extend(m.iter().chain(&v).map(|x| x.to_string()));
            wtr.write_record(&rec)?;
        }
        wtr.flush()?;
        Ok(())
    }
}

const BLOW_UP: f64 = 1e8;

fn run(
    model: &MeanFieldModel,
    n: usize,
    steps: usize,
    seed: RngSeed,
    flow: Option<&MeanFlow>,
) -> Result<PathEnsemble> {
    model.validate()?;
    if n == 0 || steps == 0 {
        return param("need at least one particle and one step");
    }
    if let Some(s) = &model.schedule {
        if s.self_coef.len() < steps || s.offset.len() < steps {
            return param("drift schedule is shorter than the number of steps");
        }
    }
    if let Some(f) = flow {
        if f.values.len() < steps {
            return param("mean flow is shorter than the number of steps");
        }
    }
    let d = model.dim;
    let dt = model.horizon / steps as f64;
    let sq = model.sigma * dt.sqrt();
    let mut rngs: Vec<ChaCha12Rng> = (0..n).map(|i| seed.child(i as u64).rng()).collect();
    let mut values = Vec::with_capacity(n * d * (steps + 1));
    for r in rngs.iter_mut() {
        values.extend(model.init.draw_one(r));
    }
    let w = n * d;
    for k in 0..steps {
        let (done, _) = values.split_at(k * w + w);
        let cur = &done[k * w..];
        let m = match flow {
            Some(f) => f.values[k].clone(),
            None => model.functional_means(cur, n),
        };
        let mut next = vec![0.0; w];
        next.par_chunks_mut(d).zip(rngs.par_iter_mut()).zip(cur.par_chunks(d)).for_each(|((out, rng), x)| {
            model.drift_into(k, x, &m, out);
            for j in 0..d {
                let z: f64 = StandardNormal.sample(rng);
                out[j] = x[j] + out[j] * dt + sq * z;
            }
        });
        if next.iter().any(|v| !v.is_finite() || v.abs() > BLOW_UP) {
            return Err(Error::BlowUp { step: k + 1 });
        }
        values.extend_from_slice(&next);
    }
    Ok(PathEnsemble { n, steps, dim: d, horizon: model.horizon, seed, values })
}

/// Interacting system: each particle feels the empirical functional means.
/// Particle `i` draws its initial state and all its increments from stream
/// `seed.child(i)`, so the ensemble is exchangeable and reproducible.
pub fn simulate_particles(model: &MeanFieldModel, n: usize, steps: usize, seed: RngSeed) -> Result<PathEnsemble> {
    run(model, n, steps, seed, None)
}

/// Independent copies driven by a prescribed mean flow.
pub fn simulate_reference(model: &MeanFieldModel, flow: &MeanFlow, n: usize, steps: usize, seed: RngSeed) -> Result<PathEnsemble> {
    run(model, n, steps, seed, Some(flow))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SupOverTime {
    pub value: f64,
    pub argmax_step: usize,
    pub per_step: Vec<(usize, f64)>,
}

fn sup_over(steps: usize, stride: usize, mut f: impl FnMut(usize) -> Result<f64>) -> Result<SupOverTime> {
    let stride = stride.max(1);
    let mut per_step = Vec::new();
    let mut best = (0, f64::NEG_INFINITY);
    let mut k = 0;
    loop {
        let v = f(k)?;
        per_step.push((k, v));
        if v > best.1 {
            best = (k, v);
        }
        if k == steps {
            break;
        }
        k = (k + stride).min(steps);
    }
    Ok(SupOverTime { value: best.1, argmax_step: best.0, per_step })
}

/// `max_k D(A_k, B_k)` over grid times `0, stride, 2 stride, ..., steps`.
pub fn gmmd_sup_over_time(
    a: &PathEnsemble,
    b: &PathEnsemble,
    class: &TestClassSpec,
    cfg: &OptimizerConfig,
    stride: usize,
) -> Result<SupOverTime> {
    if a.steps != b.steps || (a.horizon - b.horizon).abs() > 1e-12 {
        return param("ensembles must share the time grid");
    }
    check_dim(a.dim, b.dim)?;
    sup_over(a.steps, stride, |k| {
        let (x, y) = (a.slice(k)?, b.slice(k)?);
        Ok(match &class.kind {
            ClassKind::Rkhs { kernel } => mmd_rkhs(kernel, &x, &y)?.value,
            ClassKind::Barron => barron_gmmd_auto(&x, &y, cfg)?.value,
            ClassKind::Flow { embed_dim, layers } => flow_gmmd_lower(&x, &y, &FlowShape::new(*embed_dim, *layers), cfg)?.value,
        })
    })
}

/// `max_k D(laws[k], A_k)` against Gaussian marginals.
pub fn gmmd_sup_vs_laws(
    a: &PathEnsemble,
    laws: &[DiagGaussian],
    class: &TestClassSpec,
    cfg: &OptimizerConfig,
    stride: usize,
) -> Result<SupOverTime> {
    if laws.len() != a.steps + 1 {
        return param("need one law per grid time");
    }
    sup_over(a.steps, stride, |k| {
        let x = a.slice(k)?;
        let g = &laws[k];
        if g.var.iter().all(|v| *v == 0.0) {
            let dirac = EmpiricalMeasure::uniform(g.dim(), g.mean.clone())?;
            return Ok(match &class.kind {
                ClassKind::Rkhs { kernel } => mmd_rkhs(kernel, &dirac, &x)?.value,
                _ => barron_gmmd_auto(&dirac, &x, cfg)?.value,
            });
        }
        Ok(match &class.kind {
            ClassKind::Rkhs { kernel } => mmd_vs_gaussian(kernel, g, &x)?.value,
            ClassKind::Barron => barron_gmmd_vs_gaussian(g, &x, cfg)?.value,
            ClassKind::Flow { .. } => return Err(Error::Unsupported("flow class against Gaussian laws".into())),
        })
    })
}

/// `max { |x(t) - x(s)| : |t - s| <= h }` over grid times of one path
/// (`(steps + 1) * dim` values). Exact; one dimension uses monotone deques.
pub fn modulus(path: &[f64], dim: usize, dt: f64, h: f64) -> Result<f64> {
    if dim == 0 || !path.len().is_multiple_of(dim) || path.len() < dim {
        return param("path length must be a positive multiple of the dimension");
    }
    if !(h >= dt) || !(dt > 0.0) {
        return param("window must span at least one step");
    }
    let w = (h / dt + 1e-9).floor() as usize;
    let len = path.len() / dim;
    if dim == 1 {
        return Ok(modulus_1d(path, w));
    }
    let mut best: f64 = 0.0;
    for t in 0..len {
        let xt = &path[t * dim..(t + 1) * dim];
        for s in (t + 1)..len.min(t + w + 1) {
            best = best.max(sq_dist(xt, &path[s * dim..(s + 1) * dim]));
        }
    }
    Ok(best.sqrt())
}

fn modulus_1d(x: &[f64], w: usize) -> f64 {
    let mut maxq: VecDeque<usize> = VecDeque::new();
    let mut minq: VecDeque<usize> = VecDeque::new();
    let mut best: f64 = 0.0;
    for (i, &v) in x.iter().enumerate() {
        while maxq.back().is_some_and(|&j| x[j] <= v) {
            maxq.pop_back();
        }
        maxq.push_back(i);
        while minq.back().is_some_and(|&j| x[j] >= v) {
            minq.pop_back();
        }
        minq.push_back(i);
        while maxq.front().is_some_and(|&j| j + w < i) {
            maxq.pop_front();
        }
        while minq.front().is_some_and(|&j| j + w < i) {
            minq.pop_front();
        }
        best = best.max(x[maxq[0]] - x[minq[0]]);
    }
    best
}

/// Largest observed ratio `|B(x, mu) - B(y, nu)| / sqrt(|x - y|^2 + D(mu, nu)^2)`
/// over random pairs. Errors if it exceeds the declared constant.
pub fn validate_lipschitz(model: &MeanFieldModel, trials: usize, seed: RngSeed) -> Result<f64> {
    model.validate()?;
    let d = model.dim;
    let cfg = OptimizerConfig { restarts: 8, steps: 60, ..Default::default() };
    let mut worst: f64 = 0.0;
    for t in 0..trials {
        let s = seed.child(t as u64);
        let spread = 0.5 + (t % 4) as f64;
        let shift = (t % 3) as f64 - 1.0;
        let g = |m: f64| DistributionSpec::Gaussian(DiagGaussian { mean: vec![m; d], var: vec![spread * spread; d] });
        let mu = crate::measures::sample(&g(0.0), 16, s.child(0))?;
        let nu = crate::measures::sample(&g(shift), 16, s.child(1))?;
        let pts = crate::measures::sample(&g(0.0), 2, s.child(2))?;
        let (x, y) = (pts.point(0), pts.point(1));
        let dist = match &model.class.kind {
            ClassKind::Rkhs { kernel } => mmd_rkhs(kernel, &mu, &nu)?.value,
            _ => barron_gmmd_auto(&mu, &nu, &cfg.with_seed(s.child(3)))?.value,
        };
        let bx = model.drift_at(0, x, &mu);
        let by = model.drift_at(0, y, &nu);
        let diff: Vec<f64> = bx.iter().zip(&by).map(|(a, b)| a - b).collect();
        let denom = (sq_dist(x, y) + dist * dist).sqrt();
        if denom > 0.0 {
            worst = worst.max(norm2(&diff) / denom);
        }
    }
    if worst > model.lipschitz * (1.0 + 1e-9) {
        return param(format!("observed drift Lipschitz ratio {worst} exceeds declared {}", model.lipschitz));
    }
    Ok(worst)
}

/// Brownian motion `sigma W` started at the origin, as a model without interaction.
pub fn brownian(dim: usize, sigma: f64, horizon: f64) -> MeanFieldModel {
    MeanFieldModel {
        dim,
        functionals: vec![],
        drift: AffineDrift { offset: vec![0.0; dim], self_coef: 0.0, mean_coef: vec![] },
        schedule: None,
        sigma,
        lipschitz: 0.0,
        horizon,
        init: DistributionSpec::Dirac { point: vec![0.0; dim] },
        class: TestClassSpec::barron(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn linear_model_terminal_moments() {
        let p = LinearMv::default();
        let ens = simulate_particles(&p.model(), 4000, 200, RngSeed::new(5)).unwrap();
        let (m, v) = ens.moments(200);
        let law = p.law(1.0);
        let se_m = (law.var[0] / 4000.0).sqrt();
        let se_v = law.var[0] * (2.0 / 3999.0f64).sqrt();
        // Euler bias at 200 steps is well below these bands
        assert!((m[0] - law.mean[0]).abs() < 4.0 * se_m + 3e-3, "{} vs {}", m[0], law.mean[0]);
        assert!((v[0] - law.var[0]).abs() < 4.0 * se_v + 3e-3, "{} vs {}", v[0], law.var[0]);
    }

    #[test]
    fn euler_laws_converge_to_continuous() {
        let p = LinearMv::default();
        let fine = p.euler_laws(4000);
        let law = p.law(1.0);
        assert_abs_diff_eq!(fine[4000].mean[0], law.mean[0], epsilon = 1e-4);
        assert_abs_diff_eq!(fine[4000].var[0], law.var[0], epsilon = 1e-4);
        assert_abs_diff_eq!(law.mean[0], (-0.5f64).exp(), epsilon = 1e-15);
        assert_abs_diff_eq!(law.var[0], (1.0 - (-2f64).exp()) / 2.0, epsilon = 1e-15);
    }

    #[test]
    fn pilot_flow_matches_closed_form_flow() {
        let p = LinearMv::default();
        let model = p.model();
        let steps = 50;
        let pilot = simulate_particles(&model, 4000, steps, RngSeed::new(11)).unwrap();
        let est = MeanFlow::from_ensemble(&model, &pilot);
        let exact = MeanFlow::from_laws(&p.euler_laws(steps));
        for k in 0..=steps {
            let (_, var) = pilot.moments(k);
            let se = (var[0] / 4000.0).sqrt().max(1e-12);
            let diff = (est.values[k][0] - est.values[k][1]) - (exact.values[k][0] - exact.values[k][1]);
            assert!(diff.abs() < 4.0 * se, "step {k}: {diff} vs se {se}");
        }
    }

    #[test]
    fn reference_ensemble_is_independent_of_n_per_particle() {
        let p = LinearMv::default();
        let model = p.model();
        let flow = MeanFlow::from_laws(&p.euler_laws(20));
        let a = simulate_reference(&model, &flow, 10, 20, RngSeed::new(1)).unwrap();
        let b = simulate_reference(&model, &flow, 30, 20, RngSeed::new(1)).unwrap();
        for i in 0..10 {
            assert_eq!(a.path(i), b.path(i));
        }
    }

    #[test]
    fn same_seed_same_ensemble() {
        let model = LinearMv::default().model();
        let a = simulate_particles(&model, 64, 30, RngSeed::new(2)).unwrap();
        let b = simulate_particles(&model, 64, 30, RngSeed::new(2)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn binary_round_trip() {
        let ens = simulate_particles(&brownian(2, 1.0, 1.0), 7, 9, RngSeed::with_stream(3, 4)).unwrap();
        let mut buf = Vec::new();
        ens.write_binary(&mut buf).unwrap();
        assert_eq!(buf.len(), 48 + 7 * 10 * 2 * 8);
        assert_eq!(PathEnsemble::read_binary(buf.as_slice()).unwrap(), ens);
        assert!(PathEnsemble::read_binary(&buf[..buf.len() - 1]).is_err());
        let mut csv = Vec::new();
        ens.write_moments_csv(&mut csv).unwrap();
        assert!(String::from_utf8(csv).unwrap().starts_with("t,mean1,mean2,var1,var2\n"));
    }

    #[test]
    fn blow_up_is_reported() {
        let mut model = brownian(1, 0.0, 1.0);
        model.init = DistributionSpec::Dirac { point: vec![1.0] };
        model.drift.self_coef = 1e4;
        assert!(matches!(simulate_particles(&model, 3, 10, RngSeed::new(0)), Err(Error::BlowUp { .. })));
    }

    #[test]
    fn declared_lipschitz_constant_holds() {
        let r = validate_lipschitz(&LinearMv::default().model(), 40, RngSeed::new(8)).unwrap();
        assert!(r > 0.0);
        let mut bad = LinearMv::default().model();
        bad.lipschitz = 0.1;
        assert!(validate_lipschitz(&bad, 40, RngSeed::new(8)).is_err());
    }

    #[test]
    fn modulus_of_a_line() {
        let path: Vec<f64> = (0..=10).map(|k| 0.5 * k as f64).collect();
        assert_abs_diff_eq!(modulus(&path, 1, 0.1, 0.3).unwrap(), 1.5);
        assert!(modulus(&path, 1, 0.1, 0.05).is_err());
    }

    #[test]
    fn sup_over_time_against_own_laws_is_small() {
        let p = LinearMv::default();
        let steps = 20;
        let ens = simulate_particles(&p.model(), 2000, steps, RngSeed::new(3)).unwrap();
        let s = gmmd_sup_vs_laws(&ens, &p.euler_laws(steps), &TestClassSpec::barron(), &Default::default(), 5).unwrap();
        assert_eq!(s.per_step.len(), 5);
        assert!(s.value < 0.1, "{}", s.value);
    }

    fn brute_1d(x: &[f64], w: usize) -> f64 {
        let mut b: f64 = 0.0;
        for t in 0..x.len() {
            for s in t..x.len().min(t + w + 1) {
                b = b.max((x[t] - x[s]).abs());
            }
        }
        b
    }

    proptest! {
        #[test]
        fn deque_modulus_matches_brute_force(x in proptest::collection::vec(-3f64..3.0, 1..80), w in 1usize..12) {
            let dt = 0.01;
            let h = w as f64 * dt;
            let fast = modulus(&x, 1, dt, h).unwrap();
            prop_assert_eq!(fast, brute_1d(&x, w));
            // the general-dimension code path agrees on the same data
            let mut two = Vec::new();
            for v in &x { two.push(*v); two.push(0.0); }
            prop_assert!((modulus(&two, 2, dt, h).unwrap() - fast).abs() < 1e-12);
        }

        #[test]
        fn modulus_is_monotone_in_window(x in proptest::collection::vec(-3f64..3.0, 2..60), w in 1usize..10) {
            let dt = 0.1;
            prop_assert!(modulus(&x, 1, dt, w as f64 * dt).unwrap() <= modulus(&x, 1, dt, (w + 1) as f64 * dt).unwrap());
        }
    }
}
