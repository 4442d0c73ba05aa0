//! The three test-function classes and their Lipschitz constants `(A1, A2, A3)`:
//! `|f(x) - f(y)| <= A1 |x - y|`, `|f(x)| <= A2 + A1 |x|` and
//! `|f(x)| <= A3 sqrt(|x|^2 + 1)` for every `f` in the class.

use std::f64::consts::{E, SQRT_2};

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, param, Error, Result};
use crate::special::{dot, norm2, relu, sq_dist};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LipschitzConstants {
    pub a1: f64,
    pub a2: f64,
    pub a3: f64,
}

impl LipschitzConstants {
    pub fn new(a1: f64, a2: f64, a3: f64) -> Result<Self> {
        if !(a1 >= 0.0 && a2 >= 0.0 && a3 >= 0.0) {
            return param("Lipschitz constants must be non-negative");
        }
        if a2 > a3 {
            return param("A2 must not exceed A3");
        }
        Ok(LipschitzConstants { a1, a2, a3 })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum KernelKind {
    Gaussian { lengthscale: f64 },
    InverseMultiquadric { c: f64, beta: f64 },
    LinearPlusOne,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    #[serde(flatten)]
    pub kind: KernelKind,
    pub dim: usize,
}

impl KernelSpec {
    pub fn gaussian(lengthscale: f64, dim: usize) -> Self {
        KernelSpec { kind: KernelKind::Gaussian { lengthscale }, dim }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return param("kernel dimension must be positive");
        }
        match self.kind {
            KernelKind::Gaussian { lengthscale } if !(lengthscale > 0.0 && lengthscale.is_finite()) => {
                param("lengthscale must be positive")
            }
            KernelKind::InverseMultiquadric { c, beta } if !(c > 0.0 && beta > 0.0) => {
                param("inverse multiquadric needs c > 0 and beta > 0")
            }
            _ => Ok(()),
        }
    }

    /// Kernel as a function of the squared distance and inner product.
    #[inline]
    pub(crate) fn eval_raw(&self, x: &[f64], y: &[f64]) -> f64 {
        match self.kind {
            KernelKind::Gaussian { lengthscale } => (-sq_dist(x, y) / (2.0 * lengthscale * lengthscale)).exp(),
            KernelKind::InverseMultiquadric { c, beta } => (c * c + sq_dist(x, y)).powf(-beta),
            KernelKind::LinearPlusOne => dot(x, y) + 1.0,
        }
    }
}

pub fn kernel_eval(k: &KernelSpec, x: &[f64], y: &[f64]) -> Result<f64> {
    k.validate()?;
    check_dim(k.dim, x.len())?;
    check_dim(k.dim, y.len())?;
    Ok(k.eval_raw(x, y))
}

/// Constants of the unit ball of the kernel's RKHS: `K1` bounds the feature-map
/// Lipschitz constant, `K2 = |phi(0)|`, `A3 = sqrt(2) max(K1, K2)`.
pub fn kernel_constants(k: &KernelSpec) -> Result<LipschitzConstants> {
    k.validate()?;
    let (k1, k2) = match k.kind {
        KernelKind::Gaussian { lengthscale } => (1.0 / lengthscale, 1.0),
        KernelKind::LinearPlusOne => (1.0, 1.0),
        KernelKind::InverseMultiquadric { c, beta } => {
            let k0 = c.powf(-2.0 * beta);
            let mut best: f64 = 0.0;
            let steps = 4000;
            for i in 0..=steps {
                let r = c * 10f64.powf(-6.0 + 10.0 * i as f64 / steps as f64);
                let ratio = 2.0 * (k0 - (c * c + r * r).powf(-beta)) / (r * r);
                best = best.max(ratio);
            }
            (best.sqrt() * 1.01, c.powf(-beta))
        }
    };
    LipschitzConstants::new(k1, k2, SQRT_2 * k1.max(k2))
}

/// Unit vector `(omega, b)` on the sphere in `R^(d+1)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeuronParams {
    pub omega: Vec<f64>,
    pub b: f64,
}

impl NeuronParams {
    pub fn new(omega: Vec<f64>, b: f64) -> Result<Self> {
        let n = (omega.iter().map(|v| v * v).sum::<f64>() + b * b).sqrt();
        if (n - 1.0).abs() > 1e-12 {
            return param(format!("neuron parameters have norm {n}, expected 1"));
        }
        Ok(NeuronParams { omega, b })
    }

    /// Projects arbitrary nonzero parameters onto the sphere.
    pub fn normalized(omega: Vec<f64>, b: f64) -> Result<Self> {
        let n = (omega.iter().map(|v| v * v).sum::<f64>() + b * b).sqrt();
        if !(n > 0.0) || !n.is_finite() {
            return param("cannot normalize zero neuron parameters");
        }
        Ok(NeuronParams { omega: omega.iter().map(|v| v / n).collect(), b: b / n })
    }

    pub(crate) fn from_theta(theta: &[f64]) -> Self {
        let d = theta.len() - 1;
        NeuronParams { omega: theta[..d].to_vec(), b: theta[d] }
    }

    pub fn theta(&self) -> Vec<f64> {
        let mut t = self.omega.clone();
        t.push(self.b);
        t
    }

    pub fn dim(&self) -> usize {
        self.omega.len()
    }

    #[inline]
    pub fn eval(&self, x: &[f64]) -> f64 {
        relu(dot(&self.omega, x) + self.b)
    }
}

pub fn neuron_eval(p: &NeuronParams, x: &[f64]) -> Result<f64> {
    check_dim(p.dim(), x.len())?;
    Ok(p.eval(x))
}

/// One neuron of a flow layer: `c * relu(omega . z)` with `omega` a unit vector in `R^D`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "(Vec<f64>, Vec<f64>)", into = "(Vec<f64>, Vec<f64>)")]
pub struct FlowNeuron {
    pub coeff: Vec<f64>,
    pub omega: Vec<f64>,
}

impl From<(Vec<f64>, Vec<f64>)> for FlowNeuron {
    fn from((coeff, omega): (Vec<f64>, Vec<f64>)) -> Self {
        FlowNeuron { coeff, omega }
    }
}

impl From<FlowNeuron> for (Vec<f64>, Vec<f64>) {
    fn from(n: FlowNeuron) -> Self {
        (n.coeff, n.omega)
    }
}

/// Explicit Euler discretization of a residual flow on `[0, 1]` in `R^D`.
///
/// The input `x` is lifted to `(x, 1, 0, ..., 0)`, pushed through `L` layers
/// `z <- z + (1/L) sum_i c_i relu(omega_i . z)`, and read out by `alpha . z`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowRep {
    pub embed_dim: usize,
    pub layers: Vec<Vec<FlowNeuron>>,
    pub alpha: Vec<f64>,
}

impl FlowRep {
    pub fn validate(&self, input_dim: usize) -> Result<()> {
        if self.embed_dim < input_dim + 2 {
            return param(format!("embedding dimension {} must be at least d + 2 = {}", self.embed_dim, input_dim + 2));
        }
        check_dim(self.embed_dim, self.alpha.len())?;
        for layer in &self.layers {
            for nrn in layer {
                check_dim(self.embed_dim, nrn.coeff.len())?;
                check_dim(self.embed_dim, nrn.omega.len())?;
                if (norm2(&nrn.omega) - 1.0).abs() > 1e-9 {
                    return param("flow neuron directions must be unit vectors");
                }
            }
        }
        Ok(())
    }

    pub fn step(&self) -> f64 {
        if self.layers.is_empty() {
            0.0
        } else {
            1.0 / self.layers.len() as f64
        }
    }

    pub(crate) fn lift(&self, x: &[f64]) -> Vec<f64> {
        let mut z = vec![0.0; self.embed_dim];
        z[..x.len()].copy_from_slice(x);
        z[x.len()] = 1.0;
        z
    }

    /// Terminal hidden state `z_L(x)`.
    pub fn features(&self, x: &[f64]) -> Vec<f64> {
        let mut z = self.lift(x);
        let dt = self.step();
        let mut inc = vec![0.0; self.embed_dim];
        for layer in &self.layers {
            inc.iter_mut().for_each(|v| *v = 0.0);
            for nrn in layer {
                let a = relu(dot(&nrn.omega, &z));
                if a > 0.0 {
                    for (v, c) in inc.iter_mut().zip(&nrn.coeff) {
                        *v += c * a;
                    }
                }
            }
            for (zk, v) in z.iter_mut().zip(&inc) {
                *zk += dt * v;
            }
        }
        z
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        dot(&self.alpha, &self.features(x))
    }

    /// Per-layer growth rate: Euclidean norm over coordinates of the
    /// per-coordinate total variation of the layer's coefficients.
    pub fn layer_rates(&self) -> Vec<f64> {
        self.layers
            .iter()
            .map(|layer| {
                let mut tv = vec![0.0; self.embed_dim];
                for nrn in layer {
                    for (t, c) in tv.iter_mut().zip(&nrn.coeff) {
                        *t += c.abs();
                    }
                }
                norm2(&tv)
            })
            .collect()
    }

    /// Embeds a finite neuron sum `sum_i a_i relu(omega_i . x + b_i)` exactly,
    /// spreading the same layer over all `layers` steps. The flow norm bound of
    /// the result is `e * sum_i |a_i|`.
    pub fn from_barron(terms: &[(f64, NeuronParams)], embed_dim: usize, layers: usize) -> Result<Self> {
        let d = terms.first().map(|t| t.1.dim()).ok_or_else(|| Error::Parameter("no neurons".into()))?;
        if embed_dim < d + 2 {
            return param("embedding dimension must be at least d + 2");
        }
        if layers == 0 {
            return param("barron embedding needs at least one layer");
        }
        let tv: f64 = terms.iter().map(|t| t.0.abs()).sum();
        if !(tv > 0.0) {
            return param("all neuron coefficients are zero");
        }
        let slot = d + 1;
        let mut layer = Vec::with_capacity(terms.len());
        for (a, p) in terms {
            check_dim(d, p.dim())?;
            let mut omega = vec![0.0; embed_dim];
            omega[..d].copy_from_slice(&p.omega);
            omega[d] = p.b;
            let mut coeff = vec![0.0; embed_dim];
            coeff[slot] = a / tv;
            layer.push(FlowNeuron { coeff, omega });
        }
        let mut alpha = vec![0.0; embed_dim];
        alpha[slot] = tv;
        Ok(FlowRep { embed_dim, layers: vec![layer; layers], alpha })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

pub fn flow_forward(rep: &FlowRep, x: &[f64]) -> Result<f64> {
    rep.validate(x.len())?;
    Ok(rep.eval(x))
}

/// Upper bound on the flow-induced norm: `|alpha| exp(sum_l Lambda_l / L)`.
pub fn flow_norm_bound(rep: &FlowRep) -> f64 {
    let dt = rep.step();
    norm2(&rep.alpha) * (dt * rep.layer_rates().iter().sum::<f64>()).exp()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ClassKind {
    Rkhs { kernel: KernelSpec },
    Barron,
    Flow { embed_dim: usize, layers: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestClassSpec {
    pub kind: ClassKind,
    pub constants: LipschitzConstants,
}

impl TestClassSpec {
    pub fn rkhs(kernel: KernelSpec) -> Result<Self> {
        Ok(TestClassSpec { constants: kernel_constants(&kernel)?, kind: ClassKind::Rkhs { kernel } })
    }

    pub fn barron() -> Self {
        TestClassSpec { kind: ClassKind::Barron, constants: LipschitzConstants { a1: 1.0, a2: 1.0, a3: 2.0 } }
    }

    pub fn flow(embed_dim: usize, layers: usize) -> Self {
        TestClassSpec {
            kind: ClassKind::Flow { embed_dim, layers },
            constants: LipschitzConstants { a1: 1.0, a2: 1.0, a3: E * E },
        }
    }

    pub fn from_kind(kind: ClassKind) -> Result<Self> {
        match kind {
            ClassKind::Rkhs { kernel } => Self::rkhs(kernel),
            ClassKind::Barron => Ok(Self::barron()),
            ClassKind::Flow { embed_dim, layers } => Ok(Self::flow(embed_dim, layers)),
        }
    }

    pub fn tag(&self) -> &'static str {
        match self.kind {
            ClassKind::Rkhs { .. } => "rkhs",
            ClassKind::Barron => "barron",
            ClassKind::Flow { .. } => "flow",
        }
    }
}
