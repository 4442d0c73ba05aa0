//! Lower bounds on suprema over the flow-induced unit ball.
//!
//! For fixed layers the best read-out is `alpha = e^{-S} Delta / |Delta|`,
//! where `Delta = sum_i c_i z_L(x_i)` and `S = sum_l Lambda_l / L`, so the
//! search only runs over the layers and maximizes `|Delta| e^{-S}`.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::neuron::random_unit;
use super::OptimizerConfig;
use crate::special::{dot, norm2, relu};
use crate::test_classes::{FlowNeuron, FlowRep};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlowShape {
    pub embed_dim: usize,
    pub layers: usize,
    /// Neurons per layer.
    pub width: usize,
}

impl FlowShape {
    pub fn new(embed_dim: usize, layers: usize) -> Self {
        FlowShape { embed_dim, layers, width: 4 }
    }
}

pub(crate) struct FlowProblem<'a> {
    pub dim: usize,
    pub points: &'a [f64],
    pub coeffs: &'a [f64],
}

struct Eval {
    value: f64,
    delta: Vec<f64>,
    penalty: f64,
}

impl FlowProblem<'_> {
    fn eval(&self, rep: &FlowRep) -> Eval {
        let mut delta = vec![0.0; rep.embed_dim];
        for (x, c) in self.points.chunks_exact(self.dim).zip(self.coeffs) {
            let z = rep.features(x);
            for (d, zk) in delta.iter_mut().zip(&z) {
                *d += c * zk;
            }
        }
        let penalty = rep.step() * rep.layer_rates().iter().sum::<f64>();
        Eval { value: norm2(&delta) * (-penalty).exp(), delta, penalty }
    }

    /// Gradient of `|Delta| e^{-S}` with respect to all coefficients and directions.
    fn gradient(&self, rep: &FlowRep, ev: &Eval) -> Vec<Vec<FlowNeuron>> {
        let dd = rep.embed_dim;
        let dt = rep.step();
        let mut grad: Vec<Vec<FlowNeuron>> = rep
            .layers
            .iter()
            .map(|l| l.iter().map(|_| FlowNeuron { coeff: vec![0.0; dd], omega: vec![0.0; dd] }).collect())
            .collect();
        let dn = norm2(&ev.delta);
        if !(dn > 0.0) {
            return grad;
        }
        let scale = (-ev.penalty).exp() / dn;
        let nl = rep.layers.len();
        let mut states: Vec<Vec<f64>> = Vec::with_capacity(nl + 1);
        for (x, c) in self.points.chunks_exact(self.dim).zip(self.coeffs) {
            states.clear();
            let mut z = rep.lift(x);
            for layer in &rep.layers {
                let mut next = z.clone();
                for nrn in layer {
                    let a = relu(dot(&nrn.omega, &z));
                    if a > 0.0 {
                        for k in 0..dd {
                            next[k] += dt * nrn.coeff[k] * a;
                        }
                    }
                }
                states.push(std::mem::replace(&mut z, next));
            }
            let mut g: Vec<f64> = ev.delta.iter().map(|v| c * v * scale).collect();
            for l in (0..nl).rev() {
                let zl = &states[l];
                let mut gz = g.clone();
                for (ni, nrn) in rep.layers[l].iter().enumerate() {
                    let pre = dot(&nrn.omega, zl);
                    if pre > 0.0 {
                        let gc = dot(&g, &nrn.coeff);
                        let slot = &mut grad[l][ni];
                        for k in 0..dd {
                            slot.coeff[k] += dt * pre * g[k];
                            slot.omega[k] += dt * gc * zl[k];
                            gz[k] += dt * gc * nrn.omega[k];
                        }
                    }
                }
                g = gz;
            }
        }
        // derivative of the growth penalty
        for (l, layer) in rep.layers.iter().enumerate() {
            let mut tv = vec![0.0; dd];
            for nrn in layer {
                for k in 0..dd {
                    tv[k] += nrn.coeff[k].abs();
                }
            }
            let lam = norm2(&tv);
            if lam > 0.0 {
                for (ni, nrn) in layer.iter().enumerate() {
                    for k in 0..dd {
                        let c = nrn.coeff[k];
                        if c != 0.0 {
                            grad[l][ni].coeff[k] -= ev.value * dt * tv[k] / lam * c.signum();
                        }
                    }
                }
            }
        }
        grad
    }

    fn with_readout(&self, mut rep: FlowRep) -> (f64, FlowRep) {
        let ev = self.eval(&rep);
        let dn = norm2(&ev.delta);
        if dn > 0.0 {
            let s = (-ev.penalty).exp() / dn;
            rep.alpha = ev.delta.iter().map(|v| v * s).collect();
        } else {
            rep.alpha = vec![0.0; rep.embed_dim];
        }
        (dot(&rep.alpha, &ev.delta).abs(), rep)
    }

    fn ascend(&self, mut rep: FlowRep, steps: usize) -> FlowRep {
        if rep.layers.is_empty() {
            return rep;
        }
        let mut ev = self.eval(&rep);
        let mut step = 0.05;
        for _ in 0..steps {
            let grad = self.gradient(&rep, &ev);
            // project direction gradients onto the tangent space
            let mut sq = 0.0;
            let mut dir = grad;
            for (l, layer) in dir.iter_mut().enumerate() {
                for (ni, g) in layer.iter_mut().enumerate() {
                    let om = &rep.layers[l][ni].omega;
                    let r = dot(&g.omega, om);
                    for k in 0..rep.embed_dim {
                        g.omega[k] -= r * om[k];
                    }
                    sq += dot(&g.omega, &g.omega) + dot(&g.coeff, &g.coeff);
                }
            }
            let gn = sq.sqrt();
            if !(gn > 1e-300) {
                break;
            }
            let mut accepted = false;
            while step > 1e-9 {
                let mut cand = rep.clone();
                for (l, layer) in cand.layers.iter_mut().enumerate() {
                    for (ni, nrn) in layer.iter_mut().enumerate() {
                        let g = &dir[l][ni];
                        for k in 0..nrn.coeff.len() {
                            nrn.coeff[k] += step * g.coeff[k] / gn;
                            nrn.omega[k] += step * g.omega[k] / gn;
                        }
                        let n = norm2(&nrn.omega);
                        nrn.omega.iter_mut().for_each(|v| *v /= n);
                    }
                }
                let cev = self.eval(&cand);
                if cev.value > ev.value {
                    rep = cand;
                    ev = cev;
                    step *= 1.3;
                    accepted = true;
                    break;
                }
                step *= 0.5;
            }
            if !accepted {
                break;
            }
        }
        rep
    }
}

fn random_rep(shape: &FlowShape, rng: &mut impl Rng) -> FlowRep {
    let dd = shape.embed_dim;
    let layers = (0..shape.layers)
        .map(|_| {
            (0..shape.width)
                .map(|_| FlowNeuron {
                    coeff: (0..dd).map(|_| 0.3 * rng.sample::<f64, _>(StandardNormal)).collect(),
                    omega: random_unit(rng, dd),
                })
                .collect()
        })
        .collect();
    FlowRep { embed_dim: dd, layers, alpha: vec![0.0; dd] }
}

/// Multi-start search. `barron_start` is a Barron-ball maximizer for the same
/// signed point set; its exact embedding seeds one of the starts.
pub(crate) fn flow_sup(
    prob: &FlowProblem,
    shape: &FlowShape,
    barron_start: Option<&[f64]>,
    cfg: &OptimizerConfig,
) -> (f64, FlowRep) {
    let dd = shape.embed_dim;
    let d = prob.dim;
    let mut rng = cfg.seed.rng();
    let mut starts = Vec::new();

    // layers present but inactive: the augmented first moment
    let silent = FlowRep {
        embed_dim: dd,
        layers: (0..shape.layers)
            .map(|_| (0..shape.width).map(|_| FlowNeuron { coeff: vec![0.0; dd], omega: random_unit(&mut rng, dd) }).collect())
            .collect(),
        alpha: vec![0.0; dd],
    };
    starts.push(silent);

    if let (Some(th), true) = (barron_start, shape.layers > 0) {
        let mut layers = Vec::new();
        for _ in 0..shape.layers {
            let mut omega = vec![0.0; dd];
            omega[..=d].copy_from_slice(th);
            let mut coeff = vec![0.0; dd];
            coeff[d + 1] = 1.0;
            let mut layer = vec![FlowNeuron { coeff, omega }];
            for _ in 1..shape.width {
                layer.push(FlowNeuron { coeff: vec![0.0; dd], omega: random_unit(&mut rng, dd) });
            }
            layers.push(layer);
        }
        starts.push(FlowRep { embed_dim: dd, layers, alpha: vec![0.0; dd] });
    }
    let extra = (cfg.restarts / 8).max(1);
    for _ in 0..extra {
        starts.push(random_rep(shape, &mut rng));
    }

    let mut best: Option<(f64, FlowRep)> = None;
    for s in starts {
        let rep = prob.ascend(s, cfg.steps);
        let (v, rep) = prob.with_readout(rep);
        if best.as_ref().is_none_or(|b| v > b.0) {
            best = Some((v, rep));
        }
    }
    best.expect("at least one start")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measures::RngSeed;

    #[test]
    fn gradient_matches_finite_differences() {
        let pts = [0.3, -1.2, 0.8, 2.0, -0.4];
        let cs = [0.2, -0.3, 0.25, 0.15, -0.3];
        let prob = FlowProblem { dim: 1, points: &pts, coeffs: &cs };
        let mut rng = RngSeed::new(3).rng();
        let rep = random_rep(&FlowShape { embed_dim: 3, layers: 2, width: 2 }, &mut rng);
        let ev = prob.eval(&rep);
        let g = prob.gradient(&rep, &ev);
        let h = 1e-6;
        for l in 0..2 {
            for ni in 0..2 {
                for k in 0..3 {
                    let mut p = rep.clone();
                    p.layers[l][ni].coeff[k] += h;
                    let mut m = rep.clone();
                    m.layers[l][ni].coeff[k] -= h;
                    let fd = (prob.eval(&p).value - prob.eval(&m).value) / (2.0 * h);
                    assert!((fd - g[l][ni].coeff[k]).abs() < 1e-5, "coeff {l} {ni} {k}: {fd} vs {}", g[l][ni].coeff[k]);
                    let mut p = rep.clone();
                    p.layers[l][ni].omega[k] += h;
                    let mut m = rep.clone();
                    m.layers[l][ni].omega[k] -= h;
                    let fd = (prob.eval(&p).value - prob.eval(&m).value) / (2.0 * h);
                    assert!((fd - g[l][ni].omega[k]).abs() < 1e-5, "omega {l} {ni} {k}: {fd} vs {}", g[l][ni].omega[k]);
                }
            }
        }
    }
}
