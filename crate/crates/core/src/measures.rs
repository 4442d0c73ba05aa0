//! Probability measures: seeded randomness, parametric distributions and
//! weighted empirical measures with a CSV exchange format.

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, param, Error, Result};

/// Seed plus stream identifier. Equal values always produce the same draws.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RngSeed {
    pub seed: u64,
    pub stream: u64,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl RngSeed {
    pub fn new(seed: u64) -> Self {
        RngSeed { seed, stream: 0 }
    }

    pub fn with_stream(seed: u64, stream: u64) -> Self {
        RngSeed { seed, stream }
    }

    pub fn rng(&self) -> ChaCha12Rng {
        let mut key = [0u8; 32];
        for (i, chunk) in key.chunks_mut(8).enumerate() {
            let word = splitmix(self.seed ^ (i as u64).wrapping_mul(0xA24B_AED4_963E_E407));
            chunk.copy_from_slice(&word.to_le_bytes());
        }
        let mut rng = ChaCha12Rng::from_seed(key);
        rng.set_stream(self.stream);
        rng
    }

    /// Independent sub-stream `index` of this seed.
    pub fn child(&self, index: u64) -> RngSeed {
        RngSeed {
            seed: splitmix(self.seed ^ splitmix(self.stream.wrapping_add(0x5851_F42D_4C95_7F2D))),
            stream: index,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagGaussian {
    pub mean: Vec<f64>,
    /// Per-coordinate variances.
    pub var: Vec<f64>,
}

impl DiagGaussian {
    pub fn standard(dim: usize) -> Self {
        DiagGaussian { mean: vec![0.0; dim], var: vec![1.0; dim] }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    fn validate(&self) -> Result<()> {
        check_dim(self.mean.len(), self.var.len())?;
        if self.mean.is_empty() {
            return param("gaussian dimension must be positive");
        }
        if self.var.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return param("gaussian variances must be finite and non-negative");
        }
        if self.mean.iter().any(|m| !m.is_finite()) {
            return param("gaussian mean must be finite");
        }
        Ok(())
    }

    fn draw(&self, rng: &mut impl Rng, out: &mut Vec<f64>) {
        for (m, v) in self.mean.iter().zip(&self.var) {
            let z: f64 = rng.sample(StandardNormal);
            out.push(m + v.sqrt() * z);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureComponent {
    pub weight: f64,
    #[serde(flatten)]
    pub gaussian: DiagGaussian,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DistributionSpec {
    Gaussian(DiagGaussian),
    UniformBox { lo: Vec<f64>, hi: Vec<f64> },
    Mixture { components: Vec<MixtureComponent> },
    Dirac { point: Vec<f64> },
}

impl DistributionSpec {
    pub fn standard_gaussian(dim: usize) -> Self {
        DistributionSpec::Gaussian(DiagGaussian::standard(dim))
    }

    pub fn uniform(lo: f64, hi: f64) -> Self {
        DistributionSpec::UniformBox { lo: vec![lo], hi: vec![hi] }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            DistributionSpec::Gaussian(g) => g.validate(),
            DistributionSpec::UniformBox { lo, hi } => {
                check_dim(lo.len(), hi.len())?;
                if lo.is_empty() {
                    return param("box dimension must be positive");
                }
                if lo.iter().zip(hi).any(|(l, h)| !(l < h) || !l.is_finite() || !h.is_finite()) {
                    return param("box requires finite lo < hi in every coordinate");
                }
                Ok(())
            }
            DistributionSpec::Mixture { components } => {
                let first = components.first().ok_or_else(|| Error::Parameter("empty mixture".into()))?;
                let dim = first.gaussian.dim();
                let mut total = 0.0;
                for c in components {
                    c.gaussian.validate()?;
                    check_dim(dim, c.gaussian.dim())?;
                    if !(c.weight >= 0.0) {
                        return param("mixture weights must be non-negative");
                    }
                    total += c.weight;
                }
                if (total - 1.0).abs() > 1e-9 {
                    return param(format!("mixture weights sum to {total}, expected 1"));
                }
                Ok(())
            }
            DistributionSpec::Dirac { point } => {
                if point.is_empty() || point.iter().any(|p| !p.is_finite()) {
                    return param("dirac point must be finite and non-empty");
                }
                Ok(())
            }
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            DistributionSpec::Gaussian(g) => g.dim(),
            DistributionSpec::UniformBox { lo, .. } => lo.len(),
            DistributionSpec::Mixture { components } => components.first().map_or(0, |c| c.gaussian.dim()),
            DistributionSpec::Dirac { point } => point.len(),
        }
    }

    /// `E ||X||^2`.
    pub fn second_moment(&self) -> f64 {
        match self {
            DistributionSpec::Gaussian(g) => g.mean.iter().zip(&g.var).map(|(m, v)| m * m + v).sum(),
            DistributionSpec::UniformBox { lo, hi } => {
                lo.iter().zip(hi).map(|(l, h)| (l * l + l * h + h * h) / 3.0).sum()
            }
            DistributionSpec::Mixture { components } => components
                .iter()
                .map(|c| c.weight * DistributionSpec::Gaussian(c.gaussian.clone()).second_moment())
                .sum(),
            DistributionSpec::Dirac { point } => point.iter().map(|p| p * p).sum(),
        }
    }

    fn draw(&self, rng: &mut impl Rng, out: &mut Vec<f64>) {
        match self {
            DistributionSpec::Gaussian(g) => g.draw(rng, out),
            DistributionSpec::UniformBox { lo, hi } => {
                for (l, h) in lo.iter().zip(hi) {
                    let u: f64 = rng.random();
                    out.push(l + (h - l) * u);
                }
            }
            DistributionSpec::Mixture { components } => {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                let mut pick = components.len() - 1;
                for (i, c) in components.iter().enumerate() {
                    acc += c.weight;
                    if u < acc {
                        pick = i;
                        break;
                    }
                }
                components[pick].gaussian.draw(rng, out);
            }
            DistributionSpec::Dirac { point } => out.extend_from_slice(point),
        }
    }

    /// One draw using an existing generator; used where each particle owns a stream.
    pub fn draw_one(&self, rng: &mut impl Rng) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.dim());
        self.draw(rng, &mut out);
        out
    }
}

/// Finitely supported probability measure; points stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalMeasure {
    dim: usize,
    points: Vec<f64>,
    weights: Vec<f64>,
}

fn weight_tolerance(n: usize) -> f64 {
    1e-12 + n as f64 * f64::EPSILON
}

impl EmpiricalMeasure {
    pub fn new(dim: usize, points: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return param("dimension must be positive");
        }
        if points.len() != dim * weights.len() {
            return Err(Error::Dimension { expected: dim * weights.len(), found: points.len() });
        }
        if weights.is_empty() {
            return param("empirical measure needs at least one atom");
        }
        if weights.iter().any(|w| !(*w >= 0.0)) {
            return param("weights must be non-negative");
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > weight_tolerance(weights.len()) {
            return param(format!("weights sum to {total}, expected 1"));
        }
        if points.iter().any(|p| !p.is_finite()) {
            return param("points must be finite");
        }
        Ok(EmpiricalMeasure { dim, points, weights })
    }

    pub fn uniform(dim: usize, points: Vec<f64>) -> Result<Self> {
        if dim == 0 || !points.len().is_multiple_of(dim) {
            return param("point buffer length is not a multiple of the dimension");
        }
        let n = points.len() / dim;
        Self::new(dim, points, vec![1.0 / n as f64; n])
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map_or(0, |r| r.len());
        let mut pts = Vec::with_capacity(rows.len() * dim);
        for r in rows {
            check_dim(dim, r.len())?;
            pts.extend_from_slice(r);
        }
        Self::uniform(dim, pts)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn iter(&self) -> impl Iterator<Item = (&[f64], f64)> {
        self.points.chunks(self.dim).zip(self.weights.iter().copied())
    }

    pub fn is_uniform(&self) -> bool {
        let w0 = self.weights[0];
        self.weights.iter().all(|w| (w - w0).abs() <= 1e-15)
    }

    pub fn mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.dim];
        for (x, w) in self.iter() {
            for (mk, xk) in m.iter_mut().zip(x) {
                *mk += w * xk;
            }
        }
        m
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(out);
        let mut header: Vec<String> = (1..=self.dim).map(|k| format!("x{k}")).collect();
        header.push("w".into());
        wtr.write_record(&header)?;
        for (x, w) in self.iter() {
            let mut rec: Vec<String> = x.iter().map(|v| v.to_string()).collect();
            rec.push(w.to_string());
            wtr.write_record(&rec)?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(input);
        let header = rdr.headers()?.clone();
        let cols = header.len();
        if cols < 2 || &header[cols - 1] != "w" {
            return Err(Error::Format("expected header x1,...,xd,w".into()));
        }
        for (k, name) in header.iter().take(cols - 1).enumerate() {
            if name != format!("x{}", k + 1) {
                return Err(Error::Format(format!("unexpected column name {name:?}")));
            }
        }
        let dim = cols - 1;
        let mut pts = Vec::new();
        let mut ws = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            if rec.len() != cols {
                return Err(Error::Format(format!("row has {} fields, expected {cols}", rec.len())));
            }
            for (k, field) in rec.iter().enumerate() {
                let v: f64 = field
                    .trim()
                    .parse()
                    .map_err(|_| Error::Format(format!("cannot parse {field:?} as a number")))?;
                if k < dim {
                    pts.push(v);
                } else {
                    ws.push(v);
                }
            }
        }
        Self::new(dim, pts, ws)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_csv(std::fs::File::open(path)?)
    }
}

/// `n` iid draws from `spec` as a uniformly weighted empirical measure.
pub fn sample(spec: &DistributionSpec, n: usize, seed: RngSeed) -> Result<EmpiricalMeasure> {
    spec.validate()?;
    if n == 0 {
        return param("sample size must be positive");
    }
    let mut rng = seed.rng();
    let mut pts = Vec::with_capacity(n * spec.dim());
    for _ in 0..n {
        spec.draw(&mut rng, &mut pts);
    }
    EmpiricalMeasure::uniform(spec.dim(), pts)
}

/// `(sum_i w_i ||x_i||^p)^(1/p)`.
pub fn moment(mu: &EmpiricalMeasure, p: f64) -> Result<f64> {
    if !(p > 0.0) {
        return param("moment order must be positive");
    }
    let s: f64 = mu
        .iter()
        .map(|(x, w)| w * x.iter().map(|v| v * v).sum::<f64>().sqrt().powf(p))
        .sum();
    Ok(s.powf(1.0 / p))
}
