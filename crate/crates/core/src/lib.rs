//! Integral probability metrics over three test-function classes (reproducing
//! kernel balls, Barron two-layer networks, flow-induced functions), with the
//! statistical machinery built on them: empirical rates, bias-potential
//! estimation, interacting particle systems and linear-quadratic mean-field games.
//!
//! ```
//! use gmmd_core::gmmd::{barron_gmmd_vs_gaussian, OptimizerConfig};
//! use gmmd_core::measures::{sample, DiagGaussian, DistributionSpec, RngSeed};
//!
//! let x = sample(&DistributionSpec::standard_gaussian(1), 500, RngSeed::new(1)).unwrap();
//! let d = barron_gmmd_vs_gaussian(&DiagGaussian::standard(1), &x, &OptimizerConfig::default()).unwrap();
//! assert!(d.value > 0.0 && d.value < 0.2);
//! ```

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod bias_potential;
pub mod gmmd;
pub mod harness;
pub mod measures;
pub mod mfg_lq;
pub mod particle_sde;
pub mod quadrature;
pub mod special;
pub mod test_classes;
pub mod transport_entropy;

mod error;

pub use error::{Error, Result};
