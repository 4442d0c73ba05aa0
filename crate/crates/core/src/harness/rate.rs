use serde::{Deserialize, Serialize};

use crate::error::{param, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RatePoint {
    pub n: f64,
    pub value: f64,
    pub se: f64,
}

/// Least-squares fit of `log value = intercept + slope * log n`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
    /// Standard error of the slope from the regression residuals.
    pub slope_se: f64,
    /// Points used in the fit.
    pub points: Vec<RatePoint>,
}

impl RateFit {
    pub fn predict(&self, n: f64) -> f64 {
        (self.intercept + self.slope * n.ln()).exp()
    }
}

/// Fits a power law to `(n, value, se)` triples. Non-positive values are
/// dropped with a warning; at least three usable points are required.
pub fn fit_rate(points: &[(f64, f64, f64)]) -> Result<RateFit> {
    let mut kept = Vec::with_capacity(points.len());
    for &(n, value, se) in points {
        if value > 0.0 && n > 0.0 && value.is_finite() {
            kept.push(RatePoint { n, value, se });
        } else {
            log::warn!("dropping point n = {n}, value = {value} from rate fit");
        }
    }
    if kept.len() < 3 {
        return param("a rate fit needs at least three positive points");
    }
    let k = kept.len() as f64;
    let xs: Vec<f64> = kept.iter().map(|p| p.n.ln()).collect();
    let ys: Vec<f64> = kept.iter().map(|p| p.value.ln()).collect();
    let mx = xs.iter().sum::<f64>() / k;
    let my = ys.iter().sum::<f64>() / k;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx == 0.0 {
        return param("rate fit needs at least two distinct n");
    }
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_res: f64 = xs.iter().zip(&ys).map(|(x, y)| (y - intercept - slope * x).powi(2)).sum();
    let r2 = if syy > 0.0 { (1.0 - ss_res / syy).clamp(0.0, 1.0) } else { 1.0 };
    let slope_se = (ss_res / (k - 2.0) / sxx).sqrt();
    Ok(RateFit { slope, intercept, r2, slope_se, points: kept })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn grid() -> Vec<f64> {
        (0..7).map(|i| 64.0 * 2f64.powi(i)).collect()
    }

    #[test]
    fn exact_power_laws() {
        let f = fit_rate(&grid().iter().map(|n| (*n, 3.0 / n.sqrt(), 0.0)).collect::<Vec<_>>()).unwrap();
        assert!((f.slope + 0.5).abs() < 1e-12);
        assert!((f.r2 - 1.0).abs() < 1e-12);
        assert!((f.predict(100.0) - 0.3).abs() < 1e-12);
        let f = fit_rate(&grid().iter().map(|n| (*n, 2.0 / n, 0.0)).collect::<Vec<_>>()).unwrap();
        assert!((f.slope + 1.0).abs() < 1e-12);
    }

    #[test]
    fn log_factor_bends_the_slope() {
        let f = fit_rate(&grid().iter().map(|n| (*n, n.ln() / n, 0.0)).collect::<Vec<_>>()).unwrap();
        assert!(f.slope > -1.0 && f.slope < -0.75, "{}", f.slope);
        assert!(f.r2 < 1.0);
    }

    #[test]
    fn drops_non_positive_values() {
        let pts = vec![(10.0, 1.0, 0.0), (20.0, 0.0, 0.0), (40.0, 0.25, 0.0), (80.0, 0.125, 0.0), (160.0, -1.0, 0.0)];
        let f = fit_rate(&pts).unwrap();
        assert_eq!(f.points.len(), 3);
        assert!(fit_rate(&pts[..3]).is_err());
    }

    proptest! {
        #[test]
        fn r2_in_unit_interval(vals in proptest::collection::vec(0.01f64..10.0, 3..8)) {
            let pts: Vec<_> = vals.iter().enumerate().map(|(i, v)| (2f64.powi(i as i32 + 3), *v, 0.0)).collect();
            let f = fit_rate(&pts).unwrap();
            prop_assert!((0.0..=1.0).contains(&f.r2));
            prop_assert!(f.slope_se >= 0.0);
        }
    }
}
