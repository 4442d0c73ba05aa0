//! Acceptance criteria. Each test writes one `PASS`/`FAIL` line straight to
//! stdout (bypassing the test harness capture) and then asserts.

use std::io::Write;
use std::time::Instant;

use gauss_quad::GaussLegendre;
use gmmd_core::bias_potential::FitConfig;
use gmmd_core::gmmd::{
    barron_gmmd, barron_gmmd_grid, mmd2_unbiased, mmd_vs_gaussian, rademacher_bound, rademacher_mc, McEstimate, OptimizerConfig,
};
use gmmd_core::harness::{fit_rate, run_experiment, run_experiment_with_threads, ExperimentConfig, ExperimentKind, ResultTable};
use gmmd_core::measures::{sample, DiagGaussian, DistributionSpec, EmpiricalMeasure, RngSeed};
use gmmd_core::particle_sde::{simulate_particles, LinearMv};
use gmmd_core::test_classes::{ClassKind, KernelSpec, TestClassSpec};
use rand::Rng;

fn report(id: u32, title: &str, pass: bool, detail: &str, started: Instant) {
    let line = format!(
        "ACCEPTANCE {id:>2} {} {title}: {detail} [{:.1}s]\n",
        if pass { "PASS" } else { "FAIL" },
        started.elapsed().as_secs_f64()
    );
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(line.as_bytes());
    let _ = out.flush();
}

fn gaussian_sample(dim: usize, n: usize, shift: f64, scale: f64, seed: RngSeed) -> EmpiricalMeasure {
    let spec = DistributionSpec::Gaussian(DiagGaussian { mean: vec![shift; dim], var: vec![scale * scale; dim] });
    sample(&spec, n, seed).unwrap()
}

#[test]
fn criterion_01_dimension_free_iid_rate() {
    let t0 = Instant::now();
    let mut cfg = ExperimentConfig::new(ExperimentKind::IidRate, vec![64, 256, 1024, 4096]);
    cfg.d = vec![1, 4, 16];
    cfg.reps = 32;
    cfg.seed = 101;
    let table = run_experiment(&cfg).unwrap();
    let within = table.values("within_bound").unwrap();
    let mut pass = table.succeeded() && within.iter().all(|v| *v == 1.0);
    let mut detail = String::new();
    for d in &cfg.d {
        let (_, f) = table.fits.iter().find(|(l, _)| *l == format!("d={d}")).expect("fit per dimension");
        pass &= (-0.65..=-0.35).contains(&f.slope) && f.r2 >= 0.95;
        detail.push_str(&format!("d={d} slope {:.3} r2 {:.3}; ", f.slope, f.r2));
    }
    detail.push_str(&format!("{} of {} cells under the bound", within.iter().filter(|v| **v == 1.0).count(), within.len()));
    report(1, "dimension-free i.i.d. rate", pass, &detail, t0);
    assert!(pass, "{detail}");
}

/// `E_{X, X' ~ N(0,1)} exp(-(X - X')^2 / 2)` and `E exp(-X^2 / 2)` by
/// tensor Gauss-Legendre quadrature on `[-12, 12]`.
fn quadrature_mmd_at_mean() -> f64 {
    let rule = GaussLegendre::new(std::num::NonZeroUsize::new(400).unwrap());
    let nodes: Vec<(f64, f64)> = rule.as_node_weight_pairs().iter().map(|&(x, w)| (12.0 * x, 12.0 * w)).collect();
    let phi = |x: f64| (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let mut exx = 0.0f64;
    let mut ex0 = 0.0f64;
    for &(x, wx) in &nodes {
        ex0 += wx * phi(x) * (-0.5 * x * x).exp();
        for &(y, wy) in &nodes {
            exx += wx * wy * phi(x) * phi(y) * (-0.5 * (x - y) * (x - y)).exp();
        }
    }
    (exx + 1.0 - 2.0 * ex0).sqrt()
}

#[test]
fn criterion_02_rkhs_exactness() {
    let t0 = Instant::now();
    let k = KernelSpec::gaussian(1.0, 2);
    let spec = DistributionSpec::standard_gaussian(2);
    let base = RngSeed::new(202);
    let vals: Vec<f64> = (0..10_000u64)
        .map(|r| {
            let s = base.child(r);
            let x = sample(&spec, 256, s.child(0)).unwrap();
            let y = sample(&spec, 256, s.child(1)).unwrap();
            mmd2_unbiased(&k, &x, &y).unwrap()
        })
        .collect();
    let est = McEstimate::from_values(&vals);
    let unbiased = est.mean.abs() <= 3.0 * est.std_err;
    let k1 = KernelSpec::gaussian(1.0, 1);
    let at_mean = EmpiricalMeasure::uniform(1, vec![0.0]).unwrap();
    let analytic = mmd_vs_gaussian(&k1, &DiagGaussian::standard(1), &at_mean).unwrap().value;
    let oracle = quadrature_mmd_at_mean();
    let agree = (analytic - oracle).abs() <= 1e-6;
    let pass = unbiased && agree;
    let detail = format!(
        "unbiased MMD^2 mean {:.3e} (se {:.3e}); analytic {analytic:.7} vs quadrature {oracle:.7}",
        est.mean, est.std_err
    );
    report(2, "RKHS exactness", pass, &detail, t0);
    assert!(pass, "{detail}");
}

#[test]
fn criterion_03_oracle_equivalence() {
    let t0 = Instant::now();
    let base = RngSeed::new(303);
    let mut worst: f64 = 0.0;
    let mut pass = true;
    for i in 0..50u64 {
        let s = base.child(i);
        let mut rng = s.rng();
        let d = if i % 2 == 0 { 1 } else { 2 };
        let nx = rng.random_range(8..=256);
        let ny = rng.random_range(8..=256);
        let shift = rng.random_range(-0.5..0.5);
        let scale = rng.random_range(0.5..1.5);
        let x = gaussian_sample(d, nx, 0.0, 1.0, s.child(0));
        let y = gaussian_sample(d, ny, shift, scale, s.child(1));
        let opt = barron_gmmd(&x, &y, &OptimizerConfig::default().with_seed(s.child(2))).unwrap().value;
        let grid = barron_gmmd_grid(&x, &y, if d == 1 { 1_000_000 } else { 1200 }).unwrap();
        let rel = (opt - grid.value).abs() / grid.value;
        worst = worst.max(rel);
        pass &= rel <= 1e-3 && opt <= grid.value + grid.error_bound.unwrap();
    }
    let detail = format!("worst relative error {worst:.2e} over 50 instances");
    report(3, "oracle equivalence", pass, &detail, t0);
    assert!(pass, "{detail}");
}

#[test]
fn criterion_04_rademacher_bounds() {
    let t0 = Instant::now();
    let base = RngSeed::new(404);
    let mut pass = true;
    let mut worst: f64 = 0.0;
    for i in 0..20u64 {
        let s = base.child(i);
        let mut rng = s.rng();
        let d = 1 + (i as usize % 3);
        let n = rng.random_range(8..=48);
        let x = gaussian_sample(d, n, 0.0, 1.0, s.child(0));
        let classes = [TestClassSpec::rkhs(KernelSpec::gaussian(1.0, d)).unwrap(), TestClassSpec::barron(), TestClassSpec::flow(d + 2, 2)];
        for (c, class) in classes.iter().enumerate() {
            let trials = 1000;
            let mut cfg = OptimizerConfig::default().with_seed(s.child(1 + c as u64));
            if c == 2 {
                cfg.restarts = 4;
                cfg.steps = 60;
            }
            let mc = rademacher_mc(class, &x, trials, &cfg).unwrap();
            let bound = rademacher_bound(class, &x);
            worst = worst.max(mc.mean / bound);
            pass &= mc.mean <= bound + 3.0 * mc.std_err;
        }
    }
    let detail = format!("largest MC estimate / bound ratio {worst:.3} over 20 point sets x 3 classes");
    report(4, "Rademacher bounds", pass, &detail, t0);
    assert!(pass, "{detail}");
}

#[test]
fn criterion_05_mckean_vlasov() {
    let t0 = Instant::now();
    let mv = LinearMv::default();
    let ens = simulate_particles(&mv.model(), 10_000, 1000, RngSeed::new(505)).unwrap();
    let (m, v) = ens.moments(1000);
    let n = 10_000.0;
    let mean_se = (v[0] / n).sqrt();
    // standard error of the sample variance of a Gaussian
    let var_se = v[0] * (2.0 / (n - 1.0)).sqrt();
    let m_exact = (-0.5f64).exp();
    let v_exact = (1.0 - (-2.0f64).exp()) / 2.0;
    let moments_ok = (m[0] - m_exact).abs() <= 3.0 * mean_se && (v[0] - v_exact).abs() <= 3.0 * var_se;

    let mut cfg = ExperimentConfig::new(ExperimentKind::MvRate, vec![64, 256, 1024, 4096]);
    cfg.reps = 32;
    cfg.seed = 505;
    let table = run_experiment(&cfg).unwrap();
    let f = &table.fits[0].1;
    let slope_ok = table.succeeded() && (-1.25..=-0.75).contains(&f.slope);
    let pass = moments_ok && slope_ok;
    let detail = format!(
        "terminal mean {:.4} (exact {m_exact:.4}, se {mean_se:.4}), variance {:.4} (exact {v_exact:.4}, se {var_se:.4}); sup-squared slope {:.3} (r2 {:.3})",
        m[0], v[0], f.slope, f.r2
    );
    report(5, "McKean-Vlasov propagation of chaos", pass, &detail, t0);
    assert!(pass, "{detail}");
}

#[test]
fn criterion_06_bias_potential() {
    let t0 = Instant::now();
    let mut cfg = ExperimentConfig::new(ExperimentKind::Biaspot, vec![4096]);
    cfg.reps = 20;
    cfg.seed = 606;
    cfg.biaspot.fit = FitConfig::default();
    let table = run_experiment(&cfg).unwrap();
    let holds = table.values("holds").unwrap();
    let count = holds.iter().filter(|v| **v == 1.0).count();
    let lhs = table.values("lhs").unwrap();
    let rhs = table.values("rhs").unwrap();
    let pass = table.succeeded() && holds.len() == 20 && count >= 18;
    let detail = format!(
        "inequality held on {count} of {}; mean lhs {:.4}, mean rhs {:.4}",
        holds.len(),
        lhs.iter().sum::<f64>() / lhs.len() as f64,
        rhs.iter().sum::<f64>() / rhs.len() as f64
    );
    report(6, "bias potential entropy bound", pass, &detail, t0);
    assert!(pass, "{detail}");
}

#[test]
fn criterion_07_epsilon_nash() {
    let t0 = Instant::now();
    let mut cfg = ExperimentConfig::new(ExperimentKind::MfgGap, vec![16, 64, 256, 1024]);
    cfg.reps = 64;
    cfg.seed = 707;
    let table = run_experiment(&cfg).unwrap();
    let coupled = table.fits.iter().find(|(l, _)| l == "control=0").map(|(_, f)| f.clone());
    let control: Vec<&Vec<f64>> = table.rows.iter().filter(|r| r[0] == 1.0).collect();
    let control_ok = control.len() == 4 && control.iter().all(|r| r[2].abs() <= 3.0 * r[3]);
    let slope = coupled.as_ref().map_or(f64::NAN, |f| f.slope);
    let pass = table.succeeded() && (-0.7..=-0.3).contains(&slope) && control_ok;
    let gaps: Vec<String> = table.rows.iter().filter(|r| r[0] == 0.0).map(|r| format!("{:.2e}", r[2])).collect();
    let detail = format!(
        "coupled gap slope {slope:.3} (gaps {}); control gaps within 3 s.e. of 0: {control_ok}",
        gaps.join(", ")
    );
    report(7, "epsilon-Nash gap", pass, &detail, t0);
    assert!(pass, "{detail}");
}

#[test]
fn criterion_08_path_regularity() {
    let t0 = Instant::now();
    let mut cfg = ExperimentConfig::new(ExperimentKind::Modulus, vec![]);
    cfg.reps = 512;
    cfg.seed = 808;
    let table = run_experiment(&cfg).unwrap();
    let means = table.values("mean").unwrap();
    let hi = means.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lo = means.iter().cloned().fold(f64::INFINITY, f64::min);
    let ratio = hi / lo;
    let pass = table.succeeded() && means.len() == 6 && ratio < 4.0;
    let detail = format!("normalized squared modulus in [{lo:.3}, {hi:.3}], max/min ratio {ratio:.3}");
    report(8, "path regularity", pass, &detail, t0);
    assert!(pass, "{detail}");
}

#[test]
fn criterion_09_concentration() {
    let t0 = Instant::now();
    let mut cfg = ExperimentConfig::new(ExperimentKind::Tail, vec![1024]);
    cfg.reps = 10_000;
    cfg.seed = 909;
    let table = run_experiment(&cfg).unwrap();
    let dominated = table.values("dominated").unwrap();
    let freq = table.values("frequency").unwrap();
    let bound = table.values("bound").unwrap();
    let pass = table.succeeded() && dominated.iter().all(|v| *v == 1.0);
    let pairs: Vec<String> = freq.iter().zip(&bound).map(|(f, b)| format!("{f:.4}<={b:.4}")).collect();
    let detail = format!("kappa {}, exceedance vs bound: {}", cfg.tail.kappa, pairs.join(" "));
    report(9, "concentration", pass, &detail, t0);
    assert!(pass, "{detail}");
}

fn csv_bytes(t: &ResultTable) -> Vec<u8> {
    let mut buf = Vec::new();
    t.write_csv(&mut buf).unwrap();
    buf
}

#[test]
fn criterion_10_determinism() {
    let t0 = Instant::now();
    let mut configs = Vec::new();
    let small = |kind: ExperimentKind, n: Vec<usize>| {
        let mut c = ExperimentConfig::new(kind, n);
        c.reps = 3;
        c.seed = 1010;
        c
    };
    configs.push(small(ExperimentKind::IidRate, vec![16, 32, 64]));
    let mut dims = small(ExperimentKind::DimSweep, vec![16, 32, 64]);
    dims.d = vec![1, 3];
    configs.push(dims);
    let mut mv = small(ExperimentKind::MvRate, vec![16, 32, 64]);
    mv.mv.steps = 50;
    mv.mv.stride = 10;
    configs.push(mv);
    let mut bp = small(ExperimentKind::Biaspot, vec![128]);
    bp.biaspot.fit.outer_steps = 10;
    configs.push(bp);
    configs.push(small(ExperimentKind::MfgGap, vec![4, 8, 16]));
    configs.push(small(ExperimentKind::Modulus, vec![]));
    configs.push(small(ExperimentKind::Tail, vec![64]));
    let mut rkhs = small(ExperimentKind::IidRate, vec![16, 32, 64]);
    rkhs.class = ClassKind::Rkhs { kernel: KernelSpec::gaussian(1.0, 1) };
    configs.push(rkhs);
    let mut pass = true;
    let mut mismatched = Vec::new();
    for cfg in &configs {
        let a = csv_bytes(&run_experiment(cfg).unwrap());
        let b = csv_bytes(&run_experiment_with_threads(cfg, 3).unwrap());
        if a != b {
            pass = false;
            mismatched.push(cfg.experiment.tag());
        }
    }
    let detail = if pass {
        format!("{} configurations reproduced byte-identical CSV", configs.len())
    } else {
        format!("CSV differs for {}", mismatched.join(", "))
    };
    report(10, "determinism", pass, &detail, t0);
    assert!(pass, "{detail}");
}

#[test]
fn rate_fit_oracle_sanity() {
    // the fit used by every slope criterion recovers an exact power law
    let pts: Vec<(f64, f64, f64)> = [64.0, 256.0, 1024.0, 4096.0].iter().map(|n: &f64| (*n, 0.7 * n.powf(-0.5), 0.0)).collect();
    assert!((fit_rate(&pts).unwrap().slope + 0.5).abs() < 1e-12);
}
