use std::path::PathBuf;

use gmmd_core::harness::{
    fit_rate, run_experiment, write_outputs, ExperimentConfig, ExperimentKind, Format, PlotSpec, ResultTable,
};
use gmmd_core::measures::{sample, DistributionSpec, EmpiricalMeasure, RngSeed};
use gmmd_core::mfg_lq::{nash_gap, solve_mfg_lq_discrete, LqGameParams};
use gmmd_core::particle_sde::{simulate_particles, LinearMv, PathEnsemble};

fn workspace_root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..")
}

#[test]
fn shipped_configs_parse() {
    let dir = workspace_root().join("configs");
    let mut seen = 0;
    for entry in std::fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        let name = path.file_name().unwrap().to_string_lossy().to_string();
        if path.extension().is_some_and(|e| e == "toml") && name != "game.toml" {
            ExperimentConfig::load(&path).unwrap_or_else(|e| panic!("{name}: {e}"));
            seen += 1;
        }
    }
    assert!(seen >= 7);
}

#[test]
fn decoupled_particles_match_iid_sampling() {
    // without interaction the particles are i.i.d. draws of the Euler law,
    // so the terminal-slice discrepancy matches the i.i.d. experiment
    let model = LinearMv { a: 0.0, ..LinearMv::default() };
    let steps = 100;
    let mut mv = ExperimentConfig::new(ExperimentKind::MvRate, vec![64, 256, 1024]);
    mv.reps = 64;
    mv.seed = 3;
    mv.mv.model = model;
    mv.mv.steps = steps;
    mv.mv.stride = steps;
    let mvt = run_experiment(&mv).unwrap();
    let terminal = model.euler_laws(steps).pop().unwrap();
    let mut iid = ExperimentConfig::new(ExperimentKind::IidRate, vec![64, 256, 1024]);
    iid.reps = 64;
    iid.seed = 4;
    iid.distribution = Some(DistributionSpec::Gaussian(terminal));
    let it = run_experiment(&iid).unwrap();
    let (a, a_se) = (mvt.values("terminal_mean").unwrap(), mvt.values("terminal_se").unwrap());
    let (b, b_se) = (it.values("mean").unwrap(), it.values("se").unwrap());
    for i in 0..3 {
        let pooled = (a_se[i].powi(2) + b_se[i].powi(2)).sqrt();
        assert!((a[i] - b[i]).abs() <= 3.0 * pooled, "n index {i}: {} vs {} (se {pooled})", a[i], b[i]);
    }
}

#[test]
fn outputs_round_trip_through_files() {
    let mut cfg = ExperimentConfig::new(ExperimentKind::Tail, vec![32]);
    cfg.reps = 20;
    let table = run_experiment(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let (csv, svg) = write_outputs(&table, dir.path()).unwrap();
    let back = ResultTable::read_csv(std::fs::File::open(&csv).unwrap(), "tail").unwrap();
    assert_eq!(back.columns, table.columns);
    assert_eq!(back.rows, table.rows);
    assert_eq!(back.meta, table.meta);
    // the header carries the resolved config, which parses back to the same value
    let toml: String = back.meta.iter().take_while(|l| !l.starts_with("fit ")).map(|l| format!("{l}\n")).collect();
    assert_eq!(ExperimentConfig::from_toml(&toml).unwrap(), cfg);
    assert!(std::fs::read_to_string(svg).unwrap().starts_with("<svg"));
    let bad = dir.path().join("missing").join("deeper").join("x.csv");
    assert!(table.emit(Format::Csv, &bad).is_err());
}

fn golden_table() -> ResultTable {
    let mut t = ResultTable::new("golden", &["d", "n", "mean"]);
    for (d, c) in [(1.0, 1.0), (4.0, 2.0)] {
        for n in [64.0, 256.0, 1024.0, 4096.0] {
            t.rows.push(vec![d, n, c / f64::sqrt(n)]);
        }
        let pts: Vec<(f64, f64, f64)> = t.rows.iter().filter(|r| r[0] == d).map(|r| (r[1], r[2], 0.0)).collect();
        t.fits.push((format!("d={d}"), fit_rate(&pts).unwrap()));
    }
    t.plot = Some(PlotSpec { x: "n".into(), y: "mean".into(), series: Some("d".into()) });
    t
}

#[test]
fn svg_matches_golden_file() {
    let svg = golden_table().to_svg();
    assert_eq!(svg.matches("<path").count(), 2);
    assert!(svg.contains("d=1: slope -0.500"));
    assert!(svg.contains("d=4: slope -0.500"));
    let golden = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden/rate_plot.svg");
    if !golden.exists() {
        std::fs::write(&golden, &svg).unwrap();
    }
    assert_eq!(svg, std::fs::read_to_string(&golden).unwrap());
}

#[test]
fn empty_table_svg_has_no_series() {
    let t = ResultTable::new("empty", &["n", "mean"]);
    assert_eq!(t.to_svg().matches("<path").count(), 0);
}

#[test]
fn measure_and_ensemble_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let mu = sample(&DistributionSpec::standard_gaussian(3), 50, RngSeed::new(8)).unwrap();
    let p = dir.path().join("mu.csv");
    mu.save(&p).unwrap();
    assert_eq!(EmpiricalMeasure::load(&p).unwrap(), mu);
    let ens = simulate_particles(&LinearMv::default().model(), 16, 20, RngSeed::new(9)).unwrap();
    let mut buf = Vec::new();
    ens.write_binary(&mut buf).unwrap();
    assert_eq!(PathEnsemble::read_binary(buf.as_slice()).unwrap(), ens);
}

#[test]
fn nash_gap_and_cost_trends() {
    let p = LqGameParams::coupled();
    let sol = solve_mfg_lq_discrete(&p, 100).unwrap();
    let g16 = nash_gap(&p, &sol, 16, 64, RngSeed::new(12)).unwrap();
    for n in [64, 256] {
        let g = nash_gap(&p, &sol, n, 64, RngSeed::new(12)).unwrap();
        assert!(g.gap.mean <= g16.gap.mean, "n = {n}");
        assert!((g.cost.mean - g.mean_field_cost).abs() <= (g16.cost.mean - g16.mean_field_cost).abs() + 3.0 * g.cost.std_err);
    }
}
