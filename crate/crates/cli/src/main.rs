use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use gmmd_core::gmmd::{gmmd, OptimizerConfig, Witness};
use gmmd_core::harness::{
    run_experiment_with_threads, write_outputs, ExperimentConfig, ExperimentKind, Format, ResultTable, TargetNeuron,
};
use gmmd_core::measures::{DistributionSpec, EmpiricalMeasure, RngSeed};
use gmmd_core::mfg_lq::LqGameParams;
use gmmd_core::test_classes::{KernelKind, KernelSpec, TestClassSpec};

#[derive(Parser)]
#[command(name = "gmmd", version, about = "Generalized MMD estimators and rate experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ClassArg {
    Rkhs,
    Barron,
    Flow,
}

#[derive(Clone, Copy, ValueEnum)]
enum KernelArg {
    Gaussian,
    Imq,
    Linear,
}

#[derive(Args)]
struct ClassOpts {
    #[arg(long, value_enum, default_value = "gaussian")]
    kernel: KernelArg,
    #[arg(long, default_value_t = 1.0)]
    lengthscale: f64,
    /// Inverse multiquadric offset `c`.
    #[arg(long, default_value_t = 1.0)]
    imq_c: f64,
    /// Inverse multiquadric exponent `beta`.
    #[arg(long, default_value_t = 0.5)]
    imq_beta: f64,
    /// Flow embedding dimension (defaults to d + 2).
    #[arg(long)]
    embed_dim: Option<usize>,
    #[arg(long, default_value_t = 2)]
    layers: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Discrepancy between two CSV point clouds; prints `value,estimator_kind`.
    Dist {
        #[arg(long, value_enum)]
        class: ClassArg,
        #[arg(long)]
        x: PathBuf,
        #[arg(long)]
        y: PathBuf,
        #[command(flatten)]
        shape: ClassOpts,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also print the witness test function as JSON.
        #[arg(long)]
        witness: bool,
    },
    /// Fits bias-potential models to samples of a target and reports lhs/rhs/epsilon per replication.
    Biaspot {
        /// `uniform:LO:HI` or `gaussian:MEAN:VAR`.
        #[arg(long, default_value = "uniform:-1:1")]
        base: String,
        /// JSON array of `{"coeff": c, "omega": [w], "b": b}`.
        #[arg(long)]
        target_neurons: PathBuf,
        #[arg(long, default_value_t = 4096)]
        n: usize,
        #[arg(long, default_value_t = 20)]
        reps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, env = "GMMD_THREADS")]
        threads: Option<usize>,
    },
    /// Nash gap of the mean-field feedback in the n-player game.
    Mfg {
        /// TOML with game parameters and an optional `steps`.
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "16,64,256,1024")]
        nsweep: Vec<usize>,
        #[arg(long, default_value_t = 64)]
        reps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, env = "GMMD_THREADS")]
        threads: Option<usize>,
    },
    /// Runs an experiment config and writes `<experiment>.csv` and `.svg`.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, env = "GMMD_THREADS")]
        threads: Option<usize>,
    },
}

fn threads(arg: Option<usize>) -> usize {
    arg.filter(|t| *t > 0).unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

fn load_measure(path: &Path) -> Result<EmpiricalMeasure> {
    EmpiricalMeasure::load(path).with_context(|| format!("reading {}", path.display()))
}

fn dist_class(class: ClassArg, o: &ClassOpts, dim: usize) -> Result<TestClassSpec> {
    Ok(match class {
        ClassArg::Barron => TestClassSpec::barron(),
        ClassArg::Flow => TestClassSpec::flow(o.embed_dim.unwrap_or(dim + 2), o.layers),
        ClassArg::Rkhs => {
            let kind = match o.kernel {
                KernelArg::Gaussian => KernelKind::Gaussian { lengthscale: o.lengthscale },
                KernelArg::Imq => KernelKind::InverseMultiquadric { c: o.imq_c, beta: o.imq_beta },
                KernelArg::Linear => KernelKind::LinearPlusOne,
            };
            TestClassSpec::rkhs(KernelSpec { kind, dim })?
        }
    })
}

fn parse_base(text: &str) -> Result<DistributionSpec> {
    let parts: Vec<&str> = text.split(':').collect();
    let num = |s: &str| s.parse::<f64>().with_context(|| format!("bad number {s:?} in --base"));
    let spec = match parts.as_slice() {
        ["uniform", lo, hi] => DistributionSpec::uniform(num(lo)?, num(hi)?),
        ["gaussian", m, v] => {
            DistributionSpec::Gaussian(gmmd_core::measures::DiagGaussian { mean: vec![num(m)?], var: vec![num(v)?] })
        }
        _ => bail!("--base must be uniform:LO:HI or gaussian:MEAN:VAR"),
    };
    spec.validate()?;
    Ok(spec)
}

fn finish(table: &ResultTable) -> ExitCode {
    for f in &table.failures {
        eprintln!("failed cell: {f}");
    }
    if table.succeeded() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Dist { class, x, y, shape, seed, witness } => {
            let (x, y) = (load_measure(&x)?, load_measure(&y)?);
            let class = dist_class(class, &shape, x.dim())?;
            let res = gmmd(&class, &x, &y, &OptimizerConfig::default().with_seed(RngSeed::new(seed)))?;
            println!("{},{}", res.value, res.kind.tag());
            if witness {
                match &res.witness {
                    Some(Witness::Neuron(p)) => println!("{}", serde_json::to_string(p)?),
                    Some(Witness::Flow(rep)) => println!("{}", rep.to_json()?),
                    None => println!("null"),
                }
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Biaspot { base, target_neurons, n, reps, seed, out, threads: t } => {
            let text = std::fs::read_to_string(&target_neurons).with_context(|| format!("reading {}", target_neurons.display()))?;
            let target: Vec<TargetNeuron> = serde_json::from_str(&text).context("parsing target neurons")?;
            let mut cfg = ExperimentConfig::new(ExperimentKind::Biaspot, vec![n]);
            cfg.reps = reps;
            cfg.seed = seed;
            cfg.biaspot.base = parse_base(&base)?;
            cfg.biaspot.target = target;
            let table = run_experiment_with_threads(&cfg, threads(t))?;
            table.emit(Format::Csv, &out)?;
            Ok(finish(&table))
        }
        Command::Mfg { config, nsweep, reps, seed, out, threads: t } => {
            let text = std::fs::read_to_string(&config).with_context(|| format!("reading {}", config.display()))?;
            let mut raw: toml::Table = toml::from_str(&text)?;
            let steps = match raw.remove("steps") {
                Some(v) => v.as_integer().context("steps must be an integer")? as usize,
                None => 100,
            };
            let game: LqGameParams = raw.try_into().context("parsing game parameters")?;
            let mut cfg = ExperimentConfig::new(ExperimentKind::MfgGap, nsweep);
            cfg.reps = reps;
            cfg.seed = seed;
            cfg.mfg.game = game;
            cfg.mfg.steps = steps;
            let table = run_experiment_with_threads(&cfg, threads(t))?;
            table.emit(Format::Csv, &out)?;
            Ok(finish(&table))
        }
        Command::Run { config, out, threads: t } => {
            let cfg = ExperimentConfig::load(&config).with_context(|| format!("loading {}", config.display()))?;
            let dir = out.or_else(|| cfg.output.clone()).unwrap_or_else(|| PathBuf::from("."));
            let table = run_experiment_with_threads(&cfg, threads(t))?;
            let (csv, svg) = write_outputs(&table, &dir)?;
            println!("{}", csv.display());
            println!("{}", svg.display());
            for (label, f) in &table.fits {
                println!("fit {label}: slope {:.4} +- {:.4}, r2 {:.4}", f.slope, f.slope_se, f.r2);
            }
            Ok(finish(&table))
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
