use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};
use nalgebra::DVector;
use qcs_core::ep::{EpConfig, Observations};
use qcs_core::harness::experiment::{run_experiment, ExperimentConfig};
use qcs_core::harness::measurement::{load_measurements, MeasurementMeta, ReconstructConfig};
use qcs_core::harness::metrics::{self, ImageDims};
use qcs_core::harness::verify::{self, VerifyReport};
use qcs_core::prior::{AnalyticPrior, GaussianPrior, Prior};
use qcs_core::qmx;
use qcs_core::quantizer::QuantizerConfig;
use qcs_core::sampler::{run_batch, Algorithm, Problem};
use qcs_core::sensing::{EnsembleKind, EnsembleSpec, MeasurementModel};
use qcs_core::QcsError;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const EXIT_CONFIG: u8 = 2;
const EXIT_VERIFY: u8 = 3;

#[derive(Parser)]
#[command(name = "qcs", version, about = "Posterior-sampling reconstruction from quantized measurements")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Draw a sensing matrix and write it as QMX1.
    GenerateMatrix(GenerateArgs),
    /// Quantize noisy measurements of a signal.
    Simulate(SimulateArgs),
    /// Sample the posterior given a matrix and measurements.
    Reconstruct(ReconstructArgs),
    /// Compare a reconstruction with the ground truth.
    Evaluate(EvaluateArgs),
    /// Check a numerical kernel against its reference computation.
    #[command(subcommand)]
    Verify(VerifyCommand),
    /// Run a full experiment from a config file.
    Run(RunArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    RowOrthogonal,
    IllConditioned,
    Correlated,
}

impl From<Kind> for EnsembleKind {
    fn from(k: Kind) -> Self {
        match k {
            Kind::RowOrthogonal => EnsembleKind::RowOrthogonal,
            Kind::IllConditioned => EnsembleKind::IllConditioned,
            Kind::Correlated => EnsembleKind::Correlated,
        }
    }
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long, value_enum)]
    kind: Kind,
    #[arg(long)]
    m: usize,
    #[arg(long)]
    n: usize,
    /// Condition number for ill-conditioned matrices.
    #[arg(long, default_value_t = 1.0)]
    kappa: f64,
    /// Toeplitz correlation for correlated matrices.
    #[arg(long, default_value_t = 0.0)]
    rho: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    matrix: PathBuf,
    /// Signal to measure; drawn from N(0, I) when absent.
    #[arg(long)]
    x: Option<PathBuf>,
    /// Where to store a drawn signal.
    #[arg(long)]
    x_out: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    bits: u32,
    /// Quantizer half-range; derived from the clean measurements when absent.
    #[arg(long)]
    saturation: Option<f64>,
    #[arg(long, default_value_t = 3.0)]
    saturation_sigma_mult: f64,
    #[arg(long, default_value_t = 0.0)]
    noise_std: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(short, long)]
    out: PathBuf,
    /// Also write the clean measurements `Ax`.
    #[arg(long)]
    z_out: Option<PathBuf>,
}

#[derive(Args)]
struct ReconstructArgs {
    #[arg(long)]
    matrix: PathBuf,
    #[arg(long)]
    y: PathBuf,
    #[arg(long)]
    config: PathBuf,
    #[arg(short, long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1)]
    chains: usize,
    #[arg(long)]
    algo: Option<Algorithm>,
    /// Overrides the sampler seed from the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Per-chain diagnostics as JSON.
    #[arg(long)]
    diagnostics: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    x_hat: PathBuf,
    #[arg(long)]
    x_true: PathBuf,
    #[arg(long, default_value_t = 1.0)]
    data_range: f64,
    /// Channel-first image shape `C H W`; enables SSIM.
    #[arg(long, value_delimiter = ',', num_args = 3)]
    image: Option<Vec<usize>>,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides `output_dir` from the config.
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

#[derive(Subcommand)]
enum VerifyCommand {
    TiltedMoments {
        #[arg(long, default_value_t = 200)]
        cases: usize,
        #[arg(long, default_value_t = 8)]
        m: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        json: bool,
    },
    Ep {
        #[arg(long, default_value_t = 6)]
        m: usize,
        #[arg(long, default_value_t = 6)]
        n: usize,
        #[arg(long, default_value_t = 1)]
        bits: u32,
        #[arg(long, default_value_t = 1.0)]
        kappa: f64,
        #[arg(long, default_value_t = 1_000_000)]
        mc_samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        json: bool,
    },
    Gradients {
        #[arg(long, default_value_t = 50)]
        probes: usize,
        #[arg(long, default_value_t = 8)]
        m: usize,
        #[arg(long, default_value_t = 8)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        json: bool,
    },
    SvdPath {
        #[arg(long, default_value_t = 200)]
        cases: usize,
        #[arg(long, default_value_t = 32)]
        max_dim: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        json: bool,
    },
    Reduction {
        #[arg(long, default_value_t = 10)]
        instances: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        json: bool,
    },
}

enum Failure {
    Error(QcsError),
    Verification,
}

impl From<QcsError> for Failure {
    fn from(e: QcsError) -> Self {
        Failure::Error(e)
    }
}

type CliResult = Result<(), Failure>;

fn exit_code(e: &QcsError) -> u8 {
    match e {
        QcsError::Config(_)
        | QcsError::InvalidArgument(_)
        | QcsError::Json(_)
        | QcsError::Format(_)
        | QcsError::DimensionMismatch { .. }
        | QcsError::UnknownCodeword(_)
        | QcsError::Io(_) => EXIT_CONFIG,
        _ => 1,
    }
}

fn configure_threads() -> Result<(), QcsError> {
    let Ok(value) = std::env::var("QCS_THREADS") else {
        return Ok(());
    };
    let threads: usize = value
        .trim()
        .parse()
        .ok()
        .filter(|&t| t > 0)
        .ok_or_else(|| QcsError::Config(format!("QCS_THREADS must be a positive integer, got '{value}'")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| QcsError::Config(format!("thread pool: {e}")))
}

fn generate(args: GenerateArgs) -> CliResult {
    let spec = EnsembleSpec {
        kind: args.kind.into(),
        m: args.m,
        n: args.n,
        condition_number: args.kappa,
        correlation: args.rho,
        seed: args.seed,
    };
    spec.validate()?;
    let a = qcs_core::sensing::generate_matrix(&spec)?;
    qmx::save_matrix(&args.output, &a)?;
    info!("wrote {}x{} matrix to {}", a.nrows(), a.ncols(), args.output.display());
    Ok(())
}

fn simulate(args: SimulateArgs) -> CliResult {
    let model = MeasurementModel::new(qmx::load_matrix(&args.matrix)?, args.noise_std)?;
    let x = match &args.x {
        Some(path) => qmx::load_vector(path)?,
        None => {
            let prior = GaussianPrior::isotropic(DVector::zeros(model.n()), 1.0)?;
            let x = prior.sample(&mut ChaCha8Rng::seed_from_u64(args.seed));
            if let Some(path) = &args.x_out {
                qmx::save_vector(path, &x)?;
            }
            x
        }
    };
    let config = QuantizerConfig {
        bits: args.bits,
        saturation: args.saturation,
        auto_saturation_sigma_mult: args.saturation_sigma_mult,
    };
    let (quantizer, y, z) = model.simulate_with_config(&config, &x, args.seed)?;
    qmx::save_vector(&args.out, &y)?;
    MeasurementMeta {
        bits: quantizer.bits(),
        saturation: quantizer.saturation(),
        noise_std: args.noise_std,
        m: y.len(),
        seed: args.seed,
    }
    .save(&args.out)?;
    if let Some(path) = &args.z_out {
        qmx::save_vector(path, &z)?;
    }
    Ok(())
}

fn reconstruct(args: ReconstructArgs) -> CliResult {
    if args.chains == 0 {
        return Err(QcsError::Config("--chains must be at least 1".into()).into());
    }
    let cfg = ReconstructConfig::load(&args.config)?;
    let (y, meta) = load_measurements(&args.y)?;
    let (quantizer, noise_std) = cfg.resolve(meta.as_ref())?;
    let model = MeasurementModel::new(qmx::load_matrix(&args.matrix)?, noise_std)?;
    let obs = Observations::new(&quantizer, y.as_slice())?;
    let prior = Prior::build(&cfg.prior)?;
    let mut sampler = cfg.sampler.clone();
    if let Some(algo) = args.algo {
        sampler.algo = algo;
    }
    if let Some(seed) = args.seed {
        sampler.seed = seed;
    }
    let schedule = sampler.schedule.build()?;
    let problem = Problem {
        model: &model,
        obs: &obs,
        prior: prior.as_score(),
    };
    let chains = run_batch(problem, &schedule, &sampler, args.chains);
    let ok: Vec<_> = chains.iter().filter_map(|c| c.as_ref().ok()).collect();
    if ok.is_empty() {
        let first = chains.into_iter().find_map(|c| c.err()).expect("at least one chain ran");
        return Err(first.into());
    }
    if ok.len() < args.chains {
        warn!("{} of {} chains failed", args.chains - ok.len(), args.chains);
    }
    let x_hat = ok.iter().fold(DVector::zeros(model.n()), |acc, c| acc + &c.x_hat) / ok.len() as f64;
    qmx::save_vector(&args.out, &x_hat)?;
    if let Some(path) = &args.diagnostics {
        std::fs::write(path, serde_json::to_string_pretty(&ok).map_err(QcsError::from)?).map_err(QcsError::from)?;
    }
    let clamps: usize = ok.iter().map(|c| c.ep_clamps()).sum();
    info!("averaged {} chains, {clamps} EP clamps", ok.len());
    Ok(())
}

fn evaluate(args: EvaluateArgs) -> CliResult {
    let x_hat = qmx::load_vector(&args.x_hat)?;
    let x_true = qmx::load_vector(&args.x_true)?;
    println!("mse  {:.6e}", metrics::mse(x_hat.as_slice(), x_true.as_slice())?);
    println!("psnr {:.4}", metrics::psnr(x_hat.as_slice(), x_true.as_slice(), args.data_range)?);
    if let Some(shape) = args.image {
        let dims = ImageDims {
            channels: shape[0],
            height: shape[1],
            width: shape[2],
        };
        println!("ssim {:.6}", metrics::ssim(x_hat.as_slice(), x_true.as_slice(), dims, args.data_range)?);
    }
    Ok(())
}

fn report(r: &VerifyReport, json: bool) -> CliResult {
    if json {
        println!("{}", serde_json::to_string_pretty(r).map_err(QcsError::from)?);
    } else {
        print!("{r}");
    }
    if r.passed {
        Ok(())
    } else {
        Err(Failure::Verification)
    }
}

fn verify_cmd(cmd: VerifyCommand) -> CliResult {
    match cmd {
        VerifyCommand::TiltedMoments { cases, m, seed, json } => {
            let moments = verify::tilted_moments(cases, m, seed)?;
            let one_bit = verify::one_bit_path(cases, m, seed)?;
            let a = report(&moments, json);
            let b = report(&one_bit, json);
            a.and(b)
        }
        VerifyCommand::Ep {
            m,
            n,
            bits,
            kappa,
            mc_samples,
            seed,
            json,
        } => {
            if m > qcs_core::harness::oracle::MC_MAX_M {
                return Err(QcsError::Config(format!(
                    "Monte-Carlo oracle supports m <= {}",
                    qcs_core::harness::oracle::MC_MAX_M
                ))
                .into());
            }
            let posterior = verify::ep_posterior(m, n, bits, kappa, mc_samples, seed)?;
            let convergence = verify::ep_convergence(n.max(m), kappa, if kappa > 1.0 { 1e-3 } else { 1e-6 }, 3, &EpConfig::default(), seed)?;
            let a = report(&posterior, json);
            let b = report(&convergence, json);
            a.and(b)
        }
        VerifyCommand::Gradients { probes, m, n, seed, json } => report(&verify::gradients(probes, m, n, seed)?, json),
        VerifyCommand::SvdPath { cases, max_dim, seed, json } => {
            report(&verify::svd_path(cases, max_dim, seed)?, json)
        }
        VerifyCommand::Reduction { instances, seed, json } => report(&verify::reduction(instances, seed)?, json),
    }
}

fn run(args: RunArgs) -> CliResult {
    let mut cfg = ExperimentConfig::load(&args.config)?;
    if let Some(dir) = args.output_dir {
        cfg.output_dir = Some(dir);
    }
    let report = run_experiment(&cfg)?;
    print!("{}", report.table());
    if let Some(dir) = &cfg.output_dir {
        report.write(dir)?;
        info!("report written to {}", Path::new(dir).display());
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Err(e) = configure_threads() {
        eprintln!("error: {e}");
        return ExitCode::from(EXIT_CONFIG);
    }
    let result = match cli.command {
        Command::GenerateMatrix(a) => generate(a),
        Command::Simulate(a) => simulate(a),
        Command::Reconstruct(a) => reconstruct(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Verify(c) => verify_cmd(c),
        Command::Run(a) => run(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Verification) => ExitCode::from(EXIT_VERIFY),
        Err(Failure::Error(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
