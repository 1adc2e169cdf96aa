//! Command-line front end.
//!
//! Settings come from an optional TOML file (`--config`) and flags override
//! them. `fit` writes a self-contained directory that `predict` and `map`
//! read back, so those commands need no dataset argument.

use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};
use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::basis::{make_knots, SplineBasis};
use crate::config::RunConfig;
use crate::data::{Dataset, PixelGrid, INPUT_DIM};
use crate::error::{Error, Result};
use crate::evaluate::cv::{cv1, cv2, CvReport};
use crate::evaluate::synthetic::{generate_synthetic, SyntheticSpec};
use crate::fit::{build_model, fit_model};
use crate::io::{self, OutputDir};
use crate::numeric::fmt17;
use crate::predict::Predictor;
use crate::sampler::LogDensity;

#[derive(Debug, Parser)]
#[command(
    name = "gpspline",
    version,
    about = "Shape-constrained spline time series with Gaussian-process priors"
)]
pub struct Cli {
    /// TOML run configuration; flags take precedence.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Worker threads for chains, folds and pixel blocks (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    pub threads: usize,
    /// Increase log verbosity (-v info, -vv debug, -vvv trace).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sample the posterior and write a fit directory.
    Fit(FitArgs),
    /// Predict the full series at one location.
    Predict(PredictArgs),
    /// Posterior-mean fading maps over a pixel grid.
    Map(MapArgs),
    /// Exact leave-out cross-validation.
    Cv(CvArgs),
    /// Draw a synthetic dataset from the model.
    Simulate(SimulateArgs),
    /// Inspect the spline basis.
    Basis {
        #[command(subcommand)]
        command: BasisCommand,
    },
}

#[derive(Debug, Args, Default)]
pub struct SamplerFlags {
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub chains: Option<usize>,
    #[arg(long)]
    pub warmup: Option<usize>,
    #[arg(long)]
    pub samples: Option<usize>,
    /// Drop the derivative-sign observations (unconstrained shape).
    #[arg(long)]
    pub no_derivatives: bool,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub sampler: SamplerFlags,
    /// Overwrite existing output and accept unconverged chains.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    /// Directory written by `fit`.
    #[arg(long)]
    pub fit: PathBuf,
    /// Predict at an observed location.
    #[arg(long, conflicts_with = "x", required_unless_present = "x")]
    pub id: Option<String>,
    /// Raw inputs `H,S,I,Sx,Sy` of a new location.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub x: Option<Vec<f64>>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overwrite existing output and skip the convergence gate.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct MapArgs {
    #[arg(long)]
    pub fit: PathBuf,
    /// CSV with columns `px,py,H,S,I`.
    #[arg(long)]
    pub grid: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SchemeArg {
    Cv1,
    Cv2,
}

#[derive(Debug, Args)]
pub struct CvArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum)]
    pub scheme: SchemeArg,
    #[command(flatten)]
    pub sampler: SamplerFlags,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Number of locations.
    #[arg(long, default_value_t = 13)]
    pub n: usize,
    #[arg(long)]
    pub out: PathBuf,
    /// Generating parameters and latent curves; defaults to `<out>.truth.json`.
    #[arg(long)]
    pub truth: Option<PathBuf>,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Subcommand)]
pub enum BasisCommand {
    /// Write H, Z, Ω, Ω^{-1/2}, W and dW as CSV files.
    Dump(DumpArgs),
}

#[derive(Debug, Args)]
pub struct DumpArgs {
    /// Comma-separated observation times.
    #[arg(
        long,
        value_delimiter = ',',
        conflicts_with = "data",
        required_unless_present = "data"
    )]
    pub times: Option<Vec<f64>>,
    /// Take the times from a dataset.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub knots: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub force: bool,
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return Ok(());
        }
        Err(e) => return Err(Error::Config(e.to_string().trim_end().to_string())),
    };
    init_logging(cli.verbose);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build()
        .map_err(|e| Error::Config(format!("cannot start thread pool: {e}")))?;
    pool.install(|| dispatch(&cli))
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        2 => log::LevelFilter::Debug,
        _ => log::LevelFilter::Trace,
    };
    let _ = env_logger::Builder::new()
        .filter_level(level)
        .parse_default_env()
        .format_timestamp(None)
        .try_init();
}

fn dispatch(cli: &Cli) -> Result<()> {
    let base = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    match &cli.command {
        Command::Fit(a) => cmd_fit(base, a),
        Command::Predict(a) => cmd_predict(cli.config.is_some().then_some(base), a),
        Command::Map(a) => cmd_map(cli.config.is_some().then_some(base), a),
        Command::Cv(a) => cmd_cv(base, a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::Basis {
            command: BasisCommand::Dump(a),
        } => cmd_basis_dump(base, a),
    }
}

fn apply_sampler_flags(cfg: &mut RunConfig, f: &SamplerFlags) {
    if let Some(s) = f.seed {
        cfg.sampler.seed = s;
    }
    if let Some(c) = f.chains {
        cfg.sampler.chains = c;
    }
    if let Some(w) = f.warmup {
        cfg.sampler.warmup = w;
    }
    if let Some(s) = f.samples {
        cfg.sampler.samples = s;
    }
    if f.no_derivatives {
        cfg.model = cfg.model.clone().without_derivatives();
    }
}

fn cmd_fit(mut cfg: RunConfig, a: &FitArgs) -> Result<()> {
    apply_sampler_flags(&mut cfg, &a.sampler);
    cfg.model.validate()?;
    cfg.sampler.validate()?;
    io::check_overwrite(&a.out, a.force)?;
    let ds = Dataset::load(&a.data)?;
    let (model, inputs) = build_model(&ds, &cfg.model)?;
    info!(
        "fitting {} locations x {} times, {} parameters",
        ds.n_locations(),
        ds.n_times(),
        model.dim()
    );
    let fit = fit_model(model, inputs, &cfg.sampler)?;
    let dir = io::save_fit(&fit, &ds, &cfg, &a.out, a.force)?;
    println!(
        "wrote {} (max split-Rhat {:.4}, min bulk ESS {:.1})",
        dir.display(),
        fit.diagnostics.max_rhat,
        fit.diagnostics.min_ess_bulk
    );
    match fit.require_convergence() {
        Err(e) if a.force => {
            warn!("{e}; continuing because of --force");
            Ok(())
        }
        other => other,
    }
}

fn cmd_predict(override_cfg: Option<RunConfig>, a: &PredictArgs) -> Result<()> {
    io::check_overwrite(&a.out, a.force)?;
    let loaded = io::load_fit(&a.fit, a.force)?;
    let pcfg = override_cfg.map_or(loaded.cfg.predict.clone(), |c| c.predict);
    let raw: [f64; INPUT_DIM] = match (&a.id, &a.x) {
        (Some(id), _) => {
            let i = loaded.ds.location_index(id).ok_or_else(|| {
                Error::Config(format!("no location with id '{id}' in the fitted data"))
            })?;
            loaded.ds.raw_input(i)
        }
        (None, Some(x)) => x
            .as_slice()
            .try_into()
            .map_err(|_| Error::Config(format!("--x needs {INPUT_DIM} values H,S,I,Sx,Sy")))?,
        (None, None) => return Err(Error::Config("pass --id or --x".into())),
    };
    let xstar = loaded.fit.inputs.apply(&raw);
    let predictor = Predictor::new(&loaded.fit.model, &loaded.fit.draws)?;
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed.unwrap_or(loaded.cfg.sampler.seed));
    let series = predictor.predict_location(&xstar, &pcfg, &mut rng)?;
    io::write_atomic(&a.out, true, |mut w| {
        series.write_csv(&loaded.ds.times, &mut w)
    })?;
    println!(
        "wrote {} ({} of {} draws retained)",
        a.out.display(),
        series.n_retained(),
        predictor.n_draws()
    );
    Ok(())
}

fn cmd_map(override_cfg: Option<RunConfig>, a: &MapArgs) -> Result<()> {
    let loaded = io::load_fit(&a.fit, a.force)?;
    let pcfg = override_cfg.map_or(loaded.cfg.predict.clone(), |c| c.predict);
    let t_len = loaded.ds.n_times();
    if let Some(&t) = pcfg.map_times.iter().find(|&&t| t == 0 || t > t_len) {
        return Err(Error::Config(format!(
            "map time {t} is outside 1..={t_len}"
        )));
    }
    let grid = PixelGrid::load(&a.grid)?;
    let out = OutputDir::create(&a.out, a.force)?;
    let x_std = loaded.fit.inputs.apply_matrix(&grid.x_raw);
    let predictor = Predictor::new(&loaded.fit.model, &loaded.fit.draws)?;
    let map = predictor.fading_map(&x_std, &grid, &pcfg)?;
    out.write("map.csv", |mut w| map.write_csv(&mut w))?;
    for &t in &pcfg.map_times {
        out.write(&format!("map_t{t}.pgm"), |mut w| {
            map.write_pgm(t - 1, pcfg.gray_max, &mut w)
        })?;
    }
    let dir = out.commit()?;
    println!("wrote {} ({} pixels)", dir.display(), grid.len());
    Ok(())
}

fn cmd_cv(mut cfg: RunConfig, a: &CvArgs) -> Result<()> {
    apply_sampler_flags(&mut cfg, &a.sampler);
    cfg.model.validate()?;
    cfg.sampler.validate()?;
    io::check_overwrite(&a.out, a.force)?;
    let ds = Dataset::load(&a.data)?;
    let report: CvReport = match a.scheme {
        SchemeArg::Cv1 => cv1(&ds, &cfg.model, &cfg.sampler)?,
        SchemeArg::Cv2 => cv2(&ds, &cfg.model, &cfg.sampler, &cfg.predict)?,
    };
    io::write_atomic(&a.out, a.force, |w| {
        w.write_all(report.to_json().as_bytes())
    })?;
    println!(
        "wrote {} ({} folds, {} excluded; ELPD mean {}, MSE {})",
        a.out.display(),
        report.n_folds,
        report.n_excluded,
        fmt17(report.elpd_mean),
        fmt17(report.mse)
    );
    Ok(())
}

fn cmd_simulate(a: &SimulateArgs) -> Result<()> {
    let spec = SyntheticSpec {
        n: a.n,
        seed: a.seed,
        ..Default::default()
    };
    let truth_path = a
        .truth
        .clone()
        .unwrap_or_else(|| a.out.with_extension("truth.json"));
    io::check_overwrite(&a.out, a.force)?;
    io::check_overwrite(&truth_path, a.force)?;
    let (ds, truth) = generate_synthetic(&spec)?;
    io::write_atomic(&a.out, a.force, |mut w| ds.write_to(&mut w))?;
    io::write_atomic(&truth_path, a.force, |w| {
        w.write_all(io::to_json(&truth).as_bytes())
    })?;
    println!(
        "wrote {} ({} locations x {} times) and {}",
        a.out.display(),
        ds.n_locations(),
        ds.n_times(),
        truth_path.display()
    );
    Ok(())
}

fn write_matrix(m: &DMatrix<f64>, w: &mut dyn Write) -> std::io::Result<()> {
    for r in 0..m.nrows() {
        let row: Vec<String> = m.row(r).iter().map(|v| fmt17(*v)).collect();
        writeln!(w, "{}", row.join(","))?;
    }
    Ok(())
}

fn cmd_basis_dump(cfg: RunConfig, a: &DumpArgs) -> Result<()> {
    let times = match (&a.times, &a.data) {
        (Some(t), _) => t.clone(),
        (None, Some(p)) => Dataset::load(p)?.times,
        (None, None) => return Err(Error::Config("pass --times or --data".into())),
    };
    let k = a.knots.unwrap_or(cfg.model.knots);
    let knots = make_knots(&times, k)?;
    let basis = SplineBasis::with_penalty_power(&times, &knots, cfg.model.penalty_power)?;
    let out = OutputDir::create(&a.out, a.force)?;
    for (name, m) in [
        ("H.csv", &basis.h),
        ("Z.csv", &basis.z),
        ("omega.csv", &basis.omega),
        ("omega_inv_sqrt.csv", &basis.omega_inv_sqrt),
        ("W.csv", &basis.w),
        ("dW.csv", &basis.dw),
    ] {
        out.write(name, |w| write_matrix(m, w))?;
    }
    out.write("knots.csv", |w| {
        writeln!(
            w,
            "{}",
            knots
                .iter()
                .map(|v| fmt17(*v))
                .collect::<Vec<_>>()
                .join(",")
        )
    })?;
    let dir = out.commit()?;
    println!("wrote {}", dir.display());
    Ok(())
}
