//! `dgtd` batch driver.

mod config;

use clap::{Parser, Subcommand};
use config::{parse_floats, parse_range, parse_usize, ConfigError, Initial, RawConfig, RunConfig, TimeStep};
use dgtd::analysis::{
    cavity_mode_state, p_convergence_study, run_time_loop, scaling_benchmark, spurious_mode_scan,
    write_convergence_csv, write_energy_csv, write_scaling_csv, write_spurious_csv, AnalysisError,
};
use dgtd::dg::{DgConfig, DgError, SemiDiscreteSystem};
use dgtd::relations::verify_printed_relations;
use dgtd::timestep::{estimate_spectral_radius, State};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use thiserror::Error;

#[derive(Parser)]
#[command(name = "dgtd", version, about = "DG time-domain Maxwell solver driver")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Clone)]
struct Common {
    /// Flat `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (default `out`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seed for every random choice; overrides the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; 1 disables parallelism.
    #[arg(long)]
    threads: Option<usize>,
    /// Extra `key=value` overrides, applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Time-domain run; writes energy.csv and summary.txt.
    Run(Common),
    /// Resonance convergence study; writes convergence.csv (and spurious.csv).
    Eigs(Common),
    /// Sweep versus dense derivative timing; writes scaling.csv.
    Bench(Common),
    /// Check the operator relations behind the kernels; writes relations.csv.
    VerifyRelations(Common),
}

#[derive(Debug, Error)]
enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("setup: {0}")]
    Dg(#[from] DgError),
    #[error("analysis: {0}")]
    Analysis(#[from] AnalysisError),
    #[error("output: {0}")]
    Io(#[from] std::io::Error),
    #[error("run: energy exceeded 1e6 times its initial value at step {0}")]
    Unstable(usize),
    #[error("verify-relations: {0} relation(s) failed")]
    RelationsFailed(usize),
    #[error("threads: {0}")]
    Threads(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Unstable(_) => 3,
            _ => 1,
        }
    }
}

struct Context {
    raw: RawConfig,
    out: PathBuf,
    seed: u64,
}

fn prepare(common: &Common) -> Result<Context, CliError> {
    let mut raw = match &common.config {
        Some(p) => RawConfig::load(p)?,
        None => RawConfig::default(),
    };
    for pair in &common.set {
        raw.set_pair(pair)?;
    }
    if let Some(seed) = common.seed {
        raw.set("seed", &seed.to_string())?;
    }
    let seed = parse_usize(&raw, "seed", 0)? as u64;
    let threads = match common.threads {
        Some(t) => t,
        None => parse_usize(&raw, "threads", 0)?,
    };
    if threads > 0 {
        // a second call in the same process fails harmlessly
        let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
    }
    let out = common
        .out
        .clone()
        .or_else(|| raw.get("out").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"));
    std::fs::create_dir_all(&out)?;
    Ok(Context { raw, out, seed })
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>, CliError> {
    Ok(BufWriter::new(File::create(dir.join(name))?))
}

fn build_system(cfg: &RunConfig) -> Result<SemiDiscreteSystem, CliError> {
    let mesh = cfg.mesh.build()?;
    let dg = DgConfig {
        k: cfg.k,
        alpha: cfg.alpha_value(),
        h_mode: cfg.h_mode,
        epsilon: cfg.epsilon.clone(),
        mu: cfg.mu.clone(),
    };
    Ok(SemiDiscreteSystem::new(mesh, dg)?)
}

fn cmd_run(ctx: &Context) -> Result<(), CliError> {
    let cfg = RunConfig::from_raw(&ctx.raw)?;
    let system = build_system(&cfg)?;
    let estimate = estimate_spectral_radius(&system, cfg.power_iterations, ctx.seed);
    let dt = match cfg.dt {
        TimeStep::Fixed(d) => d,
        TimeStep::Auto(f) => {
            if !estimate.dt_max.is_finite() {
                return Err(ConfigError::Key { key: "dt".into(), msg: "stability bound is unbounded; give dt explicitly".into() }.into());
            }
            f * estimate.dt_max
        }
    };
    let initial = match cfg.initial {
        Initial::Zero => State::zeros(&system),
        Initial::Mode(m, n) => cavity_mode_state(&system, m, n),
    };
    let result = run_time_loop(&system, initial, cfg.scheme, dt, cfg.steps);
    let mut w = create(&ctx.out, "energy.csv")?;
    write_energy_csv(&mut w, ctx.seed, &result.history)?;
    w.flush()?;

    let last = result.history.last().expect("history holds the initial sample");
    let mut s = create(&ctx.out, "summary.txt")?;
    writeln!(s, "seed = {}", ctx.seed)?;
    writeln!(s, "elements = {}", system.mesh().num_elements())?;
    writeln!(s, "unknowns = {}", system.len_total())?;
    writeln!(s, "rho = {:.12e}", estimate.rho)?;
    writeln!(s, "dt_max = {:.12e}", estimate.dt_max)?;
    writeln!(s, "dt = {dt:.12e}")?;
    writeln!(s, "steps_completed = {}", last.step)?;
    writeln!(s, "t_final = {:.12e}", last.t)?;
    writeln!(s, "energy_initial = {:.12e}", result.history[0].energy)?;
    writeln!(s, "energy_final = {:.12e}", last.energy)?;
    writeln!(s, "stable = {}", result.blew_up_at.is_none())?;
    s.flush()?;
    match result.blew_up_at {
        Some(step) => Err(CliError::Unstable(step)),
        None => Ok(()),
    }
}

fn cmd_eigs(ctx: &Context) -> Result<(), CliError> {
    let cfg = RunConfig::from_raw(&ctx.raw)?;
    let mesh = cfg.mesh.build()?;
    let degrees = parse_range(&ctx.raw, "degrees", &[cfg.k + 1])?;
    if degrees.contains(&0) {
        return Err(ConfigError::Key { key: "degrees".into(), msg: "degrees start at 1".into() }.into());
    }
    let modes = parse_usize(&ctx.raw, "modes", 4)?;
    let records = p_convergence_study(&mesh, &degrees, modes)?;
    let mut w = create(&ctx.out, "convergence.csv")?;
    write_convergence_csv(&mut w, ctx.seed, &records)?;
    w.flush()?;
    if ctx.raw.get("spurious_alphas").is_some() {
        let alphas = parse_floats(&ctx.raw, "spurious_alphas", &[])?;
        let band = 0.5 * (std::f64::consts::PI * 2f64.sqrt()).powi(2);
        let rows = spurious_mode_scan(
            |alpha| {
                SemiDiscreteSystem::new(
                    mesh.clone(),
                    DgConfig { alpha, h_mode: cfg.h_mode, ..DgConfig::new(cfg.k) },
                )
            },
            &alphas,
            band,
        )?;
        let mut w = create(&ctx.out, "spurious.csv")?;
        write_spurious_csv(&mut w, ctx.seed, &rows)?;
        w.flush()?;
    }
    Ok(())
}

fn cmd_bench(ctx: &Context) -> Result<(), CliError> {
    let degrees = parse_range(&ctx.raw, "degrees", &[8, 12, 16, 20, 24, 28, 32])?;
    let reps = parse_usize(&ctx.raw, "repetitions", 11)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .map_err(|e| CliError::Threads(e.to_string()))?;
    let rows = pool.install(|| scaling_benchmark(&degrees, reps, ctx.seed))?;
    let mut w = create(&ctx.out, "scaling.csv")?;
    write_scaling_csv(&mut w, ctx.seed, &rows)?;
    w.flush()?;
    Ok(())
}

fn cmd_verify(ctx: &Context) -> Result<(), CliError> {
    let report = verify_printed_relations();
    print!("{}", report.to_text());
    let mut w = create(&ctx.out, "relations.csv")?;
    write!(w, "{}", report.to_csv())?;
    w.flush()?;
    let failed = report.rows.iter().filter(|r| !r.passed).count();
    if failed > 0 {
        return Err(CliError::RelationsFailed(failed));
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (common, run): (&Common, fn(&Context) -> Result<(), CliError>) = match &cli.command {
        Command::Run(c) => (c, cmd_run),
        Command::Eigs(c) => (c, cmd_eigs),
        Command::Bench(c) => (c, cmd_bench),
        Command::VerifyRelations(c) => (c, cmd_verify),
    };
    match prepare(common).and_then(|ctx| run(&ctx)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
