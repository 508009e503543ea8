//! Command-line driver: exact-solve flows, min-max training, general
//! functional flows, runtime verification, and plot-data extraction.
//!
//! Exit codes: 0 success, 1 configuration error, 2 numerical abort,
//! 3 verification failure.

mod config;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use config::ExperimentConfig;
use paramflow::generator::LatentSampler;
use paramflow::io;
use paramflow::operators;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "paramflow",
    about = "Parametric kernelized gradient flows for MMD GANs"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the exact-solve gradient flow described by a config file.
    Flow {
        #[arg(long)]
        config: PathBuf,
        /// Output directory (overrides the config).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Override every seed-bearing block's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Dump the initial operator matrix and spectrum as CSV.
        #[arg(long)]
        dump_operator: Option<PathBuf>,
        /// Snapshot cadence (overrides the config).
        #[arg(long)]
        snapshot_every: Option<usize>,
        /// Record real wallclock times (breaks byte-identical reruns).
        #[arg(long)]
        timings: bool,
    },
    /// Run the min-max training loop described by a config file.
    Gan {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Estimate the gradient penalty with two independent half-batches.
        #[arg(long)]
        split_batch: bool,
        #[arg(long)]
        snapshot_every: Option<usize>,
        #[arg(long)]
        timings: bool,
    },
    /// Run the gradient flow of a general functional.
    Functional {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run the property suites (a module name or `all`).
    Verify {
        #[arg(default_value = "all")]
        suite: String,
    },
    /// Extract plot-ready loss curves and scatter snapshots from a
    /// trajectory.
    PlotData {
        trajectory: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Maximum points in the downsampled loss curve.
        #[arg(long, default_value_t = 1000)]
        max_points: usize,
        /// Samples per scatter file.
        #[arg(long, default_value_t = 512)]
        scatter_samples: usize,
    },
}

fn main() -> ExitCode {
    let threads = std::env::var("PARAMFLOW_THREADS")
        .ok()
        .and_then(|s| s.parse::<usize>().ok());
    paramflow::configure_threads(threads);
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Flow {
            config,
            out,
            seed,
            dump_operator,
            snapshot_every,
            timings,
        } => cmd_flow(&config, out, seed, dump_operator, snapshot_every, timings),
        Command::Gan {
            config,
            out,
            seed,
            split_batch,
            snapshot_every,
            timings,
        } => cmd_gan(&config, out, seed, split_batch, snapshot_every, timings),
        Command::Functional { config, out, seed } => cmd_functional(&config, out, seed),
        Command::Verify { suite } => cmd_verify(&suite),
        Command::PlotData {
            trajectory,
            out,
            max_points,
            scatter_samples,
        } => cmd_plot_data(&trajectory, &out, max_points, scatter_samples),
    }
}

fn output_dir(cfg: &ExperimentConfig, out: Option<PathBuf>) -> Result<PathBuf> {
    let dir = out
        .or_else(|| cfg.output_dir.as_ref().map(PathBuf::from))
        .context("no output directory: pass --out or set output_dir in the config")?;
    std::fs::create_dir_all(&dir)
        .with_context(|| format!("cannot create output directory {}", dir.display()))?;
    Ok(dir)
}

/// Apply a `--seed` override to every seed-bearing field.
fn override_seeds(cfg: &mut ExperimentConfig, seed: Option<u64>) {
    let Some(s) = seed else { return };
    cfg.seed = s;
    cfg.feature_map.seed = s ^ 0x5eed_0001;
    cfg.generator.init_seed = s ^ 0x5eed_0002;
    match &mut cfg.target {
        config::TargetConfig::EightGaussians { seed, .. } => *seed = s ^ 0x5eed_0003,
        config::TargetConfig::Mixture { seed, .. } => *seed = s ^ 0x5eed_0003,
    }
    if let Some(flow) = cfg.flow.as_mut() {
        flow.seed = s ^ 0x5eed_0004;
    }
    if let Some(gan) = cfg.gan.as_mut() {
        gan.seed = s ^ 0x5eed_0005;
    }
}

fn write_run_config(dir: &Path, cfg: &ExperimentConfig) -> Result<()> {
    let json = serde_json::to_string_pretty(cfg)?;
    io::atomic_write(&dir.join("run_config.json"), json.as_bytes())?;
    Ok(())
}

fn write_snapshots(
    dir: &Path,
    gen: &paramflow::generator::Generator,
    snaps: &[(usize, ndarray::Array1<f64>)],
    final_iter: usize,
    final_theta: &ndarray::Array1<f64>,
    seed: u64,
) -> Result<()> {
    for (iter, theta) in snaps {
        let snap = io::GeneratorSnapshot::new(gen, theta, seed, *iter);
        let json = serde_json::to_string(&snap)?;
        io::atomic_write(
            &dir.join(format!("snapshot_{iter:08}.json")),
            json.as_bytes(),
        )?;
    }
    let fin = io::GeneratorSnapshot::new(gen, final_theta, seed, final_iter);
    let json = serde_json::to_string(&fin)?;
    io::atomic_write(&dir.join("snapshot_final.json"), json.as_bytes())?;
    Ok(())
}

fn cmd_flow(
    config_path: &Path,
    out: Option<PathBuf>,
    seed: Option<u64>,
    dump_operator: Option<PathBuf>,
    snapshot_every: Option<usize>,
    timings: bool,
) -> Result<ExitCode> {
    let mut cfg = ExperimentConfig::load(config_path)?;
    override_seeds(&mut cfg, seed);
    let mut flow_cfg = cfg.flow.clone().context("flow mode needs a 'flow' block")?;
    if let Some(k) = snapshot_every {
        flow_cfg.snapshot_every = k;
    }
    flow_cfg.timings |= timings;
    let map = cfg.feature_map.build()?;
    let gen = cfg.generator.build()?;
    let target = cfg.target.build()?;
    let theta0 = gen.init_theta(cfg.generator.init_seed);
    let target_batch = target
        .sampler_with_seed(cfg.target.seed())
        .sample(flow_cfg.target_batch)?;

    let dir = output_dir(&cfg, out)?;
    let mut resolved = cfg.clone();
    resolved.flow = Some(flow_cfg.clone());
    write_run_config(&dir, &resolved)?;

    if let Some(dump) = &dump_operator {
        let mut sampler = LatentSampler::new(gen.latent_dim(), flow_cfg.seed)?;
        let latents = sampler.sample(flow_cfg.latent_batch)?;
        let a = operators::assemble(&map, &gen, &theta0.view(), &latents.view())?;
        let spec = a.spectrum()?;
        io::atomic_write(dump, io::operator_csv(&a, Some(&spec)).as_bytes())?;
    }

    let traj =
        paramflow::flow::run_flow(&map, &gen, &theta0.view(), &target_batch.view(), &flow_cfg)?;
    io::atomic_write(&dir.join("trajectory.csv"), io::flow_csv(&traj).as_bytes())?;
    write_snapshots(
        &dir,
        &gen,
        &traj.snapshots,
        traj.rows.last().map(|r| r.iter).unwrap_or(0),
        &traj.final_theta,
        cfg.generator.init_seed,
    )?;
    if let Some(msg) = &traj.aborted {
        eprintln!("aborted: {msg}");
        return Ok(ExitCode::from(2));
    }
    println!(
        "flow finished: {} iterations, final F {}",
        traj.rows.len(),
        traj.rows.last().map(|r| r.f_value).unwrap_or(f64::NAN)
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_gan(
    config_path: &Path,
    out: Option<PathBuf>,
    seed: Option<u64>,
    split_batch: bool,
    snapshot_every: Option<usize>,
    timings: bool,
) -> Result<ExitCode> {
    let mut cfg = ExperimentConfig::load(config_path)?;
    override_seeds(&mut cfg, seed);
    let mut gan_cfg = cfg.gan.clone().context("gan mode needs a 'gan' block")?;
    gan_cfg.split_batch |= split_batch;
    if let Some(k) = snapshot_every {
        gan_cfg.snapshot_every = k;
    }
    gan_cfg.timings |= timings;
    gan_cfg.validate()?;
    let map = cfg.feature_map.build()?;
    let gen = cfg.generator.build()?;
    let target = cfg.target.build()?;
    let theta0 = gen.init_theta(cfg.generator.init_seed);

    let dir = output_dir(&cfg, out)?;
    let mut resolved = cfg.clone();
    resolved.gan = Some(gan_cfg.clone());
    write_run_config(&dir, &resolved)?;

    let log = paramflow::trainer::train(&map, &gen, &theta0.view(), &target, &gan_cfg)?;
    io::atomic_write(&dir.join("trajectory.csv"), io::gan_csv(&log).as_bytes())?;
    write_snapshots(
        &dir,
        &gen,
        &log.snapshots,
        log.rows.last().map(|r| r.iter).unwrap_or(0),
        &log.final_theta,
        cfg.generator.init_seed,
    )?;
    if let Some(msg) = &log.aborted {
        eprintln!("aborted: {msg}");
        return Ok(ExitCode::from(2));
    }
    println!(
        "training finished: {} iterations, final mmd {}",
        log.rows.len(),
        log.rows.last().map(|r| r.mmd).unwrap_or(f64::NAN)
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_functional(config_path: &Path, out: Option<PathBuf>, seed: Option<u64>) -> Result<ExitCode> {
    let mut cfg = ExperimentConfig::load(config_path)?;
    override_seeds(&mut cfg, seed);
    let flow_cfg = cfg
        .flow
        .clone()
        .context("functional mode needs a 'flow' block")?;
    let func_cfg = cfg
        .functional
        .clone()
        .context("functional mode needs a 'functional' block")?;
    let map = cfg.feature_map.build()?;
    let gen = cfg.generator.build()?;
    let target = cfg.target.build()?;
    let theta0 = gen.init_theta(cfg.generator.init_seed);
    let fspec = func_cfg.build(&map, &target, cfg.target.seed())?;

    let dir = output_dir(&cfg, out)?;
    write_run_config(&dir, &cfg)?;

    let traj = paramflow::flow::run_functional_flow(&map, &gen, &theta0.view(), &fspec, &flow_cfg)?;
    io::atomic_write(&dir.join("trajectory.csv"), io::flow_csv(&traj).as_bytes())?;
    write_snapshots(
        &dir,
        &gen,
        &traj.snapshots,
        traj.rows.last().map(|r| r.iter).unwrap_or(0),
        &traj.final_theta,
        cfg.generator.init_seed,
    )?;
    if let Some(msg) = &traj.aborted {
        eprintln!("aborted: {msg}");
        return Ok(ExitCode::from(2));
    }
    println!(
        "functional flow finished: {} iterations, final value {}",
        traj.rows.len(),
        traj.rows.last().map(|r| r.f_value).unwrap_or(f64::NAN)
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_verify(suite: &str) -> Result<ExitCode> {
    let suites = if suite == "all" {
        paramflow::verify::run_all()
    } else {
        vec![paramflow::verify::run_suite(suite)?]
    };
    print!("{}", paramflow::verify::render_table(&suites));
    if suites.iter().all(|s| s.passed()) {
        Ok(ExitCode::SUCCESS)
    } else {
        Ok(ExitCode::from(3))
    }
}

fn cmd_plot_data(
    trajectory: &Path,
    out: &Path,
    max_points: usize,
    scatter_samples: usize,
) -> Result<ExitCode> {
    let text = std::fs::read_to_string(trajectory)
        .with_context(|| format!("cannot read trajectory {}", trajectory.display()))?;
    let rows = io::parse_loss_curve(&text)?;
    std::fs::create_dir_all(out)?;
    let ds = io::downsample(&rows, max_points);
    io::atomic_write(
        &out.join("loss_curve.csv"),
        io::loss_curve_csv(&ds).as_bytes(),
    )?;

    // scatters need the run config and snapshots next to the trajectory
    let run_dir = trajectory.parent().unwrap_or(Path::new("."));
    let cfg_path = run_dir.join("run_config.json");
    if !cfg_path.exists() {
        println!("note: no run_config.json next to the trajectory; loss curve only");
        return Ok(ExitCode::SUCCESS);
    }
    let cfg: ExperimentConfig = serde_json::from_str(&std::fs::read_to_string(&cfg_path)?)
        .with_context(|| format!("cannot parse {}", cfg_path.display()))?;
    if cfg.generator.output_dim != 2 {
        println!("note: generator output is not 2-D; scatter emission skipped");
        return Ok(ExitCode::SUCCESS);
    }
    let target = cfg.target.build()?;
    let target_batch = target
        .sampler_with_seed(cfg.seed ^ 0x5ca7_7e21)
        .sample(scatter_samples)?;
    let mut emitted = 0;
    let mut entries: Vec<std::path::PathBuf> = std::fs::read_dir(run_dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .map(|n| n.starts_with("snapshot_") && n.ends_with(".json"))
                .unwrap_or(false)
        })
        .collect();
    entries.sort();
    for path in entries {
        let snap: io::GeneratorSnapshot = serde_json::from_str(&std::fs::read_to_string(&path)?)
            .with_context(|| format!("cannot parse snapshot {}", path.display()))?;
        let (gen, theta) = snap.restore()?;
        let mut latent = LatentSampler::new(gen.latent_dim(), cfg.seed ^ 0x5ca7_7e22)?;
        let z = latent.sample(scatter_samples)?;
        let (x, _) = gen.forward_batch(&theta.view(), &z.view())?;
        let csv = io::scatter_csv(&target_batch, &x);
        io::atomic_write(
            &out.join(format!("scatter_{:08}.csv", snap.iter)),
            csv.as_bytes(),
        )?;
        emitted += 1;
    }
    println!(
        "plot data written: {} loss points, {emitted} scatter files",
        ds.len()
    );
    Ok(ExitCode::SUCCESS)
}
