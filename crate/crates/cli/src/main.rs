//! Command-line driver for the over-the-air federated learning simulator.
//!
//! Subcommands:
//! - `simulate`: run one experiment configuration, optionally replicated
//!   over derived seeds, and write per-replicate metrics.
//! - `compare`: run several configurations and merge their accuracy curves
//!   into one plot-ready CSV.
//! - `bound`: run an experiment with full tracing, estimate (or accept) the
//!   problem constants, and tabulate the convergence bound next to the
//!   measured distance to the optimum.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use otafl::analysis::{
    compute_gamma, contraction, default_distance_bound, estimate_constants, minimize_reference,
    round_error, BoundParams, ConstantsProbe, Sequence,
};
use otafl::config::ExperimentConfig;
use otafl::metrics::{emit_plot_data, export_metrics, ExportFormat, MetricsRecord, MetricsRow};
use otafl::model::Schedule;
use otafl::orchestrator::{prepare_data, run_experiment, run_experiment_full};
use otafl::rng::{stream, subseed};
use serde::Deserialize;

#[derive(Parser)]
#[command(name = "otafl", version, about = "Over-the-air federated learning simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment and export its metrics.
    Simulate(SimulateArgs),
    /// Run several configurations and merge their accuracy curves.
    Compare(CompareArgs),
    /// Evaluate the convergence bound against a measured trajectory.
    Bound(BoundArgs),
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum Format {
    Csv,
    Json,
}

impl Format {
    fn export(self) -> ExportFormat {
        match self {
            Format::Csv => ExportFormat::Csv,
            Format::Json => ExportFormat::Json,
        }
    }

    fn ext(self) -> &'static str {
        match self {
            Format::Csv => "csv",
            Format::Json => "json",
        }
    }
}

#[derive(Args)]
struct SimulateArgs {
    /// Experiment configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Override the configuration's master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Replicates to run; each derives its own seed from the master seed.
    #[arg(long, default_value_t = 1)]
    seeds: usize,
    /// Output directory (created if missing).
    #[arg(long, default_value = ".")]
    out: PathBuf,
    /// Metrics file format.
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    format: Format,
}

#[derive(Args)]
struct CompareArgs {
    /// Experiment configurations to run side by side (labels come from the
    /// file stems).
    #[arg(long, num_args = 1.., required = true)]
    configs: Vec<PathBuf>,
    /// Replicates per configuration; curves are averaged across them.
    #[arg(long, default_value_t = 1)]
    seeds: usize,
    /// Output directory (created if missing).
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Args)]
struct BoundArgs {
    /// Experiment configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Override the configuration's master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// JSON file overriding estimated constants (mu, smoothness,
    /// grad_bound2, gamma, c, epsilon, probe_rounds).
    #[arg(long)]
    params: Option<PathBuf>,
    /// Output directory (created if missing).
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

/// Constant overrides for `bound`; anything left out is estimated from the
/// experiment's own data.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct BoundOverrides {
    mu: Option<f64>,
    smoothness: Option<f64>,
    grad_bound2: Option<f64>,
    gamma: Option<f64>,
    c: Option<f64>,
    /// Constant scheduling error; by default the measured per-round values
    /// are used.
    epsilon: Option<f64>,
    probe_rounds: Option<usize>,
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate(args) => simulate(args),
        Command::Compare(args) => compare(args),
        Command::Bound(args) => bound(args),
    };
    if let Err(err) = result {
        eprintln!("error: {err:#}");
        std::process::exit(1);
    }
}

fn load_config(path: &Path, seed: Option<u64>) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::from_path(path)
        .with_context(|| format!("loading experiment config {}", path.display()))?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

/// Runs `seeds` replicates of `cfg`; replicate 0 keeps the master seed, later
/// ones derive theirs from it.
fn run_replicates(cfg: &ExperimentConfig, seeds: usize) -> Result<Vec<(u64, MetricsRecord)>> {
    if seeds == 0 {
        bail!("--seeds must be at least 1");
    }
    let master = cfg.seed;
    let mut out = Vec::with_capacity(seeds);
    for r in 0..seeds {
        let mut c = cfg.clone();
        c.seed =
            if r == 0 { master } else { subseed(master, &[stream::REPLICATE, r as u64]) };
        let record = run_experiment(&c).with_context(|| format!("running replicate {r}"))?;
        out.push((c.seed, record));
    }
    Ok(out)
}

fn final_accuracy(record: &MetricsRecord) -> f64 {
    record.rows.last().map_or(f64::NAN, |r| r.test_accuracy)
}

/// Pointwise mean across replicate records sharing one evaluation grid.
/// Integer columns are rounded to the nearest count.
fn mean_record(records: &[&MetricsRecord]) -> Result<MetricsRecord> {
    let first = records.first().context("no records to average")?;
    let n = records.len() as f64;
    let mut rows = Vec::with_capacity(first.rows.len());
    for i in 0..first.rows.len() {
        let base = &first.rows[i];
        let mut scheduled = 0.0;
        let mut accuracy = 0.0;
        let mut loss = 0.0;
        let mut epsilon = 0.0;
        let mut battery = 0.0;
        for rec in records {
            let row = rec.rows.get(i).context("replicates disagree on evaluation grid")?;
            if row.t != base.t {
                bail!("replicates disagree on evaluation grid");
            }
            scheduled += row.num_scheduled as f64;
            accuracy += row.test_accuracy;
            loss += row.test_loss;
            epsilon += row.epsilon;
            battery += row.battery_full_count as f64;
        }
        rows.push(MetricsRow {
            t: base.t,
            num_scheduled: (scheduled / n).round() as usize,
            test_accuracy: accuracy / n,
            test_loss: loss / n,
            epsilon: epsilon / n,
            battery_full_count: (battery / n).round() as usize,
            phase: base.phase,
        });
    }
    Ok(MetricsRecord { rows })
}

fn simulate(args: SimulateArgs) -> Result<()> {
    let cfg = load_config(&args.config, args.seed)?;
    fs::create_dir_all(&args.out)
        .with_context(|| format!("creating output directory {}", args.out.display()))?;

    let replicates = run_replicates(&cfg, args.seeds)?;
    for (i, (seed, record)) in replicates.iter().enumerate() {
        let path = args.out.join(format!("metrics_seed{}.{}", seed, args.format.ext()));
        export_metrics(record, &path, args.format.export())?;
        println!(
            "replicate {i} (seed {seed}): final accuracy {:.4}, wrote {}",
            final_accuracy(record),
            path.display()
        );
    }

    if replicates.len() > 1 {
        let records: Vec<&MetricsRecord> = replicates.iter().map(|(_, r)| r).collect();
        let mean = mean_record(&records)?;
        let path = args.out.join(format!("metrics_mean.{}", args.format.ext()));
        export_metrics(&mean, &path, args.format.export())?;
        println!(
            "mean over {} replicates: final accuracy {:.4}, wrote {}",
            replicates.len(),
            final_accuracy(&mean),
            path.display()
        );
    }
    Ok(())
}

fn compare(args: CompareArgs) -> Result<()> {
    if args.configs.len() < 2 {
        bail!("--configs needs at least two configurations to compare");
    }
    fs::create_dir_all(&args.out)
        .with_context(|| format!("creating output directory {}", args.out.display()))?;

    let mut labeled: Vec<(String, MetricsRecord)> = Vec::with_capacity(args.configs.len());
    for path in &args.configs {
        let cfg = load_config(path, None)?;
        let mut label = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "config".to_string());
        if labeled.iter().any(|(l, _)| *l == label) {
            label = format!("{label}_{}", labeled.len());
        }

        let replicates = run_replicates(&cfg, args.seeds)?;
        let records: Vec<&MetricsRecord> = replicates.iter().map(|(_, r)| r).collect();
        let record =
            if records.len() > 1 { mean_record(&records)? } else { replicates[0].1.clone() };
        let out_path = args.out.join(format!("{label}.csv"));
        export_metrics(&record, &out_path, ExportFormat::Csv)?;
        println!("{label}: final accuracy {:.4}, wrote {}", final_accuracy(&record), out_path.display());
        labeled.push((label, record));
    }

    let series: Vec<(String, &MetricsRecord)> =
        labeled.iter().map(|(l, r)| (l.clone(), r)).collect();
    let plot_path = args.out.join("plot_data.csv");
    emit_plot_data(&series, &plot_path)?;
    println!("wrote merged accuracy curves to {}", plot_path.display());
    Ok(())
}

fn bound(args: BoundArgs) -> Result<()> {
    let cfg = load_config(&args.config, args.seed)?;
    fs::create_dir_all(&args.out)
        .with_context(|| format!("creating output directory {}", args.out.display()))?;
    let overrides: BoundOverrides = match &args.params {
        Some(p) => {
            let text = fs::read_to_string(p)
                .with_context(|| format!("reading bound overrides {}", p.display()))?;
            serde_json::from_str(&text)
                .with_context(|| format!("parsing bound overrides {}", p.display()))?
        }
        None => BoundOverrides::default(),
    };

    println!("running traced experiment ({} rounds)...", cfg.rounds);
    let result = run_experiment_full(&cfg, true).context("running traced experiment")?;
    let trace = result.trace.expect("traced run returns a trace");

    let prepared = prepare_data(&cfg)?;
    let spec = prepared.spec;
    let total: f64 = prepared.weights.iter().sum();
    let weights: Vec<f64> = prepared.weights.iter().map(|w| w / total).collect();

    println!("solving the global and per-user reference problems...");
    let user_refs: Vec<&otafl::model::LocalDataset> = prepared.users.iter().collect();
    let global_data = otafl::model::LocalDataset::concat(&user_refs)?;
    let (theta_star, f_star) =
        minimize_reference(&spec, &global_data, 1e-9, 200_000).context("global reference")?;
    let mut local_opts = Vec::with_capacity(prepared.users.len());
    for (m, data) in prepared.users.iter().enumerate() {
        let (_, f_m) = minimize_reference(&spec, data, 1e-9, 200_000)
            .with_context(|| format!("reference problem of user {m}"))?;
        local_opts.push(f_m);
    }
    let gamma = match overrides.gamma {
        Some(g) => g,
        None => compute_gamma(f_star, &local_opts, &weights)?,
    };

    let constants = if overrides.mu.is_some()
        && overrides.smoothness.is_some()
        && overrides.grad_bound2.is_some()
    {
        otafl::analysis::Constants {
            mu: overrides.mu.unwrap(),
            smoothness: overrides.smoothness.unwrap(),
            grad_bound2: overrides.grad_bound2.unwrap(),
        }
    } else {
        println!("estimating problem constants from a probe run...");
        let probe = ConstantsProbe {
            rounds: overrides.probe_rounds.unwrap_or(20),
            tau: cfg.training.tau,
            eta: cfg.training.eta0,
            batch_size: cfg.training.batch_size,
            seed: cfg.seed,
            ..ConstantsProbe::default()
        };
        let mut est = estimate_constants(&spec, &prepared.users, &probe)?;
        if let Some(mu) = overrides.mu {
            est.mu = mu;
        }
        if let Some(l) = overrides.smoothness {
            est.smoothness = l;
        }
        if let Some(g2) = overrides.grad_bound2 {
            est.grad_bound2 = g2;
        }
        est
    };

    let c = match overrides.c {
        Some(c) => c,
        None => default_distance_bound(
            gamma,
            constants.mu,
            constants.grad_bound2,
            cfg.training.tau,
            cfg.training.eta0,
        )
        .context("deriving the distance bound c (pass \"c\" in --params to set it directly)")?,
    };

    // Rounds nobody transmitted contribute no update; the recursion holds the
    // bound flat there and never evaluates the per-round error.
    let empty_rounds = trace.scheduled_sizes.iter().filter(|&&s| s == 0).count();
    if empty_rounds > 0 {
        println!(
            "note: {empty_rounds} of {} rounds had no scheduled users; the bound treats them as idle",
            cfg.rounds
        );
    }
    let sizes: Vec<f64> =
        trace.scheduled_sizes.iter().map(|&s| if s == 0 { 1.0 } else { s as f64 }).collect();
    let epsilon = match overrides.epsilon {
        Some(e) => Sequence::Constant(e),
        None => Sequence::PerRound(trace.epsilons.clone()),
    };
    let params = BoundParams {
        mu: constants.mu,
        smoothness: constants.smoothness,
        grad_bound2: constants.grad_bound2,
        gamma,
        tau: cfg.training.tau,
        eta: cfg.training.schedule(),
        antennas: cfg.channel.antennas,
        half_dim: spec.half_dim(),
        sigma_z2: cfg.channel.sigma_z2,
        sigma_h2: cfg.channel.sigma_h2,
        alpha: Schedule::Constant(cfg.channel.alpha),
        scheduled_size: Sequence::PerRound(if sizes.is_empty() { vec![1.0] } else { sizes }),
        epsilon: if trace.epsilons.is_empty() { Sequence::Constant(0.0) } else { epsilon },
        c,
    };

    let measured: Vec<f64> = trace.models.iter().map(|m| m.dist2(&theta_star)).collect();
    let mut bound_rhs = Vec::with_capacity(measured.len());
    bound_rhs.push(measured[0]);
    for t in 0..cfg.rounds {
        let prev = bound_rhs[t];
        let next = if trace.scheduled_sizes[t] == 0 {
            prev
        } else {
            contraction(t, &params)? * prev + round_error(t, &params)?.total()
        };
        bound_rhs.push(next);
    }

    let path = args.out.join("bound.csv");
    let mut text = String::from("t,measured_dist2,bound_rhs\n");
    for (t, (m, b)) in measured.iter().zip(&bound_rhs).enumerate() {
        text.push_str(&format!("{t},{m},{b}\n"));
    }
    fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;

    let held = measured.iter().zip(&bound_rhs).all(|(m, b)| m <= b);
    let worst =
        measured.iter().zip(&bound_rhs).map(|(m, b)| m / b).fold(f64::NEG_INFINITY, f64::max);
    println!(
        "constants: mu = {}, L = {}, G^2 = {}, Gamma = {}, c = {}",
        constants.mu, constants.smoothness, constants.grad_bound2, gamma, c
    );
    println!("initial distance^2: {}", measured[0]);
    println!(
        "final round {}: measured {}, bound {}",
        cfg.rounds,
        measured.last().unwrap(),
        bound_rhs.last().unwrap()
    );
    if !measured.is_empty() && cfg.rounds > 0 {
        let terms = round_error(cfg.rounds - 1, &params)?;
        println!(
            "final-round error terms: interference {}, noise {}, drift {}, heterogeneity {}, participation^2 {}, participation-cross {}",
            terms.interference,
            terms.noise,
            terms.drift,
            terms.heterogeneity,
            terms.participation_sq,
            terms.participation_cross
        );
    }
    println!(
        "bound {} over all {} checkpoints (worst measured/bound ratio {:.4})",
        if held { "holds" } else { "is violated" },
        measured.len(),
        worst
    );
    println!("wrote {}", path.display());
    Ok(())
}
