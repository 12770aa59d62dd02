use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use edgeml_core::bounds::bound_report;
use edgeml_core::metrics::{write_metrics_csv, write_summary_csv};
use edgeml_core::{parse_config, run_experiment, set_param, ExperimentConfig, MetricsRecord, SummaryRow};

#[derive(Parser, Debug)]
#[command(name = "edgeml", version, about = "Simulate communication-efficient distributed training at the edge")]
struct Cli {
    /// Suppress progress output on stderr.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run one experiment and write its per-round metrics CSV.
    Run(RunArgs),
    /// Run one experiment per value of a numeric config field.
    Sweep(SweepArgs),
    /// Print generalization-error bounds.
    Bounds(BoundsArgs),
}

#[derive(Args, Debug)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Metrics CSV path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[arg(long)]
    config: PathBuf,
    /// Base seed; point `i` runs with `seed + i`.
    #[arg(long)]
    seed: Option<u64>,
    /// Dotted config path, e.g. `protocol.hyper.eta`.
    #[arg(long)]
    param: String,
    #[arg(long, value_delimiter = ',', num_args = 1.., required = true)]
    grid: Vec<f64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct BoundsArgs {
    /// Sample counts, one table row each.
    #[arg(long, value_delimiter = ',', default_value = "100,1000,10000")]
    n: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "0.05")]
    eps: Vec<f64>,
    /// Hypothesis-space size for the finite-H bound.
    #[arg(long, default_value_t = 10.0)]
    hsize: f64,
    #[arg(long, default_value_t = 10.0)]
    vc: f64,
    /// KL(posterior || prior) for the PAC-Bayes bound.
    #[arg(long, default_value_t = 1.0)]
    kl: f64,
    /// Write the table here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run(a) => cmd_run(a, cli.quiet),
        Command::Sweep(a) => cmd_sweep(a, cli.quiet),
        Command::Bounds(a) => cmd_bounds(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn load(path: &Path, seed: Option<u64>) -> Result<ExperimentConfig> {
    let mut cfg = parse_config(path).with_context(|| format!("loading {}", path.display()))?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn write_csv(path: &Path, records: &[MetricsRecord]) -> Result<()> {
    let file = File::create(path).with_context(|| format!("cannot write {}", path.display()))?;
    let mut w = BufWriter::new(file);
    write_metrics_csv(&mut w, records)?;
    w.flush().with_context(|| format!("cannot write {}", path.display()))?;
    Ok(())
}

fn describe(records: &[MetricsRecord]) -> String {
    match records.last() {
        None => "0 rounds".to_string(),
        Some(r) => {
            let acc = r.test_acc.map_or("-".to_string(), |a| format!("{a:.4}"));
            let loss = r.train_loss.map_or("-".to_string(), |l| format!("{l:.4}"));
            format!(
                "{} {} rounds, train loss {loss}, test acc {acc}, {:.3} s simulated, {} bits up",
                r.protocol, r.round, r.sim_time_s, r.cum_bits_up
            )
        }
    }
}

fn cmd_run(a: &RunArgs, quiet: bool) -> Result<()> {
    let cfg = load(&a.config, a.seed)?;
    let records = run_experiment(&cfg)?;
    write_csv(&a.out, &records)?;
    if !quiet {
        eprintln!("{} -> {}", describe(&records), a.out.display());
    }
    Ok(())
}

fn cmd_sweep(a: &SweepArgs, quiet: bool) -> Result<()> {
    let base = load(&a.config, a.seed)?;
    // Resolve every point before running anything.
    let points: Vec<ExperimentConfig> = a
        .grid
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let mut cfg = set_param(&base, &a.param, v).with_context(|| format!("setting {} = {v}", a.param))?;
            cfg.seed = base.seed.wrapping_add(i as u64);
            cfg.validate().with_context(|| format!("{} = {v}", a.param))?;
            Ok(cfg)
        })
        .collect::<Result<_>>()?;
    fs::create_dir_all(&a.out).with_context(|| format!("cannot create {}", a.out.display()))?;

    let results: Vec<Result<Vec<MetricsRecord>>> = std::thread::scope(|s| {
        let handles: Vec<_> = points
            .iter()
            .enumerate()
            .map(|(i, cfg)| {
                let path = a.out.join(format!("point_{i:03}.csv"));
                s.spawn(move || -> Result<Vec<MetricsRecord>> {
                    let records = run_experiment(cfg)?;
                    write_csv(&path, &records)?;
                    Ok(records)
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("sweep worker panicked")).collect()
    });

    let mut rows = Vec::with_capacity(points.len());
    for ((i, (value, cfg)), res) in a.grid.iter().zip(&points).enumerate().zip(results) {
        let records = res.with_context(|| format!("point {i} ({} = {value})", a.param))?;
        if !quiet {
            eprintln!("[{i}] {} = {value}: {}", a.param, describe(&records));
        }
        rows.push(SummaryRow::from_run(*value, &records, cfg.target_loss));
    }
    let path = a.out.join("summary.csv");
    let file = File::create(&path).with_context(|| format!("cannot write {}", path.display()))?;
    let mut w = BufWriter::new(file);
    write_summary_csv(&mut w, &rows)?;
    w.flush().with_context(|| format!("cannot write {}", path.display()))?;
    if !quiet {
        eprintln!("summary -> {}", path.display());
    }
    Ok(())
}

fn cmd_bounds(a: &BoundsArgs) -> Result<()> {
    if a.n.is_empty() || a.eps.is_empty() {
        bail!("need at least one n and one eps");
    }
    let mut text = String::from("n,eps,finite_h,pac_vc,pac_bayes\n");
    for &eps in &a.eps {
        for &n in &a.n {
            let r = bound_report(n, eps, a.hsize, a.vc, a.kl).with_context(|| format!("n = {n}, eps = {eps}"))?;
            text.push_str(&format!("{},{},{},{},{}\n", r.n, r.eps, r.finite_h, r.pac_vc, r.pac_bayes));
        }
    }
    match &a.out {
        Some(path) => fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))?,
        None => io::stdout().write_all(text.as_bytes())?,
    }
    Ok(())
}
