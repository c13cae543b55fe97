use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use resilient_core::experiments::{emit_report, run_experiment, EstimateKind, Experiment, ExperimentConfig};
use resilient_core::{FilterKind, SigmaRule, WorstCaseDrift};

#[derive(Parser)]
#[command(name = "bench", version, about = "Monte Carlo studies of resilient sigma-point filters")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment and write CSV/JSON results.
    Run(RunArgs),
}

#[derive(Args, Debug)]
struct RunArgs {
    /// worstcase, mass_spring_measurement_dominant or mass_spring_balanced
    #[arg(long)]
    experiment: Option<Experiment>,
    /// TOML file with any of the config fields; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    horizon: Option<usize>,
    /// Comma-separated tolerance grid.
    #[arg(long, value_delimiter = ',')]
    c: Option<Vec<f64>>,
    /// Comma-separated sigma rules: ukf, ckf, gh:q
    #[arg(long, value_delimiter = ',')]
    rule: Option<Vec<SigmaRule>>,
    /// Comma-separated filter kinds: standard, prediction_resilient, update_resilient, utf
    #[arg(long, value_delimiter = ',')]
    filters: Option<Vec<FilterKind>>,
    /// Comma-separated particle counts for the bootstrap filter.
    #[arg(long, value_delimiter = ',')]
    particles: Option<Vec<usize>>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Use the full trial counts (500 datasets, 1000 mass-spring trials).
    #[arg(long)]
    full_scale: bool,
    /// Second drift component of the worst-case model: hold or zero.
    #[arg(long)]
    drift: Option<WorstCaseDrift>,
    /// Estimate scored in the mass-spring study: prediction or filtered.
    #[arg(long, value_parser = parse_estimate)]
    estimate: Option<EstimateKind>,
    #[arg(long)]
    burn_in: Option<usize>,
    #[arg(long)]
    thinning: Option<usize>,
    #[arg(long)]
    max_proposals: Option<usize>,
}

fn parse_estimate(s: &str) -> Result<EstimateKind, String> {
    match s {
        "prediction" => Ok(EstimateKind::Prediction),
        "filtered" => Ok(EstimateKind::Filtered),
        other => Err(format!("unknown estimate '{other}'")),
    }
}

/// Recursively overlays `top` onto `base`.
fn merge(base: &mut toml::Value, top: toml::Value) {
    match (base, top) {
        (toml::Value::Table(b), toml::Value::Table(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn resolve(args: RunArgs) -> Result<ExperimentConfig, String> {
    let file: Option<toml::Value> = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
            Some(toml::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))?)
        }
        None => None,
    };
    let from_file = |key: &str| file.as_ref().and_then(|f| f.get(key)).cloned();
    let experiment = match args.experiment {
        Some(e) => e,
        None => match from_file("experiment") {
            Some(v) => v.try_into::<Experiment>().map_err(|e| e.to_string())?,
            None => Experiment::Worstcase,
        },
    };
    let full_scale = args.full_scale || from_file("full_scale").and_then(|v| v.as_bool()).unwrap_or(false);
    let base = if full_scale {
        ExperimentConfig::full_scale(experiment)
    } else {
        ExperimentConfig::desk(experiment)
    };
    let mut cfg = match file {
        Some(mut table) => {
            if let Some(t) = table.as_table_mut() {
                t.remove("full_scale");
            }
            let mut merged = toml::Value::try_from(&base).map_err(|e| e.to_string())?;
            merge(&mut merged, table);
            merged.try_into::<ExperimentConfig>().map_err(|e| e.to_string())?
        }
        None => base,
    };
    cfg.experiment = experiment;
    if let Some(v) = args.trials {
        cfg.trials = v;
    }
    if let Some(v) = args.horizon {
        cfg.horizon = v;
    }
    if let Some(v) = args.c {
        cfg.tolerances = v;
    }
    if let Some(v) = args.rule {
        cfg.rules = v;
    }
    if let Some(v) = args.filters {
        cfg.filters = v;
    }
    if let Some(v) = args.particles {
        cfg.pf_particles = v;
    }
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    if let Some(v) = args.out {
        cfg.output_dir = v;
    }
    if let Some(v) = args.drift {
        cfg.worstcase_drift = v;
    }
    if let Some(v) = args.estimate {
        cfg.mass_spring_estimate = v;
    }
    if let Some(v) = args.burn_in {
        cfg.mh.burn_in = v;
    }
    if let Some(v) = args.thinning {
        cfg.mh.thinning = v;
    }
    if let Some(v) = args.max_proposals {
        cfg.mh.max_proposals = v;
    }
    cfg.validate().map_err(|e| e.to_string())?;
    Ok(cfg)
}

fn run(args: RunArgs) -> Result<(), String> {
    let cfg = resolve(args)?;
    let output = run_experiment(&cfg).map_err(|e| e.to_string())?;
    let files = emit_report(&output, &cfg.output_dir).map_err(|e| e.to_string())?;
    println!("{:<40} {:<10} {:>8} {:>8} {:>12} {:>6}", "dataset", "filter", "c", "Np", "overall", "fail");
    for s in &output.report.series {
        println!(
            "{:<40} {:<10} {:>8} {:>8} {:>12.4} {:>6}",
            s.dataset,
            s.filter,
            s.c.map(|c| c.to_string()).unwrap_or_default(),
            s.particles.map(|n| n.to_string()).unwrap_or_default(),
            s.overall,
            s.failures
        );
    }
    for d in &output.datasets {
        let q = d.summary(0).r_quantiles;
        println!(
            "chain {:<6} proposals {:>6} acceptance {:.3} (after burn-in {:.3}) r quartiles {:?}",
            d.name,
            d.chain.proposals(),
            d.chain.acceptance_rate(),
            d.chain.post_burn_in_acceptance_rate(),
            q
        );
    }
    println!("runtime {:.1} s", output.runtime_secs);
    for f in files {
        println!("wrote {}", f.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(args) => run(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
