use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};

use jump_smp::benchmarks::list_benchmarks;
use jump_smp::experiment::{run, ExperimentConfig};
use jump_smp::report::write_report;

#[derive(Parser)]
#[command(name = "jump-smp", version, about = "Seeded experiments for the stochastic maximum principle with jumps")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment config; exit status 0 iff every check passes.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        paths: Option<usize>,
        /// Worker threads (default: all cores).
        #[arg(long)]
        threads: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// List registered benchmarks.
    List {
        /// One JSON record per line.
        #[arg(long)]
        json: bool,
    },
}

fn main() -> ExitCode {
    match Cli::parse().command {
        Command::List { json } => {
            for (name, description) in list_benchmarks() {
                if json {
                    println!("{}", serde_json::json!({ "name": name, "description": description }));
                } else {
                    println!("{name:<24}{description}");
                }
            }
            ExitCode::SUCCESS
        }
        Command::Run { config, seed, paths, threads, out } => {
            let mut cfg = match std::fs::read_to_string(&config)
                .map_err(|e| format!("{}: {e}", config.display()))
                .and_then(|s| ExperimentConfig::from_toml(&s).map_err(|e| e.to_string()))
            {
                Ok(c) => c,
                Err(e) => {
                    eprintln!("error: {e}");
                    return ExitCode::from(2);
                }
            };
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(p) = paths {
                cfg.paths = p;
            }
            if let Err(e) = cfg.resolved().and_then(|r| r.check()) {
                eprintln!("error: {e}");
                return ExitCode::from(2);
            }
            let pool = rayon::ThreadPoolBuilder::new().num_threads(threads.unwrap_or(0)).build();
            let pool = match pool {
                Ok(p) => p,
                Err(e) => {
                    eprintln!("error: {e}");
                    return ExitCode::from(2);
                }
            };
            let dir = out.or_else(|| cfg.out.clone()).unwrap_or_else(|| PathBuf::from("out").join(cfg.kind.name()));
            let start = Instant::now();
            let outcome = pool.install(|| run(&cfg));
            let summary = match write_report(&dir, &cfg, &outcome, start.elapsed().as_secs_f64(), pool.current_num_threads()) {
                Ok(s) => s,
                Err(e) => {
                    eprintln!("error: {e}");
                    return ExitCode::FAILURE;
                }
            };
            for c in &summary.checks {
                println!("{} {}: {:e} {} {:e}", if c.pass { "PASS" } else { "FAIL" }, c.name, c.value, c.relation, c.bound);
            }
            if let Some(e) = &summary.error {
                eprintln!("error: {e}");
            }
            println!("{} -> {}", summary.experiment_id, dir.display());
            if summary.pass {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
