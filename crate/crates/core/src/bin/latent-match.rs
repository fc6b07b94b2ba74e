use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use latent_match::commands::{cmd_ablate, cmd_bench_lsh, cmd_check, cmd_generate, cmd_pipeline, BenchSettings};
use latent_match::config;
use latent_match::pipeline::RunConfig;
use latent_match::{Error, Result};

#[derive(Parser)]
#[command(name = "latent-match", version, about = "Counterfactual estimation by LSH matching over learned latent histories")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

/// Settings shared by every subcommand; flags beat `--set`, which beats the file.
#[derive(Args)]
struct Common {
    /// Flat key=value config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override any config key, e.g. `--set dgp.n_units=500`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    sets: Vec<String>,
    #[arg(long, global = true)]
    seed: Option<String>,
    #[arg(long, global = true)]
    outdir: Option<String>,
    #[arg(long, global = true)]
    run_id: Option<String>,
    #[arg(long, global = true)]
    tables: Option<String>,
    #[arg(long, global = true)]
    hashes: Option<String>,
    /// LSH bucket width, or `auto`.
    #[arg(long, global = true)]
    width: Option<String>,
    #[arg(long, global = true)]
    k: Option<String>,
    /// `restricted` or `unrestricted` neighbourhoods.
    #[arg(long, global = true)]
    mode: Option<String>,
    /// Worker threads; defaults to every core.
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic cohort and its oracle.
    Generate,
    /// Run the full pipeline and write every artifact with a manifest.
    Pipeline,
    /// Concept-set ablations across look-back windows.
    Ablate {
        #[arg(long = "sets", value_delimiter = ',', default_value = "ALL")]
        concept_sets: Vec<String>,
        /// Defaults to the configured look-back.
        #[arg(long, value_delimiter = ',')]
        lookbacks: Vec<i64>,
    },
    /// Recall and latency of the index against exact search.
    BenchLsh {
        #[arg(long, default_value_t = 10_000)]
        points: usize,
        #[arg(long, default_value_t = 100)]
        queries: usize,
        #[arg(long, default_value_t = 16)]
        dim: usize,
        /// Table counts to sweep; defaults to lsh.tables.
        #[arg(long, value_delimiter = ',')]
        sweep_tables: Vec<usize>,
        /// Hash counts to sweep; defaults to lsh.hashes.
        #[arg(long, value_delimiter = ',')]
        sweep_hashes: Vec<usize>,
        /// Multiples of the default width.
        #[arg(long, value_delimiter = ',', default_value = "0.5,1,2")]
        width_scales: Vec<f64>,
    },
    /// Verify the invariants of a pipeline run directory.
    Check {
        /// Defaults to `<outdir>/<run-id>`.
        #[arg(long)]
        dir: Option<PathBuf>,
    },
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => config::load(path)?,
        None => RunConfig::default(),
    };
    for pair in &common.sets {
        let (key, value) = pair.split_once('=').ok_or_else(|| Error::config(pair.as_str(), "expected KEY=VALUE"))?;
        config::set(&mut cfg, key.trim(), value.trim())?;
    }
    let flags = [
        ("seed", &common.seed),
        ("outdir", &common.outdir),
        ("run_id", &common.run_id),
        ("lsh.tables", &common.tables),
        ("lsh.hashes", &common.hashes),
        ("lsh.width", &common.width),
        ("estimator.k", &common.k),
        ("estimator.mode", &common.mode),
    ];
    for (key, value) in flags {
        if let Some(v) = value {
            config::set(&mut cfg, key, v)?;
        }
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.common.threads {
        if n == 0 {
            return Err(Error::config("threads", "must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| Error::config("threads", e.to_string()))?;
    }
    let cfg = load_config(&cli.common)?;
    match cli.command {
        Command::Generate => {
            let (dir, manifest) = cmd_generate(&cfg)?;
            println!("wrote {} files to {}", manifest.files.len(), dir.display());
        }
        Command::Pipeline => {
            let (dir, manifest) = cmd_pipeline(&cfg)?;
            println!("wrote {} files to {}", manifest.files.len(), dir.display());
        }
        Command::Ablate { concept_sets, mut lookbacks } => {
            if lookbacks.is_empty() {
                lookbacks.push(cfg.features.history.lookback_days);
            }
            let (dir, ablations) = cmd_ablate(&cfg, &concept_sets, &lookbacks)?;
            for ab in &ablations {
                let delta: Vec<String> = ab.difference.iter().map(|d| format!("{d:+.3}")).collect();
                println!("{:<10} {:>4}d  {}", ab.concept_set, ab.lookback_days, delta.join(" "));
            }
            println!("wrote {}", dir.display());
        }
        Command::BenchLsh { points, queries, dim, sweep_tables, sweep_hashes, width_scales } => {
            let or = |v: Vec<usize>, d: usize| if v.is_empty() { vec![d] } else { v };
            let bench = BenchSettings {
                points,
                queries,
                dim,
                k: cfg.estimator.query.k,
                tables: or(sweep_tables, cfg.lsh.tables),
                hashes: or(sweep_hashes, cfg.lsh.hashes),
                width_scales,
            };
            let (dir, rows) = cmd_bench_lsh(&cfg, &bench)?;
            println!("tables hashes    width  recall  candidates  lsh_us  brute_us");
            for r in &rows {
                println!("{:>6} {:>6} {:>8.3} {:>7.3} {:>11.0} {:>7.0} {:>9.0}", r.tables, r.hashes, r.width, r.recall, r.mean_candidates, r.lsh_micros, r.brute_micros);
            }
            println!("wrote {}", dir.display());
        }
        Command::Check { dir } => {
            let dir = dir.unwrap_or_else(|| cfg.run_dir());
            let checks = cmd_check(&dir)?;
            for c in &checks {
                println!("{} {}: {}", if c.passed { "ok  " } else { "FAIL" }, c.name, c.detail);
            }
            if checks.iter().any(|c| !c.passed) {
                return Err(Error::Lookup(format!("{} check(s) failed", checks.iter().filter(|c| !c.passed).count())));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config() { 2 } else { 1 })
        }
    }
}
