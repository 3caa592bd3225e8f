use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use fairdec::config::RawConfig;
use fairdec::{data, experiment, scm};
use std::path::PathBuf;

#[derive(Parser)]
#[command(
    name = "fairdec",
    about = "Online fair decision learning under label and selection bias"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment from a config file.
    Run {
        /// Flat key-value (TOML) experiment configuration.
        #[arg(long)]
        config: PathBuf,
        /// Override the configured seed list with a single seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the configured output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Summarize finished run directories into a table.
    Summarize {
        /// Run directories containing metrics.csv.
        #[arg(long, num_args = 1.., required = true)]
        runs: Vec<PathBuf>,
        /// Reporting window as T1:T2 (inclusive).
        #[arg(long, default_value = "125:200")]
        window: String,
        /// Where to write summary.csv (defaults to the first run directory).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sample a synthetic population and write it as CSV (+ schema sidecar).
    EmitSynthetic {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 5000)]
        count: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Also write the matching schema sidecar here.
        #[arg(long)]
        schema_out: Option<PathBuf>,
    },
}

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    match Cli::parse().command {
        Command::Run { config, seed, out } => {
            let mut raw = RawConfig::load(&config)
                .with_context(|| format!("loading {}", config.display()))?;
            if let Some(seed) = seed {
                raw.seeds = Some(vec![seed]);
            }
            if let Some(out) = out {
                raw.out_dir = Some(out);
            }
            let cfg = raw.resolve()?;
            eprintln!(
                "running {} on {} ({} seeds, {} steps) -> {}",
                cfg.method.name(),
                cfg.dataset,
                cfg.seeds.len(),
                cfg.steps,
                cfg.out_dir.display()
            );
            let started = std::time::Instant::now();
            let output = experiment::run_experiment(&cfg)?;
            eprintln!(
                "finished {} seed(s) in {:.1}s; metrics at {}",
                output.runs.len(),
                started.elapsed().as_secs_f64(),
                output.out_dir.join("metrics.csv").display()
            );
            for (seed, err) in &output.failures {
                eprintln!("seed {seed} FAILED: {err}");
            }
            if output.runs.is_empty() {
                bail!("all seeds failed");
            }
            Ok(())
        }
        Command::Summarize { runs, window, out } => {
            let (t1, t2) = window
                .split_once(':')
                .and_then(|(a, b)| Some((a.parse().ok()?, b.parse().ok()?)))
                .context("window must look like 125:200")?;
            let summary = experiment::summarize_runs(&runs, t1, t2)?;
            for w in &summary.warnings {
                eprintln!("warning: {w}");
            }
            println!("method,metric,mean (std) x100");
            for row in &summary.rows {
                println!("{},{},{}", row.method, row.metric, row.formatted);
            }
            let out = out.unwrap_or_else(|| runs[0].join("summary.csv"));
            experiment::write_summary_csv(&out, &summary)?;
            eprintln!("summary written to {}", out.display());
            Ok(())
        }
        Command::EmitSynthetic { out, count, seed, schema_out } => {
            let draws = scm::sample_population(count, seed)?;
            let schema = data::FeatureSchema::synthetic();
            let records: Vec<data::Record> = draws
                .iter()
                .map(|d| {
                    data::Record::new(
                        vec![d.lsat, d.gpa],
                        if d.s > 0.0 { 1 } else { -1 },
                        Some(d.y_tilde),
                    )
                })
                .collect();
            data::write_csv(&out, &records, &schema)?;
            if let Some(schema_path) = schema_out {
                std::fs::write(&schema_path, SYNTHETIC_SCHEMA_TOML)?;
            }
            eprintln!("wrote {count} rows to {}", out.display());
            Ok(())
        }
    }
}

const SYNTHETIC_SCHEMA_TOML: &str = r#"sensitive = "s"
sensitive_positive = "1"
sensitive_negative = "-1"
proxy = "y"
proxy_positive = "1"
proxy_negative = "0"

[[feature]]
name = "lsat"
kind = "real"

[[feature]]
name = "gpa"
kind = "real"
"#;
