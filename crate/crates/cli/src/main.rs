use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use samg::verify::CheckFamily;
use samg_cli::commands::{
    aggregates_table, cmd_ablate, cmd_energy_maps, cmd_sample, cmd_verify, verify_summary, RunOptions,
};
use samg_cli::config::{ExperimentConfig, SeedRange};

/// Spatially adaptive guidance experiments on an analytic Gaussian-mixture latent model.
#[derive(Parser)]
#[command(name = "samg", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML experiment config; built-in defaults when omitted.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Output directory (falls back to the config, then $SAMG_OUT_DIR, then ./samg-out).
    #[arg(long, short)]
    out: Option<PathBuf>,
    /// Half-open seed range such as 0..64.
    #[arg(long)]
    seeds: Option<SeedRange>,
    /// Worker threads; defaults to one per core.
    #[arg(long)]
    threads: Option<usize>,
}

impl Common {
    fn load(&self) -> Result<(ExperimentConfig, RunOptions)> {
        let cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        cfg.validate().context("invalid config")?;
        let opts = RunOptions {
            out: self.out.clone(),
            seeds: self.seeds,
            threads: self.threads,
        };
        Ok((cfg, opts))
    }
}

#[derive(Subcommand)]
enum Command {
    /// Draw samples for every guidance entry and seed; writes metrics.csv.
    Sample(Common),
    /// Dump per-step energy and scale maps for the SAMG entries.
    EnergyMaps(Common),
    /// Run the numerical checks.
    Verify {
        #[command(flatten)]
        common: Common,
        /// Comma-separated subset: score,deviation,taylor,gronwall,spectral,jensen,flow.
        #[arg(long, value_delimiter = ',')]
        only: Vec<CheckFamily>,
        #[arg(long, hide = true)]
        corrupt_hessian_sign: bool,
    },
    /// Sweep uniform scales, SAMG bounds and kernels; writes the Pareto table.
    Ablate(Common),
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Sample(c) => {
            let (cfg, opts) = c.load()?;
            let s = cmd_sample(&cfg, &opts)?;
            print!("{}", aggregates_table(&s.aggregates));
            println!("wrote {} samples to {}", s.cells.len(), s.out_dir.display());
            Ok(true)
        }
        Command::EnergyMaps(c) => {
            let (cfg, opts) = c.load()?;
            let s = cmd_energy_maps(&cfg, &opts)?;
            for c in &s.colocation {
                match c.ratio {
                    Some(r) => println!("{} seed {}: inside/outside {r:.3}", c.label, c.seed),
                    None => println!("{} seed {}: mask does not split the grid", c.label, c.seed),
                }
            }
            println!("wrote {} images to {}", s.images, s.out_dir.join("energy").display());
            if !s.passed() {
                eprintln!("energy ratio below {}", s.min_ratio);
            }
            Ok(s.passed())
        }
        Command::Verify {
            common,
            only,
            corrupt_hessian_sign,
        } => {
            let (cfg, opts) = common.load()?;
            let reports = cmd_verify(&cfg, &opts, &only, corrupt_hessian_sign)?;
            print!("{}", verify_summary(&reports));
            Ok(reports.iter().all(|r| r.passed()))
        }
        Command::Ablate(c) => {
            let (cfg, opts) = c.load()?;
            let s = cmd_ablate(&cfg, &opts)?;
            for r in &s.table.rows {
                let a = &r.summary;
                println!(
                    "{:<20} align {:.4} dist {:.4}{}",
                    r.label,
                    a.alignment_rate,
                    a.mean_distance,
                    if r.dominated { "  (dominated)" } else { "" }
                );
            }
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
