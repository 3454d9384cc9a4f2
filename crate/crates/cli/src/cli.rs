use std::path::PathBuf;

use clap::{Parser, Subcommand};

use qsm_core::dipole::Orientation;

use crate::commands::*;
use crate::config::ExperimentConfig;
use crate::error::CliResult;

#[derive(Debug, Parser)]
#[command(name = "qsm", version, about = "Susceptibility mapping experiments on synthetic phantoms")]
pub struct Cli {
    /// Experiment config (JSON). Omitted keys take their defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory; overrides the config `out_dir`.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads for sweeps.
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Print the fully resolved config.
    Config,
    /// Write chi.qsmv and mask.qsmv for the configured phantom.
    Phantom,
    /// Simulate the local field of a susceptibility volume.
    Forward {
        #[arg(long)]
        chi: PathBuf,
        #[arg(long)]
        mask: Option<PathBuf>,
        /// Field direction "x,y,z"; defaults to the first configured orientation.
        #[arg(long, value_parser = parse_orientation)]
        b: Option<Orientation>,
    },
    /// Thresholded k-space division.
    Tkd {
        #[arg(long)]
        field: PathBuf,
        #[arg(long, value_parser = parse_orientation)]
        b: Option<Orientation>,
        /// Defaults to the config `t_tkd`.
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(long)]
        reference: Option<PathBuf>,
        #[arg(long)]
        mask: Option<PathBuf>,
    },
    /// Multi-orientation least squares; pass --field and --b once per orientation.
    Cosmos {
        #[arg(long, required = true)]
        field: Vec<PathBuf>,
        #[arg(long, value_parser = parse_orientation, required = true)]
        b: Vec<Orientation>,
        #[arg(long, default_value_t = 0.0)]
        damping: f64,
        #[arg(long)]
        reference: Option<PathBuf>,
        #[arg(long)]
        mask: Option<PathBuf>,
    },
    /// Alternating training, one directory per loss-weight combination.
    Train,
    /// Evaluate a trained checkpoint across a sweep of field directions.
    SweepOrientations {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Also report max - min of each metric.
        #[arg(long)]
        spread: bool,
    },
    /// Compare two volumes.
    Metrics {
        #[arg(long)]
        x: PathBuf,
        #[arg(long)]
        reference: PathBuf,
        #[arg(long)]
        mask: Option<PathBuf>,
    },
    /// Write the learned (with --checkpoint) or analytic dipole kernel.
    KernelExport {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_parser = parse_orientation)]
        b: Option<Orientation>,
        /// Take the grid from this volume instead of the config phantom.
        #[arg(long)]
        like: Option<PathBuf>,
    },
}

pub fn run(cli: Cli) -> CliResult<()> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.out_dir = o.clone();
    }
    let out = cfg.out_dir.clone();
    let first = cfg.orientations[0];
    match cli.command {
        Command::Config => println!("{}", cfg.to_json()),
        Command::Phantom => {
            cmd_phantom(&cfg, &out)?;
        }
        Command::Forward { chi, mask, b } => {
            cmd_forward(&chi, mask.as_deref(), b.unwrap_or(first), &cfg.noise, &out)?;
        }
        Command::Tkd {
            field,
            b,
            threshold,
            reference,
            mask,
        } => {
            let t = threshold.unwrap_or(cfg.hyper_params.t_tkd);
            let (_, report) = cmd_tkd(&field, b.unwrap_or(first), t, reference.as_deref(), mask.as_deref(), &out)?;
            if let Some(r) = report {
                println!("{}", serde_json::to_string(&r).expect("serialisable"));
            }
        }
        Command::Cosmos {
            field,
            b,
            damping,
            reference,
            mask,
        } => {
            let (_, report) = cmd_cosmos(&field, &b, damping, reference.as_deref(), mask.as_deref(), &out)?;
            if let Some(r) = report {
                println!("{}", serde_json::to_string(&r).expect("serialisable"));
            }
        }
        Command::Train => {
            let outcome = cmd_train(&cfg, &out, cli.threads)?;
            println!("{TABLE_HEADER}");
            for r in &outcome.rows {
                println!("{},{},{},{}", r.w_model, r.w_grad, r.w_dipole, r.metrics.csv_row());
            }
        }
        Command::SweepOrientations { checkpoint, spread } => {
            let (_, sp) = cmd_sweep_orientations(&cfg, &checkpoint, &out, spread)?;
            for s in sp.unwrap_or_default() {
                println!("{} spread {:e} (min {:e}, max {:e})", s.metric, s.spread, s.min, s.max);
            }
        }
        Command::Metrics { x, reference, mask } => {
            let report = cmd_metrics(&x, &reference, mask.as_deref(), cli.out.as_deref())?;
            println!("{}", serde_json::to_string(&report).expect("serialisable"));
        }
        Command::KernelExport { checkpoint, b, like } => {
            cmd_kernel_export(&cfg, checkpoint.as_deref(), b.unwrap_or(first), like.as_deref(), &out)?;
        }
    }
    Ok(())
}
