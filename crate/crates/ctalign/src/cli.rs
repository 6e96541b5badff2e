use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use ctalign_core::distributions::{BetaMode, TopKMode};

use crate::commands;
use crate::config::{Overrides, RunConfig};
use crate::error::Result;
use crate::formats::{fmt6, metrics_table};

#[derive(Debug, Parser)]
#[command(name = "ctalign", version, about = "Conditional-transport alignment of patch and label sets")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    /// Label weights uniform over positive labels.
    Masked,
    /// Label weights are the softmax of the raw 0/1 vector.
    Literal,
    /// Patch weights are a softmax over the kept top-k scores.
    Sparse,
    /// Patch weights are uniform over the kept top-k patches.
    Binary,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// JSON run configuration; unknown keys are rejected.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory; receives effective_config.json and artifacts.
    #[arg(long, global = true, default_value = "ctalign-out")]
    pub out: PathBuf,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Transport loss weight; comma-separated values form a sweep axis.
    #[arg(long, global = true, value_delimiter = ',')]
    pub alpha: Vec<f64>,
    /// First layer (1-based) of the layer-wise transport loss; list allowed.
    #[arg(long = "start-layer", global = true, value_delimiter = ',')]
    pub start_layer: Vec<usize>,
    /// Patches kept by the top-k selection; list allowed.
    #[arg(long, global = true, value_delimiter = ',')]
    pub topk: Vec<usize>,
    /// Sinkhorn entropic regularisation; enables Sinkhorn in `distance`.
    #[arg(long, global = true)]
    pub epsilon: Option<f64>,
    /// Weight construction: masked|literal for labels, sparse|binary for patches.
    #[arg(long, global = true, value_enum)]
    pub mode: Vec<Mode>,
}

impl Common {
    fn overrides(&self) -> Overrides {
        let mut o = Overrides {
            seed: self.seed,
            alpha: self.alpha.clone(),
            start_layer: self.start_layer.clone(),
            top_k: self.topk.clone(),
            epsilon: self.epsilon,
            ..Default::default()
        };
        for m in &self.mode {
            match m {
                Mode::Masked => o.beta_mode = Some(BetaMode::Masked),
                Mode::Literal => o.beta_mode = Some(BetaMode::Literal),
                Mode::Sparse => o.theta_mode = Some(TopKMode::Sparse),
                Mode::Binary => o.theta_mode = Some(TopKMode::Binary),
            }
        }
        o
    }

    fn is_sweep(&self) -> bool {
        self.alpha.len() > 1 || self.start_layer.len() > 1 || self.topk.len() > 1
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// CT divergence (and optionally entropic OT) between two embedding files.
    Distance {
        p: PathBuf,
        q: PathBuf,
        /// Navigator temperature.
        #[arg(long)]
        tau: Option<f64>,
        /// Also solve entropic OT on the same cost matrix.
        #[arg(long)]
        sinkhorn: bool,
        /// Write the transport plans as CSV into the output directory.
        #[arg(long)]
        plans: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Train on the synthetic task; list-valued flags run a sweep.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Score a checkpoint on its held-out split.
    Eval {
        checkpoint: PathBuf,
        /// Dataset file; regenerated from the checkpoint when omitted.
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Export one label's backward transport column as a resampled grid.
    ExportPlan {
        checkpoint: PathBuf,
        /// Index into the held-out split.
        #[arg(long)]
        sample: usize,
        #[arg(long)]
        label: usize,
        /// Output grid side length.
        #[arg(long)]
        size: Option<usize>,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Train every combination of the alpha, start-layer and top-k axes.
    Sweep {
        #[command(flatten)]
        common: Common,
    },
}

fn resolve(common: &Common) -> Result<RunConfig> {
    RunConfig::load(common.config.as_deref())?.resolve(&common.overrides())
}

fn print_sweep(reports: &[commands::TrainReport]) {
    let rows: Vec<_> = reports.iter().map(|r| r.rows[0].clone()).collect();
    print!("{}", metrics_table(&rows));
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Distance { p, q, tau, sinkhorn, plans, common } => {
            let mut cfg = RunConfig::load(common.config.as_deref())?;
            if let Some(t) = tau {
                cfg.distance.temperature = t;
            }
            cfg.distance.sinkhorn |= sinkhorn;
            cfg.distance.write_plans |= plans;
            let cfg = cfg.resolve(&common.overrides())?;
            let r = commands::distance(&cfg, &p, &q, &common.out)?;
            for path in &r.uniform_defaulted {
                println!("note: {} has no weights; uniform weights assumed", path.display());
            }
            println!("ct_total {}", fmt6(r.ct.total));
            println!("ct_forward {}", fmt6(r.ct.forward_cost));
            println!("ct_backward {}", fmt6(r.ct.backward_cost));
            if let Some(s) = &r.sinkhorn {
                println!("ot_cost {} (epsilon {}, {} iterations)", fmt6(s.cost), cfg.sinkhorn.epsilon, s.iterations);
                println!("ot_marginal_violation {:.3e}", s.marginal_violation);
                if !s.converged {
                    println!("warning: sinkhorn did not converge within {} iterations", cfg.sinkhorn.max_iter);
                }
            }
            for path in &r.written {
                println!("wrote {}", path.display());
            }
        }
        Command::Train { common } => {
            let cfg = resolve(&common)?;
            if common.is_sweep() {
                print_sweep(&commands::sweep(&cfg, &common.out)?);
            } else {
                let r = commands::train(&cfg, &common.out)?;
                if let Some(last) = r.result.trace.last() {
                    println!(
                        "final epoch {}: total {} lct {} asl {}",
                        last.epoch,
                        fmt6(last.total),
                        fmt6(last.lct),
                        fmt6(last.asl)
                    );
                }
                print!("{}", metrics_table(&r.rows));
            }
        }
        Command::Sweep { common } => {
            let cfg = resolve(&common)?;
            print_sweep(&commands::sweep(&cfg, &common.out)?);
        }
        Command::Eval { checkpoint, dataset, common } => {
            let cfg = resolve(&common)?;
            let rows = commands::eval(&cfg, &checkpoint, dataset.as_deref(), &common.out)?;
            print!("{}", metrics_table(&rows));
        }
        Command::ExportPlan { checkpoint, sample, label, size, dataset, common } => {
            let mut cfg = RunConfig::load(common.config.as_deref())?;
            if let Some(s) = size {
                cfg.export.target_size = s;
            }
            let cfg = cfg.resolve(&common.overrides())?;
            let r = commands::export_plan(&cfg, &checkpoint, dataset.as_deref(), sample, label, &common.out)?;
            if r.label_absent {
                eprintln!("warning: label {label} is not in the ground truth of sample {sample}; exporting anyway");
            }
            println!("wrote {} ({}x{})", r.path.display(), r.grid.rows(), r.grid.cols());
        }
    }
    Ok(())
}

/// Parses arguments, runs, and maps failures to their exit codes.
pub fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(&e)
        }
    }
}
