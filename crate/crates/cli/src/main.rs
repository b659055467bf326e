use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use astar_cli::config::{parse_config, ExperimentKind};
use astar_cli::experiment::{apply_overrides, resolve_out_dir, run_experiment};

/// Attention-guided sampling experiments on a toy latent diffusion model.
#[derive(Parser)]
#[command(name = "astar", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Seed count (expanded from the master seed) or comma-separated list.
    #[arg(long)]
    seeds: Option<String>,
    /// Output directory (default: $ASTAR_OUT/<config stem> or ./astar-out/<config stem>).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker pool size (default: available cores).
    #[arg(long)]
    jobs: Option<usize>,
    /// Attention snapshot interval in steps.
    #[arg(long = "snapshot-every")]
    snapshot_every: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Execute the experiment the config file declares.
    Run {
        config: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Paired baseline-vs-guided comparison over the same seeds.
    Compare {
        config: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Four-way ablation: baseline, each loss alone, and both together.
    Ablate {
        config: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Guided runs with user layout masks held fixed across all steps.
    Layout {
        config: PathBuf,
        layout_file: PathBuf,
        #[command(flatten)]
        common: Common,
    },
}

fn main() -> ExitCode {
    match execute() {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}

fn execute() -> anyhow::Result<()> {
    let cli = Cli::parse();
    let (config_path, common, kind, layout_file) = match cli.command {
        Command::Run { config, common } => (config, common, None, None),
        Command::Compare { config, common } => {
            (config, common, Some(ExperimentKind::Compare), None)
        }
        Command::Ablate { config, common } => {
            (config, common, Some(ExperimentKind::Ablation), None)
        }
        Command::Layout {
            config,
            layout_file,
            common,
        } => (
            config,
            common,
            Some(ExperimentKind::Layout),
            Some(layout_file),
        ),
    };

    let mut cfg = parse_config(&config_path)?;
    apply_overrides(
        &mut cfg,
        kind,
        common.seeds.as_deref(),
        common.jobs,
        common.snapshot_every,
        layout_file,
    )?;
    let out_dir = resolve_out_dir(&cfg, common.out.as_deref());
    println!(
        "running {} over {} seeds into {}",
        cfg.kind.as_str(),
        cfg.seeds.len(),
        out_dir.display()
    );
    run_experiment(&cfg, &out_dir)?;
    println!("done: artifacts in {}", out_dir.display());
    Ok(())
}
