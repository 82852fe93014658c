use std::path::{Path, PathBuf};
use std::process::ExitCode;

use avrobust::attacks::{Norm, Range};
use avrobust::harness::{
    cmd_attack, cmd_eval, cmd_report, cmd_sweep, cmd_synth, cmd_train, parse_config_verbose, Axis, ExperimentConfig,
    Overrides, SweepPlan, Workspace,
};
use avrobust::models::FusionStage;
use avrobust::{Error, Result};
use clap::{Args, Parser, Subcommand};
use log::info;

#[derive(Parser)]
#[command(name = "avrobust", version, about = "Universal adversarial perturbations against audio/visual event classifiers")]
struct Cli {
    /// Experiment config in `[section]` / `key = value` form.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(flatten)]
    overrides: OverrideArgs,
    /// Primary output path of the command.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct OverrideArgs {
    #[arg(long, global = true)]
    fusion: Option<FusionStage>,
    #[arg(long, global = true)]
    norm: Option<Norm>,
    #[arg(long, global = true)]
    eps: Option<f64>,
    #[arg(long, global = true)]
    alpha: Option<f64>,
    #[arg(long, global = true)]
    steps: Option<usize>,
    /// Half-open mel-bin range `lo:hi`.
    #[arg(long, global = true)]
    freq_mask: Option<Range>,
    /// Half-open frame range `lo:hi`.
    #[arg(long, global = true)]
    time_mask: Option<Range>,
    /// Sets the dataset, training and attack seeds.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset and its manifest.
    Synth,
    /// Train a model on the train split.
    Train {
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Train a universal perturbation against a checkpoint.
    Attack {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Evaluate a checkpoint, optionally under a perturbation.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        perturbation: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Run one sweep axis and write its table.
    Sweep {
        /// fusion, freq, time, eps or arch.
        #[arg(long)]
        axis: Axis,
        /// Comma-separated ε values for mask and ε sweeps.
        #[arg(long, value_delimiter = ',', default_values_t = vec![0.1, 0.3])]
        eps_list: Vec<f64>,
    },
    /// Compare a clean and an attacked report class by class.
    Report {
        #[arg(long)]
        clean: Option<PathBuf>,
        #[arg(long)]
        attacked: Option<PathBuf>,
        #[arg(long, default_value_t = 5)]
        top_k: usize,
    },
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    let env_workdir = std::env::var_os("AVROBUST_WORKDIR").map(PathBuf::from);
    let Some(path) = path else {
        return Ok(ExperimentConfig::with_workdir(env_workdir.unwrap_or_else(|| ".".into())));
    };
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let parsed = parse_config_verbose(&text)?;
    for line in parsed.default_lines() {
        info!("{line}");
    }
    let mut cfg = parsed.config;
    if parsed.defaulted.iter().any(|k| k == "paths.workdir") {
        if let Some(w) = env_workdir {
            cfg.workdir = w;
        }
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = load_config(cli.config.as_deref())?;
    let o = &cli.overrides;
    Overrides {
        fusion: o.fusion,
        norm: o.norm,
        epsilon: o.eps,
        alpha: o.alpha,
        steps: o.steps,
        freq_mask: o.freq_mask,
        time_mask: o.time_mask,
        seed: o.seed,
    }
    .apply(&mut cfg)?;
    let out = cli.out.as_deref();
    let ws = Workspace::new(&cfg.workdir);
    match cli.command {
        Command::Synth => {
            let m = cmd_synth(&cfg, out)?;
            println!("{} clips, manifest hash {}", m.records.len(), m.hash()?);
        }
        Command::Train { manifest } => {
            let t = cmd_train(&cfg, manifest.as_deref(), out)?;
            println!("{} {}", t.checkpoint.display(), t.hash);
        }
        Command::Attack { checkpoint, manifest } => {
            let p = cmd_attack(&cfg, checkpoint.as_deref(), manifest.as_deref(), out)?;
            println!(
                "{} norm {} = {:.6} after {} steps",
                out.map_or_else(|| ws.perturbation(), Path::to_path_buf).display(),
                p.config.norm,
                p.config.norm.of(&p.delta),
                p.steps_run
            );
        }
        Command::Eval {
            checkpoint,
            perturbation,
            manifest,
        } => {
            let r = cmd_eval(&cfg, checkpoint.as_deref(), perturbation.as_deref(), manifest.as_deref(), out)?;
            println!(
                "mAP {:.4}  AUC {:.4}  d' {:.4}",
                r.aggregate.map, r.aggregate.auc, r.aggregate.dprime
            );
        }
        Command::Sweep { axis, eps_list } => {
            let plan = SweepPlan::default_for(axis, &eps_list)?;
            let o = cmd_sweep(&plan, &cfg, out)?;
            print!("{}", o.csv);
        }
        Command::Report {
            clean,
            attacked,
            top_k,
        } => {
            let clean = clean.unwrap_or_else(|| ws.report("clean"));
            let attacked = attacked.unwrap_or_else(|| ws.report("attacked"));
            let out = out.map_or_else(|| ws.comparison(), Path::to_path_buf);
            let c = cmd_report(&clean, &attacked, &out)?;
            print!("{}", c.top_k(top_k).render());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
