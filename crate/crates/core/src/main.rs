use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use modbal::checkpoint;
use modbal::commands;
use modbal::config::RunConfig;
use modbal::dataset::SynthSpec;
use modbal::modality::ModalitySet;
use modbal::Result;

#[derive(Parser)]
#[command(
    name = "modbal",
    version,
    about = "Balanced multimodal training on synthetic conversation data"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// JSON config file (a generator spec for gen-data, a run config otherwise).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory (gen-data also accepts a .json file path).
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Comma-separated modality subset, e.g. `t,a`.
    #[arg(long, global = true)]
    modalities: Option<ModalitySet>,

    /// Seed overriding the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    GenData,
    /// Train, writing checkpoint.bin, traces.csv and report.json.
    Train,
    /// Evaluate a checkpoint, optionally on a modality subset.
    Eval {
        /// Checkpoint to evaluate; defaults to checkpoint.bin in the config's output dir.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Dataset file; defaults to the held-out split of the configured data.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Train the full model and each ablation, writing ablation.csv.
    Ablate,
}

fn run_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.set_seed(seed);
    }
    if let Some(out) = &cli.out {
        cfg.output.dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::GenData => {
            let mut spec = match &cli.config {
                Some(p) => serde_json::from_str::<SynthSpec>(&std::fs::read_to_string(p)?)?,
                None => SynthSpec::default(),
            };
            if let Some(seed) = cli.seed {
                spec.seed = seed;
            }
            let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("."));
            let (path, data) = commands::gen_data(&spec, &out)?;
            println!(
                "wrote {}: {}",
                path.display(),
                commands::dataset_summary(&data)
            );
        }
        Command::Train => {
            let mut cfg = run_config(&cli)?;
            if let Some(m) = cli.modalities {
                cfg.model.modalities = m;
            }
            let outcome = commands::train(&cfg, &cfg.output.dir)?;
            let r = &outcome.report;
            println!(
                "{} steps; train acc {:.4}; held-out acc {:.4}, W-F1 {:.4}; wrote {}",
                r.steps,
                r.train.accuracy,
                r.held_out.accuracy,
                r.held_out.weighted_f1,
                cfg.output.dir.display()
            );
        }
        Command::Eval { checkpoint, data } => {
            let cfg = run_config(&cli)?;
            let ckpt = checkpoint
                .clone()
                .unwrap_or_else(|| cfg.output.dir.join(commands::CHECKPOINT_FILE));
            let model = checkpoint::load(&ckpt)?;
            let active = cli.modalities.unwrap_or(model.modalities());
            let dataset = commands::eval_dataset(&cfg, data.as_deref())?;
            let report = commands::eval(&model, &dataset, active)?;
            let out = match &cli.out {
                Some(o) => o.clone(),
                None => ckpt
                    .parent()
                    .unwrap_or(Path::new("."))
                    .join(format!("eval-{}", active.label())),
            };
            let path = commands::write_eval(&report, &out)?;
            println!(
                "modalities {active}: acc {:.4}, W-F1 {:.4}; wrote {}",
                report.accuracy,
                report.weighted_f1,
                path.display()
            );
        }
        Command::Ablate => {
            let mut cfg = run_config(&cli)?;
            if let Some(m) = cli.modalities {
                cfg.model.modalities = m;
            }
            let rows = commands::ablate(&cfg, &cfg.output.dir)?;
            print!("{}", commands::ablation_csv(&rows));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
