mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::commands::ErrorLog;
use crate::config::RunConfig;

/// Diotic auditory attention decoding from EEG.
#[derive(Debug, Parser)]
#[command(name = "aad", version)]
struct Cli {
    /// JSON run configuration; flags given on the command line override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Directory holding `manifest.json` and the files it lists.
    #[arg(long, global = true, env = "AAD_DATASET_ROOT")]
    dataset_root: Option<PathBuf>,

    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Decision window in seconds: 1, 3 or 5.
    #[arg(long, global = true)]
    window: Option<f64>,

    /// aad, mmm-att or mmm-unatt.
    #[arg(long, global = true)]
    task: Option<String>,

    #[arg(long, global = true)]
    fold: Option<usize>,

    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads; defaults to all logical cores.
    #[arg(long, global = true)]
    jobs: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic dataset with a known attention effect.
    Synth {
        #[arg(long)]
        subjects: Option<usize>,
        #[arg(long)]
        sessions: Option<usize>,
        #[arg(long)]
        duration: Option<f64>,
        #[arg(long)]
        gain: Option<f64>,
        #[arg(long)]
        unattended_gain: Option<f64>,
        #[arg(long)]
        noise: Option<f64>,
    },
    /// Band-pass, re-reference and resample raw EEG to the model rate.
    Preprocess,
    /// Project speech features onto principal components fitted on training subjects.
    Pca {
        #[arg(long)]
        components: Option<usize>,
        /// Fit on every subject instead of the fold's training subjects.
        #[arg(long)]
        all_subjects: bool,
    },
    /// Train and test one fold.
    Train,
    /// Seven-fold subject-wise cross-validation.
    Crossval {
        /// Comma-separated fold indices; all folds when omitted.
        #[arg(long, value_delimiter = ',')]
        folds: Option<Vec<usize>>,
    },
    /// Train a match-mismatch model on one stream.
    Mmm {
        /// attended or unattended.
        #[arg(long)]
        stream: Option<String>,
    },
    /// Per-channel expected-gradients importance of a trained model.
    Attribute {
        /// Checkpoint directory written by `train`, `mmm` or `crossval`.
        #[arg(long)]
        model: Option<PathBuf>,
        /// Second checkpoint for a difference map.
        #[arg(long)]
        compare_model: Option<PathBuf>,
        /// Task of the second checkpoint.
        #[arg(long)]
        compare_task: Option<String>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Synth { .. } => "synth",
            Command::Preprocess => "preprocess",
            Command::Pca { .. } => "pca",
            Command::Train => "train",
            Command::Crossval { .. } => "crossval",
            Command::Mmm { .. } => "mmm",
            Command::Attribute { .. } => "attribute",
        }
    }
}

fn merge(cli: &Cli) -> Result<RunConfig, String> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    macro_rules! set {
        ($src:expr => $dst:expr) => {
            if let Some(v) = $src.clone() {
                $dst = v;
            }
        };
    }
    if cli.dataset_root.is_some() {
        cfg.dataset_root = cli.dataset_root.clone();
    }
    if cli.out.is_some() {
        cfg.out = cli.out.clone();
    }
    set!(cli.window => cfg.window_s);
    set!(cli.task => cfg.task);
    set!(cli.fold => cfg.fold);
    set!(cli.seed => cfg.seed);
    match &cli.command {
        Command::Synth {
            subjects,
            sessions,
            duration,
            gain,
            unattended_gain,
            noise,
        } => {
            set!(subjects => cfg.synth.n_subjects);
            set!(sessions => cfg.synth.sessions_per_subject);
            set!(duration => cfg.synth.duration_s);
            set!(gain => cfg.synth.coupling_gain);
            set!(unattended_gain => cfg.synth.unattended_gain);
            set!(noise => cfg.synth.noise_sd);
        }
        Command::Pca {
            components,
            all_subjects,
        } => {
            set!(components => cfg.pca.n_components);
            cfg.pca.all_subjects |= *all_subjects;
        }
        Command::Crossval { folds } => set!(folds => cfg.folds),
        Command::Mmm { stream } => set!(stream => cfg.stream),
        Command::Attribute {
            model,
            compare_model,
            compare_task,
        } => {
            if model.is_some() {
                cfg.model_dir = model.clone();
            }
            if compare_model.is_some() {
                cfg.compare_model_dir = compare_model.clone();
            }
            if compare_task.is_some() {
                cfg.compare_task = compare_task.clone();
            }
        }
        Command::Preprocess | Command::Train => {}
    }
    cfg.finish(cli.command.name())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Some(jobs) = cli.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    let cfg = match merge(&cli) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    let mut log = ErrorLog::default();
    let result = match cli.command {
        Command::Synth { .. } => commands::synth(&cfg, &mut log),
        Command::Preprocess => commands::preprocess(&cfg, &mut log),
        Command::Pca { .. } => commands::pca(&cfg, &mut log),
        Command::Train => commands::train(&cfg, &mut log),
        Command::Crossval { .. } => commands::crossval(&cfg, &mut log),
        Command::Mmm { .. } => commands::mmm(&cfg, &mut log),
        Command::Attribute { .. } => commands::attribute(&cfg, &mut log),
    };
    if let Err(e) = result {
        log.push("fatal", "", e);
    }
    for e in &log.entries {
        eprintln!("error: [{}] {} {}", e.stage, e.item, e.message);
    }
    if let Some(out) = &cfg.out {
        if let Err(e) = log.save(out) {
            eprintln!("error: {e}");
            return ExitCode::FAILURE;
        }
    }
    if log.entries.is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
