mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// Face-conditioned two-speaker separation: synthesize, train, separate, evaluate, plot.
#[derive(Parser, Debug)]
#[command(name = "avsep", version)]
struct Cli {
    /// Root for default output locations.
    #[arg(long, global = true, env = "AVSEP_OUT", default_value = "runs")]
    out_root: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct ConfigArgs {
    /// TOML run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one key, e.g. `--set train.steps=500` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
    /// Master seed (same as `--set seed=N`).
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Seen,
    Unseen,
    All,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render the synthetic corpus and its manifest.
    Synth {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Dataset directory [default: <out-root>/data].
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the cross-modal identity extractor.
    TrainBiometric {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Dataset directory [default: <out-root>/data].
        #[arg(long)]
        data: Option<PathBuf>,
        /// Output directory [default: <out-root>/biometric].
        #[arg(long)]
        out: Option<PathBuf>,
        /// Training steps (same as `--set biometric_train.steps=N`).
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Train the face-conditioned separator.
    TrainSeparator {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Identity checkpoint [default: <out-root>/biometric/biometric.ckpt].
        #[arg(long)]
        biometric: Option<PathBuf>,
        /// Output directory [default: <out-root>/separator].
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        /// `attention` or `uniform` (same as `--set separator.fusion=...`).
        #[arg(long)]
        fusion: Option<String>,
        /// Weight of the speaker-representation loss.
        #[arg(long)]
        lambda_srl: Option<f64>,
    },
    /// Train the audio-only permutation-invariant baseline.
    TrainPit {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Output directory [default: <out-root>/pit].
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Separate one mixture.
    Separate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        mixture: PathBuf,
        /// Face of the target speaker (conditioned models).
        #[arg(long)]
        face: Option<PathBuf>,
        /// Separator or baseline checkpoint.
        #[arg(long)]
        separator: PathBuf,
        /// Identity checkpoint (conditioned models).
        #[arg(long)]
        biometric: Option<PathBuf>,
        /// Output WAV.
        #[arg(long)]
        output: PathBuf,
        /// Clean target reference; with `--interferer` prints SDR columns and the verdict.
        #[arg(long)]
        target: Option<PathBuf>,
        #[arg(long)]
        interferer: Option<PathBuf>,
        /// Gain applied to the interferer reference when it was mixed.
        #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
        interferer_gain_db: f64,
    },
    /// Score a separator on the evaluation splits.
    Evaluate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        separator: PathBuf,
        #[arg(long)]
        biometric: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = SplitArg::All)]
        split: SplitArg,
        /// Output directory [default: <out-root>/eval].
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write log-magnitude spectrogram images (PGM).
    Plot {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// WAV files; in triptych mode exactly three (clean, mixture, separated).
        #[arg(required = true)]
        wavs: Vec<PathBuf>,
        /// Output directory [default: <out-root>/plots].
        #[arg(long)]
        out: Option<PathBuf>,
        /// Place the three spectrograms side by side in one image.
        #[arg(long)]
        triptych: bool,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let root = cli.out_root;
    let or = |p: Option<PathBuf>, sub: &str| p.unwrap_or_else(|| root.join(sub));
    let bio_default = root.join("biometric").join(commands::BIOMETRIC_CKPT);
    let result = match cli.command {
        Command::Synth { cfg, out } => commands::synth(&cfg, &or(out, "data")),
        Command::TrainBiometric { cfg, data, out, steps } => {
            commands::train_biometric(&cfg, &or(data, "data"), &or(out, "biometric"), steps)
        }
        Command::TrainSeparator {
            cfg,
            data,
            biometric,
            out,
            steps,
            fusion,
            lambda_srl,
        } => commands::train_separator(
            &cfg,
            &or(data, "data"),
            &biometric.unwrap_or(bio_default),
            &or(out, "separator"),
            commands::SeparatorOverrides {
                steps,
                fusion,
                lambda_srl,
            },
        ),
        Command::TrainPit { cfg, data, out, steps } => {
            commands::train_pit(&cfg, &or(data, "data"), &or(out, "pit"), steps)
        }
        Command::Separate {
            cfg,
            mixture,
            face,
            separator,
            biometric,
            output,
            target,
            interferer,
            interferer_gain_db,
        } => commands::separate(
            &cfg,
            &commands::SeparateArgs {
                mixture,
                face,
                separator,
                biometric,
                output,
                target,
                interferer,
                interferer_gain_db,
            },
        ),
        Command::Evaluate {
            cfg,
            data,
            separator,
            biometric,
            split,
            out,
        } => commands::evaluate(
            &cfg,
            &or(data, "data"),
            &separator,
            biometric.as_deref(),
            split,
            &or(out, "eval"),
        ),
        Command::Plot { cfg, wavs, out, triptych } => commands::plot(&cfg, &wavs, &or(out, "plots"), triptych),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
