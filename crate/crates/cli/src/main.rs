mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "coughgate", version, about = "Cough audio quality gating and screening models")]
pub struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true, env = "COUGHGATE_CONFIG")]
    pub config: Option<PathBuf>,

    /// Override one config key, e.g. `--set cnn.train.epochs=5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub sets: Vec<String>,

    /// Shorthand for `--set run_dir=...`.
    #[arg(long, global = true)]
    pub run_dir: Option<PathBuf>,

    /// More log output (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate the synthetic two-class corpus with a manifest.
    Synth {
        out_dir: PathBuf,
        #[arg(long)]
        n_per_class: Option<usize>,
    },
    /// Run the quality gate on every record; writes reports and a filtered manifest.
    Screen { manifest: PathBuf },
    /// Write per-record feature matrices for records that pass the gate.
    Featurize {
        manifest: PathBuf,
        #[arg(long, value_enum)]
        kind: FeatureKind,
    },
    /// Train the RBF SVM on the train split, report on validation.
    TrainSvm { manifest: PathBuf },
    /// Train the CNN on the train split, selecting on validation AUC.
    TrainCnn { manifest: PathBuf },
    /// Pretrain the SSL encoder on train-split audio (labels unused).
    PretrainSsl { manifest: PathBuf },
    /// Train the SSL classifier head over a frozen pretrained encoder.
    TrainSslHead {
        manifest: PathBuf,
        #[arg(long)]
        encoder: PathBuf,
    },
    /// Score a split with a trained model and write ROC/AUC reports.
    Eval {
        model: PathBuf,
        manifest: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitArg::Validation)]
        split: SplitArg,
        #[arg(long, value_enum, default_value_t = ModelKind::Auto)]
        kind: ModelKind,
    },
    /// Retrain on stratified fractions of the train split.
    Ablate {
        manifest: PathBuf,
        #[arg(long, value_enum)]
        model: AblationModel,
        /// Pretrained encoder, required for `--model ssl`.
        #[arg(long)]
        encoder: Option<PathBuf>,
    },
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum FeatureKind {
    Svm,
    Sonograph,
    Spectrogram,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitArg {
    Train,
    Validation,
    Test,
    All,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    Auto,
    Svm,
    Cnn,
    Ssl,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum AblationModel {
    Svm,
    Cnn,
    Ssl,
}

/// Machine-readable failure line on stderr.
fn error_line(kind: &str, message: &str) {
    eprintln!("{}", serde_json::json!({ "error": { "kind": kind, "message": message } }));
}

fn error_kind(e: &anyhow::Error) -> &'static str {
    e.chain()
        .find_map(|c| c.downcast_ref::<coughgate::Error>().map(coughgate::Error::kind))
        .unwrap_or(if e.chain().any(|c| c.is::<toml::de::Error>()) { "config" } else { "error" })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::{ContextKind, ErrorKind};
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let message = match (e.kind(), e.get(ContextKind::InvalidSubcommand)) {
                (ErrorKind::InvalidSubcommand, Some(cmd)) => format!("unknown subcommand {cmd}"),
                _ => e.render().to_string().lines().next().unwrap_or("usage error").trim_start_matches("error: ").to_string(),
            };
            error_line("usage", &message);
            return ExitCode::from(2);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("COUGHGATE_LOG", level)).init();
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let message = e.chain().map(|c| c.to_string()).collect::<Vec<_>>().join(": ");
            error_line(error_kind(&e), &message);
            ExitCode::FAILURE
        }
    }
}
