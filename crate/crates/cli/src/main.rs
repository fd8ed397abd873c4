mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "canfusion", version, about = "CAN bus intrusion detection with fused frame, prediction-error and window features")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct GlobalArgs {
    /// Directory holding stage artifacts.
    #[arg(long, global = true, env = "CANFUSION_OUT_DIR", default_value = "artifacts")]
    pub out_dir: PathBuf,
    /// Seed for splits, predictor, search and forest [default: 0].
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads [default: all cores].
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Report format on stdout.
    #[arg(long, global = true, value_enum, default_value_t = Format::Text)]
    pub format: Format,
    /// TOML pipeline settings; values in the file override flags.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Text,
    Json,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabelArg {
    Normal,
    Anomalous,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a synthetic labeled capture as csv.
    Generate {
        /// TOML traffic profile and attack [default: built-in spoofing scenario].
        #[arg(long)]
        input: Option<PathBuf>,
        /// Approximate frame count of the built-in scenario.
        #[arg(long, default_value_t = 200_000)]
        frames: usize,
        /// Omit the attack.
        #[arg(long)]
        attack_free: bool,
        /// Output file [default: <out-dir>/traffic.csv].
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Parse a capture into the frame table, row split and raw-field normalizer.
    Ingest {
        /// csv capture: timestamp, hex id, dlc, hex bytes, optional R/T flag.
        #[arg(long)]
        input: PathBuf,
        /// Label for every frame, ignoring flags.
        #[arg(long, value_enum)]
        label: Option<LabelArg>,
    },
    /// Train the payload predictor on an attack-free capture.
    TrainPredictor {
        /// Attack-free csv capture.
        #[arg(long)]
        input: PathBuf,
        /// Label for every frame, ignoring flags.
        #[arg(long, value_enum)]
        label: Option<LabelArg>,
    },
    /// Build the 21-column fused feature matrix.
    Extract {
        /// Frames per temporal window [default: 7500].
        #[arg(long)]
        filter_size: Option<usize>,
        /// Also write the matrix as csv.
        #[arg(long)]
        csv: bool,
    },
    /// Search filter size and feature subset with the genetic algorithm.
    Optimize,
    /// Train the final random forest on the selected features.
    Train {
        /// Features to use: bit string, comma-separated names, "all" or "raw" [default: search result, else all].
        #[arg(long)]
        mask: Option<String>,
        /// Frames per temporal window [default: search result, else 7500].
        #[arg(long)]
        filter_size: Option<usize>,
    },
    /// Score the trained model on the test rows.
    Evaluate,
    /// 5x2cv paired t-test of the selected features against raw fields.
    Ttest {
        /// Score compared across folds [default: accuracy].
        #[arg(long)]
        metric: Option<String>,
        /// Trees per forest inside the test [default: forest setting].
        #[arg(long)]
        trees: Option<usize>,
    },
    /// Summarize available artifacts.
    Report,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            eprintln!("error: {:#}", failure.error);
            ExitCode::from(failure.kind.code())
        }
    }
}
