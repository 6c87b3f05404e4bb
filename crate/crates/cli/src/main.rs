use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod config;

#[derive(Parser, Debug)]
#[command(
    name = "dgt",
    version,
    about = "District-guided text-to-IPA transcription"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Length, vocabulary and out-of-vocabulary statistics for corpus files.
    Stats(StatsArgs),
    /// Write a synthetic two-dialect corpus with known rewrite rules.
    Synth(SynthArgs),
    /// Train a model and write checkpoints plus a metrics log.
    Train(TrainArgs),
    /// Transcribe an input file with a trained checkpoint.
    Infer(InferArgs),
    /// Score predictions against references with word error rate.
    Eval(EvalArgs),
}

#[derive(Args, Debug)]
pub struct StatsArgs {
    /// Training file (index,district,contents,ipa).
    #[arg(long)]
    pub train: PathBuf,
    /// Optional test file (index,district,contents) for the OOV analysis.
    #[arg(long)]
    pub test: Option<PathBuf>,
    /// Print JSON instead of a table.
    #[arg(long)]
    pub json: bool,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Comma-separated districts from the built-in rule set (d1, d2).
    #[arg(long, default_value = "d1,d2", value_delimiter = ',')]
    pub districts: Vec<String>,
    #[arg(long, default_value_t = 2000)]
    pub per_district: usize,
    #[arg(long, default_value_t = 2)]
    pub min_len: usize,
    #[arg(long, default_value_t = 8)]
    pub max_len: usize,
    /// Only emit words containing at least one dialect-dependent grapheme.
    #[arg(long)]
    pub require_ambiguous: bool,
    #[command(flatten)]
    pub run: RunArgs,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Training file with ipa targets.
    #[arg(long)]
    pub train: PathBuf,
    /// Directory for checkpoints, metrics and the run log.
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Continue from a `last.dgt` checkpoint of an earlier run.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[command(flatten)]
    pub run: RunArgs,
}

#[derive(Args, Debug)]
pub struct InferArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Input file (index,district,contents).
    #[arg(long)]
    pub input: PathBuf,
    /// Output file (index,ipa).
    #[arg(long)]
    pub output: PathBuf,
    #[command(flatten)]
    pub run: RunArgs,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Predictions (index,ipa).
    #[arg(long)]
    pub predictions: PathBuf,
    /// References (index,district,contents,ipa).
    #[arg(long)]
    pub references: PathBuf,
    /// Also score a seeded 50:50 public/private partition.
    #[arg(long)]
    pub split: bool,
    /// Write the JSON summary here as well as to stdout.
    #[arg(long)]
    pub json_out: Option<PathBuf>,
    #[command(flatten)]
    pub run: RunArgs,
}

/// Configuration file plus per-key overrides. Unset flags leave the file
/// or default value in place.
#[derive(Args, Debug, Default)]
pub struct RunArgs {
    /// `key = value` configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub d_model: Option<usize>,
    #[arg(long)]
    pub n_heads: Option<usize>,
    #[arg(long)]
    pub encoder_layers: Option<usize>,
    #[arg(long)]
    pub decoder_layers: Option<usize>,
    #[arg(long)]
    pub d_ff: Option<usize>,
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long)]
    pub max_positions: Option<usize>,
    #[arg(long)]
    pub max_gen_len: Option<usize>,
    /// Beam width; 1 selects greedy decoding.
    #[arg(long)]
    pub beam_width: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub adam_beta1: Option<f64>,
    #[arg(long)]
    pub adam_beta2: Option<f64>,
    #[arg(long)]
    pub adam_eps: Option<f64>,
    #[arg(long)]
    pub val_fraction: Option<f64>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub use_district_tokens: Option<bool>,
    #[arg(long)]
    pub sort_window: Option<usize>,
    #[arg(long)]
    pub val_max_gen_len: Option<usize>,
}

impl RunArgs {
    fn overrides(&self) -> Vec<(&'static str, String)> {
        let mut out = Vec::new();
        macro_rules! push {
            ($($field:ident),*) => {
                $(if let Some(v) = &self.$field {
                    out.push((stringify!($field), v.to_string()));
                })*
            };
        }
        push!(
            seed,
            d_model,
            n_heads,
            encoder_layers,
            decoder_layers,
            d_ff,
            dropout,
            max_positions,
            max_gen_len,
            beam_width,
            batch_size,
            learning_rate,
            weight_decay,
            adam_beta1,
            adam_beta2,
            adam_eps,
            val_fraction,
            max_epochs,
            patience,
            use_district_tokens,
            sort_window,
            val_max_gen_len
        );
        out
    }

    pub fn resolve(&self) -> anyhow::Result<config::RunConfig> {
        let config = config::RunConfig::resolve(self.config.as_deref(), &self.overrides())?;
        log::info!("effective configuration:\n{}", config.render().trim_end());
        Ok(config)
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Stats(a) => commands::stats(&a),
        Command::Synth(a) => commands::synth(&a),
        Command::Train(a) => commands::train(&a),
        Command::Infer(a) => commands::infer(&a),
        Command::Eval(a) => commands::eval(&a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
