use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use qa_prompts::pipeline::{self, EvalOptions, RunConfig};
use qa_prompts::reasoner::FusionMode;
use qa_prompts::Error;

#[derive(Parser, Debug)]
#[command(name = "qa-prompts", version, about = "Q&A prompt mining and visual-aware prompting on toy data")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Run config (JSON). `synth` writes one next to the data it generates.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Evaluate with bundles cut down to their first P pairs.
    #[arg(long, global = true)]
    p_override: Option<usize>,

    #[arg(long, global = true, value_parser = ["none", "prepend", "vpm"])]
    mode: Option<String>,

    #[arg(long, global = true)]
    no_fusion: bool,

    #[arg(long, global = true)]
    no_decoder: bool,

    /// Evaluate with every sample paired with another sample's bundle.
    #[arg(long, global = true)]
    shuffle_bundles: bool,

    /// Run directory (for `synth`, the data directory).
    #[arg(long, global = true, default_value = "run")]
    out: PathBuf,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic world, pretraining corpora and a toy config.
    Synth,
    /// Pretrain the question decoder and train the VQG connector.
    TrainVqg,
    /// Generate candidate questions per tag and select the Top-P bundle.
    GenPrompts,
    /// Train the reasoner (connector, and the VAPM in vpm mode).
    TrainVqa,
    /// Score the held-out samples.
    Eval,
    /// Summarize every evaluation report in the run directory.
    Report,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::ArtifactMismatch(_) => 4,
        Error::Io { .. }
        | Error::Format { .. }
        | Error::Json(_)
        | Error::MissingBundle(_)
        | Error::MissingEmbedding(_)
        | Error::EmptyTable => 3,
        _ => 1,
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig, Error> {
    let mut config = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None if matches!(cli.command, Command::Synth) => RunConfig::toy(),
        None => return Err(Error::Config("--config is required".into())),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(mode) = &cli.mode {
        config.mode = mode.parse::<FusionMode>()?;
    }
    config.ablation.no_fusion |= cli.no_fusion;
    config.ablation.no_decoder |= cli.no_decoder;
    config.validate()?;
    Ok(config)
}

fn run(cli: &Cli) -> Result<(), Error> {
    let out: &Path = &cli.out;
    if let Command::Report = cli.command {
        print!("{}", pipeline::report_stage(out)?);
        return Ok(());
    }
    let config = load_config(cli)?;
    match cli.command {
        Command::Synth => {
            let s = pipeline::synth(&config, out)?;
            println!("wrote {} samples; config at {}", s.samples, s.config_path.display());
        }
        Command::TrainVqg => {
            let r = pipeline::train_vqg_stage(&config, out)?;
            println!(
                "vqg: loss {:.4} -> {:.4} over {} steps",
                r.train.initial_loss,
                r.train.final_loss,
                r.train.curve.len()
            );
        }
        Command::GenPrompts => {
            let records = pipeline::gen_prompts_stage(&config, out)?;
            let empty = records.iter().filter(|r| r.pairs.is_empty()).count();
            println!("bundles: {} samples, {empty} empty", records.len());
        }
        Command::TrainVqa => {
            let r = pipeline::train_vqa_stage(&config, out)?;
            println!("{}: loss {:.4} -> {:.4}", config.label(), r.initial_loss, r.final_loss);
        }
        Command::Eval => {
            let opts = EvalOptions {
                p_override: cli.p_override,
                shuffle_bundles: cli.shuffle_bundles,
            };
            let r = pipeline::eval_stage(&config, out, &opts)?;
            for w in &r.warnings {
                eprintln!("warning: {w}");
            }
            println!(
                "{}: mean soft accuracy {:.4} over {} samples",
                r.report.eval.label, r.report.eval.mean_soft_accuracy, r.report.eval.count
            );
        }
        Command::Report => unreachable!(),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
