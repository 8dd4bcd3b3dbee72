//! Thin command-line front end over the pipeline stages.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use tatsearch::config::RunConfig;
use tatsearch::pipeline;

#[derive(Parser)]
#[command(name = "tatsearch", about = "Desk-scale instance search: generate, train, index, search, evaluate")]
struct Cli {
    /// Config file (flat key=value); defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override dataset and training seeds.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Artifact directory for models, indexes, results and reports.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset.
    Gen,
    /// Train the joint detector + representation model.
    Train,
    /// Run the detector over the test split and print detection lines.
    Detect,
    /// Build the gallery index from the trained model.
    Index,
    /// Run all retrieval queries against the index.
    Search,
    /// Search a single image and print its ranked list.
    Query {
        /// PPM or PGM image to use as the query.
        image: PathBuf,
    },
    /// Print the metrics report (detection, retrieval, identification).
    Eval,
    /// Finite-difference audit of every differentiable op and loss.
    Gradcheck,
    /// Loss-subset ablation: three training runs per seed, three reports.
    Ablate,
}

fn run() -> Result<String, tatsearch::Error> {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap usage problems are validation errors (exit 1).
            e.print().ok();
            std::process::exit(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.dataset_seed = seed;
        cfg.train_seed = seed;
    }
    cfg.validate()?;
    match cli.command {
        Command::Gen => pipeline::stage_gen(&cfg),
        Command::Train => pipeline::stage_train(&cfg, &cli.out),
        Command::Detect => pipeline::stage_detect(&cfg, &cli.out),
        Command::Index => pipeline::stage_index(&cfg, &cli.out),
        Command::Search => pipeline::stage_search(&cfg, &cli.out),
        Command::Query { image } => pipeline::stage_query(&cfg, &cli.out, &image),
        Command::Eval => pipeline::stage_eval(&cfg, &cli.out),
        Command::Gradcheck => pipeline::stage_gradcheck(&cfg),
        Command::Ablate => pipeline::stage_ablate(&cfg, &cli.out),
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(output) => {
            if !output.is_empty() {
                println!("{output}");
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
