mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::{CliConfig, Overrides};

#[derive(Parser)]
#[command(name = "capy", version, about = "Agentic notebook analysis and data storytelling from the command line")]
struct Cli {
    /// Config file (default: ./capy.toml when present)
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct ModelFlags {
    /// Use the multi-agent critique protocol
    #[arg(long)]
    multi: bool,
    /// Discussion round cap for the multi-agent protocol
    #[arg(long, value_name = "N")]
    max_rounds: Option<u32>,
    /// Replay a scripted transcript instead of calling a model
    #[arg(long, value_name = "TRANSCRIPT")]
    stub: Option<PathBuf>,
    /// Model for every role, as provider:model
    #[arg(long, value_name = "SPEC")]
    model: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Run an analysis query and append the resulting cells to the notebook
    Query {
        #[arg(short, long)]
        notebook: PathBuf,
        #[arg(short, long)]
        query: String,
        /// Write here instead of updating the notebook in place
        #[arg(short, long)]
        output: Option<PathBuf>,
        /// Save critique transcripts (multi-agent mode) as JSON
        #[arg(long, value_name = "PATH")]
        transcripts: Option<PathBuf>,
        #[command(flatten)]
        model: ModelFlags,
    },
    /// Generate an annotated data story as a standalone HTML page
    Story {
        #[arg(short, long)]
        notebook: PathBuf,
        #[arg(short, long, default_value = "")]
        instructions: String,
        #[arg(short, long)]
        output: PathBuf,
        /// Also save the story document as JSON
        #[arg(long, value_name = "PATH")]
        json: Option<PathBuf>,
        #[command(flatten)]
        model: ModelFlags,
    },
    /// Summarize the notebook as an insight graph in Mermaid syntax
    Insights {
        #[arg(short, long)]
        notebook: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
        /// Also save the graph as JSON
        #[arg(long, value_name = "PATH")]
        json: Option<PathBuf>,
        #[command(flatten)]
        model: ModelFlags,
    },
    /// Print wave and call accounting for saved critique transcripts
    Replay {
        #[arg(short, long)]
        transcript: PathBuf,
    },
}

fn load_config(path: Option<&std::path::Path>, flags: &ModelFlags) -> Result<CliConfig, String> {
    let env = |k: &str| std::env::var(k).ok().filter(|v| !v.trim().is_empty());
    let overrides = Overrides {
        multi: flags.multi,
        max_rounds: flags.max_rounds,
        stub: flags.stub.clone(),
        model: flags.model.clone(),
    };
    CliConfig::load(path, &overrides, env("CAPY_MODEL"), env("CAPY_PROMPTS_DIR").map(PathBuf::from))
}

#[tokio::main]
async fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("warn")),
        )
        .init();

    let cli = Cli::parse();
    let config_path = cli.config.as_deref();
    let result = match cli.command {
        Command::Query { notebook, query, output, transcripts, model } => match load_config(config_path, &model) {
            Ok(config) => commands::query(&config, &notebook, &query, output.as_deref(), transcripts.as_deref()).await,
            Err(e) => Err(commands::Failure::usage(e)),
        },
        Command::Story { notebook, instructions, output, json, model } => match load_config(config_path, &model) {
            Ok(config) => commands::story(&config, &notebook, &instructions, &output, json.as_deref()).await,
            Err(e) => Err(commands::Failure::usage(e)),
        },
        Command::Insights { notebook, output, json, model } => match load_config(config_path, &model) {
            Ok(config) => commands::insights(&config, &notebook, &output, json.as_deref()).await,
            Err(e) => Err(commands::Failure::usage(e)),
        },
        Command::Replay { transcript } => commands::replay(&transcript),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            eprintln!("capy: {}", failure.message);
            ExitCode::from(failure.code)
        }
    }
}
