use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand, ValueEnum};
use interpol::commands::{self, Context, EvalMode, EvaluateArgs, GenerateArgs, MakeDataArgs, ModelType};
use interpol::io::corpus::CorpusFormat;
use interpol::{RunConfig, UsageError};
use interpol_core::Schedule;

/// Fills in the middle of a story given its first and last sentence.
#[derive(Debug, Parser)]
#[command(name = "interpol", version)]
struct Cli {
    /// Run configuration (`key = value` lines); defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Parent of the run directories.
    #[arg(long, global = true, default_value = "runs")]
    out: PathBuf,
    /// More log output; repeat for debug.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build the corpus, train/dev/test split and vocabulary.
    MakeData {
        /// Generate stories from the grammar.
        #[arg(long)]
        synthetic: bool,
        /// Number of synthetic stories.
        #[arg(long)]
        n: Option<usize>,
        /// Existing corpus file.
        #[arg(long, requires = "format")]
        input: Option<PathBuf>,
        /// Format of --input: rocstories-csv or plain-lines.
        #[arg(long)]
        format: Option<CorpusFormat>,
    },
    /// Train a model and save a checkpoint.
    Train {
        #[arg(long, value_enum)]
        kind: Kind,
        /// Checkpoint name; defaults to the kind.
        #[arg(long)]
        name: Option<String>,
    },
    /// Generate the interior of one story.
    Generate {
        #[arg(long = "begin")]
        beginning: String,
        #[arg(long = "end")]
        ending: String,
        /// Total story length including both anchors.
        #[arg(long)]
        k: Option<usize>,
        /// Candidates per gap.
        #[arg(long)]
        m: Option<usize>,
        #[arg(long, value_enum)]
        schedule: Option<ScheduleArg>,
        /// One candidate per gap and no ranker.
        #[arg(long)]
        no_ranking: bool,
        #[arg(long, default_value = "generator")]
        generator: String,
        #[arg(long, default_value = "ranker")]
        ranker: String,
    },
    /// Run an evaluation and write its report.
    Evaluate {
        #[arg(long, value_enum)]
        mode: Mode,
        #[arg(long, default_value = "generator")]
        generator: String,
        #[arg(long, default_value = "l2r")]
        l2r: String,
        /// Ranker used inside generation, and the one scored by `--mode ranker`.
        #[arg(long, default_value = "ranker")]
        loop_ranker: String,
        /// Ranker that scores finished stories in `--mode proxy`.
        #[arg(long, default_value = "judge")]
        judge_ranker: String,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Kind {
    Generator,
    L2r,
    Ranker,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ScheduleArg {
    Bisectional,
    Random,
    Sequential,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Mode {
    Table3,
    Ranker,
    Proxy,
    Schedules,
}

fn run(cli: Cli) -> Result<()> {
    let config = match &cli.config {
        Some(path) => RunConfig::load(path).map_err(|e| UsageError(format!("{e:#}")))?,
        None => RunConfig::default(),
    };
    let ctx = Context::new(config, &cli.out, cli.seed);
    match cli.command {
        Command::MakeData { synthetic, n, input, format } => {
            let args = MakeDataArgs { n, input: input.zip(format), synthetic };
            let manifest = commands::make_data(&ctx, &args)?;
            println!(
                "{} train / {} dev / {} test stories in {}",
                manifest.train.len(),
                manifest.dev.len(),
                manifest.test.len(),
                ctx.run.root.display()
            );
        }
        Command::Train { kind, name } => {
            let kind = match kind {
                Kind::Generator => ModelType::Generator,
                Kind::L2r => ModelType::L2r,
                Kind::Ranker => ModelType::Ranker,
            };
            let s = commands::train(&ctx, kind, name.as_deref())?;
            let last = s.epoch_losses.last().copied().unwrap_or(f64::NAN);
            println!("{}: {} examples, final loss {last:.4}, digest {}", s.name, s.examples, &s.digest[..16]);
        }
        Command::Generate { beginning, ending, k, m, schedule, no_ranking, generator, ranker } => {
            let schedule = schedule.map(|s| match s {
                ScheduleArg::Bisectional => Schedule::Bisectional,
                ScheduleArg::Random => Schedule::RandomInsertion,
                ScheduleArg::Sequential => Schedule::Sequential,
            });
            let args = GenerateArgs { beginning, ending, k, m, schedule, no_ranking, generator, ranker };
            let (story, trace) = commands::generate(&ctx, &args)?;
            for s in story {
                println!("{s}");
            }
            log::info!("trace written to {}", trace.display());
        }
        Command::Evaluate { mode, generator, l2r, loop_ranker, judge_ranker } => {
            let mode = match mode {
                Mode::Table3 => EvalMode::Table3,
                Mode::Ranker => EvalMode::Ranker,
                Mode::Proxy => EvalMode::Proxy,
                Mode::Schedules => EvalMode::Schedules,
            };
            let (table, path) = commands::evaluate(&ctx, &EvaluateArgs { mode, generator, l2r, loop_ranker, judge_ranker })?;
            print!("{table}");
            println!("report: {}", path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
