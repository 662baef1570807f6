mod commands;
mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use polysent::Error;

use config::{IngestFile, InputFormat, RunConfig};

#[derive(Parser)]
#[command(name = "polysent", version, about = "Language-independent CNN-LSTM sentiment classifier")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Run configuration (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (or file, for `predict`).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Convert vendor corpora to canonical `label<TAB>source<TAB>text` files.
    Ingest {
        #[command(flatten)]
        common: Common,
        /// Input as NAME=PATH; may be repeated.
        #[arg(long = "input", value_name = "NAME=PATH")]
        inputs: Vec<String>,
        /// Format of every --input file.
        #[arg(long, value_enum, default_value = "canonical")]
        format: InputFormat,
        #[arg(long)]
        delimiter: Option<char>,
        #[arg(long)]
        text_column: Option<usize>,
        #[arg(long)]
        label_column: Option<usize>,
    },
    /// Stratified train/test split and mixed-language datasets.
    Split {
        #[command(flatten)]
        common: Common,
    },
    /// Train one model.
    Train {
        #[command(flatten)]
        common: Common,
        /// Select epochs on the test split (leaks test data; the report is watermarked).
        #[arg(long)]
        paper_protocol: bool,
    },
    /// Train every dropout × optimizer × learning-rate cell and rank them.
    GridSearch {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        paper_protocol: bool,
    },
    /// Score a saved model on a canonical split.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        split: PathBuf,
    },
    /// Label texts with a saved model.
    Predict {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long, conflicts_with = "file")]
        text: Option<String>,
        /// One text per line, or a canonical dataset file.
        #[arg(long)]
        file: Option<PathBuf>,
    },
}

fn load_config(common: &Common) -> Result<RunConfig, Error> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io { .. } => 2,
        Error::Numerical(_) => 3,
        _ => 1,
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Ingest {
            common,
            inputs,
            format,
            delimiter,
            text_column,
            label_column,
        } => {
            let mut cfg = load_config(&common)?;
            for input in inputs {
                let (name, path) = input
                    .split_once('=')
                    .ok_or_else(|| Error::config(format!("--input expects NAME=PATH, got {input:?}")))?;
                let columns = match format {
                    InputFormat::Canonical => None,
                    InputFormat::Twitter | InputFormat::Germeval => {
                        let mut spec = if format == InputFormat::Twitter {
                            polysent::text::ColumnSpec::twitter()
                        } else {
                            polysent::text::ColumnSpec::germeval()
                        };
                        spec.delimiter = delimiter.unwrap_or(spec.delimiter);
                        spec.text_column = text_column.unwrap_or(spec.text_column);
                        spec.label_column = label_column.unwrap_or(spec.label_column);
                        Some(spec)
                    }
                };
                cfg.ingest.files.push(IngestFile {
                    name: name.to_owned(),
                    path: PathBuf::from(path),
                    format,
                    columns,
                });
            }
            let out = commands::default_out(&cfg, common.out);
            commands::ingest(&cfg, &out)?;
            println!("wrote canonical files and counts.json to {}", out.display());
        }
        Command::Split { common } => {
            let cfg = load_config(&common)?;
            let out = commands::default_out(&cfg, common.out);
            commands::split(&cfg, &out)?;
            println!("wrote splits and split-counts.json to {}", out.display());
        }
        Command::Train { common, paper_protocol } => {
            let cfg = load_config(&common)?;
            let out = commands::default_out(&cfg, common.out);
            let report = commands::train_cmd(&cfg, &out, paper_protocol)?;
            println!("best epoch {} of {} ({})", report.best_epoch, report.epochs.len(), report.stop_reason);
            if let Some(test) = &report.test {
                println!("test accuracy {:.4} macro-F1 {:.4}", test.accuracy, test.macro_f1);
            }
            if let Some(w) = &report.watermark {
                println!("note: {w}");
            }
        }
        Command::GridSearch { common, paper_protocol } => {
            let cfg = load_config(&common)?;
            let out = commands::default_out(&cfg, common.out);
            let outcome = commands::grid_search_cmd(&cfg, &out, paper_protocol)?;
            println!(
                "{} cells ({} trained, {} reused); leaderboard at {}",
                outcome.leaderboard.len(),
                outcome.trained,
                outcome.reused,
                out.join("leaderboard.csv").display()
            );
            if let Some(best) = outcome.leaderboard.first() {
                println!("best: {}", best.cell.slug());
            }
        }
        Command::Evaluate { common, model, split } => {
            let cfg = load_config(&common)?;
            let out = commands::default_out(&cfg, common.out);
            let report = commands::evaluate_cmd(&model, &split, &out)?;
            println!(
                "accuracy {:.4} macro-P {:.4} macro-R {:.4} macro-F1 {:.4}",
                report.accuracy, report.macro_precision, report.macro_recall, report.macro_f1
            );
        }
        Command::Predict {
            common,
            model,
            text,
            file,
        } => {
            let texts = match (text, file) {
                (Some(t), _) => vec![t],
                (None, Some(f)) => commands::read_texts(&f)?,
                (None, None) => return Err(Error::config("predict needs --text or --file")),
            };
            commands::predict_cmd(&model, &texts, common.out.as_deref().map(Path::new))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            // usage errors count as validation failures; exit 2 is reserved for I/O
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
