//! `moscode`: train subword and word-code dictionaries, inspect them, and
//! run the output-layer experiments.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgAction, Parser, Subcommand};

use crate::config::{BenchOpts, BpeOpts, FileConfig, RankOpts, TableOpts};

#[derive(Debug, Parser)]
#[command(name = "moscode", version, about)]
struct Cli {
    /// Repeat for more log output on stderr.
    #[arg(short, long, action = ArgAction::Count, global = true)]
    verbose: u8,
    /// TOML file with `[train-bpe]`, `[learn-table]`, `[rank]` and `[bench]`
    /// tables. Flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Learn BPE merges from a corpus.
    TrainBpe {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[command(flatten)]
        opts: BpeOpts,
    },
    /// Learn a hybrid word-code table by alternating model training and reassignment.
    LearnTable {
        #[arg(long)]
        input: PathBuf,
        /// Table file.
        #[arg(long)]
        output: PathBuf,
        /// Per-round trace file.
        #[arg(long)]
        trace: PathBuf,
        /// Also save the final code model.
        #[arg(long)]
        lm_output: Option<PathBuf>,
        #[command(flatten)]
        opts: TableOpts,
    },
    /// Encode text with a merge file or a table file.
    Encode(commands::StreamArgs),
    /// Decode codes back to text.
    Decode(commands::StreamArgs),
    /// List a table's words by row code, in column order.
    DumpTable {
        #[arg(long)]
        table: PathBuf,
        /// Defaults to stdout.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Fit single and mixture output layers to a high-rank target.
    Rank {
        #[arg(long)]
        output: Option<PathBuf>,
        #[command(flatten)]
        opts: RankOpts,
    },
    /// Time output layers across output sizes.
    Bench {
        #[arg(long)]
        output: Option<PathBuf>,
        #[command(flatten)]
        opts: BenchOpts,
    },
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let file = match &cli.config {
        Some(path) => FileConfig::load(path)?,
        None => FileConfig::default(),
    };
    match cli.command {
        Command::TrainBpe { input, output, opts } => commands::train_bpe(&input, &output, opts.overlay(file.train_bpe)),
        Command::LearnTable {
            input,
            output,
            trace,
            lm_output,
            opts,
        } => commands::learn_table(
            &input,
            &output,
            &trace,
            lm_output.as_deref(),
            opts.overlay(file.learn_table),
        ),
        Command::Encode(args) => commands::encode(&args),
        Command::Decode(args) => commands::decode(&args),
        Command::DumpTable { table, output } => commands::dump_table(&table, output.as_deref()),
        Command::Rank { output, opts } => commands::rank(output.as_deref(), opts.overlay(file.rank)),
        Command::Bench { output, opts } => commands::bench(output.as_deref(), opts.overlay(file.bench)),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        2 => log::LevelFilter::Debug,
        _ => log::LevelFilter::Trace,
    };
    env_logger::Builder::new()
        .filter_level(level)
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn large_table_flags_parse() {
        let cli = Cli::try_parse_from([
            "moscode",
            "learn-table",
            "--input",
            "c.txt",
            "--output",
            "t",
            "--trace",
            "r",
            "--k-freq",
            "9652",
            "--rows",
            "174",
            "--cols",
            "174",
            "--rounds",
            "2",
            "--seed",
            "5",
        ])
        .unwrap();
        let Command::LearnTable { opts, .. } = cli.command else {
            panic!("wrong subcommand");
        };
        assert_eq!((opts.k_freq, opts.rows, opts.cols), (Some(9652), Some(174), Some(174)));
        // A 30k vocabulary plus OOV fits.
        moscode::codetable::CodeTable::init(30_000, 9652, 174, 174).unwrap();
    }

    #[test]
    fn list_flags_split_on_commas() {
        let cli = Cli::try_parse_from(["moscode", "rank", "--mixtures", "1,2,4", "--seeds", "3"]).unwrap();
        let Command::Rank { opts, .. } = cli.command else {
            panic!("wrong subcommand");
        };
        assert_eq!(opts.mixtures, Some(vec![1, 2, 4]));
    }

    #[test]
    fn unknown_command_is_rejected() {
        assert!(Cli::try_parse_from(["moscode", "frobnicate"]).is_err());
    }
}
