//! `kepler`: split building, training, evaluation, baseline benchmark,
//! gradient checks and split statistics.

mod commands;
mod data;
mod flags;

use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{value_parser, Arg, ArgAction, Command};

#[derive(Debug)]
pub enum CliError {
    /// Bad or missing flags; exit code 1.
    Usage(String),
    /// Failure while running; exit code 2.
    Runtime(String),
}

impl From<kepler_core::Error> for CliError {
    fn from(e: kepler_core::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<kepler_autograd::Error> for CliError {
    fn from(e: kepler_autograd::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

fn triplets(help: &'static str) -> Arg {
    Arg::new("triplets").long("triplets").value_name("PATH").help(help)
}

fn descriptions() -> [Arg; 2] {
    [
        Arg::new("descriptions")
            .long("descriptions")
            .value_name("FILE")
            .help("Entity descriptions, `id<TAB>text` per line [default: descriptions.txt in the split directory]"),
        Arg::new("rel-descriptions")
            .long("rel-descriptions")
            .value_name("FILE")
            .help("Relation descriptions, `id<TAB>text` per line [default: relation_descriptions.txt in the split directory]"),
    ]
}

fn setting() -> Arg {
    Arg::new("setting")
        .long("setting")
        .value_name("SETTING")
        .value_parser(["transductive", "inductive"])
        .help("Split setting [default: the one recorded in stats.txt, else transductive]")
}

fn eval_args() -> [Arg; 3] {
    [
        Arg::new("threads")
            .long("threads")
            .value_name("N")
            .value_parser(value_parser!(u64).range(1..))
            .default_value("1")
            .help("Evaluation worker threads"),
        Arg::new("raw-metrics")
            .long("raw-metrics")
            .action(ArgAction::SetTrue)
            .help("Rank without filtering other true answers"),
        Arg::new("subset")
            .long("subset")
            .value_parser(["valid", "test"])
            .default_value("test")
            .help("Evaluated subset"),
    ]
}

fn cli() -> Command {
    let build_splits = Command::new("build-splits")
        .about("Filter a triplet dump by its descriptions and write train/valid/test splits")
        .arg(triplets("Triplet file, `head<TAB>relation<TAB>tail` per line").required(true))
        .args(descriptions())
        .arg(Arg::new("out").long("out").value_name("DIR").required(true).help("Output directory"))
        .arg(setting())
        .arg(
            Arg::new("valid-size")
                .long("valid-size")
                .value_name("N")
                .value_parser(value_parser!(usize))
                .default_value("100")
                .help("Validation triplets (inductive: minimum triplets of the validation subgraphs)"),
        )
        .arg(
            Arg::new("test-size")
                .long("test-size")
                .value_name("N")
                .value_parser(value_parser!(usize))
                .default_value("100")
                .help("Test triplets (inductive: minimum triplets of the test subgraphs)"),
        )
        .arg(
            Arg::new("seed")
                .long("seed")
                .value_name("SEED")
                .value_parser(value_parser!(u64))
                .default_value("0")
                .help("Sampling seed"),
        )
        .arg(
            Arg::new("min-words")
                .long("min-words")
                .value_name("N")
                .value_parser(value_parser!(usize))
                .default_value("5")
                .help("Entities whose description has fewer words are dropped"),
        );

    let train = Command::new("train")
        .about("Train an encoder or table model")
        .arg(triplets("Split directory (its train.txt is used) or a triplet file"))
        .args(descriptions())
        .arg(setting())
        .arg(
            Arg::new("corpus")
                .long("corpus")
                .value_name("FILE")
                .help("Masked language modeling corpus, one row per line [default: the training entity descriptions]"),
        )
        .args(flags::config_args(&[]));

    let eval = Command::new("eval")
        .about("Filtered link-prediction metrics of a checkpoint")
        .arg(
            Arg::new("checkpoint")
                .long("checkpoint")
                .value_name("FILE")
                .required(true)
                .help("Checkpoint written by `train`"),
        )
        .arg(triplets("Split directory").required(true))
        .args(descriptions())
        .arg(setting())
        .args(eval_args());

    let bench = Command::new("bench")
        .about("Train and evaluate the five table baselines on one split")
        .arg(triplets("Transductive split directory").required(true))
        .arg(setting())
        .args(eval_args())
        .args(flags::config_args(&["model", "objective", "checkpoint", "second_kg"]));

    let gradcheck = Command::new("gradcheck")
        .about("Compare loss gradients against central finite differences")
        .arg(triplets("Triplet file [default: a built-in twelve-node ring]"))
        .args(descriptions())
        .args(flags::config_args(&["checkpoint", "second_kg"]));

    let stats = Command::new("stats")
        .about("Counts of a split directory")
        .arg(triplets("Split directory").required(true))
        .arg(setting());

    Command::new("kepler")
        .about("Knowledge embedding with a text encoder and a joint masked-language objective")
        .version(env!("CARGO_PKG_VERSION"))
        .subcommand_required(true)
        .subcommands([build_splits, train, eval, bench, gradcheck, stats])
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let matches = match cli().try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    let (name, m) = matches.subcommand().expect("subcommand required");
    let result = match name {
        "build-splits" => commands::build_splits(m),
        "train" => commands::run_train(m),
        "eval" => commands::eval(m),
        "bench" => commands::bench(m),
        "gradcheck" => commands::gradcheck(m),
        "stats" => commands::stats(m),
        _ => unreachable!("clap rejects unknown subcommands"),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            eprintln!("run `kepler {name} --help` for usage");
            ExitCode::from(1)
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
