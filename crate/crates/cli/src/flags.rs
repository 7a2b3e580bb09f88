//! Command-line flags for every training configuration key.

use std::path::Path;

use clap::parser::ValueSource;
use clap::{Arg, ArgAction, ArgMatches};
use kepler_core::train::config::{TrainConfig, CONFIG_KEYS};

use crate::CliError;

/// Help text and, for keys resolved from other settings, the rule that
/// stands in for a fixed default.
fn describe(key: &str) -> (&'static str, Option<&'static str>) {
    match key {
        "model" => (
            "Model preset: kepler-wiki, kepler-rel, kepler-cond, kepler-ke, mlm-only, transe, distmult, complex, rotate, simple",
            None,
        ),
        "objective" => ("Objective override: joint, ke_only, mlm_only", None),
        "gamma" => ("Margin of the KE loss", Some("4 for joint training, 9 otherwise")),
        "gamma2" => ("Margin of the second graph's KE loss", None),
        "neg" => ("Negatives per positive triplet", Some("1 for encoder models, 64 for tables")),
        "dim" => ("Embedding and hidden size", None),
        "layers" => ("Encoder layers", None),
        "heads" => ("Attention heads", None),
        "ffn" => ("Feed-forward width", Some("2 x dim")),
        "max_len" => ("Token limit of one description or corpus row, <s> included", None),
        "vocab_size" => ("BPE vocabulary budget, specials and bytes included", None),
        "dropout" => ("Dropout probability", None),
        "batch_ke" => ("Positive triplets per step", None),
        "batch_mlm" => ("Corpus rows per step", None),
        "epochs" => ("Passes over the training triplets", None),
        "steps" => ("Optimizer step limit", Some("set by epochs")),
        "accum" => ("Micro-batches accumulated per optimizer step", None),
        "lr" => ("Peak learning rate", Some("1e-4 for encoder models, 1e-3 for tables")),
        "beta1" => ("Adam first-moment decay", None),
        "beta2" => ("Adam second-moment decay", None),
        "eps" => ("Adam epsilon", None),
        "warmup" => ("Linear warmup steps", Some("5% of all steps")),
        "init_range" => ("Table initialization half-width", Some("(gamma + 2) / dim")),
        "seed" => ("Seed of every random stream", None),
        "log_every" => ("Steps between logged losses", None),
        "checkpoint_every" => ("Steps between intermediate checkpoints", Some("final checkpoint only")),
        "checkpoint" => ("Checkpoint path", Some("no checkpoint")),
        "second_kg" => (
            "Directory holding train.txt and descriptions.txt of a second graph",
            Some("none"),
        ),
        _ => ("", None),
    }
}

pub fn flag_name(key: &str) -> String {
    key.replace('_', "-")
}

/// One flag per configuration key except those in `skip`, followed by `--config`.
pub fn config_args(skip: &[&str]) -> Vec<Arg> {
    let defaults = TrainConfig::default();
    let mut args: Vec<Arg> = CONFIG_KEYS
        .iter()
        .filter(|k| !skip.contains(k))
        .map(|&key| {
            let (help, rule) = describe(key);
            let name = flag_name(key);
            let arg = Arg::new(key).long(name).value_name("VALUE").action(ArgAction::Set);
            match (rule, defaults.get(key)) {
                (None, Some(v)) => arg.help(help).default_value(v),
                (Some(rule), _) => arg.help(format!("{help} [default: {rule}]")),
                (None, None) => arg.help(help),
            }
        })
        .collect();
    args.push(
        Arg::new("config")
            .long("config")
            .value_name("FILE")
            .help("File of `key = value` lines applied before the flags"),
    );
    args
}

/// Defaults, then the `--config` file, then flags given on the command line.
pub fn train_config(m: &ArgMatches) -> Result<TrainConfig, CliError> {
    let mut cfg = TrainConfig::default();
    if let Some(path) = m.get_one::<String>("config") {
        let text = std::fs::read_to_string(Path::new(path))
            .map_err(|e| CliError::Usage(format!("--config {path}: {e}")))?;
        cfg.apply_text(&text)
            .map_err(|e| CliError::Usage(format!("--config {path}: {e}")))?;
    }
    for key in CONFIG_KEYS {
        let explicit = matches!(m.try_get_raw(key), Ok(Some(_)))
            && m.value_source(key) == Some(ValueSource::CommandLine);
        if explicit {
            let value = m.get_one::<String>(key).expect("flag takes a value");
            cfg.set(key, value)
                .map_err(|e| CliError::Usage(format!("--{}: {e}", flag_name(key))))?;
        }
    }
    Ok(cfg)
}
