use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::ArgMatches;
use kepler_autograd::{finite_diff_check, GradCheckOptions, GradCheckReport, ParameterSet, Tape, Var};
use kepler_core::dataset::{ingest_corpus, split_inductive, split_stats, split_transductive, EntityCatalog, Setting, Subset};
use kepler_core::eval::{evaluate_link_prediction, EvalOptions, MetricsReport, SUMMARY_COLUMNS};
use kepler_core::ke::{ke_loss_var, BaselineModel, DescriptionTokens, KeplerModel, NegativeSampler, ALL_BASELINES};
use kepler_core::kg::{KnowledgeGraph, Triplet};
use kepler_core::text::mlm::{apply_mlm_masking, mlm_loss, MlmBatch, MLM_PROPORTIONS, MLM_RATE};
use kepler_core::text::tokenizer::{train_tokenizer, Tokenizer};
use kepler_core::train::{
    load_checkpoint, seeded_stream, train, train_baseline, CorpusLines, GraphInput, GraphTriplets, ModelChoice,
    TextSource, TrainConfig, TrainInputs, TrainReport,
};

use crate::data::{self, DESCRIPTIONS_FILE, RELATION_DESCRIPTIONS_FILE};
use crate::flags::train_config;
use crate::CliError;

fn path_arg(m: &ArgMatches, name: &str) -> Option<PathBuf> {
    m.get_one::<String>(name).map(PathBuf::from)
}

fn required_path(m: &ArgMatches, name: &str) -> Result<PathBuf, CliError> {
    path_arg(m, name).ok_or_else(|| CliError::Usage(format!("--{name} is required")))
}

fn setting_arg(m: &ArgMatches) -> Result<Option<Setting>, CliError> {
    m.get_one::<String>("setting")
        .map(|s| s.parse().map_err(|e: kepler_core::Error| CliError::Usage(e.to_string())))
        .transpose()
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

fn write_relation_descriptions<W: Write>(kg: &KnowledgeGraph, catalog: &EntityCatalog, mut w: W) -> Result<(), CliError> {
    for name in kg.relations().names() {
        if let Some(text) = catalog.relation_description(name) {
            writeln!(w, "{name}\t{text}").map_err(kepler_core::Error::from)?;
        }
    }
    Ok(())
}

pub fn build_splits(m: &ArgMatches) -> Result<(), CliError> {
    let triplets = required_path(m, "triplets")?;
    let out = required_path(m, "out")?;
    let setting = setting_arg(m)?.unwrap_or(Setting::Transductive);
    let n_valid = *m.get_one::<usize>("valid-size").expect("defaulted");
    let n_test = *m.get_one::<usize>("test-size").expect("defaulted");
    let seed = *m.get_one::<u64>("seed").expect("defaulted");
    let min_words = *m.get_one::<usize>("min-words").expect("defaulted");

    let (kg, catalog) = match path_arg(m, "descriptions") {
        Some(desc) => {
            let (kg, mut catalog) = ingest_corpus(data::open(&triplets)?, data::open(&desc)?, min_words)?;
            if !catalog.dropped.is_empty() {
                eprintln!(
                    "dropped {} entities and {} triplets for missing or short descriptions",
                    catalog.dropped.len(),
                    catalog.dropped_triplets
                );
            }
            if let Some(rel) = path_arg(m, "rel-descriptions") {
                catalog.load_relation_descriptions(data::open(&rel)?)?;
            }
            (kg, Some(catalog))
        }
        None => (data::read_graph(&triplets)?, None),
    };
    let split = match setting {
        Setting::Transductive => split_transductive(&kg, n_valid, n_test, seed)?,
        Setting::Inductive => split_inductive(&kg, n_valid, n_test, seed)?,
    };
    split.write_dir(&out)?;
    if let Some(catalog) = &catalog {
        let union = split.union()?;
        let mut w = create(&out.join(DESCRIPTIONS_FILE))?;
        catalog.write_descriptions(&union, &mut w)?;
        w.flush().map_err(kepler_core::Error::from)?;
        if catalog.num_relation_descriptions() > 0 {
            let mut w = create(&out.join(RELATION_DESCRIPTIONS_FILE))?;
            write_relation_descriptions(&union, catalog, &mut w)?;
            w.flush().map_err(kepler_core::Error::from)?;
        }
    }
    split_stats(&split).write(std::io::stdout().lock())?;
    Ok(())
}

pub fn stats(m: &ArgMatches) -> Result<(), CliError> {
    let dir = required_path(m, "triplets")?;
    let split = data::read_split(&dir, setting_arg(m)?)?;
    split_stats(&split).write(std::io::stdout().lock())?;
    Ok(())
}

/// Where the training triplets and their texts come from.
struct TrainData {
    graph: Option<KnowledgeGraph>,
    catalog: Option<EntityCatalog>,
}

fn load_train_data(m: &ArgMatches, needs_graph: bool) -> Result<TrainData, CliError> {
    let triplets = path_arg(m, "triplets");
    let dir = triplets.as_deref().filter(|p| p.is_dir());
    let graph = match &triplets {
        Some(p) if p.is_dir() => Some(data::read_split(p, setting_arg(m)?)?.train),
        Some(p) => Some(data::read_graph(p)?),
        None if needs_graph => return Err(CliError::Usage("--triplets is required for this model".into())),
        None => None,
    };
    let descriptions = data::in_dir_or(m.get_one("descriptions"), dir, DESCRIPTIONS_FILE);
    let relations = data::in_dir_or(m.get_one("rel-descriptions"), dir, RELATION_DESCRIPTIONS_FILE);
    let catalog = descriptions
        .map(|d| data::read_catalog(&d, relations.as_deref()))
        .transpose()?;
    Ok(TrainData { graph, catalog })
}

/// A second graph directory: `train.txt`, `descriptions.txt` and, if
/// present, `relation_descriptions.txt`.
fn load_second_graph(dir: &Path) -> Result<(KnowledgeGraph, EntityCatalog), CliError> {
    let kg = data::read_graph(&dir.join("train.txt"))?;
    let relations = Some(dir.join(RELATION_DESCRIPTIONS_FILE)).filter(|p| p.is_file());
    let catalog = data::read_catalog(&dir.join(DESCRIPTIONS_FILE), relations.as_deref())?;
    Ok((kg, catalog))
}

pub fn run_train(m: &ArgMatches) -> Result<(), CliError> {
    let cfg = train_config(m)?;
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let data = load_train_data(m, cfg.objective.uses_ke())?;

    if cfg.model.is_baseline() {
        let graph = data.graph.as_ref().expect("ke objectives load a graph");
        let (report, _) = train_baseline(cfg.clone(), graph)?;
        return finish_training(&cfg, &report);
    }

    let second = cfg.second_kg.as_deref().map(load_second_graph).transpose()?;
    let corpus_path = path_arg(m, "corpus");
    let corpus = match (&corpus_path, cfg.objective.uses_mlm()) {
        (Some(p), _) => Some(data::read_corpus(p)?),
        (None, true) => {
            let (Some(kg), Some(catalog)) = (&data.graph, &data.catalog) else {
                return Err(CliError::Usage("masked language modeling needs --corpus or entity descriptions".into()));
            };
            Some(CorpusLines::new(data::entity_texts(kg, catalog)))
        }
        (None, false) => None,
    };
    if cfg.objective.uses_ke() && data.catalog.is_none() {
        return Err(CliError::Usage("encoder models need --descriptions".into()));
    }

    let mut tokenizer_text: Vec<String> = Vec::new();
    if let (Some(kg), Some(catalog)) = (&data.graph, &data.catalog) {
        tokenizer_text.extend(data::entity_texts(kg, catalog));
        tokenizer_text.extend(data::relation_texts(kg, catalog));
    }
    if let Some((kg, catalog)) = &second {
        tokenizer_text.extend(data::entity_texts(kg, catalog));
        tokenizer_text.extend(data::relation_texts(kg, catalog));
    }
    if corpus_path.is_some() {
        tokenizer_text.extend(corpus.iter().flat_map(|c| c.lines().iter().cloned()));
    }
    let tokenizer = train_tokenizer(tokenizer_text.iter().map(String::as_str), cfg.vocab_size)?;

    let texts = match (&data.graph, &data.catalog) {
        (Some(kg), Some(catalog)) if cfg.objective.uses_ke() => {
            Some(DescriptionTokens::build(&tokenizer, catalog, kg, cfg.max_len)?)
        }
        _ => None,
    };
    let second_texts = second
        .as_ref()
        .map(|(kg, catalog)| DescriptionTokens::build(&tokenizer, catalog, kg, cfg.max_len))
        .transpose()?;

    let mut source = data.graph.as_ref().map(GraphTriplets);
    let mut second_source = second.as_ref().map(|(kg, _)| GraphTriplets(kg));
    let mut corpus = corpus;
    let inputs = TrainInputs {
        graph: match (&data.graph, &mut source) {
            (Some(graph), Some(source)) if cfg.objective.uses_ke() => Some(GraphInput {
                graph,
                texts: texts.as_ref(),
                source,
            }),
            _ => None,
        },
        second_graph: match (&second, &mut second_source) {
            (Some((graph, _)), Some(source)) => Some(GraphInput {
                graph,
                texts: second_texts.as_ref(),
                source,
            }),
            _ => None,
        },
        corpus: corpus.as_mut().map(|c| c as &mut dyn TextSource),
        tokenizer: Some(&tokenizer),
    };
    let (report, _) = train(cfg.clone(), inputs)?;
    finish_training(&cfg, &report)
}

fn finish_training(cfg: &TrainConfig, report: &TrainReport) -> Result<(), CliError> {
    match &cfg.checkpoint {
        Some(ckpt) => {
            let log = PathBuf::from(format!("{}.log", ckpt.display()));
            let mut w = create(&log)?;
            report.write_log(&mut w)?;
            w.flush().map_err(kepler_core::Error::from)?;
            println!("checkpoint\t{}", ckpt.display());
            println!("log\t{}", log.display());
        }
        None => report.write_log(std::io::stdout().lock())?,
    }
    println!("steps\t{}", report.steps);
    if let Some(last) = report.records.last() {
        println!("final_loss\t{}", last.total);
    }
    if report.false_negatives > 0 {
        println!("false_negatives\t{}", report.false_negatives);
    }
    eprintln!("trained {} steps in {:.1?}", report.steps, report.wall_time);
    Ok(())
}

fn eval_options(m: &ArgMatches) -> EvalOptions {
    EvalOptions {
        raw: m.get_flag("raw-metrics"),
        threads: *m.get_one::<u64>("threads").expect("defaulted") as usize,
    }
}

fn subset_arg(m: &ArgMatches) -> Subset {
    match m.get_one::<String>("subset").map(String::as_str) {
        Some("valid") => Subset::Valid,
        _ => Subset::Test,
    }
}

fn print_report(report: &MetricsReport) -> Result<(), CliError> {
    let mut out = std::io::stdout().lock();
    report.write(&mut out)?;
    writeln!(out, "# {}", SUMMARY_COLUMNS.join("\t")).map_err(kepler_core::Error::from)?;
    writeln!(out, "{}", report.summary_line()).map_err(kepler_core::Error::from)?;
    Ok(())
}

pub fn eval(m: &ArgMatches) -> Result<(), CliError> {
    let checkpoint = required_path(m, "checkpoint")?;
    let dir = required_path(m, "triplets")?;
    let split = data::read_split(&dir, setting_arg(m)?)?;
    let trained = load_checkpoint(&checkpoint)?;
    let texts = match (&trained.spec.model, &trained.tokenizer, &trained.spec.encoder) {
        (ModelChoice::Kepler(_), Some(tokenizer), Some(encoder)) => {
            let descriptions = data::in_dir_or(m.get_one("descriptions"), Some(&dir), DESCRIPTIONS_FILE)
                .ok_or_else(|| CliError::Usage("encoder models need --descriptions".into()))?;
            let relations = data::in_dir_or(m.get_one("rel-descriptions"), Some(&dir), RELATION_DESCRIPTIONS_FILE);
            let catalog = data::read_catalog(&descriptions, relations.as_deref())?;
            Some(DescriptionTokens::build(tokenizer, &catalog, &split.train, encoder.max_positions)?)
        }
        (ModelChoice::Kepler(_), _, _) => {
            return Err(CliError::Runtime(format!(
                "{} lacks the tokenizer or encoder settings of an encoder model",
                checkpoint.display()
            )))
        }
        _ => None,
    };
    let report = evaluate_link_prediction(&trained, &split, subset_arg(m), texts.as_ref(), &eval_options(m))?;
    print_report(&report)
}

pub fn bench(m: &ArgMatches) -> Result<(), CliError> {
    let base = train_config(m)?;
    let dir = required_path(m, "triplets")?;
    let split = data::read_split(&dir, setting_arg(m)?)?;
    if split.setting == Setting::Inductive {
        return Err(CliError::Runtime("table models cannot be evaluated on an inductive split".into()));
    }
    let options = eval_options(m);
    let mut out = std::io::stdout().lock();
    let io = |e: std::io::Error| CliError::from(kepler_core::Error::from(e));
    writeln!(out, "model\t{}", SUMMARY_COLUMNS.join("\t")).map_err(io)?;
    for kind in ALL_BASELINES {
        let mut cfg = base.clone();
        cfg.set("model", kind.as_str())?;
        cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        let (report, trained) = train_baseline(cfg, &split.train)?;
        let metrics = evaluate_link_prediction(&trained, &split, subset_arg(m), None, &options)?;
        writeln!(out, "{}\t{}", kind.display_name(), metrics.summary_line()).map_err(io)?;
        out.flush().map_err(io)?;
        eprintln!("{}: {} steps in {:.1?}", kind.display_name(), report.steps, report.wall_time);
    }
    Ok(())
}

const NUMBER_WORDS: [&str; 12] = [
    "zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten", "eleven",
];

/// Twelve entities on a ring with three relations, each described in words.
fn ring_world() -> (KnowledgeGraph, EntityCatalog) {
    let mut text = String::new();
    let mut catalog = EntityCatalog::new();
    for (i, word) in NUMBER_WORDS.iter().enumerate() {
        text.push_str(&format!("e{i}\tr{}\te{}\n", i % 3, (i + 1) % 12));
        text.push_str(&format!("e{i}\tr{}\te{}\n", (i + 1) % 3, (i + 5) % 12));
        catalog.insert(format!("e{i}"), format!("node {word} of a ring of twelve nodes"));
    }
    for (j, word) in NUMBER_WORDS[..3].iter().enumerate() {
        catalog.insert_relation(format!("r{j}"), format!("relation {word} between ring nodes"));
    }
    (KnowledgeGraph::from_reader(text.as_bytes()).expect("well-formed"), catalog)
}

/// Positives from the front of `kg` followed by their corruptions.
fn check_batch(kg: &KnowledgeGraph, n_pos: usize, n_neg: usize, seed: u64) -> (Vec<Triplet>, usize) {
    let mut rng = seeded_stream(seed, 1);
    let positives: Vec<Triplet> = kg.triplets().iter().take(n_pos).copied().collect();
    let mut sampler = NegativeSampler::new(kg);
    let mut batch = positives.clone();
    for &p in &positives {
        batch.extend(sampler.sample(kg, p, n_neg, &mut rng).into_iter().map(|(t, _)| t));
    }
    (batch, positives.len())
}

pub fn gradcheck(m: &ArgMatches) -> Result<(), CliError> {
    let cfg = train_config(m)?;
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let (kg, catalog) = match path_arg(m, "triplets") {
        Some(p) => {
            let kg = data::read_graph(&p)?;
            let catalog = match path_arg(m, "descriptions") {
                Some(d) => data::read_catalog(&d, path_arg(m, "rel-descriptions").as_deref())?,
                None if cfg.model.is_baseline() => EntityCatalog::new(),
                None => return Err(CliError::Usage("encoder models need --descriptions".into())),
            };
            (kg, catalog)
        }
        None => ring_world(),
    };
    if kg.used_entities().len() < 2 {
        return Err(CliError::Runtime("gradient checks need a graph with at least two entities".into()));
    }
    let opts = GradCheckOptions {
        seed: cfg.seed,
        refine: Some(10.0),
        ..GradCheckOptions::default()
    };
    let n_neg = cfg.n_neg();
    let (batch, n_pos) = check_batch(&kg, 4.min(cfg.batch_ke), n_neg, cfg.seed);
    let mut params = ParameterSet::new();
    let mut init_rng = seeded_stream(cfg.seed, 0);
    let report = match cfg.model {
        ModelChoice::Baseline(kind) => {
            let model = BaselineModel::init(
                kind,
                kg.num_entities(),
                kg.num_relations(),
                cfg.dim,
                cfg.init_range(),
                &mut params,
                &mut init_rng,
            )?;
            finite_diff_check(
                &mut params,
                |tape: &Tape| ke_loss_var(&model.distances(tape, &batch)?, n_pos, n_neg, cfg.gamma()),
                &opts,
            )?
        }
        ModelChoice::Kepler(variant) => {
            let mut text = data::entity_texts(&kg, &catalog);
            text.extend(data::relation_texts(&kg, &catalog));
            let tokenizer = train_tokenizer(text.iter().map(String::as_str), cfg.vocab_size)?;
            let texts = DescriptionTokens::build(&tokenizer, &catalog, &kg, cfg.max_len)?;
            let model = KeplerModel::init(
                variant,
                cfg.encoder_config(tokenizer.vocab_size()),
                &[kg.num_relations()],
                &mut params,
                &mut init_rng,
            )?;
            encoder_check(&cfg, &model, &tokenizer, &texts, &text, (&batch, n_pos, n_neg), &mut params, &opts)?
        }
    };
    print_gradcheck(&report)?;
    if report.passed() {
        Ok(())
    } else {
        Err(CliError::Runtime(format!(
            "max relative error {:e} exceeds {:e}",
            report.max_rel_err, report.tolerance
        )))
    }
}

#[allow(clippy::too_many_arguments)]
fn encoder_check(
    cfg: &TrainConfig,
    model: &KeplerModel,
    tokenizer: &Tokenizer,
    texts: &DescriptionTokens,
    lines: &[String],
    (batch, n_pos, n_neg): (&[Triplet], usize, usize),
    params: &mut ParameterSet,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport, CliError> {
    let rows: Vec<Vec<u32>> = lines.iter().take(4).map(|l| tokenizer.tokenize(l, cfg.max_len)).collect();
    let masked = apply_mlm_masking(
        &rows,
        tokenizer.vocab_size(),
        &mut seeded_stream(cfg.seed, 4),
        MLM_RATE,
        MLM_PROPORTIONS,
    )?;
    Ok(finite_diff_check(
        params,
        |tape: &Tape| encoder_loss(tape, cfg, model, texts, &masked, (batch, n_pos, n_neg)),
        opts,
    )?)
}

fn encoder_loss<'a>(
    tape: &'a Tape<'a>,
    cfg: &TrainConfig,
    model: &KeplerModel,
    texts: &DescriptionTokens,
    masked: &MlmBatch,
    (batch, n_pos, n_neg): (&[Triplet], usize, usize),
) -> Result<Var<'a>, kepler_core::Error> {
    let mut rng = seeded_stream(cfg.seed, 5);
    let ke = if cfg.objective.uses_ke() {
        let d = model.distances(tape, texts, 0, batch, &mut rng)?;
        Some(ke_loss_var(&d, n_pos, n_neg, cfg.gamma())?)
    } else {
        None
    };
    let mlm = if cfg.objective.uses_mlm() {
        Some(mlm_loss(&model.encoder, tape, masked, &mut rng)?)
    } else {
        None
    };
    Ok(match (ke, mlm) {
        (Some(a), Some(b)) => a.add(&b)?,
        (Some(a), None) | (None, Some(a)) => a,
        (None, None) => unreachable!("every objective has a loss"),
    })
}

fn print_gradcheck(report: &GradCheckReport) -> Result<(), CliError> {
    println!("loss\t{}", report.loss);
    println!("checked\t{}", report.checked);
    println!("refined\t{}", report.refined);
    println!("max_rel_err\t{:e}", report.max_rel_err);
    if let Some(w) = &report.worst {
        println!("worst\t{}[{}]\tanalytic {}\tnumeric {}", w.param, w.index, w.analytic, w.numeric);
    }
    println!("result\t{}", if report.passed() { "pass" } else { "fail" });
    Ok(())
}
