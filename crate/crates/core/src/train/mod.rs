//! Joint training of the knowledge-embedding and masked-language objectives,
//! their ablations, and table-model training.

pub mod checkpoint;
pub mod config;

use std::io::{BufRead, Write};
use std::path::PathBuf;
use std::time::{Duration, Instant};

use kepler_autograd::{optimizer_step, ParameterSet, Tape, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::ke::{ke_loss_var, BaselineModel, DescriptionTokens, KeModel, KeplerModel, NegativeSampler};
use crate::kg::{KnowledgeGraph, Triplet};
use crate::text::mlm::{apply_mlm_masking, mlm_loss, MLM_PROPORTIONS, MLM_RATE};
use crate::text::tokenizer::{is_special, Tokenizer};

pub use checkpoint::{load_checkpoint, save_checkpoint, tokenizer_paths, ModelSpec, TrainedModel};
pub use config::{model_preset, ModelChoice, Objective, TrainConfig, CONFIG_KEYS, MODEL_PRESETS};

/// Random streams derived from the run seed, one per purpose.
mod stream {
    pub const INIT: u64 = 0;
    pub const KE_ORDER: u64 = 1;
    pub const NEGATIVES: u64 = 2;
    pub const MLM_ORDER: u64 = 3;
    pub const MLM_MASK: u64 = 4;
    pub const DROPOUT: u64 = 5;
    pub const SECOND_KE_ORDER: u64 = 6;
    pub const SECOND_NEGATIVES: u64 = 7;
}

pub fn seeded_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Random access to training triplets.
pub trait TripletSource {
    fn len(&self) -> usize;
    fn triplet(&mut self, index: usize) -> Triplet;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Random access to corpus lines.
pub trait TextSource {
    fn len(&self) -> usize;
    fn line(&mut self, index: usize) -> String;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub struct GraphTriplets<'a>(pub &'a KnowledgeGraph);

impl TripletSource for GraphTriplets<'_> {
    fn len(&self) -> usize {
        self.0.len()
    }

    fn triplet(&mut self, index: usize) -> Triplet {
        self.0.triplets()[index]
    }
}

#[derive(Clone, Debug, Default)]
pub struct CorpusLines {
    lines: Vec<String>,
}

impl CorpusLines {
    pub fn new(lines: Vec<String>) -> Self {
        CorpusLines { lines }
    }

    /// Non-blank lines of `reader`.
    pub fn from_reader<R: BufRead>(reader: R) -> Result<Self> {
        let mut lines = Vec::new();
        for line in reader.lines() {
            let line = line?;
            if !line.trim().is_empty() {
                lines.push(line);
            }
        }
        Ok(CorpusLines { lines })
    }

    pub fn lines(&self) -> &[String] {
        &self.lines
    }
}

impl TextSource for CorpusLines {
    fn len(&self) -> usize {
        self.lines.len()
    }

    fn line(&mut self, index: usize) -> String {
        self.lines[index].clone()
    }
}

/// One knowledge graph to train on.
pub struct GraphInput<'d> {
    /// Supplies relation counts, the negative entity pool, and the facts
    /// that negatives avoid.
    pub graph: &'d KnowledgeGraph,
    /// Descriptions; required for encoder models.
    pub texts: Option<&'d DescriptionTokens>,
    pub source: &'d mut dyn TripletSource,
}

#[derive(Default)]
pub struct TrainInputs<'d> {
    pub graph: Option<GraphInput<'d>>,
    pub second_graph: Option<GraphInput<'d>>,
    pub corpus: Option<&'d mut dyn TextSource>,
    pub tokenizer: Option<&'d Tokenizer>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub total: f64,
    /// Sum of the per-graph losses.
    pub ke: f64,
    pub mlm: f64,
    pub per_graph: Vec<f64>,
}

#[derive(Clone, Debug, Default)]
pub struct TrainReport {
    pub records: Vec<StepRecord>,
    pub steps: u64,
    pub wall_time: Duration,
    pub checkpoint: Option<PathBuf>,
    /// Negatives that were known facts, accepted after exhausting retries.
    pub false_negatives: u64,
}

impl TrainReport {
    /// `step\tloss_total\tloss_ke\tloss_mlm` lines, preceded by a header.
    pub fn write_log<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "step\tloss_total\tloss_ke\tloss_mlm")?;
        for r in &self.records {
            writeln!(w, "{}\t{}\t{}\t{}", r.step, r.total, r.ke, r.mlm)?;
        }
        Ok(())
    }
}

/// Cycles through a triplet source in a fresh random order each pass.
struct TripletFeed<'d> {
    input: GraphInput<'d>,
    order: Vec<usize>,
    pos: usize,
    order_rng: ChaCha8Rng,
    neg_rng: ChaCha8Rng,
    sampler: NegativeSampler,
    gamma: f64,
}

impl<'d> TripletFeed<'d> {
    fn new(input: GraphInput<'d>, gamma: f64, order_rng: ChaCha8Rng, neg_rng: ChaCha8Rng) -> Result<Self> {
        if input.source.is_empty() {
            return Err(Error::Config("the training graph has no triplets".into()));
        }
        let sampler = NegativeSampler::new(input.graph);
        if sampler.entities().len() < 2 {
            return Err(Error::Config("negative sampling needs at least two entities".into()));
        }
        Ok(TripletFeed {
            input,
            order: Vec::new(),
            pos: 0,
            order_rng,
            neg_rng,
            sampler,
            gamma,
        })
    }

    fn next_positives(&mut self, n: usize) -> Vec<Triplet> {
        (0..n)
            .map(|_| {
                if self.pos == self.order.len() {
                    self.order = (0..self.input.source.len()).collect();
                    self.order.shuffle(&mut self.order_rng);
                    self.pos = 0;
                }
                self.pos += 1;
                self.input.source.triplet(self.order[self.pos - 1])
            })
            .collect()
    }

    /// Positives followed by `n_neg` negatives per positive.
    fn next_batch(&mut self, batch: usize, n_neg: usize) -> Vec<Triplet> {
        let pos = self.next_positives(batch);
        let mut all = pos.clone();
        for &t in &pos {
            let negs = self.sampler.sample(self.input.graph, t, n_neg, &mut self.neg_rng);
            all.extend(negs.into_iter().map(|(c, _)| c));
        }
        all
    }
}

struct CorpusFeed<'d> {
    source: &'d mut dyn TextSource,
    tokenizer: &'d Tokenizer,
    order: Vec<usize>,
    pos: usize,
    order_rng: ChaCha8Rng,
    mask_rng: ChaCha8Rng,
}

impl CorpusFeed<'_> {
    /// Next `n` tokenized lines that contain at least one maskable token.
    fn next_rows(&mut self, n: usize, max_len: usize) -> Result<Vec<Vec<u32>>> {
        let mut rows = Vec::with_capacity(n);
        let mut misses = 0;
        while rows.len() < n {
            if self.pos == self.order.len() {
                self.order = (0..self.source.len()).collect();
                self.order.shuffle(&mut self.order_rng);
                self.pos = 0;
            }
            let line = self.source.line(self.order[self.pos]);
            self.pos += 1;
            let ids = self.tokenizer.tokenize(&line, max_len);
            if ids.iter().any(|&t| !is_special(t)) {
                rows.push(ids);
                misses = 0;
            } else {
                misses += 1;
                if misses > self.source.len() {
                    return Err(Error::Config("the corpus has no maskable text".into()));
                }
            }
        }
        Ok(rows)
    }
}

/// Loss terms of one micro-batch, recorded on a tape.
pub struct StepLosses<'a> {
    pub per_graph: Vec<Var<'a>>,
    pub mlm: Option<Var<'a>>,
}

/// Everything a training step needs besides the parameters.
pub struct StepCore<'d> {
    config: TrainConfig,
    model: KeModel,
    graphs: Vec<TripletFeed<'d>>,
    corpus: Option<CorpusFeed<'d>>,
    dropout_rng: ChaCha8Rng,
}

impl<'d> StepCore<'d> {
    pub fn model(&self) -> &KeModel {
        &self.model
    }

    /// Draws the next micro-batch of every active stream and records its losses.
    pub fn losses<'a>(&mut self, tape: &'a Tape<'a>) -> Result<StepLosses<'a>> {
        let n_neg = self.config.n_neg();
        let batch = self.config.batch_ke;
        let mut per_graph = Vec::with_capacity(self.graphs.len());
        for (g, feed) in self.graphs.iter_mut().enumerate() {
            let triplets = feed.next_batch(batch, n_neg);
            let d = match &self.model {
                KeModel::Baseline(m) => m.distances(tape, &triplets)?,
                KeModel::Kepler(m) => {
                    let texts = feed
                        .input
                        .texts
                        .ok_or_else(|| Error::Config("encoder training needs entity descriptions".into()))?;
                    m.distances(tape, texts, g, &triplets, &mut self.dropout_rng)?
                }
            };
            per_graph.push(ke_loss_var(&d, batch, n_neg, feed.gamma)?);
        }
        let mlm = match (&mut self.corpus, &self.model) {
            (Some(feed), KeModel::Kepler(m)) => {
                let rows = feed.next_rows(self.config.batch_mlm, self.config.max_len)?;
                let vocab = m.encoder.config().vocab_size;
                let masked = apply_mlm_masking(&rows, vocab, &mut feed.mask_rng, MLM_RATE, MLM_PROPORTIONS)?;
                Some(mlm_loss(&m.encoder, tape, &masked, &mut self.dropout_rng)?)
            }
            _ => None,
        };
        Ok(StepLosses { per_graph, mlm })
    }
}

/// A model being trained, with its data feeds.
pub struct Trainer<'d> {
    params: ParameterSet,
    spec: ModelSpec,
    tokenizer: Option<Tokenizer>,
    core: StepCore<'d>,
    total_steps: u64,
}

fn ceil_div(a: usize, b: usize) -> usize {
    a.div_ceil(b)
}

impl<'d> Trainer<'d> {
    /// Initializes the model from the seed and prepares the feeds of the
    /// active objectives. Inactive sources are never touched.
    pub fn new(config: TrainConfig, inputs: TrainInputs<'d>) -> Result<Self> {
        config.validate()?;
        let TrainInputs {
            graph,
            second_graph,
            corpus,
            tokenizer,
        } = inputs;
        let objective = config.objective;
        if objective.uses_ke() && graph.is_none() {
            return Err(Error::Config(format!("objective {objective} needs a training graph")));
        }
        if objective.uses_mlm() && corpus.is_none() {
            return Err(Error::Config(format!("objective {objective} needs a text corpus")));
        }
        if config.second_kg.is_some() != second_graph.is_some() {
            return Err(Error::Config("second graph configuration and input disagree".into()));
        }
        if config.model.is_baseline() && second_graph.is_some() {
            return Err(Error::Config("table models train on a single graph".into()));
        }

        let mut init_rng = seeded_stream(config.seed, stream::INIT);
        let mut params = ParameterSet::new();
        let n_entities = graph.as_ref().map_or(0, |g| g.graph.num_entities());
        let n_relations = graph.as_ref().map_or(0, |g| g.graph.num_relations());
        let (model, encoder_cfg) = match config.model {
            ModelChoice::Baseline(kind) => {
                let m = BaselineModel::init(kind, n_entities, n_relations, config.dim, config.init_range(), &mut params, &mut init_rng)?;
                (KeModel::Baseline(m), None)
            }
            ModelChoice::Kepler(variant) => {
                let tok = tokenizer.ok_or_else(|| Error::Config("encoder models need a tokenizer".into()))?;
                let cfg = config.encoder_config(tok.vocab_size());
                let mut counts = vec![n_relations];
                if let Some(g) = &second_graph {
                    counts.push(g.graph.num_relations());
                }
                let m = KeplerModel::init(variant, cfg.clone(), &counts, &mut params, &mut init_rng)?;
                (KeModel::Kepler(m), Some(cfg))
            }
        };

        let mut graphs = Vec::new();
        if objective.uses_ke() {
            let g = graph.expect("checked above");
            if !config.model.is_baseline() && g.texts.is_none() {
                return Err(Error::Config("encoder training needs entity descriptions".into()));
            }
            graphs.push(TripletFeed::new(
                g,
                config.gamma(),
                seeded_stream(config.seed, stream::KE_ORDER),
                seeded_stream(config.seed, stream::NEGATIVES),
            )?);
            if let Some(g2) = second_graph {
                if g2.texts.is_none() {
                    return Err(Error::Config("the second graph needs entity descriptions".into()));
                }
                graphs.push(TripletFeed::new(
                    g2,
                    config.gamma2,
                    seeded_stream(config.seed, stream::SECOND_KE_ORDER),
                    seeded_stream(config.seed, stream::SECOND_NEGATIVES),
                )?);
            }
        }
        let corpus = if objective.uses_mlm() {
            let source = corpus.expect("checked above");
            if source.is_empty() {
                return Err(Error::Config("the text corpus is empty".into()));
            }
            Some(CorpusFeed {
                source,
                tokenizer: tokenizer.expect("encoder models carry a tokenizer"),
                order: Vec::new(),
                pos: 0,
                order_rng: seeded_stream(config.seed, stream::MLM_ORDER),
                mask_rng: seeded_stream(config.seed, stream::MLM_MASK),
            })
        } else {
            None
        };

        let micro_per_epoch = match (graphs.first(), &corpus) {
            (Some(feed), _) => ceil_div(feed.input.source.len(), config.batch_ke),
            (None, Some(c)) => ceil_div(c.source.len(), config.batch_mlm),
            (None, None) => 0,
        };
        let mut total_steps = ceil_div(config.epochs * micro_per_epoch, config.accum) as u64;
        if let Some(cap) = config.max_steps {
            total_steps = total_steps.min(cap);
        }

        let spec = ModelSpec {
            model: config.model,
            objective,
            gamma: config.gamma(),
            gamma2: config.second_kg.as_ref().map(|_| config.gamma2),
            n_neg: config.n_neg(),
            dim: config.dim,
            encoder: encoder_cfg,
            n_entities,
            n_relations,
            seed: config.seed,
            step: 0,
        };
        let tokenizer = if config.model.is_baseline() { None } else { tokenizer.cloned() };
        Ok(Trainer {
            params,
            spec,
            tokenizer,
            core: StepCore {
                dropout_rng: seeded_stream(config.seed, stream::DROPOUT),
                config,
                model,
                graphs,
                corpus,
            },
            total_steps,
        })
    }

    pub fn params(&self) -> &ParameterSet {
        &self.params
    }

    pub fn model(&self) -> &KeModel {
        &self.core.model
    }

    pub fn total_steps(&self) -> u64 {
        self.total_steps
    }

    /// Shared access to the weights together with mutable access to the feeds.
    pub fn parts(&mut self) -> (&ParameterSet, &mut StepCore<'d>) {
        (&self.params, &mut self.core)
    }

    /// One optimizer step over `accum` micro-batches.
    pub fn step(&mut self) -> Result<StepRecord> {
        let accum = self.core.config.accum;
        let step = self.params.step() + 1;
        let n_graphs = self.core.graphs.len();
        let mut graph_sums = vec![0.0; n_graphs];
        let mut mlm_sum = 0.0;
        let mut last_total = 0.0;
        for _ in 0..accum {
            let grads = {
                let tape = Tape::training(&self.params);
                let losses = self.core.losses(&tape)?;
                let ke = match losses.per_graph.split_first() {
                    Some((first, rest)) => Some(rest.iter().try_fold(*first, |acc, l| acc.add(l))?),
                    None => None,
                };
                let total = match (ke, losses.mlm) {
                    (Some(k), Some(m)) => k.add(&m)?,
                    (Some(k), None) => k,
                    (None, Some(m)) => m,
                    (None, None) => return Err(Error::Config("no active objective".into())),
                };
                for (s, l) in graph_sums.iter_mut().zip(&losses.per_graph) {
                    *s += l.item()?;
                }
                if let Some(m) = losses.mlm {
                    mlm_sum += m.item()?;
                }
                last_total = total.item()?;
                if !last_total.is_finite() {
                    return Err(Error::NonFiniteLoss { step, value: last_total });
                }
                let objective = if accum > 1 { total.scale(1.0 / accum as f64) } else { total };
                tape.backward(objective)?
            };
            self.params.accumulate(&grads);
        }
        optimizer_step(&mut self.params, &self.core.config.adam(self.total_steps))?;
        let per_graph: Vec<f64> = graph_sums.iter().map(|s| s / accum as f64).collect();
        let (ke, mlm, total) = if accum == 1 {
            let ke = if n_graphs == 2 { per_graph[0] + per_graph[1] } else { graph_sums.first().copied().unwrap_or(0.0) };
            (ke, mlm_sum, last_total)
        } else {
            let ke: f64 = per_graph.iter().sum();
            let mlm = mlm_sum / accum as f64;
            (ke, mlm, ke + mlm)
        };
        Ok(StepRecord {
            step,
            total,
            ke,
            mlm,
            per_graph,
        })
    }

    fn snapshot(&self) -> (ParameterSet, ModelSpec) {
        let mut params = self.params.clone();
        params.round_to_f32();
        let spec = ModelSpec {
            step: params.step(),
            ..self.spec.clone()
        };
        (params, spec)
    }

    /// Runs every step, writing periodic and final checkpoints when a path
    /// is configured. Final weights are rounded to `f32` precision so the
    /// returned model equals its checkpoint.
    pub fn run(mut self) -> Result<(TrainReport, TrainedModel)> {
        let start = Instant::now();
        let mut report = TrainReport::default();
        let log_every = self.core.config.log_every;
        let every = self.core.config.checkpoint_every;
        let path = self.core.config.checkpoint.clone();
        for s in 1..=self.total_steps {
            let rec = self.step()?;
            if s % log_every == 0 || s == self.total_steps {
                log::info!("step {}\ttotal {:.6}\tke {:.6}\tmlm {:.6}", rec.step, rec.total, rec.ke, rec.mlm);
                report.records.push(rec);
            }
            if let (Some(p), Some(n)) = (&path, every) {
                if n > 0 && s % n == 0 && s < self.total_steps {
                    let (params, spec) = self.snapshot();
                    save_checkpoint(p, &params, &spec, self.tokenizer.as_ref())?;
                }
            }
        }
        self.params.round_to_f32();
        self.spec.step = self.params.step();
        if let Some(p) = &path {
            save_checkpoint(p, &self.params, &self.spec, self.tokenizer.as_ref())?;
        }
        report.steps = self.total_steps;
        report.wall_time = start.elapsed();
        report.checkpoint = path;
        report.false_negatives = self.core.graphs.iter().map(|g| g.sampler.false_negatives).sum();
        Ok((
            report,
            TrainedModel {
                spec: self.spec,
                params: self.params,
                model: self.core.model,
                tokenizer: self.tokenizer,
            },
        ))
    }
}

/// Trains an encoder or table model as configured.
pub fn train(config: TrainConfig, inputs: TrainInputs<'_>) -> Result<(TrainReport, TrainedModel)> {
    Trainer::new(config, inputs)?.run()
}

/// Trains a table model on `graph`; no text is involved.
pub fn train_baseline(config: TrainConfig, graph: &KnowledgeGraph) -> Result<(TrainReport, TrainedModel)> {
    if !config.model.is_baseline() {
        return Err(Error::Config(format!("{} is not a table model", config.model.as_str())));
    }
    let mut source = GraphTriplets(graph);
    train(
        config,
        TrainInputs {
            graph: Some(GraphInput {
                graph,
                texts: None,
                source: &mut source,
            }),
            ..TrainInputs::default()
        },
    )
}
