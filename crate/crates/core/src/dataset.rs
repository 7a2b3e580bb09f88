//! Corpus ingestion with description filtering, and transductive /
//! inductive split construction.

use std::collections::{HashMap, HashSet, VecDeque};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::kg::{build_graph, parse_triplets, parse_triplets_into, Catalog, KnowledgeGraph, Triplet};

/// Default minimum description length, in whitespace-separated words.
pub const MIN_DESCRIPTION_WORDS: usize = 5;

/// Budget of candidate draws per requested evaluation triplet when
/// sampling a transductive split.
const ATTEMPTS_PER_TARGET: usize = 100;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum DropReason {
    MissingDescription,
    ShortDescription { words: usize },
}

impl fmt::Display for DropReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DropReason::MissingDescription => write!(f, "missing description"),
            DropReason::ShortDescription { words } => write!(f, "description has {words} words"),
        }
    }
}

/// Entity and relation descriptions, keyed by external id.
#[derive(Clone, Debug, Default)]
pub struct EntityCatalog {
    descriptions: HashMap<String, String>,
    relation_descriptions: HashMap<String, String>,
    /// Entities removed during ingestion, in discovery order.
    pub dropped: Vec<(String, DropReason)>,
    /// Triplets discarded because an endpoint was dropped.
    pub dropped_triplets: usize,
}

impl EntityCatalog {
    pub fn new() -> Self {
        Self::default()
    }

    /// Loads `id\ttext` lines without filtering. The first occurrence of an id wins.
    pub fn from_reader<R: BufRead>(reader: R) -> Result<Self> {
        let mut catalog = EntityCatalog::new();
        for (id, text) in parse_descriptions(reader)? {
            catalog.descriptions.entry(id).or_insert(text);
        }
        Ok(catalog)
    }

    pub fn insert(&mut self, id: impl Into<String>, text: impl Into<String>) {
        self.descriptions.insert(id.into(), text.into());
    }

    pub fn insert_relation(&mut self, id: impl Into<String>, text: impl Into<String>) {
        self.relation_descriptions.insert(id.into(), text.into());
    }

    /// Adds relation descriptions from a stream in the description format.
    pub fn load_relation_descriptions<R: BufRead>(&mut self, reader: R) -> Result<()> {
        for (id, text) in parse_descriptions(reader)? {
            self.relation_descriptions.entry(id).or_insert(text);
        }
        Ok(())
    }

    pub fn description(&self, entity: &str) -> Option<&str> {
        self.descriptions.get(entity).map(String::as_str)
    }

    pub fn relation_description(&self, relation: &str) -> Option<&str> {
        self.relation_descriptions.get(relation).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.descriptions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.descriptions.is_empty()
    }

    pub fn num_relation_descriptions(&self) -> usize {
        self.relation_descriptions.len()
    }

    /// Writes entity descriptions for the graph's entities, in dense-id order.
    pub fn write_descriptions<W: Write>(&self, kg: &KnowledgeGraph, mut w: W) -> Result<()> {
        for name in kg.entities().names() {
            if let Some(text) = self.description(name) {
                writeln!(w, "{name}\t{text}")?;
            }
        }
        Ok(())
    }
}

pub fn word_count(text: &str) -> usize {
    text.split_whitespace().count()
}

/// Reads `id\tfree text` lines; only the first tab separates. A line
/// without a tab is an id with an empty description.
fn parse_descriptions<R: BufRead>(reader: R) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        let line = line.trim_end_matches(['\r', '\n']);
        if line.trim().is_empty() {
            continue;
        }
        let (id, text) = line.split_once('\t').unwrap_or((line, ""));
        if id.is_empty() {
            return Err(Error::Parse {
                line: n + 1,
                msg: "empty id".into(),
            });
        }
        out.push((id.to_string(), text.to_string()));
    }
    Ok(out)
}

/// Applies the description filter: entities without a description or with
/// fewer than `min_words` words are dropped along with every triplet that
/// mentions them. The returned graph and catalog cover exactly the same
/// entities.
pub fn ingest_corpus<T: BufRead, D: BufRead>(
    triplets: T,
    descriptions: D,
    min_words: usize,
) -> Result<(KnowledgeGraph, EntityCatalog)> {
    let raw_descriptions = parse_descriptions(descriptions)?;
    let parsed = parse_triplets(triplets)?;

    let mut catalog = EntityCatalog::new();
    let mut accepted: HashMap<String, String> = HashMap::new();
    let mut reported: HashSet<String> = HashSet::new();
    for (id, text) in raw_descriptions {
        if accepted.contains_key(&id) || reported.contains(&id) {
            log::warn!("repeated description for `{id}` ignored");
            continue;
        }
        let words = word_count(&text);
        if words < min_words {
            reported.insert(id.clone());
            catalog
                .dropped
                .push((id, DropReason::ShortDescription { words }));
        } else {
            accepted.insert(id, text);
        }
    }
    for name in parsed.entities.names() {
        if !accepted.contains_key(name) && reported.insert(name.clone()) {
            catalog
                .dropped
                .push((name.clone(), DropReason::MissingDescription));
        }
    }

    let keep = |id: u32| accepted.contains_key(parsed.entities.name(id).expect("parsed id"));
    let mut entities = Catalog::new();
    let mut relations = Catalog::new();
    let mut kept = Vec::new();
    for t in &parsed.triplets {
        if keep(t.head.0) && keep(t.tail.0) {
            let name = |id: u32| parsed.entities.name(id).expect("parsed id");
            let h = entities.intern(name(t.head.0));
            let r = relations.intern(parsed.relations.name(t.relation.0).expect("parsed id"));
            let tl = entities.intern(name(t.tail.0));
            kept.push(Triplet::new(h, r, tl));
        } else {
            catalog.dropped_triplets += 1;
        }
    }
    for name in entities.names() {
        let text = accepted.remove(name).expect("kept entity has a description");
        catalog.descriptions.insert(name.clone(), text);
    }
    if !catalog.dropped.is_empty() {
        log::info!(
            "dropped {} entities and {} triplets during ingestion",
            catalog.dropped.len(),
            catalog.dropped_triplets
        );
    }
    let kg = build_graph(Arc::new(entities), Arc::new(relations), kept)?;
    Ok((kg, catalog))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Setting {
    Transductive,
    Inductive,
}

impl Setting {
    pub fn as_str(self) -> &'static str {
        match self {
            Setting::Transductive => "transductive",
            Setting::Inductive => "inductive",
        }
    }
}

impl std::str::FromStr for Setting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "transductive" => Ok(Setting::Transductive),
            "inductive" => Ok(Setting::Inductive),
            other => Err(Error::Config(format!("unknown setting `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Subset {
    Valid,
    Test,
}

/// Train / valid / test graphs over one shared pair of catalogs.
#[derive(Clone, Debug)]
pub struct DataSplit {
    pub setting: Setting,
    pub train: KnowledgeGraph,
    pub valid: KnowledgeGraph,
    pub test: KnowledgeGraph,
    /// Triplet counts of the consecutive connected subgraphs making up
    /// `valid` (inductive splits built in this process only).
    pub valid_subgraphs: Vec<usize>,
    pub test_subgraphs: Vec<usize>,
}

impl DataSplit {
    pub fn empty(setting: Setting) -> Self {
        let kg = KnowledgeGraph::empty();
        DataSplit {
            setting,
            train: kg.clone(),
            valid: kg.clone(),
            test: kg,
            valid_subgraphs: Vec::new(),
            test_subgraphs: Vec::new(),
        }
    }

    pub fn subset(&self, subset: Subset) -> &KnowledgeGraph {
        match subset {
            Subset::Valid => &self.valid,
            Subset::Test => &self.test,
        }
    }

    /// Union of train, valid and test; the filter graph for evaluation.
    pub fn union(&self) -> Result<KnowledgeGraph> {
        let all: Vec<Triplet> = self
            .train
            .triplets()
            .iter()
            .chain(self.valid.triplets())
            .chain(self.test.triplets())
            .copied()
            .collect();
        self.train.with_triplets(all)
    }

    /// Writes `train.txt`, `valid.txt`, `test.txt` and `stats.txt` into `dir`.
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        for (name, kg) in [("train.txt", &self.train), ("valid.txt", &self.valid), ("test.txt", &self.test)] {
            let mut w = BufWriter::new(File::create(dir.join(name))?);
            kg.write_triplets(&mut w)?;
            w.flush()?;
        }
        let mut w = BufWriter::new(File::create(dir.join("stats.txt"))?);
        split_stats(self).write(&mut w)?;
        w.flush()?;
        Ok(())
    }

    /// Reads the three triplet files of `dir` into one id space.
    pub fn read_dir(dir: &Path, setting: Setting) -> Result<Self> {
        let mut entities = Catalog::new();
        let mut relations = Catalog::new();
        let mut parts = Vec::new();
        for name in ["train.txt", "valid.txt", "test.txt"] {
            let path = dir.join(name);
            let file = File::open(&path).map_err(|e| {
                std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))
            })?;
            let (ts, _) = parse_triplets_into(BufReader::new(file), &mut entities, &mut relations)?;
            parts.push(ts);
        }
        let entities = Arc::new(entities);
        let relations = Arc::new(relations);
        let test = parts.pop().expect("three parts");
        let valid = parts.pop().expect("three parts");
        let train = parts.pop().expect("three parts");
        Ok(DataSplit {
            setting,
            train: build_graph(entities.clone(), relations.clone(), train)?,
            valid: build_graph(entities.clone(), relations.clone(), valid)?,
            test: build_graph(entities, relations, test)?,
            valid_subgraphs: Vec::new(),
            test_subgraphs: Vec::new(),
        })
    }
}

/// Samples `n_valid + n_test` evaluation triplets uniformly without
/// replacement, rejecting any whose removal would leave an entity or
/// relation without a training triplet.
pub fn split_transductive(
    kg: &KnowledgeGraph,
    n_valid: usize,
    n_test: usize,
    seed: u64,
) -> Result<DataSplit> {
    let target = n_valid + n_test;
    if target > 0 && target >= kg.len() {
        return Err(Error::Split(format!(
            "requested {target} evaluation triplets from a graph of {}",
            kg.len()
        )));
    }
    let mut degree = vec![0usize; kg.num_entities()];
    let mut rel_count = vec![0usize; kg.num_relations()];
    for t in kg.triplets() {
        degree[t.head.index()] += 1;
        if t.tail != t.head {
            degree[t.tail.index()] += 1;
        }
        rel_count[t.relation.index()] += 1;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..kg.len()).collect();
    order.shuffle(&mut rng);

    let max_attempts = ATTEMPTS_PER_TARGET * target;
    let mut attempts = 0;
    let mut selected: Vec<usize> = Vec::with_capacity(target);
    let mut rejections: HashMap<String, usize> = HashMap::new();
    for &i in &order {
        if selected.len() == target || attempts == max_attempts {
            break;
        }
        attempts += 1;
        let t = kg.triplets()[i];
        let head_ok = degree[t.head.index()] >= 2;
        let tail_ok = t.tail == t.head || degree[t.tail.index()] >= 2;
        let rel_ok = rel_count[t.relation.index()] >= 2;
        if head_ok && tail_ok && rel_ok {
            degree[t.head.index()] -= 1;
            if t.tail != t.head {
                degree[t.tail.index()] -= 1;
            }
            rel_count[t.relation.index()] -= 1;
            selected.push(i);
        } else {
            let culprit = if !head_ok {
                format!("entity `{}`", kg.entity_name(t.head))
            } else if !tail_ok {
                format!("entity `{}`", kg.entity_name(t.tail))
            } else {
                format!("relation `{}`", kg.relation_name(t.relation))
            };
            *rejections.entry(culprit).or_default() += 1;
        }
    }
    if selected.len() < target {
        let bottleneck = rejections
            .iter()
            .max_by(|a, b| a.1.cmp(b.1).then_with(|| b.0.cmp(a.0)))
            .map(|(k, _)| k.clone())
            .unwrap_or_else(|| "none".into());
        return Err(Error::Split(format!(
            "placed only {} of {target} evaluation triplets after {attempts} attempts; bottleneck {bottleneck}",
            selected.len()
        )));
    }

    let mut in_eval = vec![false; kg.len()];
    for &i in &selected {
        in_eval[i] = true;
    }
    let pick = |idx: &[usize]| idx.iter().map(|&i| kg.triplets()[i]).collect::<Vec<_>>();
    let train: Vec<Triplet> = kg
        .triplets()
        .iter()
        .zip(&in_eval)
        .filter(|(_, &e)| !e)
        .map(|(t, _)| *t)
        .collect();
    Ok(DataSplit {
        setting: Setting::Transductive,
        train: kg.with_triplets(train)?,
        valid: kg.with_triplets(pick(&selected[..n_valid]))?,
        test: kg.with_triplets(pick(&selected[n_valid..]))?,
        valid_subgraphs: Vec::new(),
        test_subgraphs: Vec::new(),
    })
}

/// Grows connected evaluation subgraphs breadth-first from uniformly
/// random roots until each target triplet count is met. Every triplet that
/// touches an evaluation entity leaves the training graph; triplets that
/// join two different evaluation subgraphs are discarded.
pub fn split_inductive(
    kg: &KnowledgeGraph,
    target_valid: usize,
    target_test: usize,
    seed: u64,
) -> Result<DataSplit> {
    let n = kg.num_entities();
    let mut adjacency: Vec<Vec<(usize, usize)>> = vec![Vec::new(); n];
    for (i, t) in kg.triplets().iter().enumerate() {
        adjacency[t.head.index()].push((t.tail.index(), i));
        if t.tail != t.head {
            adjacency[t.tail.index()].push((t.head.index(), i));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut claimed = vec![false; n];
    let mut parts: Vec<(Vec<Triplet>, Vec<usize>)> = Vec::new();
    for target in [target_valid, target_test] {
        let mut collected: Vec<Triplet> = Vec::new();
        let mut subgraphs = Vec::new();
        while collected.len() < target {
            let roots: Vec<usize> = (0..n)
                .filter(|&e| {
                    !claimed[e]
                        && adjacency[e]
                            .iter()
                            .any(|&(nb, _)| nb == e || !claimed[nb])
                })
                .collect();
            if roots.is_empty() {
                let achieved: Vec<usize> = parts.iter().map(|p| p.0.len()).chain([collected.len()]).collect();
                return Err(Error::Split(format!(
                    "graph exhausted before reaching targets ({target_valid}, {target_test}); achieved {achieved:?}"
                )));
            }
            let root = roots[rng.random_range(0..roots.len())];
            let mut members: HashSet<usize> = HashSet::new();
            let mut sub: Vec<Triplet> = Vec::new();
            let mut queue = VecDeque::new();
            claim(root, &adjacency, kg, &mut claimed, &mut members, &mut sub);
            queue.push_back(root);
            'grow: while let Some(x) = queue.pop_front() {
                for &(y, _) in &adjacency[x] {
                    if collected.len() + sub.len() >= target {
                        break 'grow;
                    }
                    if claimed[y] {
                        continue;
                    }
                    claim(y, &adjacency, kg, &mut claimed, &mut members, &mut sub);
                    queue.push_back(y);
                }
            }
            subgraphs.push(sub.len());
            collected.extend(sub);
        }
        parts.push((collected, subgraphs));
    }

    let train: Vec<Triplet> = kg
        .triplets()
        .iter()
        .filter(|t| !claimed[t.head.index()] && !claimed[t.tail.index()])
        .copied()
        .collect();
    if train.is_empty() && !kg.is_empty() {
        return Err(Error::Split(
            "no training triplets remain after carving out evaluation subgraphs".into(),
        ));
    }
    let (test, test_subgraphs) = parts.pop().expect("two parts");
    let (valid, valid_subgraphs) = parts.pop().expect("two parts");
    Ok(DataSplit {
        setting: Setting::Inductive,
        train: kg.with_triplets(train)?,
        valid: kg.with_triplets(valid)?,
        test: kg.with_triplets(test)?,
        valid_subgraphs,
        test_subgraphs,
    })
}

/// Marks `v` as an evaluation entity of the growing subgraph and collects
/// the triplets it closes with existing members (self-loops included).
fn claim(
    v: usize,
    adjacency: &[Vec<(usize, usize)>],
    kg: &KnowledgeGraph,
    claimed: &mut [bool],
    members: &mut HashSet<usize>,
    sub: &mut Vec<Triplet>,
) {
    claimed[v] = true;
    members.insert(v);
    for &(nb, ti) in &adjacency[v] {
        if members.contains(&nb) {
            sub.push(kg.triplets()[ti]);
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SplitStats {
    pub setting: Option<Setting>,
    pub n_entities: usize,
    pub n_relations: usize,
    pub n_train: usize,
    pub n_valid: usize,
    pub n_test: usize,
    pub n_train_entities: usize,
    pub n_valid_entities: usize,
    pub n_test_entities: usize,
}

impl SplitStats {
    /// `key\tvalue` lines.
    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        if let Some(s) = self.setting {
            writeln!(w, "setting\t{}", s.as_str())?;
        }
        for (k, v) in [
            ("n_entities", self.n_entities),
            ("n_relations", self.n_relations),
            ("n_train", self.n_train),
            ("n_valid", self.n_valid),
            ("n_test", self.n_test),
            ("n_train_entities", self.n_train_entities),
            ("n_valid_entities", self.n_valid_entities),
            ("n_test_entities", self.n_test_entities),
        ] {
            writeln!(w, "{k}\t{v}")?;
        }
        Ok(())
    }
}

/// Counts by direct enumeration. Entity and relation totals cover every
/// triplet of the split.
pub fn split_stats(split: &DataSplit) -> SplitStats {
    let mut entities = HashSet::new();
    let mut relations = HashSet::new();
    for t in split
        .train
        .triplets()
        .iter()
        .chain(split.valid.triplets())
        .chain(split.test.triplets())
    {
        entities.insert(t.head);
        entities.insert(t.tail);
        relations.insert(t.relation);
    }
    SplitStats {
        setting: Some(split.setting),
        n_entities: entities.len(),
        n_relations: relations.len(),
        n_train: split.train.len(),
        n_valid: split.valid.len(),
        n_test: split.test.len(),
        n_train_entities: split.train.used_entities().len(),
        n_valid_entities: split.valid.used_entities().len(),
        n_test_entities: split.test.used_entities().len(),
    }
}
