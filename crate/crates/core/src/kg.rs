//! Knowledge-graph data model: dense ids, triplets, and adjacency indices.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::io::{BufRead, Write};
use std::sync::Arc;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct EntityId(pub u32);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct RelationId(pub u32);

impl EntityId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl RelationId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Triplet {
    pub head: EntityId,
    pub relation: RelationId,
    pub tail: EntityId,
}

impl Triplet {
    pub fn new(head: u32, relation: u32, tail: u32) -> Self {
        Triplet {
            head: EntityId(head),
            relation: RelationId(relation),
            tail: EntityId(tail),
        }
    }
}

/// Bijection between dense indices (in first-seen order) and opaque external ids.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Catalog {
    names: Vec<String>,
    index: HashMap<String, u32>,
}

impl Catalog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn intern(&mut self, name: &str) -> u32 {
        if let Some(&id) = self.index.get(name) {
            return id;
        }
        let id = self.names.len() as u32;
        self.names.push(name.to_string());
        self.index.insert(name.to_string(), id);
        id
    }

    pub fn get(&self, name: &str) -> Option<u32> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: u32) -> Option<&str> {
        self.names.get(id as usize).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }
}

/// Output of [`parse_triplets`].
#[derive(Clone, Debug)]
pub struct ParsedTriplets {
    pub triplets: Vec<Triplet>,
    pub entities: Catalog,
    pub relations: Catalog,
    pub duplicates: usize,
}

/// Parses tab-separated `head\trelation\ttail` lines into dense triplets.
/// Blank lines are skipped; repeated triplets are dropped and counted.
pub fn parse_triplets<R: BufRead>(reader: R) -> Result<ParsedTriplets> {
    let mut entities = Catalog::new();
    let mut relations = Catalog::new();
    let (triplets, duplicates) = parse_triplets_into(reader, &mut entities, &mut relations)?;
    Ok(ParsedTriplets {
        triplets,
        entities,
        relations,
        duplicates,
    })
}

/// Like [`parse_triplets`], interning into existing catalogs so several
/// files (train, valid, test) share one id space.
pub fn parse_triplets_into<R: BufRead>(
    reader: R,
    entities: &mut Catalog,
    relations: &mut Catalog,
) -> Result<(Vec<Triplet>, usize)> {
    let mut seen = HashSet::new();
    let mut triplets = Vec::new();
    let mut duplicates = 0;
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        let line = line.trim_end_matches(['\r', '\n']);
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 || fields.iter().any(|f| f.is_empty()) {
            return Err(Error::Parse {
                line: n + 1,
                msg: format!("expected 3 tab-separated fields, found {}", fields.len()),
            });
        }
        let t = Triplet {
            head: EntityId(entities.intern(fields[0])),
            relation: RelationId(relations.intern(fields[1])),
            tail: EntityId(entities.intern(fields[2])),
        };
        if seen.insert(t) {
            triplets.push(t);
        } else {
            duplicates += 1;
        }
    }
    if duplicates > 0 {
        log::info!("dropped {duplicates} duplicate triplet lines");
    }
    Ok((triplets, duplicates))
}

/// Immutable knowledge graph with `(head, relation) -> tails` and
/// `(tail, relation) -> heads` indices. Catalogs are shared between the
/// graphs of one split.
#[derive(Clone)]
pub struct KnowledgeGraph {
    entities: Arc<Catalog>,
    relations: Arc<Catalog>,
    triplets: Vec<Triplet>,
    members: HashSet<Triplet>,
    out_index: HashMap<(EntityId, RelationId), Vec<EntityId>>,
    in_index: HashMap<(EntityId, RelationId), Vec<EntityId>>,
}

impl fmt::Debug for KnowledgeGraph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("KnowledgeGraph")
            .field("entities", &self.entities.len())
            .field("relations", &self.relations.len())
            .field("triplets", &self.triplets.len())
            .finish()
    }
}

/// A link-prediction query with one side left open.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Query {
    /// `(h, r, ?)`
    Tail { head: EntityId, relation: RelationId },
    /// `(?, r, t)`
    Head { relation: RelationId, tail: EntityId },
}

/// Builds a graph and its indices. Repeated triplets keep their first
/// occurrence.
pub fn build_graph(
    entities: Arc<Catalog>,
    relations: Arc<Catalog>,
    triplets: Vec<Triplet>,
) -> Result<KnowledgeGraph> {
    let mut members = HashSet::with_capacity(triplets.len());
    let mut kept = Vec::with_capacity(triplets.len());
    let mut out_index: HashMap<(EntityId, RelationId), Vec<EntityId>> = HashMap::new();
    let mut in_index: HashMap<(EntityId, RelationId), Vec<EntityId>> = HashMap::new();
    for t in triplets {
        for e in [t.head, t.tail] {
            if e.index() >= entities.len() {
                return Err(Error::DanglingId {
                    kind: "entity",
                    id: e.0,
                });
            }
        }
        if t.relation.index() >= relations.len() {
            return Err(Error::DanglingId {
                kind: "relation",
                id: t.relation.0,
            });
        }
        if !members.insert(t) {
            continue;
        }
        kept.push(t);
        out_index.entry((t.head, t.relation)).or_default().push(t.tail);
        in_index.entry((t.tail, t.relation)).or_default().push(t.head);
    }
    for v in out_index.values_mut().chain(in_index.values_mut()) {
        v.sort_unstable();
    }
    Ok(KnowledgeGraph {
        entities,
        relations,
        triplets: kept,
        members,
        out_index,
        in_index,
    })
}

impl KnowledgeGraph {
    pub fn empty() -> Self {
        build_graph(Arc::default(), Arc::default(), Vec::new()).expect("empty graph")
    }

    /// Parses a triplet stream and builds a graph over its own catalogs.
    pub fn from_reader<R: BufRead>(reader: R) -> Result<Self> {
        let parsed = parse_triplets(reader)?;
        build_graph(
            Arc::new(parsed.entities),
            Arc::new(parsed.relations),
            parsed.triplets,
        )
    }

    /// A graph over the same catalogs with a different triplet list.
    pub fn with_triplets(&self, triplets: Vec<Triplet>) -> Result<Self> {
        build_graph(self.entities.clone(), self.relations.clone(), triplets)
    }

    pub fn entities(&self) -> &Arc<Catalog> {
        &self.entities
    }

    pub fn relations(&self) -> &Arc<Catalog> {
        &self.relations
    }

    pub fn num_entities(&self) -> usize {
        self.entities.len()
    }

    pub fn num_relations(&self) -> usize {
        self.relations.len()
    }

    pub fn triplets(&self) -> &[Triplet] {
        &self.triplets
    }

    pub fn len(&self) -> usize {
        self.triplets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triplets.is_empty()
    }

    pub fn contains(&self, t: &Triplet) -> bool {
        self.members.contains(t)
    }

    pub fn entity_name(&self, e: EntityId) -> &str {
        self.entities.name(e.0).unwrap_or("?")
    }

    pub fn relation_name(&self, r: RelationId) -> &str {
        self.relations.name(r.0).unwrap_or("?")
    }

    pub fn tails(&self, head: EntityId, relation: RelationId) -> &[EntityId] {
        self.out_index
            .get(&(head, relation))
            .map_or(&[], Vec::as_slice)
    }

    pub fn heads(&self, relation: RelationId, tail: EntityId) -> &[EntityId] {
        self.in_index
            .get(&(tail, relation))
            .map_or(&[], Vec::as_slice)
    }

    /// Total entries across the out-index (equals the triplet count).
    pub fn out_index_size(&self) -> usize {
        self.out_index.values().map(Vec::len).sum()
    }

    pub fn in_index_size(&self) -> usize {
        self.in_index.values().map(Vec::len).sum()
    }

    /// Entities used by at least one triplet, ascending.
    pub fn used_entities(&self) -> Vec<EntityId> {
        let mut used: Vec<EntityId> = self
            .triplets
            .iter()
            .flat_map(|t| [t.head, t.tail])
            .collect::<HashSet<_>>()
            .into_iter()
            .collect();
        used.sort_unstable();
        used
    }

    /// Relations used by at least one triplet, ascending.
    pub fn used_relations(&self) -> Vec<RelationId> {
        let mut used: Vec<RelationId> = self
            .triplets
            .iter()
            .map(|t| t.relation)
            .collect::<HashSet<_>>()
            .into_iter()
            .collect();
        used.sort_unstable();
        used
    }

    /// Writes the triplets as `head\trelation\ttail` lines with external ids.
    pub fn write_triplets<W: Write>(&self, mut w: W) -> Result<()> {
        for t in &self.triplets {
            writeln!(
                w,
                "{}\t{}\t{}",
                self.entity_name(t.head),
                self.relation_name(t.relation),
                self.entity_name(t.tail)
            )?;
        }
        Ok(())
    }
}

/// Every entity completing `query` to a triplet of `kg`, ascending.
/// Ids outside the graph simply yield no answers.
pub fn known_true(kg: &KnowledgeGraph, query: Query) -> &[EntityId] {
    match query {
        Query::Tail { head, relation } => kg.tails(head, relation),
        Query::Head { relation, tail } => kg.heads(relation, tail),
    }
}
