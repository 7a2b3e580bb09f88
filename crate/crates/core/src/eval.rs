//! Filtered link-prediction evaluation.

use std::collections::HashMap;
use std::io::Write;

use kepler_autograd::Tensor;
use rayon::prelude::*;

use crate::dataset::{DataSplit, Setting, Subset};
use crate::error::{Error, Result};
use crate::ke::{DescriptionTokens, KeModel, ScoreFn};
use crate::kg::{known_true, EntityId, KnowledgeGraph, Query, RelationId, Triplet};
use crate::train::TrainedModel;

/// Entities encoded per forward pass when precomputing embeddings.
pub const ENCODE_CHUNK: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    /// `(h, r, ?)`
    Tail,
    /// `(?, r, t)`
    Head,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RankQuery {
    pub direction: Direction,
    pub triplet: Triplet,
}

impl RankQuery {
    pub fn answer(&self) -> EntityId {
        match self.direction {
            Direction::Tail => self.triplet.tail,
            Direction::Head => self.triplet.head,
        }
    }

    /// The triplet with the ranked side replaced by `e`.
    pub fn with_candidate(&self, e: EntityId) -> Triplet {
        match self.direction {
            Direction::Tail => Triplet { tail: e, ..self.triplet },
            Direction::Head => Triplet { head: e, ..self.triplet },
        }
    }

    pub fn known_true<'g>(&self, kg: &'g KnowledgeGraph) -> &'g [EntityId] {
        let t = self.triplet;
        match self.direction {
            Direction::Tail => known_true(kg, Query::Tail { head: t.head, relation: t.relation }),
            Direction::Head => known_true(kg, Query::Head { relation: t.relation, tail: t.tail }),
        }
    }
}

/// Per-entity rows, either shared or specific to the query relation.
#[derive(Clone, Debug)]
enum EntityRows {
    Shared(Tensor),
    PerRelation(HashMap<RelationId, Tensor>),
}

/// Frozen embeddings of a set of entities, ready for scoring.
#[derive(Clone, Debug)]
pub struct Scorer {
    score_fn: ScoreFn,
    row_of: HashMap<EntityId, usize>,
    entities: EntityRows,
    relations: Tensor,
}

fn to_nan_safe(s: f64) -> f64 {
    if s.is_nan() {
        f64::NEG_INFINITY
    } else {
        s
    }
}

impl Scorer {
    /// Precomputes embeddings of `entities`. Encoder models need `texts`;
    /// the conditioned variant gets one matrix per relation in `relations`.
    pub fn new(
        trained: &TrainedModel,
        texts: Option<&DescriptionTokens>,
        entities: &[EntityId],
        relations: &[RelationId],
    ) -> Result<Self> {
        let row_of: HashMap<EntityId, usize> = entities.iter().enumerate().map(|(i, &e)| (e, i)).collect();
        let params = &trained.params;
        match &trained.model {
            KeModel::Baseline(m) => {
                let full = m.entity_matrix(params);
                let mut data = Vec::with_capacity(entities.len() * full.cols());
                for e in entities {
                    if e.index() >= full.rows() {
                        return Err(Error::Eval(format!("entity {} has no embedding row", e.0)));
                    }
                    data.extend_from_slice(full.row(e.index()));
                }
                Ok(Scorer {
                    score_fn: m.kind.score_fn(),
                    row_of,
                    entities: EntityRows::Shared(Tensor::matrix(entities.len(), full.cols(), data)?),
                    relations: m.relation_matrix(params),
                })
            }
            KeModel::Kepler(m) => {
                let texts = texts.ok_or_else(|| Error::Eval("encoder models need entity descriptions".into()))?;
                let missing = texts.missing_entities(entities);
                if !missing.is_empty() {
                    return Err(Error::MissingDescription {
                        kind: "entity",
                        id: missing.join(", "),
                    });
                }
                let n_rel = trained.spec.n_relations;
                let rows = if m.variant == crate::ke::KeplerVariant::Conditioned {
                    let mut per = HashMap::new();
                    for &r in relations {
                        if let std::collections::hash_map::Entry::Vacant(slot) = per.entry(r) {
                            slot.insert(precompute_entity_embeddings(trained, texts, entities, Some(r))?);
                        }
                    }
                    EntityRows::PerRelation(per)
                } else {
                    EntityRows::Shared(precompute_entity_embeddings(trained, texts, entities, None)?)
                };
                Ok(Scorer {
                    score_fn: ScoreFn::TransE,
                    row_of,
                    entities: rows,
                    relations: m.relation_matrix(params, texts, 0, n_rel, ENCODE_CHUNK)?,
                })
            }
        }
    }

    fn entity_matrix(&self, r: RelationId) -> Result<&Tensor> {
        match &self.entities {
            EntityRows::Shared(t) => Ok(t),
            EntityRows::PerRelation(m) => m
                .get(&r)
                .ok_or_else(|| Error::Eval(format!("no conditioned embeddings for relation {}", r.0))),
        }
    }

    fn row(&self, e: EntityId) -> Result<usize> {
        self.row_of
            .get(&e)
            .copied()
            .ok_or_else(|| Error::Eval(format!("entity {} was not precomputed", e.0)))
    }

    pub fn score(&self, t: Triplet) -> Result<f64> {
        let m = self.entity_matrix(t.relation)?;
        if t.relation.index() >= self.relations.rows() {
            return Err(Error::DanglingId {
                kind: "relation",
                id: t.relation.0,
            });
        }
        self.score_fn.score(
            m.row(self.row(t.head)?),
            self.relations.row(t.relation.index()),
            m.row(self.row(t.tail)?),
        )
    }

    /// Scores of every candidate completing `query`, in candidate order.
    pub fn candidate_scores(&self, query: &RankQuery, candidates: &[EntityId]) -> Result<Vec<f64>> {
        let t = query.triplet;
        let m = self.entity_matrix(t.relation)?;
        if t.relation.index() >= self.relations.rows() {
            return Err(Error::DanglingId {
                kind: "relation",
                id: t.relation.0,
            });
        }
        let r = self.relations.row(t.relation.index());
        let fixed = m.row(self.row(match query.direction {
            Direction::Tail => t.head,
            Direction::Head => t.tail,
        })?);
        candidates
            .iter()
            .map(|&c| {
                let other = m.row(self.row(c)?);
                match query.direction {
                    Direction::Tail => self.score_fn.score(fixed, r, other),
                    Direction::Head => self.score_fn.score(other, r, fixed),
                }
            })
            .collect()
    }
}

/// Embedding matrix of `entities` under an encoder model; row `i` belongs to `entities[i]`.
pub fn precompute_entity_embeddings(
    trained: &TrainedModel,
    texts: &DescriptionTokens,
    entities: &[EntityId],
    relation: Option<RelationId>,
) -> Result<Tensor> {
    match &trained.model {
        KeModel::Kepler(m) => m.encode_entities(&trained.params, texts, entities, relation, ENCODE_CHUNK),
        KeModel::Baseline(m) => {
            let full = m.entity_matrix(&trained.params);
            let mut data = Vec::with_capacity(entities.len() * full.cols());
            for e in entities {
                data.extend_from_slice(full.row(e.index()));
            }
            Ok(Tensor::matrix(entities.len(), full.cols(), data)?)
        }
    }
}

/// Mean-tie rank of `answer_score` among `others` (the answer excluded):
/// `1 + better + tied / 2`. NaN scores count as the worst possible.
pub fn tie_rank(answer_score: f64, others: impl IntoIterator<Item = f64>) -> f64 {
    let a = to_nan_safe(answer_score);
    let (mut better, mut tied) = (0usize, 0usize);
    for s in others {
        let s = to_nan_safe(s);
        if s > a {
            better += 1;
        } else if s == a {
            tied += 1;
        }
    }
    1.0 + better as f64 + tied as f64 / 2.0
}

/// Rank of the query's answer among `candidates`, skipping entities in the
/// sorted `filter` other than the answer itself.
pub fn rank_query(scorer: &Scorer, query: &RankQuery, candidates: &[EntityId], filter: &[EntityId]) -> Result<f64> {
    let answer = query.answer();
    let pos = candidates
        .iter()
        .position(|&c| c == answer)
        .ok_or_else(|| Error::Eval(format!("true answer {} is not a candidate", answer.0)))?;
    let scores = scorer.candidate_scores(query, candidates)?;
    Ok(rank_from_scores(&scores, pos, candidates, filter))
}

fn rank_from_scores(scores: &[f64], answer_pos: usize, candidates: &[EntityId], filter: &[EntityId]) -> f64 {
    let others = candidates
        .iter()
        .zip(scores)
        .enumerate()
        .filter(|&(i, (c, _))| i != answer_pos && filter.binary_search(c).is_err())
        .map(|(_, (_, &s))| s);
    tie_rank(scores[answer_pos], others)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub mr: f64,
    pub mrr: f64,
    pub hits1: f64,
    pub hits3: f64,
    pub hits10: f64,
    pub n_queries: usize,
    pub filtered: bool,
}

pub const SUMMARY_COLUMNS: [&str; 5] = ["MR", "MRR", "HITS@1", "HITS@3", "HITS@10"];

impl MetricsReport {
    pub fn from_ranks(ranks: &[f64], filtered: bool) -> Result<Self> {
        if ranks.is_empty() {
            return Err(Error::Eval("no queries to aggregate".into()));
        }
        let n = ranks.len() as f64;
        let frac = |k: f64| ranks.iter().filter(|&&r| r <= k).count() as f64 / n;
        Ok(MetricsReport {
            mr: ranks.iter().sum::<f64>() / n,
            mrr: ranks.iter().map(|r| 1.0 / r).sum::<f64>() / n,
            hits1: frac(1.0),
            hits3: frac(3.0),
            hits10: frac(10.0),
            n_queries: ranks.len(),
            filtered,
        })
    }

    pub fn values(&self) -> [f64; 5] {
        [self.mr, self.mrr, self.hits1, self.hits3, self.hits10]
    }

    /// `# protocol` and `# ties` headers followed by `metric\tvalue` lines.
    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "# protocol\t{}", if self.filtered { "filtered" } else { "raw" })?;
        writeln!(w, "# ties\tmean")?;
        for (name, v) in SUMMARY_COLUMNS.iter().zip(self.values()) {
            writeln!(w, "{name}\t{v}")?;
        }
        writeln!(w, "n_queries\t{}", self.n_queries)?;
        Ok(())
    }

    /// The five metrics on one tab-separated line.
    pub fn summary_line(&self) -> String {
        format!(
            "{:.3}\t{:.4}\t{:.4}\t{:.4}\t{:.4}",
            self.mr, self.mrr, self.hits1, self.hits3, self.hits10
        )
    }
}

#[derive(Clone, Debug)]
pub struct EvalOptions {
    pub raw: bool,
    /// Worker threads; 1 evaluates on the calling thread.
    pub threads: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions { raw: false, threads: 1 }
    }
}

/// Candidate entities for a subset: training entities in the transductive
/// setting, entities of the evaluated subgraphs in the inductive one.
pub fn candidate_entities(split: &DataSplit, subset: Subset) -> Vec<EntityId> {
    match split.setting {
        Setting::Transductive => split.train.used_entities(),
        Setting::Inductive => split.subset(subset).used_entities(),
    }
}

/// Ranks the head and tail of every triplet in `subset` and aggregates.
pub fn evaluate_link_prediction(
    trained: &TrainedModel,
    split: &DataSplit,
    subset: Subset,
    texts: Option<&DescriptionTokens>,
    options: &EvalOptions,
) -> Result<MetricsReport> {
    if matches!(trained.model, KeModel::Baseline(_)) && split.setting == Setting::Inductive {
        return Err(Error::Unsupported(format!(
            "table model {} cannot embed unseen entities of an inductive split",
            trained.spec.model.as_str()
        )));
    }
    let graph = split.subset(subset);
    if graph.is_empty() {
        return Err(Error::Eval("the evaluated subset has no triplets".into()));
    }
    let candidates = candidate_entities(split, subset);
    let filter_graph = split.union()?;
    let relations = graph.used_relations();
    let scorer = Scorer::new(trained, texts, &candidates, &relations)?;
    let positions: HashMap<EntityId, usize> = candidates.iter().enumerate().map(|(i, &e)| (e, i)).collect();

    let queries: Vec<RankQuery> = graph
        .triplets()
        .iter()
        .flat_map(|&t| {
            [Direction::Tail, Direction::Head].map(|direction| RankQuery { direction, triplet: t })
        })
        .collect();
    let rank = |q: &RankQuery| -> Result<f64> {
        let pos = *positions
            .get(&q.answer())
            .ok_or_else(|| Error::Eval(format!("true answer {} is not a candidate", q.answer().0)))?;
        let fixed = match q.direction {
            Direction::Tail => q.triplet.head,
            Direction::Head => q.triplet.tail,
        };
        if !positions.contains_key(&fixed) {
            return Err(Error::Eval(format!("query entity {} has no embedding", fixed.0)));
        }
        let scores = scorer.candidate_scores(q, &candidates)?;
        let filter = if options.raw { &[][..] } else { q.known_true(&filter_graph) };
        Ok(rank_from_scores(&scores, pos, &candidates, filter))
    };
    let ranks: Vec<f64> = if options.threads > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(options.threads)
            .build()
            .map_err(|e| Error::Eval(format!("thread pool: {e}")))?;
        pool.install(|| queries.par_iter().map(rank).collect::<Result<Vec<_>>>())?
    } else {
        queries.iter().map(rank).collect::<Result<Vec<_>>>()?
    };
    MetricsReport::from_ranks(&ranks, !options.raw)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rank_examples() {
        // distances {e1: 0.9, e2: 0.1, e3: 0.5}, answer e3
        let scores = [-0.9, -0.1, -0.5];
        let cands = [EntityId(1), EntityId(2), EntityId(3)];
        assert_eq!(rank_from_scores(&scores, 2, &cands, &[]), 2.0);
        assert_eq!(rank_from_scores(&scores, 2, &cands, &[EntityId(2)]), 1.0);
        assert_eq!(rank_from_scores(&scores, 2, &cands, &[EntityId(2), EntityId(3)]), 1.0);
    }

    #[test]
    fn ties_take_the_mean_position() {
        assert_eq!(tie_rank(1.0, [1.0, 1.0, 2.0]), 3.0);
        assert_eq!(tie_rank(1.0, [1.0]), 1.5);
        assert_eq!(tie_rank(f64::NAN, [0.0]), 2.0);
    }

    #[test]
    fn aggregate_arithmetic() {
        let m = MetricsReport::from_ranks(&[1.0, 4.0], true).unwrap();
        assert_eq!(m.values(), [2.5, 0.625, 0.5, 0.5, 1.0]);
        assert!(MetricsReport::from_ranks(&[], true).is_err());
        let mut out = Vec::new();
        m.write(&mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert!(text.starts_with("# protocol\tfiltered\n# ties\tmean\nMR\t2.5\n"));
    }
}
