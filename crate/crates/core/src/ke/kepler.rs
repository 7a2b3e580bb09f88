//! Description-encoded knowledge embedding: entities (and optionally
//! relations) are the pooled encoder output over their text.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use kepler_autograd::{ParamId, ParameterSet, Tape, Tensor, Var};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::EntityCatalog;
use crate::error::{Error, Result};
use crate::ke::scoring::ScoreFn;
use crate::kg::{Catalog, EntityId, KnowledgeGraph, RelationId, Triplet};
use crate::text::encoder::{normal_init, Encoder, EncoderConfig, TokenBatch, INIT_STD};
use crate::text::tokenizer::{Tokenizer, BOS, EOS};

pub const ENCODER_PREFIX: &str = "encoder.";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum KeplerVariant {
    /// Entities from their descriptions, relations from a table.
    EntityDesc,
    /// Entities and relations both from descriptions.
    EntityRelDesc,
    /// Entities encoded together with the query relation's description;
    /// relations from a table.
    Conditioned,
}

impl KeplerVariant {
    pub fn as_str(self) -> &'static str {
        match self {
            KeplerVariant::EntityDesc => "entity-desc",
            KeplerVariant::EntityRelDesc => "entity-rel-desc",
            KeplerVariant::Conditioned => "conditioned",
        }
    }

    pub fn has_relation_table(self) -> bool {
        self != KeplerVariant::EntityRelDesc
    }

    pub fn needs_relation_descriptions(self) -> bool {
        self != KeplerVariant::EntityDesc
    }
}

impl fmt::Display for KeplerVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for KeplerVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [KeplerVariant::EntityDesc, KeplerVariant::EntityRelDesc, KeplerVariant::Conditioned]
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant `{s}`")))
    }
}

/// Tokenized descriptions of one graph's entities and relations, indexed by id.
#[derive(Clone, Debug)]
pub struct DescriptionTokens {
    entities: Vec<Option<Vec<u32>>>,
    relations: Vec<Option<Vec<u32>>>,
    entity_names: Arc<Catalog>,
    relation_names: Arc<Catalog>,
    max_len: usize,
}

impl DescriptionTokens {
    /// Encodes the description of every entity and relation in the
    /// catalogs of `kg`. Entries without text are kept as gaps and only
    /// fail when used.
    pub fn build(tokenizer: &Tokenizer, catalog: &EntityCatalog, kg: &KnowledgeGraph, max_len: usize) -> Result<Self> {
        if max_len < 2 {
            return Err(Error::Config(format!("max length must be at least 2, got {max_len}")));
        }
        let enc = |text: Option<&str>| text.map(|t| tokenizer.encode(t));
        Ok(DescriptionTokens {
            entities: kg.entities().names().iter().map(|n| enc(catalog.description(n))).collect(),
            relations: kg
                .relations()
                .names()
                .iter()
                .map(|n| enc(catalog.relation_description(n)))
                .collect(),
            entity_names: kg.entities().clone(),
            relation_names: kg.relations().clone(),
            max_len,
        })
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    fn entity_body(&self, e: EntityId) -> Result<&[u32]> {
        self.entities
            .get(e.index())
            .and_then(|b| b.as_deref())
            .ok_or_else(|| Error::MissingDescription {
                kind: "entity",
                id: self.entity_names.name(e.0).unwrap_or("<unknown>").to_string(),
            })
    }

    fn relation_body(&self, r: RelationId) -> Result<&[u32]> {
        self.relations
            .get(r.index())
            .and_then(|b| b.as_deref())
            .ok_or_else(|| Error::MissingDescription {
                kind: "relation",
                id: self.relation_names.name(r.0).unwrap_or("<unknown>").to_string(),
            })
    }

    fn framed(&self, parts: &[&[u32]]) -> Vec<u32> {
        let mut ids = vec![BOS];
        for (i, p) in parts.iter().enumerate() {
            if i > 0 {
                ids.push(EOS);
            }
            ids.extend_from_slice(p);
        }
        ids.truncate(self.max_len);
        ids
    }

    /// `<s> entity-description`, truncated.
    pub fn entity_input(&self, e: EntityId) -> Result<Vec<u32>> {
        Ok(self.framed(&[self.entity_body(e)?]))
    }

    pub fn relation_input(&self, r: RelationId) -> Result<Vec<u32>> {
        Ok(self.framed(&[self.relation_body(r)?]))
    }

    /// `<s> entity-description </s> relation-description`, truncated.
    pub fn conditioned_input(&self, e: EntityId, r: RelationId) -> Result<Vec<u32>> {
        Ok(self.framed(&[self.entity_body(e)?, self.relation_body(r)?]))
    }

    /// Names of the given entities that have no description.
    pub fn missing_entities(&self, entities: &[EntityId]) -> Vec<String> {
        entities
            .iter()
            .filter(|e| self.entity_body(**e).is_err())
            .map(|e| self.entity_names.name(e.0).unwrap_or("<unknown>").to_string())
            .collect()
    }

    pub fn input(&self, key: InputKey) -> Result<Vec<u32>> {
        match key {
            InputKey::Entity(e) => self.entity_input(e),
            InputKey::Conditioned(e, r) => self.conditioned_input(e, r),
            InputKey::Relation(r) => self.relation_input(r),
        }
    }
}

/// One text input to the encoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum InputKey {
    Entity(EntityId),
    Conditioned(EntityId, RelationId),
    Relation(RelationId),
}

/// Collects inputs, assigning each distinct one a row.
#[derive(Default)]
struct UniqueInputs {
    keys: Vec<InputKey>,
    index: HashMap<InputKey, usize>,
}

impl UniqueInputs {
    fn add(&mut self, key: InputKey) -> usize {
        *self.index.entry(key).or_insert_with(|| {
            self.keys.push(key);
            self.keys.len() - 1
        })
    }
}

/// Handles to an encoder plus one relation table per graph.
#[derive(Clone, Debug)]
pub struct KeplerModel {
    pub variant: KeplerVariant,
    pub encoder: Encoder,
    relation_tables: Vec<ParamId>,
}

fn table_name(graph: usize) -> String {
    format!("relation_table.{graph}")
}

impl KeplerModel {
    /// `relation_counts[g]` is the relation count of graph `g`. The
    /// description-only variant gets no tables.
    pub fn init<R: Rng + ?Sized>(
        variant: KeplerVariant,
        config: EncoderConfig,
        relation_counts: &[usize],
        params: &mut ParameterSet,
        rng: &mut R,
    ) -> Result<Self> {
        let d = config.hidden;
        Encoder::init(config.clone(), params, ENCODER_PREFIX, rng)?;
        if variant.has_relation_table() {
            for (g, &n) in relation_counts.iter().enumerate() {
                params.insert(table_name(g), normal_init(rng, &[n, d], INIT_STD))?;
            }
        }
        Self::from_params(variant, config, params)
    }

    pub fn from_params(variant: KeplerVariant, config: EncoderConfig, params: &ParameterSet) -> Result<Self> {
        let d = config.hidden;
        let encoder = Encoder::from_params(config, params, ENCODER_PREFIX)?;
        let mut relation_tables = Vec::new();
        if variant.has_relation_table() {
            while let Ok(id) = params.id(&table_name(relation_tables.len())) {
                if params.value(id).cols() != d {
                    return Err(Error::Config(format!(
                        "relation table `{}` has width {}, expected {d}",
                        params.name(id),
                        params.value(id).cols()
                    )));
                }
                relation_tables.push(id);
            }
        }
        Ok(KeplerModel {
            variant,
            encoder,
            relation_tables,
        })
    }

    pub fn relation_table(&self, graph: usize) -> Result<ParamId> {
        self.relation_tables.get(graph).copied().ok_or_else(|| {
            Error::Config(format!("{} model has no relation table for graph {graph}", self.variant))
        })
    }

    pub fn num_graphs(&self) -> usize {
        self.relation_tables.len()
    }

    fn entity_key(&self, e: EntityId, r: RelationId) -> InputKey {
        match self.variant {
            KeplerVariant::Conditioned => InputKey::Conditioned(e, r),
            _ => InputKey::Entity(e),
        }
    }

    /// Encodes `keys` in one batch; returns pooled rows in key order.
    pub fn encode_inputs<'a>(
        &self,
        tape: &'a Tape<'a>,
        texts: &DescriptionTokens,
        keys: &[InputKey],
        rng: &mut dyn RngCore,
    ) -> Result<Var<'a>> {
        let rows = keys.iter().map(|&k| texts.input(k)).collect::<Result<Vec<_>>>()?;
        Ok(self.encoder.forward(tape, &TokenBatch::new(rows), rng)?.pooled)
    }

    /// Distances `||h + r - t||_1` of `triplets` of graph `graph`. Each
    /// distinct text is encoded once per call.
    pub fn distances<'a>(
        &self,
        tape: &'a Tape<'a>,
        texts: &DescriptionTokens,
        graph: usize,
        triplets: &[Triplet],
        rng: &mut dyn RngCore,
    ) -> Result<Var<'a>> {
        let mut unique = UniqueInputs::default();
        let mut h_idx = Vec::with_capacity(triplets.len());
        let mut t_idx = Vec::with_capacity(triplets.len());
        let mut r_idx = Vec::with_capacity(triplets.len());
        for t in triplets {
            h_idx.push(unique.add(self.entity_key(t.head, t.relation)));
            t_idx.push(unique.add(self.entity_key(t.tail, t.relation)));
            r_idx.push(match self.variant {
                KeplerVariant::EntityRelDesc => unique.add(InputKey::Relation(t.relation)),
                _ => t.relation.index(),
            });
        }
        let pooled = self.encode_inputs(tape, texts, &unique.keys, rng)?;
        let h = pooled.gather(&h_idx)?;
        let t = pooled.gather(&t_idx)?;
        let r = match self.variant {
            KeplerVariant::EntityRelDesc => pooled.gather(&r_idx)?,
            _ => tape.param(self.relation_table(graph)?).gather(&r_idx)?,
        };
        ScoreFn::TransE.distance_var(&h, &r, &t)
    }

    /// Pooled vectors of `entities`, encoded `chunk` at a time with frozen
    /// parameters. `relation` must be given exactly for the conditioned variant.
    pub fn encode_entities(
        &self,
        params: &ParameterSet,
        texts: &DescriptionTokens,
        entities: &[EntityId],
        relation: Option<RelationId>,
        chunk: usize,
    ) -> Result<Tensor> {
        let keys = entities
            .iter()
            .map(|&e| match (self.variant, relation) {
                (KeplerVariant::Conditioned, Some(r)) => Ok(InputKey::Conditioned(e, r)),
                (KeplerVariant::Conditioned, None) => {
                    Err(Error::Config("the conditioned variant needs a relation".into()))
                }
                (_, None) => Ok(InputKey::Entity(e)),
                (_, Some(_)) => Err(Error::Config(format!(
                    "{} embeddings do not depend on a relation",
                    self.variant
                ))),
            })
            .collect::<Result<Vec<_>>>()?;
        let missing = texts.missing_entities(entities);
        if !missing.is_empty() {
            return Err(Error::MissingDescription {
                kind: "entity",
                id: missing.join(", "),
            });
        }
        self.encode_frozen(params, texts, &keys, chunk)
    }

    fn encode_frozen(&self, params: &ParameterSet, texts: &DescriptionTokens, keys: &[InputKey], chunk: usize) -> Result<Tensor> {
        let d = self.encoder.config().hidden;
        let mut data = Vec::with_capacity(keys.len() * d);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for part in keys.chunks(chunk.max(1)) {
            let tape = Tape::new(params);
            data.extend(self.encode_inputs(&tape, texts, part, &mut rng)?.value().into_data());
        }
        Ok(Tensor::matrix(keys.len(), d, data)?)
    }

    /// Relation vectors of graph `graph`, one row per relation id.
    pub fn relation_matrix(&self, params: &ParameterSet, texts: &DescriptionTokens, graph: usize, n_relations: usize, chunk: usize) -> Result<Tensor> {
        match self.variant {
            KeplerVariant::EntityRelDesc => {
                let keys: Vec<InputKey> = (0..n_relations as u32).map(|r| InputKey::Relation(RelationId(r))).collect();
                self.encode_frozen(params, texts, &keys, chunk)
            }
            _ => Ok(params.value(self.relation_table(graph)?).clone()),
        }
    }
}

/// Embedding of one entity with frozen parameters.
pub fn entity_embedding(
    model: &KeplerModel,
    params: &ParameterSet,
    texts: &DescriptionTokens,
    entity: EntityId,
    relation: Option<RelationId>,
) -> Result<Vec<f64>> {
    Ok(model.encode_entities(params, texts, &[entity], relation, 1)?.into_data())
}

/// Embedding of one relation of graph `graph` with frozen parameters.
pub fn relation_embedding(
    model: &KeplerModel,
    params: &ParameterSet,
    texts: &DescriptionTokens,
    relation: RelationId,
    graph: usize,
) -> Result<Vec<f64>> {
    match model.variant {
        KeplerVariant::EntityRelDesc => Ok(model
            .encode_frozen(params, texts, &[InputKey::Relation(relation)], 1)?
            .into_data()),
        _ => {
            let table = params.value(model.relation_table(graph)?);
            if relation.index() >= table.rows() {
                return Err(Error::DanglingId {
                    kind: "relation",
                    id: relation.0,
                });
            }
            Ok(table.row(relation.index()).to_vec())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::tokenizer::train_tokenizer;
    use kepler_autograd::optimizer_step;
    use kepler_autograd::AdamConfig;

    struct Fixture {
        kg: KnowledgeGraph,
        texts: DescriptionTokens,
        cfg: EncoderConfig,
    }

    fn fixture() -> Fixture {
        let kg = KnowledgeGraph::from_reader("a\tnear\tb\nb\tfar\tc\nc\tnear\ta\n".as_bytes()).unwrap();
        let mut catalog = EntityCatalog::new();
        catalog.insert("a", "alpha is the first letter of a list");
        catalog.insert("b", "beta comes right after the first one");
        catalog.insert("c", "gamma is third and often used for margins");
        catalog.insert_relation("near", "is close to");
        catalog.insert_relation("far", "is distant from");
        let corpus = ["alpha beta gamma is the first letter close distant"];
        let tok = train_tokenizer(corpus, 300).unwrap();
        let cfg = EncoderConfig {
            hidden: 8,
            n_heads: 2,
            ffn_dim: 16,
            max_positions: 32,
            vocab_size: tok.vocab_size(),
            ..EncoderConfig::default()
        };
        let texts = DescriptionTokens::build(&tok, &catalog, &kg, 32).unwrap();
        Fixture { kg, texts, cfg }
    }

    fn model(f: &Fixture, v: KeplerVariant) -> (ParameterSet, KeplerModel) {
        let mut params = ParameterSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = KeplerModel::init(v, f.cfg.clone(), &[f.kg.num_relations()], &mut params, &mut rng).unwrap();
        (params, m)
    }

    #[test]
    fn entity_embedding_is_deterministic_and_d_wide() {
        let f = fixture();
        for v in [KeplerVariant::EntityDesc, KeplerVariant::EntityRelDesc, KeplerVariant::Conditioned] {
            let (params, m) = model(&f, v);
            let rel = (v == KeplerVariant::Conditioned).then_some(RelationId(0));
            let a = entity_embedding(&m, &params, &f.texts, EntityId(1), rel).unwrap();
            let b = entity_embedding(&m, &params, &f.texts, EntityId(1), rel).unwrap();
            assert_eq!(a.len(), 8);
            assert_eq!(a, b);
        }
    }

    #[test]
    fn conditioned_embedding_depends_on_relation() {
        let f = fixture();
        let (params, m) = model(&f, KeplerVariant::Conditioned);
        let a = entity_embedding(&m, &params, &f.texts, EntityId(0), Some(RelationId(0))).unwrap();
        let b = entity_embedding(&m, &params, &f.texts, EntityId(0), Some(RelationId(1))).unwrap();
        assert_ne!(a, b);
        assert!(entity_embedding(&m, &params, &f.texts, EntityId(0), None).is_err());
    }

    #[test]
    fn relation_embedding_sources() {
        let f = fixture();
        let (params, m) = model(&f, KeplerVariant::EntityDesc);
        let table = params.value(m.relation_table(0).unwrap());
        assert_eq!(relation_embedding(&m, &params, &f.texts, RelationId(1), 0).unwrap(), table.row(1));

        let (params, m) = model(&f, KeplerVariant::EntityRelDesc);
        let a = relation_embedding(&m, &params, &f.texts, RelationId(1), 0).unwrap();
        assert_eq!(a, relation_embedding(&m, &params, &f.texts, RelationId(1), 0).unwrap());
        assert_eq!(m.num_graphs(), 0);
    }

    #[test]
    fn missing_description_names_the_entity() {
        let kg = KnowledgeGraph::from_reader("a\tr\tghost\n".as_bytes()).unwrap();
        let mut catalog = EntityCatalog::new();
        catalog.insert("a", "some text about a");
        let tok = train_tokenizer(["some text"], 270).unwrap();
        let texts = DescriptionTokens::build(&tok, &catalog, &kg, 16).unwrap();
        match texts.entity_input(EntityId(1)) {
            Err(Error::MissingDescription { id, .. }) => assert_eq!(id, "ghost"),
            other => panic!("unexpected {other:?}"),
        }
        assert!(texts.relation_input(RelationId(0)).is_err());
    }

    #[test]
    fn conditioned_input_layout() {
        let f = fixture();
        let ids = f.texts.conditioned_input(EntityId(0), RelationId(0)).unwrap();
        assert_eq!(ids[0], BOS);
        assert_eq!(ids.iter().filter(|&&t| t == EOS).count(), 1);
    }

    #[test]
    fn batch_distances_match_single_distances() {
        let f = fixture();
        for v in [KeplerVariant::EntityDesc, KeplerVariant::EntityRelDesc, KeplerVariant::Conditioned] {
            let (params, m) = model(&f, v);
            let tape = Tape::new(&params);
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let ts = f.kg.triplets().to_vec();
            let all = m.distances(&tape, &f.texts, 0, &ts, &mut rng).unwrap().value();
            for (i, t) in ts.iter().enumerate() {
                let one = m.distances(&tape, &f.texts, 0, &[*t], &mut rng).unwrap().value();
                assert_eq!(one.data()[0], all.data()[i]);
            }
        }
    }

    #[test]
    fn loss_on_one_relation_leaves_other_rows() {
        let f = fixture();
        let (mut params, m) = model(&f, KeplerVariant::EntityDesc);
        let table = m.relation_table(0).unwrap();
        let before = params.value(table).clone();
        let grads = {
            let tape = Tape::training(&params);
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let d = m.distances(&tape, &f.texts, 0, &[Triplet::new(0, 1, 2)], &mut rng).unwrap();
            tape.backward(d.sum()).unwrap()
        };
        params.accumulate(&grads);
        optimizer_step(&mut params, &AdamConfig::default()).unwrap();
        let after = params.value(table);
        assert_eq!(before.row(0), after.row(0));
        assert_ne!(before.row(1), after.row(1));
    }
}
