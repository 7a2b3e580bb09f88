mod common;

use std::collections::HashSet;
use std::time::Instant;

use kepler_core::dataset::{split_inductive, split_transductive, DataSplit, EntityCatalog, Subset};
use kepler_core::eval::{
    candidate_entities, evaluate_link_prediction, precompute_entity_embeddings, rank_query, tie_rank, Direction,
    EvalOptions, RankQuery, Scorer,
};
use kepler_core::ke::{entity_embedding, DescriptionTokens, KeModel, ScoreFn};
use kepler_core::kg::{EntityId, KnowledgeGraph, RelationId, Triplet};
use kepler_core::text::train_tokenizer;
use kepler_core::train::{train, train_baseline, CorpusLines, GraphInput, GraphTriplets, TrainConfig, TrainInputs, TrainedModel};
use kepler_core::Error;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn config(pairs: &[(&str, &str)]) -> TrainConfig {
    let mut cfg = TrainConfig::default();
    for (k, v) in pairs {
        cfg.set(k, v).unwrap();
    }
    cfg
}

fn table_model(kind: &str, kg: &KnowledgeGraph, dim: &str, seed: &str) -> TrainedModel {
    train_baseline(config(&[("model", kind), ("dim", dim), ("epochs", "0"), ("seed", seed)]), kg)
        .unwrap()
        .1
}

fn small_split(seed: u64) -> (KnowledgeGraph, DataSplit) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let kg = common::random_graph(10, 2, 40, &mut rng);
    let split = split_transductive(&kg, 2, 4, seed).unwrap();
    (kg, split)
}

#[test]
fn ten_entity_report_matches_exhaustive_scoring() {
    let (_, split) = small_split(1);
    let trained = table_model("transe", &split.train, "4", "1");
    let KeModel::Baseline(model) = &trained.model else { unreachable!() };
    let ent = model.entity_matrix(&trained.params);
    let rel = model.relation_matrix(&trained.params);
    let score = |h: EntityId, r: RelationId, t: EntityId| {
        -(0..4).map(|i| (ent.row(h.index())[i] + rel.row(r.index())[i] - ent.row(t.index())[i]).abs()).sum::<f64>()
    };
    let known: HashSet<Triplet> =
        [&split.train, &split.valid, &split.test].iter().flat_map(|g| g.triplets().iter().copied()).collect();
    let candidates: Vec<EntityId> = split.train.used_entities();
    let mut ranks = Vec::new();
    for t in split.test.triplets() {
        for tail in [true, false] {
            let answer = if tail { t.tail } else { t.head };
            let s = |c: EntityId| if tail { score(t.head, t.relation, c) } else { score(c, t.relation, t.tail) };
            let target = s(answer);
            let (mut better, mut tied) = (0.0, 0.0);
            for &c in &candidates {
                let fact = if tail { Triplet { tail: c, ..*t } } else { Triplet { head: c, ..*t } };
                if c == answer || known.contains(&fact) {
                    continue;
                }
                if s(c) > target {
                    better += 1.0;
                } else if s(c) == target {
                    tied += 1.0;
                }
            }
            ranks.push(1.0 + better + tied / 2.0);
        }
    }
    let report = evaluate_link_prediction(&trained, &split, Subset::Test, None, &EvalOptions::default()).unwrap();
    let n = ranks.len() as f64;
    assert_eq!(report.n_queries, 2 * split.test.len());
    assert_eq!(report.mr, ranks.iter().sum::<f64>() / n);
    assert_eq!(report.mrr, ranks.iter().map(|r| 1.0 / r).sum::<f64>() / n);
    assert_eq!(report.hits10, ranks.iter().filter(|&&r| r <= 10.0).count() as f64 / n);
}

#[test]
fn planted_transe_model_ranks_every_answer_first() {
    let (kg, ent, rel) = common::planted_translation(60, 4, 300, 8, 2);
    let split = split_transductive(&kg, 10, 30, 2).unwrap();
    let mut trained = table_model("transe", &split.train, "8", "0");
    let e_id = trained.params.id("entity").unwrap();
    let r_id = trained.params.id("relation").unwrap();
    for (i, name) in kg.entities().names().iter().enumerate() {
        trained.params.value_mut(e_id).row_mut(i).copy_from_slice(&ent[name[1..].parse::<usize>().unwrap()]);
    }
    for (i, name) in kg.relations().names().iter().enumerate() {
        trained.params.value_mut(r_id).row_mut(i).copy_from_slice(&rel[name[1..].parse::<usize>().unwrap()]);
    }
    let report = evaluate_link_prediction(&trained, &split, Subset::Test, None, &EvalOptions::default()).unwrap();
    assert_eq!(report.mrr, 1.0);
    assert_eq!(report.mr, 1.0);
    assert_eq!(report.hits1, 1.0);
}

fn queries(split: &DataSplit) -> Vec<RankQuery> {
    split
        .test
        .triplets()
        .iter()
        .flat_map(|&t| [Direction::Tail, Direction::Head].map(|direction| RankQuery { direction, triplet: t }))
        .collect()
}

#[test]
fn filtering_candidate_order_and_candidate_growth() {
    for seed in 0..5 {
        let (_, split) = small_split(seed);
        let trained = table_model("distmult", &split.train, "4", "3");
        let candidates = candidate_entities(&split, Subset::Test);
        let all = split.union().unwrap();
        let scorer = Scorer::new(&trained, None, &candidates, &all.used_relations()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for q in queries(&split) {
            let filter = q.known_true(&all);
            let filtered = rank_query(&scorer, &q, &candidates, filter).unwrap();
            let raw = rank_query(&scorer, &q, &candidates, &[]).unwrap();
            assert!(filtered <= raw);

            let mut shuffled = candidates.clone();
            shuffled.shuffle(&mut rng);
            assert_eq!(rank_query(&scorer, &q, &shuffled, filter).unwrap(), filtered);

            let mut fewer: Vec<EntityId> = candidates.iter().copied().filter(|&c| c == q.answer() || c.0 % 2 == 0).collect();
            fewer.sort();
            assert!(rank_query(&scorer, &q, &fewer, filter).unwrap() <= filtered);
        }
    }
}

#[test]
fn report_invariants_and_repeatability() {
    let kg = common::planted_translation_graph(40, 4, 200, 8, 4);
    let split = split_transductive(&kg, 10, 30, 4).unwrap();
    let (_, trained) = train_baseline(config(&[("model", "rotate"), ("dim", "8"), ("epochs", "5")]), &split.train).unwrap();
    let opts = EvalOptions::default();
    let a = evaluate_link_prediction(&trained, &split, Subset::Test, None, &opts).unwrap();
    let b = evaluate_link_prediction(&trained, &split, Subset::Test, None, &opts).unwrap();
    let parallel = evaluate_link_prediction(&trained, &split, Subset::Test, None, &EvalOptions { raw: false, threads: 4 }).unwrap();
    let raw = evaluate_link_prediction(&trained, &split, Subset::Test, None, &EvalOptions { raw: true, threads: 1 }).unwrap();
    assert_eq!(a, b);
    assert_eq!(a, parallel);
    let n_cand = candidate_entities(&split, Subset::Test).len() as f64;
    assert!(a.mr >= 1.0 && a.mr <= n_cand);
    assert!(a.mrr > 0.0 && a.mrr <= 1.0);
    assert!(a.hits1 <= a.hits3 && a.hits3 <= a.hits10);
    assert_eq!(a.n_queries, 2 * split.test.len());
    assert!(a.mr <= raw.mr && a.mrr >= raw.mrr);
    assert!(a.filtered && !raw.filtered);
    let valid = evaluate_link_prediction(&trained, &split, Subset::Valid, None, &opts).unwrap();
    assert_eq!(valid.n_queries, 2 * split.valid.len());
}

#[test]
fn table_models_reject_inductive_splits() {
    let (kg, _) = common::grid_world(6);
    let split = split_inductive(&kg, 6, 6, 1).unwrap();
    let trained = table_model("transe", &split.train, "4", "0");
    let err = evaluate_link_prediction(&trained, &split, Subset::Test, None, &EvalOptions::default()).unwrap_err();
    assert!(matches!(err, Error::Unsupported(_)), "{err}");
}

#[test]
fn empty_subset_is_an_error() {
    let (kg, _) = small_split(0);
    let split = split_transductive(&kg, 0, 0, 0).unwrap();
    let trained = table_model("transe", &split.train, "4", "0");
    assert!(evaluate_link_prediction(&trained, &split, Subset::Test, None, &EvalOptions::default()).is_err());
}

fn encoder_model(preset: &str, kg: &KnowledgeGraph, catalog: &EntityCatalog) -> (TrainedModel, DescriptionTokens) {
    let lines: Vec<String> = kg
        .used_entities()
        .iter()
        .map(|&e| catalog.description(kg.entity_name(e)).unwrap().to_string())
        .collect();
    let tok = train_tokenizer(lines.iter().map(String::as_str), 300).unwrap();
    let texts = DescriptionTokens::build(&tok, catalog, kg, 32).unwrap();
    let cfg = config(&[
        ("model", preset),
        ("dim", "16"),
        ("layers", "1"),
        ("heads", "2"),
        ("vocab-size", "300"),
        ("max-len", "32"),
        ("batch-ke", "4"),
        ("batch-mlm", "4"),
        ("neg", "2"),
        ("epochs", "1000"),
        ("steps", "2"),
    ]);
    let mut source = GraphTriplets(kg);
    let mut corpus = CorpusLines::new(lines);
    let inputs = TrainInputs {
        graph: Some(GraphInput { graph: kg, texts: Some(&texts), source: &mut source }),
        corpus: Some(&mut corpus),
        tokenizer: Some(&tok),
        ..Default::default()
    };
    (train(cfg, inputs).unwrap().1, texts)
}

#[test]
fn precomputed_rows_match_single_entity_embeddings() {
    let (kg, catalog) = common::grid_world(3);
    let entities = kg.used_entities();
    let relations = kg.used_relations();
    for preset in ["kepler-wiki", "kepler-cond"] {
        let (trained, texts) = encoder_model(preset, &kg, &catalog);
        let KeModel::Kepler(model) = &trained.model else { unreachable!() };
        let relation = (preset == "kepler-cond").then_some(relations[0]);
        let matrix = precompute_entity_embeddings(&trained, &texts, &entities, relation).unwrap();
        assert_eq!(matrix.rows(), entities.len());
        for (i, &e) in entities.iter().enumerate() {
            let single = entity_embedding(model, &trained.params, &texts, e, relation).unwrap();
            assert_eq!(matrix.row(i), &single[..], "{preset} row {i}");
        }
        if relation.is_some() {
            let other = precompute_entity_embeddings(&trained, &texts, &entities, Some(relations[1])).unwrap();
            assert_ne!(matrix.data(), other.data());
        }
    }
}

#[test]
fn missing_description_names_the_entity() {
    let (kg, catalog) = common::grid_world(3);
    let (trained, _) = encoder_model("kepler-wiki", &kg, &catalog);
    let mut partial = EntityCatalog::new();
    for name in kg.entities().names().iter().filter(|n| n.as_str() != "cell_1_1") {
        partial.insert(name.clone(), catalog.description(name).unwrap());
    }
    let texts = DescriptionTokens::build(trained.tokenizer.as_ref().unwrap(), &partial, &kg, 32).unwrap();
    let err = Scorer::new(&trained, Some(&texts), &kg.used_entities(), &kg.used_relations()).unwrap_err();
    assert!(matches!(&err, Error::MissingDescription { id, .. } if id.contains("cell_1_1")), "{err}");
}

#[test]
fn candidate_scoring_throughput() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let kg = common::random_graph(2000, 4, 4000, &mut rng);
    let trained = table_model("transe", &kg, "64", "0");
    let candidates = kg.used_entities();
    let scorer = Scorer::new(&trained, None, &candidates, &kg.used_relations()).unwrap();
    let start = Instant::now();
    let mut scored = 0usize;
    for &t in &kg.triplets()[..100] {
        scored += scorer.candidate_scores(&RankQuery { direction: Direction::Tail, triplet: t }, &candidates).unwrap().len();
    }
    let rate = scored as f64 / start.elapsed().as_secs_f64();
    assert!(rate >= 1e5, "{rate:.0} scores per second");
}

#[test]
fn scorer_agrees_with_score_functions() {
    let (_, split) = small_split(2);
    for kind in ["transe", "distmult", "complex", "rotate", "simple"] {
        let trained = table_model(kind, &split.train, "4", "2");
        let KeModel::Baseline(model) = &trained.model else { unreachable!() };
        let candidates = split.train.used_entities();
        let scorer = Scorer::new(&trained, None, &candidates, &split.train.used_relations()).unwrap();
        for &t in split.train.triplets() {
            assert_eq!(scorer.score(t).unwrap(), model.score(&trained.params, t).unwrap(), "{kind}");
        }
    }
    let _ = ScoreFn::TransE;
}

proptest! {
    #[test]
    fn tie_rank_equals_sorted_position(scores in prop::collection::vec(-3i32..=3, 30), answer in 0usize..30) {
        let scores: Vec<f64> = scores.into_iter().map(f64::from).collect();
        let others = scores.iter().enumerate().filter(|&(i, _)| i != answer).map(|(_, &s)| s);
        let got = tie_rank(scores[answer], others);
        let mut sorted = scores.clone();
        sorted.sort_by(|a, b| b.total_cmp(a));
        let first = sorted.iter().position(|&s| s == scores[answer]).unwrap();
        let last = sorted.iter().rposition(|&s| s == scores[answer]).unwrap();
        prop_assert_eq!(got, (first + last) as f64 / 2.0 + 1.0);
    }

    #[test]
    fn report_bounds_hold_for_any_ranks(ranks in prop::collection::vec(1u32..=50, 1..40)) {
        let ranks: Vec<f64> = ranks.into_iter().map(f64::from).collect();
        let m = kepler_core::eval::MetricsReport::from_ranks(&ranks, true).unwrap();
        prop_assert!(m.mr >= 1.0 && m.mr <= 50.0);
        prop_assert!(m.mrr > 0.0 && m.mrr <= 1.0);
        prop_assert!(m.hits1 <= m.hits3 && m.hits3 <= m.hits10);
        prop_assert_eq!(m.n_queries, ranks.len());
    }
}
