mod common;

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt::Write as _;

use kepler_core::dataset::{ingest_corpus, split_inductive, split_stats, split_transductive, DataSplit};
use kepler_core::kg::{known_true, EntityId, KnowledgeGraph, Query, RelationId, Triplet};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

type Named = (String, String, String);

fn named(kg: &KnowledgeGraph) -> Vec<Named> {
    kg.triplets()
        .iter()
        .map(|t| {
            (
                kg.entity_name(t.head).to_string(),
                kg.relation_name(t.relation).to_string(),
                kg.entity_name(t.tail).to_string(),
            )
        })
        .collect()
}

fn entity_names(kg: &KnowledgeGraph) -> BTreeSet<String> {
    named(kg).into_iter().flat_map(|(h, _, t)| [h, t]).collect()
}

fn relation_names(kg: &KnowledgeGraph) -> BTreeSet<String> {
    named(kg).into_iter().map(|(_, r, _)| r).collect()
}

/// Connected components of the undirected view of `triplets`, by repeated
/// flooding from unvisited entities.
fn components(triplets: &[Named]) -> usize {
    let mut adjacency: HashMap<&str, Vec<&str>> = HashMap::new();
    for (h, _, t) in triplets {
        adjacency.entry(h).or_default().push(t);
        adjacency.entry(t).or_default().push(h);
    }
    let mut seen: HashSet<&str> = HashSet::new();
    let mut count = 0;
    for &start in adjacency.keys() {
        if !seen.insert(start) {
            continue;
        }
        count += 1;
        let mut stack = vec![start];
        while let Some(node) = stack.pop() {
            for &next in &adjacency[node] {
                if seen.insert(next) {
                    stack.push(next);
                }
            }
        }
    }
    count
}

fn check_transductive(original: &KnowledgeGraph, split: &DataSplit) -> Result<(), String> {
    let train: BTreeSet<Named> = named(&split.train).into_iter().collect();
    let valid: BTreeSet<Named> = named(&split.valid).into_iter().collect();
    let test: BTreeSet<Named> = named(&split.test).into_iter().collect();
    if !train.is_disjoint(&valid) || !train.is_disjoint(&test) || !valid.is_disjoint(&test) {
        return Err("triplet sets overlap".into());
    }
    let union: BTreeSet<Named> = train.iter().chain(&valid).chain(&test).cloned().collect();
    let all: BTreeSet<Named> = named(original).into_iter().collect();
    if union != all {
        return Err("union differs from the input graph".into());
    }
    let train_entities = entity_names(&split.train);
    let train_relations = relation_names(&split.train);
    for (h, r, t) in valid.iter().chain(&test) {
        if !train_entities.contains(h) || !train_entities.contains(t) || !train_relations.contains(r) {
            return Err(format!("({h}, {r}, {t}) is not covered by train"));
        }
    }
    Ok(())
}

fn check_inductive(original: &KnowledgeGraph, split: &DataSplit) -> Result<(), String> {
    let sets = [&split.train, &split.valid, &split.test].map(entity_names);
    for (i, j) in [(0, 1), (0, 2), (1, 2)] {
        if !sets[i].is_disjoint(&sets[j]) {
            return Err(format!("entity sets {i} and {j} overlap"));
        }
    }
    let triplets = [&split.train, &split.valid, &split.test].map(|kg| named(kg).into_iter().collect::<BTreeSet<_>>());
    for (i, j) in [(0, 1), (0, 2), (1, 2)] {
        if !triplets[i].is_disjoint(&triplets[j]) {
            return Err(format!("triplet sets {i} and {j} overlap"));
        }
    }
    let all: BTreeSet<Named> = named(original).into_iter().collect();
    if !triplets.iter().all(|s| s.is_subset(&all)) {
        return Err("a split triplet is not in the input graph".into());
    }
    for (kg, pieces) in [(&split.valid, &split.valid_subgraphs), (&split.test, &split.test_subgraphs)] {
        let list = named(kg);
        if pieces.iter().sum::<usize>() != list.len() {
            return Err("subgraph sizes do not add up".into());
        }
        let mut start = 0;
        for &n in pieces {
            if components(&list[start..start + n]) != 1 {
                return Err(format!("subgraph at offset {start} is disconnected"));
            }
            start += n;
        }
    }
    Ok(())
}

#[test]
fn cycle_of_twenty_gives_connected_disjoint_pieces() {
    let mut text = String::new();
    for i in 0..20 {
        writeln!(text, "n{i}\tnext\tn{}", (i + 1) % 20).unwrap();
    }
    let kg = KnowledgeGraph::from_reader(text.as_bytes()).unwrap();
    assert_eq!(kg.len(), 20);
    for seed in 0..20 {
        let split = split_inductive(&kg, 3, 3, seed).unwrap();
        assert!(split.valid.len() >= 3 && split.test.len() >= 3, "seed {seed}");
        check_inductive(&kg, &split).unwrap_or_else(|e| panic!("seed {seed}: {e}"));
        assert_eq!(components(&named(&split.valid)), 1, "seed {seed}");
        assert_eq!(components(&named(&split.test)), 1, "seed {seed}");
    }
}

#[test]
fn chain_of_ten_keeps_eight_for_training() {
    let mut text = String::new();
    for i in 0..10 {
        writeln!(text, "c{i}\tlinks\tc{}", i + 1).unwrap();
    }
    let kg = KnowledgeGraph::from_reader(text.as_bytes()).unwrap();
    let split = split_transductive(&kg, 1, 1, 11).unwrap();
    let stats = split_stats(&split);
    assert_eq!((stats.n_train, stats.n_valid, stats.n_test), (8, 1, 1));
    check_transductive(&kg, &split).unwrap();
}

#[test]
fn same_seed_same_files() {
    let (kg, _) = common::grid_world(8);
    for inductive in [false, true] {
        let build = |seed| {
            if inductive {
                split_inductive(&kg, 20, 20, seed).unwrap()
            } else {
                split_transductive(&kg, 20, 20, seed).unwrap()
            }
        };
        let dirs: Vec<_> = (0..2).map(|_| tempfile::tempdir().unwrap()).collect();
        build(5).write_dir(dirs[0].path()).unwrap();
        build(5).write_dir(dirs[1].path()).unwrap();
        for name in ["train.txt", "valid.txt", "test.txt", "stats.txt"] {
            let a = std::fs::read(dirs[0].path().join(name)).unwrap();
            let b = std::fs::read(dirs[1].path().join(name)).unwrap();
            assert_eq!(a, b, "{name}");
        }
        assert_ne!(named(&build(5).test), named(&build(6).test));
    }
}

#[test]
fn ingest_leaves_no_reference_to_dropped_entities() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let kg = common::random_graph(40, 3, 150, &mut rng);
    let mut descriptions = String::new();
    for (i, name) in kg.entities().names().iter().enumerate() {
        match i % 4 {
            0 => writeln!(descriptions, "{name}\ttoo short").unwrap(),
            1 => {}
            _ => writeln!(descriptions, "{name}\tan entity with a long enough description").unwrap(),
        }
    }
    let mut triplets = Vec::new();
    kg.write_triplets(&mut triplets).unwrap();
    let (kept, catalog) = ingest_corpus(&triplets[..], descriptions.as_bytes(), 5).unwrap();
    let dropped: HashSet<&str> = catalog.dropped.iter().map(|(id, _)| id.as_str()).collect();
    assert!(!dropped.is_empty());
    for (h, _, t) in named(&kept) {
        assert!(!dropped.contains(h.as_str()) && !dropped.contains(t.as_str()));
        assert!(catalog.description(&h).is_some() && catalog.description(&t).is_some());
    }
    let survivors = named(&kg)
        .into_iter()
        .filter(|(h, _, t)| !dropped.contains(h.as_str()) && !dropped.contains(t.as_str()))
        .count();
    assert_eq!(kept.len(), survivors);
    assert_eq!(catalog.dropped_triplets, kg.len() - survivors);
}

fn triplet_text() -> impl Strategy<Value = String> {
    prop::collection::vec((0u8..12, 0u8..4, 0u8..12), 0..60).prop_map(|rows| {
        rows.into_iter().fold(String::new(), |mut s, (h, r, t)| {
            writeln!(s, "x{h}\tp{r}\tx{t}").unwrap();
            s
        })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn index_sizes_match_triplet_count(text in triplet_text()) {
        let kg = KnowledgeGraph::from_reader(text.as_bytes()).unwrap();
        prop_assert_eq!(kg.out_index_size(), kg.len());
        prop_assert_eq!(kg.in_index_size(), kg.len());
        let distinct: HashSet<&str> = text.lines().collect();
        prop_assert_eq!(kg.len(), distinct.len());
    }

    #[test]
    fn known_true_matches_membership(text in triplet_text()) {
        let kg = KnowledgeGraph::from_reader(text.as_bytes()).unwrap();
        for h in 0..kg.num_entities() as u32 {
            for r in 0..kg.num_relations() as u32 {
                let tails = known_true(&kg, Query::Tail { head: EntityId(h), relation: RelationId(r) });
                let heads = known_true(&kg, Query::Head { relation: RelationId(r), tail: EntityId(h) });
                for t in 0..kg.num_entities() as u32 {
                    prop_assert_eq!(tails.contains(&EntityId(t)), kg.contains(&Triplet::new(h, r, t)));
                    prop_assert_eq!(heads.contains(&EntityId(t)), kg.contains(&Triplet::new(t, r, h)));
                }
            }
        }
    }

    #[test]
    fn ids_round_trip_through_names(text in triplet_text()) {
        let kg = KnowledgeGraph::from_reader(text.as_bytes()).unwrap();
        for catalog in [kg.entities(), kg.relations()] {
            let names: HashSet<&String> = catalog.names().iter().collect();
            prop_assert_eq!(names.len(), catalog.len());
            for (i, name) in catalog.names().iter().enumerate() {
                prop_assert_eq!(catalog.get(name), Some(i as u32));
                prop_assert_eq!(catalog.name(i as u32), Some(name.as_str()));
            }
        }
    }

    #[test]
    fn transductive_splits_hold_invariants(seed in 0u64..1000, n_valid in 0usize..6, n_test in 0usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let kg = common::random_graph(20, 3, 120, &mut rng);
        if let Ok(split) = split_transductive(&kg, n_valid, n_test, seed) {
            prop_assert_eq!((split.valid.len(), split.test.len()), (n_valid, n_test));
            if let Err(e) = check_transductive(&kg, &split) {
                return Err(TestCaseError::fail(e));
            }
        }
    }

    #[test]
    fn inductive_splits_hold_invariants(seed in 0u64..1000, target in 1usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let kg = common::random_graph(60, 3, 120, &mut rng);
        if let Ok(split) = split_inductive(&kg, target, target, seed) {
            prop_assert!(split.valid.len() >= target && split.test.len() >= target);
            if let Err(e) = check_inductive(&kg, &split) {
                return Err(TestCaseError::fail(e));
            }
        }
    }
}
