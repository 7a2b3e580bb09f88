//! Synthetic graphs shared by the integration tests.
#![allow(dead_code)]

use std::fmt::Write as _;

use kepler_core::dataset::EntityCatalog;
use kepler_core::kg::KnowledgeGraph;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Entities per cluster in [`planted_translation`].
pub const CLUSTER_SIZE: usize = 5;

const SHIFTS: [(i64, i64); 8] = [(1, 0), (-1, 0), (0, 1), (0, -1), (1, 1), (-1, -1), (1, -1), (-1, 1)];

/// A graph generated from planted translational embeddings. Entities come
/// in tight clusters of [`CLUSTER_SIZE`] placed on a 2-d lattice spanned by
/// two random vectors, and relation `j` moves one lattice step along
/// `SHIFTS[j]`. Facts are whole cluster edges: every member of the source
/// cluster is linked to every member of the target.
pub fn planted_translation_graph(
    n_entities: usize,
    n_relations: usize,
    n_triplets: usize,
    dim: usize,
    seed: u64,
) -> KnowledgeGraph {
    planted_translation(n_entities, n_relations, n_triplets, dim, seed).0
}

/// The graph of [`planted_translation_graph`] with the planted entity and
/// relation vectors, indexed by the numeric suffix of their names.
pub fn planted_translation(
    n_entities: usize,
    n_relations: usize,
    n_triplets: usize,
    dim: usize,
    seed: u64,
) -> (KnowledgeGraph, Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let per_edge = CLUSTER_SIZE * CLUSTER_SIZE;
    assert!(n_entities.is_multiple_of(CLUSTER_SIZE) && n_triplets.is_multiple_of(per_edge) && n_relations <= SHIFTS.len());
    let n_clusters = n_entities / CLUSTER_SIZE;
    let cols = (n_clusters as f64).sqrt().ceil() as i64;
    let pos = |c: usize| (c as i64 % cols, c as i64 / cols);
    let at = |x: i64, y: i64| {
        let c = y * cols + x;
        (x >= 0 && x < cols && y >= 0 && (c as usize) < n_clusters).then_some(c as usize)
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut vector = |std: f64| -> Vec<f64> { (0..dim).map(|_| std * normal.sample(&mut rng)).collect() };
    let (u, v) = (vector(1.0), vector(1.0));
    let combine = |a: f64, b: f64| -> Vec<f64> { u.iter().zip(&v).map(|(p, q)| a * p + b * q).collect() };
    let rel: Vec<Vec<f64>> = SHIFTS[..n_relations].iter().map(|&(a, b)| combine(a as f64, b as f64)).collect();
    let ent: Vec<Vec<f64>> = (0..n_entities)
        .map(|e| {
            let (x, y) = pos(e / CLUSTER_SIZE);
            combine(x as f64, y as f64).iter().zip(vector(0.05)).map(|(c, n)| c + n).collect()
        })
        .collect();

    let mut edges = Vec::new();
    for c in 0..n_clusters {
        let (x, y) = pos(c);
        for (r, &(dx, dy)) in SHIFTS[..n_relations].iter().enumerate() {
            if let Some(d) = at(x + dx, y + dy) {
                edges.push((c, r, d));
            }
        }
    }
    assert!(edges.len() * per_edge >= n_triplets, "lattice has too few edges");
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    edges.shuffle(&mut rng);
    edges.truncate(n_triplets / per_edge);
    let mut facts: Vec<(usize, usize, usize)> = edges
        .iter()
        .flat_map(|&(a, r, b)| {
            (0..per_edge).map(move |k| (a * CLUSTER_SIZE + k / CLUSTER_SIZE, r, b * CLUSTER_SIZE + k % CLUSTER_SIZE))
        })
        .collect();
    facts.shuffle(&mut rng);
    let mut text = String::new();
    for (h, r, t) in facts {
        writeln!(text, "e{h}\tr{r}\te{t}").unwrap();
    }
    (KnowledgeGraph::from_reader(text.as_bytes()).unwrap(), ent, rel)
}

pub const NUMBER_WORDS: [&str; 20] = [
    "zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten", "eleven",
    "twelve", "thirteen", "fourteen", "fifteen", "sixteen", "seventeen", "eighteen", "nineteen",
];

/// A `side x side` grid with moves east, west, north and south. Each
/// description names the cell's column and row, so identity is fully
/// determined by the text.
pub fn grid_world(side: usize) -> (KnowledgeGraph, EntityCatalog) {
    assert!(side <= NUMBER_WORDS.len());
    let name = |x: usize, y: usize| format!("cell_{x}_{y}");
    let mut text = String::new();
    let mut catalog = EntityCatalog::new();
    for (x, &col) in NUMBER_WORDS[..side].iter().enumerate() {
        for (y, &row) in NUMBER_WORDS[..side].iter().enumerate() {
            catalog.insert(
                name(x, y),
                format!("a cell in column {} and row {} of the map", col, row),
            );
            if x + 1 < side {
                writeln!(text, "{}\teast\t{}", name(x, y), name(x + 1, y)).unwrap();
                writeln!(text, "{}\twest\t{}", name(x + 1, y), name(x, y)).unwrap();
            }
            if y + 1 < side {
                writeln!(text, "{}\tnorth\t{}", name(x, y), name(x, y + 1)).unwrap();
                writeln!(text, "{}\tsouth\t{}", name(x, y + 1), name(x, y)).unwrap();
            }
        }
    }
    for (r, d) in [("east", "one step to the east"), ("west", "one step to the west"), ("north", "one step to the north"), ("south", "one step to the south")] {
        catalog.insert_relation(r, d);
    }
    (KnowledgeGraph::from_reader(text.as_bytes()).unwrap(), catalog)
}

/// A random multigraph with `n_triplets` draws over `n_entities` entities
/// and `n_relations` relations (duplicates collapse).
pub fn random_graph(n_entities: usize, n_relations: usize, n_triplets: usize, rng: &mut ChaCha8Rng) -> KnowledgeGraph {
    let mut text = String::new();
    for _ in 0..n_triplets {
        let h = rng.random_range(0..n_entities);
        let t = rng.random_range(0..n_entities);
        let r = rng.random_range(0..n_relations);
        writeln!(text, "e{h}\tr{r}\te{t}").unwrap();
    }
    KnowledgeGraph::from_reader(text.as_bytes()).unwrap()
}

/// Short descriptions for every entity and relation of `kg`.
pub fn describe(kg: &KnowledgeGraph) -> EntityCatalog {
    let mut catalog = EntityCatalog::new();
    for (i, n) in kg.entities().names().iter().enumerate() {
        catalog.insert(n.clone(), format!("entity {n} is number {} in a small test world", NUMBER_WORDS[i % 20]));
    }
    for n in kg.relations().names() {
        catalog.insert_relation(n.clone(), format!("the relation called {n}"));
    }
    catalog
}
