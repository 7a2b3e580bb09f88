use rand::Rng;

use crate::kg::{EntityId, KnowledgeGraph, Triplet};

/// Resampling attempts before a corruption that is a known fact is kept.
pub const MAX_RETRIES: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    Head,
    Tail,
}

/// Corrupts one side of a triplet with a training entity drawn uniformly
/// among those different from the one being replaced.
#[derive(Clone, Debug)]
pub struct NegativeSampler {
    entities: Vec<EntityId>,
    /// Corruptions accepted although they are true after exhausting retries.
    pub false_negatives: u64,
}

impl NegativeSampler {
    /// Samples replacements from the entities used by `kg`.
    pub fn new(kg: &KnowledgeGraph) -> Self {
        Self::with_entities(kg.used_entities())
    }

    pub fn with_entities(mut entities: Vec<EntityId>) -> Self {
        entities.sort_unstable();
        entities.dedup();
        NegativeSampler {
            entities,
            false_negatives: 0,
        }
    }

    pub fn entities(&self) -> &[EntityId] {
        &self.entities
    }

    /// `n` corruptions of `triplet`. `known` supplies the facts that trigger
    /// resampling.
    pub fn sample<R: Rng + ?Sized>(
        &mut self,
        known: &KnowledgeGraph,
        triplet: Triplet,
        n: usize,
        rng: &mut R,
    ) -> Vec<(Triplet, Side)> {
        assert!(self.entities.len() >= 2, "negative sampling needs at least two entities");
        (0..n).map(|_| self.one(known, triplet, rng)).collect()
    }

    fn one<R: Rng + ?Sized>(&mut self, known: &KnowledgeGraph, t: Triplet, rng: &mut R) -> (Triplet, Side) {
        let side = if rng.random::<bool>() { Side::Head } else { Side::Tail };
        let original = match side {
            Side::Head => t.head,
            Side::Tail => t.tail,
        };
        let skip = self.entities.binary_search(&original).ok();
        let pool = self.entities.len() - usize::from(skip.is_some());
        let mut attempt = 0;
        loop {
            let mut k = rng.random_range(0..pool);
            if skip.is_some_and(|s| k >= s) {
                k += 1;
            }
            let e = self.entities[k];
            let c = match side {
                Side::Head => Triplet { head: e, ..t },
                Side::Tail => Triplet { tail: e, ..t },
            };
            if !known.contains(&c) {
                return (c, side);
            }
            attempt += 1;
            if attempt > MAX_RETRIES {
                self.false_negatives += 1;
                log::debug!("accepted known triplet {c:?} as a negative");
                return (c, side);
            }
        }
    }
}

/// Convenience wrapper drawing from the entities of `kg` and filtering against it.
pub fn sample_negatives<R: Rng + ?Sized>(
    kg: &KnowledgeGraph,
    triplet: Triplet,
    n: usize,
    rng: &mut R,
) -> Vec<(Triplet, Side)> {
    NegativeSampler::new(kg).sample(kg, triplet, n, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn graph() -> KnowledgeGraph {
        KnowledgeGraph::from_reader("a\tr\tb\nb\tr\tc\nc\tr\td\nd\tr\ta\n".as_bytes()).unwrap()
    }

    #[test]
    fn corrupts_exactly_one_side() {
        let kg = graph();
        let t = kg.triplets()[0];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (c, side) in sample_negatives(&kg, t, 200, &mut rng) {
            assert_eq!(c.relation, t.relation);
            match side {
                Side::Head => assert_eq!(c.tail, t.tail),
                Side::Tail => assert_eq!(c.head, t.head),
            }
            assert!(!kg.contains(&c));
        }
    }

    #[test]
    fn two_entity_graph_avoids_the_original() {
        let kg = KnowledgeGraph::from_reader("x\tr\ty\n".as_bytes()).unwrap();
        let t = kg.triplets()[0];
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut sampler = NegativeSampler::new(&kg);
        for (c, _) in sampler.sample(&kg, t, 100, &mut rng) {
            assert_ne!(c, t);
        }
        assert_eq!(sampler.false_negatives, 0);
    }

    #[test]
    fn same_seed_same_sequence() {
        let kg = graph();
        let t = kg.triplets()[1];
        let run = |s| sample_negatives(&kg, t, 50, &mut ChaCha8Rng::seed_from_u64(s));
        assert_eq!(run(9), run(9));
    }

    #[test]
    fn saturated_graph_counts_accepted_facts() {
        let kg = KnowledgeGraph::from_reader("x\tr\tx\nx\tr\ty\ny\tr\tx\ny\tr\ty\n".as_bytes()).unwrap();
        let mut sampler = NegativeSampler::new(&kg);
        let out = sampler.sample(&kg, kg.triplets()[0], 5, &mut ChaCha8Rng::seed_from_u64(3));
        assert_eq!(out.len(), 5);
        assert_eq!(sampler.false_negatives, 5);
    }
}
