pub mod baselines;
pub mod kepler;
pub mod negatives;
pub mod scoring;

pub use baselines::{baseline_score, BaselineKind, BaselineModel, ALL_BASELINES};
pub use kepler::{entity_embedding, relation_embedding, DescriptionTokens, InputKey, KeplerModel, KeplerVariant};
pub use negatives::{sample_negatives, NegativeSampler, Side, MAX_RETRIES};
pub use scoring::{ke_loss, ke_loss_var, lp_distance, transe_distance, ScoreFn};

/// Either kind of knowledge-embedding model, as handles into a parameter set.
#[derive(Clone, Debug)]
pub enum KeModel {
    Kepler(KeplerModel),
    Baseline(BaselineModel),
}
