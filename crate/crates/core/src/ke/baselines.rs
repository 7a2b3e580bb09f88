//! Table-based embedding models.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use kepler_autograd::{ParamId, ParameterSet, Tape, Tensor, Var};
use rand::Rng;

use crate::error::{Error, Result};
use crate::ke::scoring::ScoreFn;
use crate::kg::Triplet;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BaselineKind {
    TransE,
    DistMult,
    ComplEx,
    RotatE,
    SimplE,
}

pub const ALL_BASELINES: [BaselineKind; 5] = [
    BaselineKind::TransE,
    BaselineKind::DistMult,
    BaselineKind::ComplEx,
    BaselineKind::SimplE,
    BaselineKind::RotatE,
];

impl BaselineKind {
    pub fn as_str(self) -> &'static str {
        match self {
            BaselineKind::TransE => "transe",
            BaselineKind::DistMult => "distmult",
            BaselineKind::ComplEx => "complex",
            BaselineKind::RotatE => "rotate",
            BaselineKind::SimplE => "simple",
        }
    }

    pub fn display_name(self) -> &'static str {
        match self {
            BaselineKind::TransE => "TransE",
            BaselineKind::DistMult => "DistMult",
            BaselineKind::ComplEx => "ComplEx",
            BaselineKind::RotatE => "RotatE",
            BaselineKind::SimplE => "SimplE",
        }
    }

    pub fn score_fn(self) -> ScoreFn {
        match self {
            BaselineKind::TransE => ScoreFn::TransE,
            BaselineKind::DistMult => ScoreFn::DistMult,
            BaselineKind::ComplEx => ScoreFn::ComplEx,
            BaselineKind::RotatE => ScoreFn::RotatE,
            BaselineKind::SimplE => ScoreFn::SimplE,
        }
    }

    fn entity_tables(self) -> &'static [&'static str] {
        match self {
            BaselineKind::SimplE => &["entity_head", "entity_tail"],
            _ => &["entity"],
        }
    }

    fn relation_tables(self) -> &'static [&'static str] {
        match self {
            BaselineKind::SimplE => &["relation", "relation_inverse"],
            BaselineKind::RotatE => &["relation_phase"],
            _ => &["relation"],
        }
    }
}

impl fmt::Display for BaselineKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BaselineKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ALL_BASELINES
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown baseline model `{s}`")))
    }
}

/// Handles to the tables of one baseline model.
#[derive(Clone, Debug)]
pub struct BaselineModel {
    pub kind: BaselineKind,
    pub dim: usize,
    entity: Vec<ParamId>,
    relation: Vec<ParamId>,
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, range: f64) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| rng.random_range(-range..range) as f32 as f64)
        .collect();
    Tensor::matrix(rows, cols, data).expect("matching length")
}

impl BaselineModel {
    /// Entity and relation entries drawn uniformly from `[-init_range, init_range)`;
    /// RotatE phases from `[-pi, pi)`.
    pub fn init<R: Rng + ?Sized>(
        kind: BaselineKind,
        n_entities: usize,
        n_relations: usize,
        dim: usize,
        init_range: f64,
        params: &mut ParameterSet,
        rng: &mut R,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Config("embedding dimension must be positive".into()));
        }
        if matches!(kind, BaselineKind::ComplEx | BaselineKind::RotatE) && !dim.is_multiple_of(2) {
            return Err(Error::Config(format!("{kind} needs an even dimension, got {dim}")));
        }
        for name in kind.entity_tables() {
            params.insert(*name, uniform(rng, n_entities, dim, init_range))?;
        }
        for name in kind.relation_tables() {
            let t = if kind == BaselineKind::RotatE {
                uniform(rng, n_relations, dim / 2, PI)
            } else {
                uniform(rng, n_relations, dim, init_range)
            };
            params.insert(*name, t)?;
        }
        Self::from_params(kind, params)
    }

    pub fn from_params(kind: BaselineKind, params: &ParameterSet) -> Result<Self> {
        let entity: Vec<ParamId> = kind.entity_tables().iter().map(|n| params.id(n)).collect::<Result<_, _>>()?;
        let relation: Vec<ParamId> = kind.relation_tables().iter().map(|n| params.id(n)).collect::<Result<_, _>>()?;
        let dim = params.value(entity[0]).cols();
        for &id in &entity {
            if params.value(id).cols() != dim || params.value(id).rows() != params.value(entity[0]).rows() {
                return Err(Error::Config(format!("entity tables of {kind} disagree in shape")));
            }
        }
        let rel_dim = if kind == BaselineKind::RotatE { dim / 2 } else { dim };
        for &id in &relation {
            if params.value(id).cols() != rel_dim {
                return Err(Error::Config(format!(
                    "relation table `{}` has width {}, expected {rel_dim}",
                    params.name(id),
                    params.value(id).cols()
                )));
            }
        }
        Ok(BaselineModel {
            kind,
            dim,
            entity,
            relation,
        })
    }

    pub fn num_entities(&self, params: &ParameterSet) -> usize {
        params.value(self.entity[0]).rows()
    }

    pub fn num_relations(&self, params: &ParameterSet) -> usize {
        params.value(self.relation[0]).rows()
    }

    fn concat(params: &ParameterSet, tables: &[ParamId]) -> Tensor {
        if tables.len() == 1 {
            return params.value(tables[0]).clone();
        }
        let rows = params.value(tables[0]).rows();
        let cols: usize = tables.iter().map(|&t| params.value(t).cols()).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &t in tables {
                data.extend_from_slice(params.value(t).row(r));
            }
        }
        Tensor::matrix(rows, cols, data).expect("matching length")
    }

    /// One row per entity in the layout expected by [`ScoreFn::score`].
    pub fn entity_matrix(&self, params: &ParameterSet) -> Tensor {
        Self::concat(params, &self.entity)
    }

    pub fn relation_matrix(&self, params: &ParameterSet) -> Tensor {
        Self::concat(params, &self.relation)
    }

    /// Plausibility of one triplet; higher is better.
    pub fn score(&self, params: &ParameterSet, t: Triplet) -> Result<f64> {
        let n = self.num_entities(params);
        let m = self.num_relations(params);
        if t.head.index() >= n || t.tail.index() >= n || t.relation.index() >= m {
            return Err(Error::DanglingId {
                kind: "triplet",
                id: t.head.0.max(t.tail.0),
            });
        }
        let row = |tables: &[ParamId], i: usize| -> Vec<f64> {
            tables.iter().flat_map(|&p| params.value(p).row(i).to_vec()).collect()
        };
        self.kind.score_fn().score(
            &row(&self.entity, t.head.index()),
            &row(&self.relation, t.relation.index()),
            &row(&self.entity, t.tail.index()),
        )
    }

    /// Distances (negated scores) of `triplets` as a vector on `tape`.
    pub fn distances<'a>(&self, tape: &'a Tape<'a>, triplets: &[Triplet]) -> Result<Var<'a>> {
        let heads: Vec<usize> = triplets.iter().map(|t| t.head.index()).collect();
        let tails: Vec<usize> = triplets.iter().map(|t| t.tail.index()).collect();
        let rels: Vec<usize> = triplets.iter().map(|t| t.relation.index()).collect();
        let gather = |tables: &[ParamId], idx: &[usize]| -> Result<Var<'a>> {
            let parts = tables
                .iter()
                .map(|&p| tape.param(p).gather(idx))
                .collect::<Result<Vec<_>, _>>()?;
            Ok(if parts.len() == 1 { parts[0] } else { Var::concat_cols(&parts)? })
        };
        let h = gather(&self.entity, &heads)?;
        let r = gather(&self.relation, &rels)?;
        let t = gather(&self.entity, &tails)?;
        self.kind.score_fn().distance_var(&h, &r, &t)
    }
}

/// Score of a triplet under a baseline model; higher is more plausible.
pub fn baseline_score(model: &BaselineModel, params: &ParameterSet, t: Triplet) -> Result<f64> {
    model.score(params, t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn build(kind: BaselineKind, dim: usize) -> (ParameterSet, BaselineModel) {
        let mut params = ParameterSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let m = BaselineModel::init(kind, 6, 3, dim, 0.5, &mut params, &mut rng).unwrap();
        (params, m)
    }

    #[test]
    fn names_round_trip() {
        for k in ALL_BASELINES {
            assert_eq!(k.as_str().parse::<BaselineKind>().unwrap(), k);
        }
        assert!("tucker".parse::<BaselineKind>().is_err());
    }

    #[test]
    fn complex_models_reject_odd_dimensions() {
        for k in [BaselineKind::ComplEx, BaselineKind::RotatE] {
            let mut params = ParameterSet::new();
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            assert!(BaselineModel::init(k, 4, 2, 5, 0.1, &mut params, &mut rng).is_err());
        }
    }

    #[test]
    fn rotate_relations_have_unit_modulus() {
        let (params, m) = build(BaselineKind::RotatE, 8);
        let phases = m.relation_matrix(&params);
        for &p in phases.data() {
            assert!((p.cos().powi(2) + p.sin().powi(2) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn tape_distances_match_scores_and_ignore_batch_company() {
        for k in ALL_BASELINES {
            let (params, m) = build(k, 4);
            let ts = [Triplet::new(0, 1, 2), Triplet::new(5, 0, 3), Triplet::new(2, 2, 2)];
            let tape = Tape::new(&params);
            let all = m.distances(&tape, &ts).unwrap().value();
            for (i, &t) in ts.iter().enumerate() {
                let alone = m.distances(&tape, &[t]).unwrap().value().data()[0];
                assert_eq!(alone, all.data()[i], "{k}");
                let s = m.score(&params, t).unwrap();
                assert!((s + alone).abs() < 1e-12, "{k}: {s} vs {alone}");
            }
        }
    }

    #[test]
    fn reload_from_params() {
        let (params, m) = build(BaselineKind::SimplE, 4);
        let again = BaselineModel::from_params(BaselineKind::SimplE, &params).unwrap();
        assert_eq!(again.dim, 4);
        let t = Triplet::new(1, 2, 3);
        assert_eq!(m.score(&params, t).unwrap(), again.score(&params, t).unwrap());
        assert!(m.score(&params, Triplet::new(9, 0, 0)).is_err());
    }
}
