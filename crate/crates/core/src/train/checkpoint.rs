//! Model checkpoints: weights plus a header describing how to rebuild the
//! scorer, and the tokenizer files beside them.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use kepler_autograd::{load_checkpoint_file, save_checkpoint_file, Meta, ParameterSet};

use crate::error::{Error, Result};
use crate::ke::{BaselineModel, KeModel, KeplerModel};
use crate::text::encoder::EncoderConfig;
use crate::text::tokenizer::Tokenizer;
use crate::train::config::{ModelChoice, Objective};

/// Everything needed to rebuild a model from its weights.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelSpec {
    pub model: ModelChoice,
    pub objective: Objective,
    pub gamma: f64,
    /// Margin of the second graph, when one was used.
    pub gamma2: Option<f64>,
    pub n_neg: usize,
    pub dim: usize,
    /// Present for encoder models.
    pub encoder: Option<EncoderConfig>,
    pub n_entities: usize,
    pub n_relations: usize,
    pub seed: u64,
    pub step: u64,
}

fn get<'m>(meta: &'m Meta, key: &str) -> Result<&'m str> {
    meta.get(key)
        .map(String::as_str)
        .ok_or_else(|| Error::Checkpoint(format!("header lacks `{key}`")))
}

fn num<T: std::str::FromStr>(meta: &Meta, key: &str) -> Result<T> {
    let v = get(meta, key)?;
    v.parse()
        .map_err(|_| Error::Checkpoint(format!("header value `{v}` for `{key}` is malformed")))
}

impl ModelSpec {
    pub fn to_meta(&self) -> Meta {
        let mut m = Meta::new();
        let mut put = |k: &str, v: String| {
            m.insert(k.to_string(), v);
        };
        put(
            "kind",
            if self.model.is_baseline() { "baseline" } else { "kepler" }.into(),
        );
        put("model", self.model.as_str().into());
        put("objective", self.objective.as_str().into());
        put("gamma", self.gamma.to_string());
        if let Some(g) = self.gamma2 {
            put("gamma2", g.to_string());
        }
        put("n_neg", self.n_neg.to_string());
        put("dim", self.dim.to_string());
        if let Some(e) = &self.encoder {
            put("layers", e.n_layers.to_string());
            put("heads", e.n_heads.to_string());
            put("ffn", e.ffn_dim.to_string());
            put("max_len", e.max_positions.to_string());
            put("vocab_size", e.vocab_size.to_string());
            put("dropout", e.dropout.to_string());
        }
        put("n_entities", self.n_entities.to_string());
        put("n_relations", self.n_relations.to_string());
        put("seed", self.seed.to_string());
        put("step", self.step.to_string());
        m
    }

    pub fn from_meta(meta: &Meta) -> Result<Self> {
        let model = ModelChoice::parse(get(meta, "model")?)?;
        let kind = get(meta, "kind")?;
        if (kind == "baseline") != model.is_baseline() {
            return Err(Error::Checkpoint(format!("kind `{kind}` does not match model `{}`", model.as_str())));
        }
        let dim = num(meta, "dim")?;
        let encoder = if model.is_baseline() {
            None
        } else {
            Some(EncoderConfig {
                n_layers: num(meta, "layers")?,
                hidden: dim,
                n_heads: num(meta, "heads")?,
                ffn_dim: num(meta, "ffn")?,
                max_positions: num(meta, "max_len")?,
                vocab_size: num(meta, "vocab_size")?,
                dropout: num(meta, "dropout")?,
            })
        };
        Ok(ModelSpec {
            model,
            objective: get(meta, "objective")?.parse()?,
            gamma: num(meta, "gamma")?,
            gamma2: meta.get("gamma2").map(|_| num(meta, "gamma2")).transpose()?,
            n_neg: num(meta, "n_neg")?,
            dim,
            encoder,
            n_entities: num(meta, "n_entities")?,
            n_relations: num(meta, "n_relations")?,
            seed: num(meta, "seed")?,
            step: num(meta, "step")?,
        })
    }

    /// Model handles for weights laid out by this spec.
    pub fn bind(&self, params: &ParameterSet) -> Result<KeModel> {
        Ok(match (self.model, &self.encoder) {
            (ModelChoice::Baseline(kind), _) => {
                let m = BaselineModel::from_params(kind, params)?;
                if m.dim != self.dim || m.num_entities(params) != self.n_entities || m.num_relations(params) != self.n_relations {
                    return Err(Error::Checkpoint("table shapes disagree with the header".into()));
                }
                KeModel::Baseline(m)
            }
            (ModelChoice::Kepler(v), Some(cfg)) => KeModel::Kepler(KeplerModel::from_params(v, cfg.clone(), params)?),
            (ModelChoice::Kepler(_), None) => {
                return Err(Error::Checkpoint("encoder model without encoder settings".into()))
            }
        })
    }
}

/// A model with its weights and, for encoder models, its tokenizer.
#[derive(Clone, Debug)]
pub struct TrainedModel {
    pub spec: ModelSpec,
    pub params: ParameterSet,
    pub model: KeModel,
    pub tokenizer: Option<Tokenizer>,
}

/// Paths of the tokenizer files stored beside a checkpoint.
pub fn tokenizer_paths(checkpoint: &Path) -> (PathBuf, PathBuf) {
    let with = |ext: &str| {
        let mut s = checkpoint.as_os_str().to_owned();
        s.push(ext);
        PathBuf::from(s)
    };
    (with(".vocab"), with(".merges"))
}

pub fn save_checkpoint(path: &Path, params: &ParameterSet, spec: &ModelSpec, tokenizer: Option<&Tokenizer>) -> Result<()> {
    if let Some(tok) = tokenizer {
        let (vocab, merges) = tokenizer_paths(path);
        let mut w = BufWriter::new(File::create(vocab)?);
        tok.write_vocab(&mut w)?;
        w.flush()?;
        let mut w = BufWriter::new(File::create(merges)?);
        tok.write_merges(&mut w)?;
        w.flush()?;
    }
    save_checkpoint_file(path, params, &spec.to_meta())?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<TrainedModel> {
    let (params, meta) = load_checkpoint_file(path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    let spec = ModelSpec::from_meta(&meta)?;
    let model = spec.bind(&params)?;
    let tokenizer = if spec.encoder.is_some() {
        let (vocab, merges) = tokenizer_paths(path);
        let open = |p: &Path| {
            File::open(p)
                .map(BufReader::new)
                .map_err(|e| Error::Checkpoint(format!("{}: {e}", p.display())))
        };
        let tok = Tokenizer::load(open(&vocab)?, open(&merges)?)?;
        if Some(tok.vocab_size()) != spec.encoder.as_ref().map(|e| e.vocab_size) {
            return Err(Error::Checkpoint("tokenizer size disagrees with the header".into()));
        }
        Some(tok)
    } else {
        None
    };
    Ok(TrainedModel {
        spec,
        params,
        model,
        tokenizer,
    })
}

impl TrainedModel {
    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(path, &self.params, &self.spec, self.tokenizer.as_ref())
    }

    pub fn load(path: &Path) -> Result<Self> {
        load_checkpoint(path)
    }
}
