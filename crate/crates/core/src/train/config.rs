use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use kepler_autograd::AdamConfig;

use crate::error::{Error, Result};
use crate::ke::{BaselineKind, KeplerVariant};
use crate::text::encoder::EncoderConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Objective {
    Joint,
    KeOnly,
    MlmOnly,
}

impl Objective {
    pub fn as_str(self) -> &'static str {
        match self {
            Objective::Joint => "joint",
            Objective::KeOnly => "ke_only",
            Objective::MlmOnly => "mlm_only",
        }
    }

    pub fn uses_ke(self) -> bool {
        self != Objective::MlmOnly
    }

    pub fn uses_mlm(self) -> bool {
        self != Objective::KeOnly
    }
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "joint" => Ok(Objective::Joint),
            "ke_only" => Ok(Objective::KeOnly),
            "mlm_only" => Ok(Objective::MlmOnly),
            _ => Err(Error::Config(format!("unknown objective `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelChoice {
    Kepler(KeplerVariant),
    Baseline(BaselineKind),
}

impl ModelChoice {
    pub fn is_baseline(self) -> bool {
        matches!(self, ModelChoice::Baseline(_))
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ModelChoice::Kepler(v) => v.as_str(),
            ModelChoice::Baseline(b) => b.as_str(),
        }
    }

    /// Parses either a variant or baseline name.
    pub fn parse(s: &str) -> Result<Self> {
        if let Ok(v) = s.parse::<KeplerVariant>() {
            return Ok(ModelChoice::Kepler(v));
        }
        s.parse::<BaselineKind>().map(ModelChoice::Baseline)
    }
}

/// Maps a command-line model preset to a model and objective.
pub fn model_preset(name: &str) -> Result<(ModelChoice, Objective)> {
    use KeplerVariant::*;
    Ok(match name {
        "kepler-wiki" => (ModelChoice::Kepler(EntityDesc), Objective::Joint),
        "kepler-rel" => (ModelChoice::Kepler(EntityRelDesc), Objective::Joint),
        "kepler-cond" => (ModelChoice::Kepler(Conditioned), Objective::Joint),
        "kepler-ke" => (ModelChoice::Kepler(EntityDesc), Objective::KeOnly),
        "mlm-only" => (ModelChoice::Kepler(EntityDesc), Objective::MlmOnly),
        other => (ModelChoice::Baseline(other.parse()?), Objective::KeOnly),
    })
}

pub const MODEL_PRESETS: [&str; 10] = [
    "kepler-wiki",
    "kepler-rel",
    "kepler-cond",
    "kepler-ke",
    "mlm-only",
    "transe",
    "distmult",
    "complex",
    "rotate",
    "simple",
];

pub const GAMMA_NLP: f64 = 4.0;
pub const GAMMA_KE: f64 = 9.0;
pub const GAMMA_SECOND_KG: f64 = 1.0;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub model: ModelChoice,
    pub objective: Objective,
    /// `None` picks 4 for joint training and 9 otherwise.
    pub gamma: Option<f64>,
    pub gamma2: f64,
    /// `None` picks 1 for encoder models and 64 for tables.
    pub n_neg: Option<usize>,
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn: Option<usize>,
    pub max_len: usize,
    pub vocab_size: usize,
    pub dropout: f64,
    pub batch_ke: usize,
    pub batch_mlm: usize,
    pub epochs: usize,
    pub max_steps: Option<u64>,
    pub accum: usize,
    /// `None` picks 1e-4 for encoder models and 1e-3 for tables.
    pub lr: Option<f64>,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// `None` warms up over the first 5% of steps; 0 disables warmup.
    pub warmup_steps: Option<u64>,
    /// Half-width of the uniform table initialization; `None` uses `(gamma + 2) / dim`.
    pub init_range: Option<f64>,
    pub seed: u64,
    pub log_every: u64,
    pub checkpoint_every: Option<u64>,
    pub checkpoint: Option<PathBuf>,
    pub second_kg: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelChoice::Kepler(KeplerVariant::EntityDesc),
            objective: Objective::Joint,
            gamma: None,
            gamma2: GAMMA_SECOND_KG,
            n_neg: None,
            dim: 32,
            layers: 2,
            heads: 4,
            ffn: None,
            max_len: 64,
            vocab_size: 1000,
            dropout: 0.0,
            batch_ke: 16,
            batch_mlm: 16,
            epochs: 1,
            max_steps: None,
            accum: 1,
            lr: None,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-6,
            warmup_steps: None,
            init_range: None,
            seed: 0,
            log_every: 1,
            checkpoint_every: None,
            checkpoint: None,
            second_kg: None,
        }
    }
}

/// Keys accepted by [`TrainConfig::set`], in display order.
pub const CONFIG_KEYS: [&str; 28] = [
    "model",
    "objective",
    "gamma",
    "gamma2",
    "neg",
    "dim",
    "layers",
    "heads",
    "ffn",
    "max_len",
    "vocab_size",
    "dropout",
    "batch_ke",
    "batch_mlm",
    "epochs",
    "steps",
    "accum",
    "lr",
    "beta1",
    "beta2",
    "eps",
    "warmup",
    "init_range",
    "seed",
    "log_every",
    "checkpoint_every",
    "checkpoint",
    "second_kg",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
}

impl TrainConfig {
    pub fn gamma(&self) -> f64 {
        self.gamma.unwrap_or(match self.objective {
            Objective::Joint => GAMMA_NLP,
            _ => GAMMA_KE,
        })
    }

    pub fn n_neg(&self) -> usize {
        self.n_neg.unwrap_or(if self.model.is_baseline() { 64 } else { 1 })
    }

    pub fn ffn(&self) -> usize {
        self.ffn.unwrap_or(2 * self.dim)
    }

    pub fn init_range(&self) -> f64 {
        self.init_range.unwrap_or((self.gamma() + 2.0) / self.dim as f64)
    }

    pub fn encoder_config(&self, vocab_size: usize) -> EncoderConfig {
        EncoderConfig {
            n_layers: self.layers,
            hidden: self.dim,
            n_heads: self.heads,
            ffn_dim: self.ffn(),
            max_positions: self.max_len,
            vocab_size,
            dropout: self.dropout,
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr.unwrap_or(if self.model.is_baseline() { 1e-3 } else { 1e-4 })
    }

    /// Optimizer settings for a run of `total_steps` steps.
    pub fn adam(&self, total_steps: u64) -> AdamConfig {
        let adam = AdamConfig {
            lr: self.lr(),
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            warmup_steps: self.warmup_steps.unwrap_or(0),
        };
        match self.warmup_steps {
            Some(_) => adam,
            None => adam.with_warmup_fraction(total_steps),
        }
    }

    /// Sets one key. Dashes and underscores are interchangeable; `model`
    /// accepts the command-line presets and also sets the objective.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim().replace('-', "_");
        let value = value.trim();
        let k = key.as_str();
        match k {
            "model" => match model_preset(value) {
                Ok((m, o)) => {
                    self.model = m;
                    self.objective = o;
                }
                Err(_) => self.model = ModelChoice::parse(value)?,
            },
            "objective" => self.objective = value.parse()?,
            "gamma" => self.gamma = Some(parse(k, value)?),
            "gamma2" => self.gamma2 = parse(k, value)?,
            "neg" => self.n_neg = Some(parse(k, value)?),
            "dim" => self.dim = parse(k, value)?,
            "layers" => self.layers = parse(k, value)?,
            "heads" => self.heads = parse(k, value)?,
            "ffn" => self.ffn = Some(parse(k, value)?),
            "max_len" => self.max_len = parse(k, value)?,
            "vocab_size" => self.vocab_size = parse(k, value)?,
            "dropout" => self.dropout = parse(k, value)?,
            "batch_ke" => self.batch_ke = parse(k, value)?,
            "batch_mlm" => self.batch_mlm = parse(k, value)?,
            "epochs" => self.epochs = parse(k, value)?,
            "steps" => self.max_steps = Some(parse(k, value)?),
            "accum" => self.accum = parse(k, value)?,
            "lr" => self.lr = Some(parse(k, value)?),
            "beta1" => self.beta1 = parse(k, value)?,
            "beta2" => self.beta2 = parse(k, value)?,
            "eps" => self.eps = parse(k, value)?,
            "warmup" => self.warmup_steps = Some(parse(k, value)?),
            "init_range" => self.init_range = Some(parse(k, value)?),
            "seed" => self.seed = parse(k, value)?,
            "log_every" => self.log_every = parse(k, value)?,
            "checkpoint_every" => self.checkpoint_every = Some(parse(k, value)?),
            "checkpoint" => self.checkpoint = Some(PathBuf::from(value)),
            "second_kg" => self.second_kg = Some(PathBuf::from(value)),
            _ => return Err(Error::Config(format!("unknown configuration key `{key}`"))),
        }
        Ok(())
    }

    /// The value of a [`CONFIG_KEYS`] entry as `set` would accept it, or
    /// `None` when the key is unset and resolved from other settings.
    pub fn get(&self, key: &str) -> Option<String> {
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string());
        Some(match key.replace('-', "_").as_str() {
            "model" => MODEL_PRESETS
                .iter()
                .find(|p| model_preset(p).ok() == Some((self.model, self.objective)))
                .map_or_else(|| self.model.as_str().to_string(), |p| p.to_string()),
            "objective" => self.objective.to_string(),
            "gamma" => return self.gamma.map(|v| v.to_string()),
            "gamma2" => self.gamma2.to_string(),
            "neg" => return self.n_neg.map(|v| v.to_string()),
            "dim" => self.dim.to_string(),
            "layers" => self.layers.to_string(),
            "heads" => self.heads.to_string(),
            "ffn" => return self.ffn.map(|v| v.to_string()),
            "max_len" => self.max_len.to_string(),
            "vocab_size" => self.vocab_size.to_string(),
            "dropout" => self.dropout.to_string(),
            "batch_ke" => self.batch_ke.to_string(),
            "batch_mlm" => self.batch_mlm.to_string(),
            "epochs" => self.epochs.to_string(),
            "steps" => return self.max_steps.map(|v| v.to_string()),
            "accum" => self.accum.to_string(),
            "lr" => return self.lr.map(|v| v.to_string()),
            "beta1" => self.beta1.to_string(),
            "beta2" => self.beta2.to_string(),
            "eps" => self.eps.to_string(),
            "warmup" => return self.warmup_steps.map(|v| v.to_string()),
            "init_range" => return self.init_range.map(|v| v.to_string()),
            "seed" => self.seed.to_string(),
            "log_every" => self.log_every.to_string(),
            "checkpoint_every" => return self.checkpoint_every.map(|v| v.to_string()),
            "checkpoint" => return path(&self.checkpoint),
            "second_kg" => return path(&self.second_kg),
            _ => return None,
        })
    }

    /// Applies `key = value` lines; blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: n + 1,
                msg: "expected `key = value`".into(),
            })?;
            self.set(k, v).map_err(|e| Error::Parse {
                line: n + 1,
                msg: e.to_string(),
            })?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.model.is_baseline() && self.objective != Objective::KeOnly {
            return fail(format!("table model {} only trains the ke_only objective", self.model.as_str()));
        }
        if self.objective.uses_ke() && (self.batch_ke == 0 || self.n_neg() == 0) {
            return fail("ke training needs a positive ke batch size and negative count".into());
        }
        if self.objective.uses_mlm() && self.batch_mlm == 0 {
            return fail("mlm training needs a positive mlm batch size".into());
        }
        if self.second_kg.is_some() && !self.objective.uses_ke() {
            return fail("a second graph needs an objective with the ke loss".into());
        }
        if self.dim == 0 || self.accum == 0 || self.log_every == 0 {
            return fail("dim, accum and log_every must be positive".into());
        }
        if !(self.lr() > 0.0 && self.lr().is_finite()) {
            return fail(format!("learning rate must be positive, got {}", self.lr()));
        }
        if !self.gamma().is_finite() || !self.gamma2.is_finite() {
            return fail("margins must be finite".into());
        }
        if !self.model.is_baseline() {
            self.encoder_config(self.vocab_size).validate()?;
        }
        Ok(())
    }
}
