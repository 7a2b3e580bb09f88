//! Pre-norm transformer encoder with learned absolute positions.
//!
//! Rows of a batch are packed back to back without padding, so the dense
//! layers run once over all real tokens and attention runs per row. Pad
//! positions never enter the computation.

use kepler_autograd::{ParamId, ParameterSet, Tape, Tensor, Var};
use rand::{Rng, RngCore};
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::text::tokenizer::{BOS, NUM_SPECIALS};

pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub n_layers: usize,
    pub hidden: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    pub max_positions: usize,
    pub vocab_size: usize,
    pub dropout: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            n_layers: 2,
            hidden: 32,
            n_heads: 4,
            ffn_dim: 64,
            max_positions: 64,
            vocab_size: 1000,
            dropout: 0.0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.n_layers == 0 || self.hidden == 0 || self.n_heads == 0 || self.ffn_dim == 0 {
            return fail(format!("layers, hidden, heads and ffn must be positive: {self:?}"));
        }
        if !self.hidden.is_multiple_of(self.n_heads) {
            return fail(format!(
                "hidden size {} is not divisible by {} heads",
                self.hidden, self.n_heads
            ));
        }
        if self.max_positions < 2 {
            return fail(format!("max positions must be at least 2, got {}", self.max_positions));
        }
        if self.vocab_size <= NUM_SPECIALS as usize {
            return fail(format!("vocab size {} leaves no regular tokens", self.vocab_size));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.n_heads
    }
}

/// Variable-length token rows. Row `i` holds exactly its real tokens.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenBatch {
    rows: Vec<Vec<u32>>,
}

impl TokenBatch {
    pub fn new(rows: Vec<Vec<u32>>) -> Self {
        TokenBatch { rows }
    }

    /// Builds a batch from a padded id matrix and its mask (`true` = real
    /// token). Masked cells must form a prefix of each row.
    pub fn from_padded(ids: &[Vec<u32>], mask: &[Vec<bool>]) -> Result<Self> {
        if ids.len() != mask.len() {
            return Err(Error::Config("id and mask row counts differ".into()));
        }
        let mut rows = Vec::with_capacity(ids.len());
        for (r, (row, m)) in ids.iter().zip(mask).enumerate() {
            if row.len() != m.len() {
                return Err(Error::Config(format!("row {r}: id and mask lengths differ")));
            }
            let len = m.iter().take_while(|&&b| b).count();
            if m[len..].iter().any(|&b| b) {
                return Err(Error::Config(format!("row {r}: mask is not a prefix")));
            }
            rows.push(row[..len].to_vec());
        }
        Ok(TokenBatch { rows })
    }

    pub fn rows(&self) -> &[Vec<u32>] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Index of the first token of each row in the packed layout.
    pub fn offsets(&self) -> Vec<usize> {
        let mut acc = 0;
        self.rows
            .iter()
            .map(|r| {
                let o = acc;
                acc += r.len();
                o
            })
            .collect()
    }

    pub fn num_tokens(&self) -> usize {
        self.rows.iter().map(Vec::len).sum()
    }
}

pub struct EncoderOutput<'a> {
    /// Final representations of every real token, rows packed as in [`TokenBatch::offsets`].
    pub hidden: Var<'a>,
    /// Representation at position 0 of each row, `(rows, d)`.
    pub pooled: Var<'a>,
    pub offsets: Vec<usize>,
}

#[derive(Clone, Copy, Debug)]
struct LayerNormParams {
    gain: ParamId,
    bias: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct Block {
    ln1: LayerNormParams,
    qkv: ParamId,
    qkv_b: ParamId,
    out: ParamId,
    out_b: ParamId,
    ln2: LayerNormParams,
    ff1: ParamId,
    ff1_b: ParamId,
    ff2: ParamId,
    ff2_b: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct MlmHead {
    dense: ParamId,
    dense_b: ParamId,
    ln: LayerNormParams,
    bias: ParamId,
}

/// Handles to the encoder weights inside a [`ParameterSet`].
#[derive(Clone, Debug)]
pub struct Encoder {
    config: EncoderConfig,
    tok_emb: ParamId,
    pos_emb: ParamId,
    blocks: Vec<Block>,
    final_ln: LayerNormParams,
    mlm: MlmHead,
}

/// Normal(0, std) samples rounded to the nearest `f32`, so a checkpoint of
/// fresh weights is lossless.
pub fn normal_init<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], std: f64) -> Tensor {
    let dist = Normal::new(0.0, std).expect("positive std");
    let n = shape.iter().product();
    let data = (0..n).map(|_| dist.sample(rng) as f32 as f64).collect();
    Tensor::new(shape.to_vec(), data).expect("matching length")
}

fn layer_norm<'a>(x: &Var<'a>, p: LayerNormParams) -> Result<Var<'a>> {
    let tape = x.tape();
    Ok(x.layer_norm().mul_row(&tape.param(p.gain))?.add_row(&tape.param(p.bias))?)
}

fn linear<'a>(x: &Var<'a>, w: ParamId, b: ParamId) -> Result<Var<'a>> {
    let tape = x.tape();
    Ok(x.matmul(&tape.param(w))?.add_row(&tape.param(b))?)
}

impl Encoder {
    /// Adds freshly initialized weights under `prefix` and returns handles.
    pub fn init<R: Rng + ?Sized>(
        config: EncoderConfig,
        params: &mut ParameterSet,
        prefix: &str,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let d = config.hidden;
        let name = |s: &str| format!("{prefix}{s}");
        let mut normal = |shape: &[usize]| normal_init(rng, shape, INIT_STD);
        let mut weights: Vec<(String, Tensor)> = vec![
            (name("tok_emb"), normal(&[config.vocab_size, d])),
            (name("pos_emb"), normal(&[config.max_positions, d])),
        ];
        for l in 0..config.n_layers {
            let n = |s: &str| name(&format!("layer{l}.{s}"));
            weights.extend([
                (n("ln1.gain"), Tensor::full(&[d], 1.0)),
                (n("ln1.bias"), Tensor::zeros(&[d])),
                (n("attn.qkv"), normal(&[d, 3 * d])),
                (n("attn.qkv_bias"), Tensor::zeros(&[3 * d])),
                (n("attn.out"), normal(&[d, d])),
                (n("attn.out_bias"), Tensor::zeros(&[d])),
                (n("ln2.gain"), Tensor::full(&[d], 1.0)),
                (n("ln2.bias"), Tensor::zeros(&[d])),
                (n("ffn.in"), normal(&[d, config.ffn_dim])),
                (n("ffn.in_bias"), Tensor::zeros(&[config.ffn_dim])),
                (n("ffn.out"), normal(&[config.ffn_dim, d])),
                (n("ffn.out_bias"), Tensor::zeros(&[d])),
            ]);
        }
        weights.extend([
            (name("final_ln.gain"), Tensor::full(&[d], 1.0)),
            (name("final_ln.bias"), Tensor::zeros(&[d])),
            (name("mlm.dense"), normal(&[d, d])),
            (name("mlm.dense_bias"), Tensor::zeros(&[d])),
            (name("mlm.ln.gain"), Tensor::full(&[d], 1.0)),
            (name("mlm.ln.bias"), Tensor::zeros(&[d])),
            (name("mlm.bias"), Tensor::zeros(&[config.vocab_size])),
        ]);
        for (n, t) in weights {
            params.insert(n, t)?;
        }
        Self::from_params(config, params, prefix)
    }

    /// Looks up existing weights under `prefix`, checking every shape.
    pub fn from_params(config: EncoderConfig, params: &ParameterSet, prefix: &str) -> Result<Self> {
        config.validate()?;
        let d = config.hidden;
        let get = |s: &str, shape: &[usize]| -> Result<ParamId> {
            let full = format!("{prefix}{s}");
            let id = params.id(&full)?;
            if params.value(id).shape() != shape {
                return Err(Error::Config(format!(
                    "parameter `{full}` has shape {:?}, expected {shape:?}",
                    params.value(id).shape()
                )));
            }
            Ok(id)
        };
        let ln = |s: &str| -> Result<LayerNormParams> {
            Ok(LayerNormParams {
                gain: get(&format!("{s}.gain"), &[d])?,
                bias: get(&format!("{s}.bias"), &[d])?,
            })
        };
        let mut blocks = Vec::with_capacity(config.n_layers);
        for l in 0..config.n_layers {
            let p = |s: &str| format!("layer{l}.{s}");
            blocks.push(Block {
                ln1: ln(&p("ln1"))?,
                qkv: get(&p("attn.qkv"), &[d, 3 * d])?,
                qkv_b: get(&p("attn.qkv_bias"), &[3 * d])?,
                out: get(&p("attn.out"), &[d, d])?,
                out_b: get(&p("attn.out_bias"), &[d])?,
                ln2: ln(&p("ln2"))?,
                ff1: get(&p("ffn.in"), &[d, config.ffn_dim])?,
                ff1_b: get(&p("ffn.in_bias"), &[config.ffn_dim])?,
                ff2: get(&p("ffn.out"), &[config.ffn_dim, d])?,
                ff2_b: get(&p("ffn.out_bias"), &[d])?,
            });
        }
        Ok(Encoder {
            tok_emb: get("tok_emb", &[config.vocab_size, d])?,
            pos_emb: get("pos_emb", &[config.max_positions, d])?,
            blocks,
            final_ln: ln("final_ln")?,
            mlm: MlmHead {
                dense: get("mlm.dense", &[d, d])?,
                dense_b: get("mlm.dense_bias", &[d])?,
                ln: ln("mlm.ln")?,
                bias: get("mlm.bias", &[config.vocab_size])?,
            },
            config,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn token_embedding(&self) -> ParamId {
        self.tok_emb
    }

    fn check(&self, batch: &TokenBatch) -> Result<()> {
        if batch.is_empty() {
            return Err(Error::Config("empty token batch".into()));
        }
        for (r, row) in batch.rows().iter().enumerate() {
            if row.first() != Some(&BOS) {
                return Err(Error::Config(format!("row {r} does not start with <s>")));
            }
            if row.len() > self.config.max_positions {
                return Err(Error::Config(format!(
                    "row {r} has {} tokens, more than the {} positions",
                    row.len(),
                    self.config.max_positions
                )));
            }
            if let Some(&bad) = row.iter().find(|&&id| id as usize >= self.config.vocab_size) {
                return Err(Error::Config(format!(
                    "row {r}: token id {bad} is outside the vocabulary of {}",
                    self.config.vocab_size
                )));
            }
        }
        Ok(())
    }

    /// Runs the encoder. `rng` drives dropout on training tapes.
    pub fn forward<'a>(
        &self,
        tape: &'a Tape<'a>,
        batch: &TokenBatch,
        rng: &mut dyn RngCore,
    ) -> Result<EncoderOutput<'a>> {
        self.check(batch)?;
        let cfg = &self.config;
        let p = cfg.dropout;
        let ids: Vec<usize> = batch.rows().iter().flatten().map(|&t| t as usize).collect();
        let positions: Vec<usize> = batch.rows().iter().flat_map(|r| 0..r.len()).collect();
        let offsets = batch.offsets();
        let spans: Vec<(usize, usize)> = offsets.iter().zip(batch.rows()).map(|(&o, r)| (o, o + r.len())).collect();

        let tok = tape.param(self.tok_emb).gather(&ids)?;
        let pos = tape.param(self.pos_emb).gather(&positions)?;
        let mut x = tok.add(&pos)?.dropout(p, rng);

        let d = cfg.hidden;
        let dh = cfg.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        for b in &self.blocks {
            let h = layer_norm(&x, b.ln1)?;
            let qkv = linear(&h, b.qkv, b.qkv_b)?;
            let mut per_row = Vec::with_capacity(spans.len());
            for &(start, end) in &spans {
                let rows = qkv.slice_rows(start, end)?;
                let mut heads = Vec::with_capacity(cfg.n_heads);
                for k in 0..cfg.n_heads {
                    let q = rows.slice_cols(k * dh, (k + 1) * dh)?;
                    let key = rows.slice_cols(d + k * dh, d + (k + 1) * dh)?;
                    let v = rows.slice_cols(2 * d + k * dh, 2 * d + (k + 1) * dh)?;
                    let attn = q.matmul(&key.transpose()?)?.scale(scale).softmax(None)?.dropout(p, rng);
                    heads.push(attn.matmul(&v)?);
                }
                per_row.push(Var::concat_cols(&heads)?);
            }
            let attended = Var::concat_rows(&per_row)?;
            x = x.add(&linear(&attended, b.out, b.out_b)?.dropout(p, rng))?;
            let h = layer_norm(&x, b.ln2)?;
            let ff = linear(&linear(&h, b.ff1, b.ff1_b)?.gelu(), b.ff2, b.ff2_b)?;
            x = x.add(&ff.dropout(p, rng))?;
        }
        let hidden = layer_norm(&x, self.final_ln)?;
        let pooled = hidden.gather(&offsets)?;
        Ok(EncoderOutput {
            hidden,
            pooled,
            offsets,
        })
    }

    /// Vocabulary logits for the given rows of final representations, with
    /// the output projection tied to the token embedding.
    pub fn mlm_logits<'a>(&self, hidden_rows: &Var<'a>) -> Result<Var<'a>> {
        let tape = hidden_rows.tape();
        let h = linear(hidden_rows, self.mlm.dense, self.mlm.dense_b)?.gelu();
        let h = layer_norm(&h, self.mlm.ln)?;
        let emb_t = tape.param(self.tok_emb).transpose()?;
        Ok(h.matmul(&emb_t)?.add_row(&tape.param(self.mlm.bias))?)
    }
}
