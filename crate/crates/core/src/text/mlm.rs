//! Masked-language-model corruption and loss.

use kepler_autograd::{Tape, Var};
use rand::seq::index::sample;
use rand::{Rng, RngCore};

use crate::error::{Error, Result};
use crate::text::encoder::{Encoder, TokenBatch};
use crate::text::tokenizer::{is_special, MASK, NUM_SPECIALS};

pub const MLM_RATE: f64 = 0.15;
pub const MLM_PROPORTIONS: (f64, f64, f64) = (0.8, 0.1, 0.1);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Corruption {
    Mask,
    Random,
    Keep,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlmBatch {
    pub input_ids: Vec<Vec<u32>>,
    pub target_positions: Vec<Vec<usize>>,
    /// Original ids at the target positions.
    pub target_labels: Vec<Vec<u32>>,
    pub corruptions: Vec<Vec<Corruption>>,
}

impl MlmBatch {
    pub fn num_targets(&self) -> usize {
        self.target_positions.iter().map(Vec::len).sum()
    }
}

/// Number of targets for a row with `eligible` maskable tokens.
pub fn target_count(eligible: usize, rate: f64) -> usize {
    if eligible == 0 {
        return 0;
    }
    ((rate * eligible as f64).round() as usize).clamp(1, eligible)
}

/// Selects `round(rate * eligible)` (at least one) non-special positions per
/// row and corrupts each to `<mask>`, a uniform non-special token, or itself.
/// A row without eligible tokens gets no targets.
pub fn apply_mlm_masking<R: Rng + ?Sized>(
    ids: &[Vec<u32>],
    vocab_size: usize,
    rng: &mut R,
    rate: f64,
    proportions: (f64, f64, f64),
) -> Result<MlmBatch> {
    let (p_mask, p_random, p_keep) = proportions;
    if !(0.0..=1.0).contains(&rate) || (p_mask + p_random + p_keep - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "masking rate {rate} or proportions {proportions:?} are not valid probabilities"
        )));
    }
    if vocab_size <= NUM_SPECIALS as usize {
        return Err(Error::Config(format!("vocab size {vocab_size} has no regular tokens")));
    }
    let mut batch = MlmBatch {
        input_ids: Vec::with_capacity(ids.len()),
        target_positions: Vec::with_capacity(ids.len()),
        target_labels: Vec::with_capacity(ids.len()),
        corruptions: Vec::with_capacity(ids.len()),
    };
    for row in ids {
        let eligible: Vec<usize> = (0..row.len()).filter(|&i| !is_special(row[i])).collect();
        let count = target_count(eligible.len(), rate);
        let mut picked: Vec<usize> = sample(rng, eligible.len(), count).into_iter().map(|k| eligible[k]).collect();
        picked.sort_unstable();

        let mut input = row.clone();
        let mut labels = Vec::with_capacity(count);
        let mut kinds = Vec::with_capacity(count);
        for &pos in &picked {
            labels.push(row[pos]);
            let u: f64 = rng.random();
            let kind = if u < p_mask {
                input[pos] = MASK;
                Corruption::Mask
            } else if u < p_mask + p_random {
                input[pos] = rng.random_range(NUM_SPECIALS..vocab_size as u32);
                Corruption::Random
            } else {
                Corruption::Keep
            };
            kinds.push(kind);
        }
        batch.input_ids.push(input);
        batch.target_positions.push(picked);
        batch.target_labels.push(labels);
        batch.corruptions.push(kinds);
    }
    Ok(batch)
}

/// Mean cross-entropy of the vocabulary prediction at every target position.
pub fn mlm_loss<'a>(
    encoder: &Encoder,
    tape: &'a Tape<'a>,
    batch: &MlmBatch,
    rng: &mut dyn RngCore,
) -> Result<Var<'a>> {
    if batch.num_targets() == 0 {
        return Err(Error::Config("masked batch has no target positions".into()));
    }
    let tokens = TokenBatch::new(batch.input_ids.clone());
    let out = encoder.forward(tape, &tokens, rng)?;
    let mut rows = Vec::with_capacity(batch.num_targets());
    let mut labels = Vec::with_capacity(batch.num_targets());
    for ((&offset, positions), targets) in out.offsets.iter().zip(&batch.target_positions).zip(&batch.target_labels) {
        rows.extend(positions.iter().map(|p| offset + p));
        labels.extend(targets.iter().map(|&t| t as usize));
    }
    let logits = encoder.mlm_logits(&out.hidden.gather(&rows)?)?;
    Ok(logits.cross_entropy(&labels)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::encoder::EncoderConfig;
    use crate::text::tokenizer::{BOS, EOS, PAD};
    use kepler_autograd::ParameterSet;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn mask(rows: &[Vec<u32>], seed: u64) -> MlmBatch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        apply_mlm_masking(rows, 50, &mut rng, MLM_RATE, MLM_PROPORTIONS).unwrap()
    }

    #[test]
    fn hundred_eligible_gives_fifteen() {
        let mut row = vec![BOS];
        row.extend((0..100).map(|i| 5 + i % 40));
        row.push(EOS);
        assert_eq!(mask(&[row], 1).target_positions[0].len(), 15);
    }

    #[test]
    fn short_row_gets_one_target() {
        assert_eq!(target_count(3, MLM_RATE), 1);
        let b = mask(&[vec![BOS, 10, 11, 12]], 2);
        assert_eq!(b.target_positions[0].len(), 1);
    }

    #[test]
    fn specials_never_selected_and_labels_are_originals() {
        let rows: Vec<Vec<u32>> = (0..50)
            .map(|i| vec![BOS, 5 + i % 30, PAD, 9, EOS, 20, MASK, 7 + i % 11])
            .collect();
        let b = mask(&rows, 3);
        for ((row, pos), labels) in rows.iter().zip(&b.target_positions).zip(&b.target_labels) {
            for (&p, &l) in pos.iter().zip(labels) {
                assert!(!is_special(row[p]));
                assert_eq!(row[p], l);
            }
        }
    }

    #[test]
    fn loss_on_fresh_encoder_is_near_uniform_entropy() {
        let mut params = ParameterSet::new();
        let cfg = EncoderConfig {
            hidden: 8,
            n_heads: 2,
            ffn_dim: 16,
            max_positions: 16,
            vocab_size: 50,
            ..EncoderConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let enc = Encoder::init(cfg, &mut params, "", &mut rng).unwrap();
        let rows: Vec<Vec<u32>> = (0..8).map(|i| (0..12).map(|j| if j == 0 { BOS } else { 5 + (i * 7 + j) % 45 }).collect()).collect();
        let b = mask(&rows, 5);
        let tape = Tape::new(&params);
        let loss = mlm_loss(&enc, &tape, &b, &mut rng).unwrap().item().unwrap();
        assert!((loss - 50f64.ln()).abs() < 0.1, "{loss}");
    }

    #[test]
    fn empty_target_set_is_an_error() {
        let mut params = ParameterSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let enc = Encoder::init(EncoderConfig::default(), &mut params, "", &mut rng).unwrap();
        let b = mask(&[vec![BOS, EOS]], 6);
        let tape = Tape::new(&params);
        assert!(mlm_loss(&enc, &tape, &b, &mut rng).is_err());
    }
}
