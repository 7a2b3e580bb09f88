//! Byte-level byte-pair-encoding tokenizer.
//!
//! Ids `0..5` are the special tokens, `5..261` the 256 single bytes, and
//! merged tokens follow in merge order. Text is cut into chunks before each
//! whitespace byte, so a word carries its leading space; merges never cross
//! chunk boundaries.

use std::collections::HashMap;
use std::io::{BufRead, Write};

use crate::error::{Error, Result};

pub const BOS: u32 = 0;
pub const PAD: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;
pub const MASK: u32 = 4;
pub const NUM_SPECIALS: u32 = 5;
pub const SPECIAL_TOKENS: [&str; 5] = ["<s>", "<pad>", "</s>", "<unk>", "<mask>"];

const BYTE_OFFSET: u32 = NUM_SPECIALS;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Tokenizer {
    /// Byte content of every non-special token, indexed by id (specials hold their literal text).
    tokens: Vec<Vec<u8>>,
    lookup: HashMap<Vec<u8>, u32>,
    /// `(left, right, result)` in rank order.
    merges: Vec<(u32, u32, u32)>,
    ranks: HashMap<(u32, u32), (usize, u32)>,
}

pub fn is_special(id: u32) -> bool {
    id < NUM_SPECIALS
}

fn is_ws(b: u8) -> bool {
    b.is_ascii_whitespace()
}

/// Chunks start at every whitespace byte.
fn chunks(bytes: &[u8]) -> impl Iterator<Item = &[u8]> {
    let mut start = 0;
    std::iter::from_fn(move || {
        if start >= bytes.len() {
            return None;
        }
        let mut i = start + 1;
        while i < bytes.len() && !is_ws(bytes[i]) {
            i += 1;
        }
        let chunk = &bytes[start..i];
        start = i;
        Some(chunk)
    })
}

/// Trains merges until the vocabulary reaches `vocab_size` or no adjacent
/// pair remains. Each round merges the most frequent pair; ties go to the
/// lexicographically smallest `(left bytes, right bytes)`.
pub fn train_tokenizer<'s, I>(corpus: I, vocab_size: usize) -> Result<Tokenizer>
where
    I: IntoIterator<Item = &'s str>,
{
    let base = (NUM_SPECIALS + 256) as usize;
    if vocab_size <= base {
        return Err(Error::Tokenizer(format!(
            "vocab size must exceed {base} (specials + bytes), got {vocab_size}"
        )));
    }
    let mut counts: HashMap<&[u8], u64> = HashMap::new();
    let mut total_bytes = 0;
    for text in corpus {
        total_bytes += text.len();
        for c in chunks(text.as_bytes()) {
            *counts.entry(c).or_default() += 1;
        }
    }
    if total_bytes == 0 {
        return Err(Error::Tokenizer("empty training corpus".into()));
    }
    let mut words: Vec<(&[u8], u64)> = counts.into_iter().collect();
    words.sort_unstable();
    let mut words: Vec<(Vec<u32>, u64)> = words
        .into_iter()
        .map(|(w, c)| (w.iter().map(|&b| b as u32 + BYTE_OFFSET).collect(), c))
        .collect();

    let mut tok = Tokenizer::base();
    while tok.tokens.len() < vocab_size {
        let mut pair_counts: HashMap<(u32, u32), u64> = HashMap::new();
        for (w, c) in &words {
            for p in w.windows(2) {
                *pair_counts.entry((p[0], p[1])).or_default() += c;
            }
        }
        let best = pair_counts.into_iter().max_by(|(pa, ca), (pb, cb)| {
            ca.cmp(cb).then_with(|| {
                let ka = (&tok.tokens[pa.0 as usize], &tok.tokens[pa.1 as usize]);
                let kb = (&tok.tokens[pb.0 as usize], &tok.tokens[pb.1 as usize]);
                kb.cmp(&ka)
            })
        });
        let Some(((left, right), _)) = best else {
            break;
        };
        let result = tok.add_merge(left, right);
        for (w, _) in &mut words {
            merge_in_place(w, left, right, result);
        }
    }
    Ok(tok)
}

fn merge_in_place(word: &mut Vec<u32>, left: u32, right: u32, result: u32) {
    if word.len() < 2 {
        return;
    }
    let mut out = Vec::with_capacity(word.len());
    let mut i = 0;
    while i < word.len() {
        if i + 1 < word.len() && word[i] == left && word[i + 1] == right {
            out.push(result);
            i += 2;
        } else {
            out.push(word[i]);
            i += 1;
        }
    }
    *word = out;
}

/// GPT-2 style printable stand-ins for raw bytes, used by the vocab and merges files.
fn byte_to_char_table() -> [char; 256] {
    let mut table = ['\0'; 256];
    let mut extra = 0u32;
    for b in 0..=255u8 {
        let printable = matches!(b, b'!'..=b'~' | 0xA1..=0xAC | 0xAE..=0xFF);
        table[b as usize] = if printable {
            char::from(b)
        } else {
            let c = char::from_u32(256 + extra).expect("valid code point");
            extra += 1;
            c
        };
    }
    table
}

fn display(bytes: &[u8], table: &[char; 256]) -> String {
    bytes.iter().map(|&b| table[b as usize]).collect()
}

fn undisplay(s: &str, inverse: &HashMap<char, u8>) -> Option<Vec<u8>> {
    s.chars().map(|c| inverse.get(&c).copied()).collect()
}

impl Tokenizer {
    /// Specials plus the 256 byte tokens, no merges.
    pub fn base() -> Self {
        let mut tokens: Vec<Vec<u8>> = SPECIAL_TOKENS.iter().map(|s| s.as_bytes().to_vec()).collect();
        let mut lookup = HashMap::new();
        for b in 0..=255u8 {
            lookup.insert(vec![b], tokens.len() as u32);
            tokens.push(vec![b]);
        }
        Tokenizer {
            tokens,
            lookup,
            merges: Vec::new(),
            ranks: HashMap::new(),
        }
    }

    /// Records a merge; a result whose bytes already exist reuses that id.
    fn add_merge(&mut self, left: u32, right: u32) -> u32 {
        let mut bytes = self.tokens[left as usize].clone();
        bytes.extend_from_slice(&self.tokens[right as usize]);
        let result = match self.lookup.get(&bytes) {
            Some(&id) => id,
            None => {
                let id = self.tokens.len() as u32;
                self.lookup.insert(bytes.clone(), id);
                self.tokens.push(bytes);
                id
            }
        };
        self.ranks.insert((left, right), (self.merges.len(), result));
        self.merges.push((left, right, result));
        result
    }

    pub fn vocab_size(&self) -> usize {
        self.tokens.len()
    }

    /// Merge rules in order, as `(left, right)` id pairs.
    pub fn merges(&self) -> impl Iterator<Item = (u32, u32)> + '_ {
        self.merges.iter().map(|&(l, r, _)| (l, r))
    }

    pub fn token_bytes(&self, id: u32) -> Option<&[u8]> {
        self.tokens.get(id as usize).map(Vec::as_slice)
    }

    /// Token ids for `text`, without special tokens.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        let mut out = Vec::new();
        for chunk in chunks(text.as_bytes()) {
            let mut word: Vec<u32> = chunk.iter().map(|&b| b as u32 + BYTE_OFFSET).collect();
            loop {
                let best = word
                    .windows(2)
                    .filter_map(|p| self.ranks.get(&(p[0], p[1])).map(|&(rank, res)| (rank, p[0], p[1], res)))
                    .min();
                let Some((_, l, r, res)) = best else { break };
                merge_in_place(&mut word, l, r, res);
            }
            out.extend(word);
        }
        out
    }

    /// Bytes of all non-special tokens, concatenated.
    pub fn decode_bytes(&self, ids: &[u32]) -> Vec<u8> {
        ids.iter()
            .filter(|&&id| !is_special(id))
            .filter_map(|&id| self.tokens.get(id as usize))
            .flatten()
            .copied()
            .collect()
    }

    pub fn decode(&self, ids: &[u32]) -> String {
        String::from_utf8_lossy(&self.decode_bytes(ids)).into_owned()
    }

    /// `<s>` followed by the encoding of `text`, truncated to `max_len` ids.
    pub fn tokenize(&self, text: &str, max_len: usize) -> Vec<u32> {
        assert!(max_len >= 2, "max_len must be at least 2");
        let mut ids = Vec::with_capacity(max_len);
        ids.push(BOS);
        ids.extend(self.encode(text).into_iter().take(max_len - 1));
        ids
    }

    /// `token\tid` lines in id order.
    pub fn write_vocab<W: Write>(&self, mut w: W) -> Result<()> {
        let table = byte_to_char_table();
        for (id, bytes) in self.tokens.iter().enumerate() {
            let shown = if is_special(id as u32) {
                SPECIAL_TOKENS[id].to_string()
            } else {
                display(bytes, &table)
            };
            writeln!(w, "{shown}\t{id}")?;
        }
        Ok(())
    }

    /// `left right` lines in merge order.
    pub fn write_merges<W: Write>(&self, mut w: W) -> Result<()> {
        let table = byte_to_char_table();
        for &(l, r, _) in &self.merges {
            writeln!(
                w,
                "{} {}",
                display(&self.tokens[l as usize], &table),
                display(&self.tokens[r as usize], &table)
            )?;
        }
        Ok(())
    }

    /// Rebuilds a tokenizer from its vocab and merges files, checking that
    /// the two agree.
    pub fn load<V: BufRead, M: BufRead>(vocab: V, merges: M) -> Result<Self> {
        let table = byte_to_char_table();
        let inverse: HashMap<char, u8> = table.iter().enumerate().map(|(b, &c)| (c, b as u8)).collect();
        let bad = |line: usize, msg: &str| Error::Parse {
            line,
            msg: msg.to_string(),
        };

        let mut vocab_entries: Vec<(u32, String)> = Vec::new();
        for (n, line) in vocab.lines().enumerate() {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let (tok, id) = line.rsplit_once('\t').ok_or_else(|| bad(n + 1, "expected token<TAB>id"))?;
            let id: u32 = id.parse().map_err(|_| bad(n + 1, "id is not an integer"))?;
            vocab_entries.push((id, tok.to_string()));
        }
        vocab_entries.sort_by_key(|e| e.0);

        let mut tok = Tokenizer::base();
        for (n, line) in merges.lines().enumerate() {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let (l, r) = line.split_once(' ').ok_or_else(|| bad(n + 1, "expected `left right`"))?;
            let id_of = |s: &str| {
                undisplay(s, &inverse)
                    .and_then(|b| tok.lookup.get(&b).copied())
                    .ok_or_else(|| bad(n + 1, "merge refers to an unknown token"))
            };
            let (l, r) = (id_of(l)?, id_of(r)?);
            tok.add_merge(l, r);
        }

        if vocab_entries.len() != tok.tokens.len() {
            return Err(Error::Tokenizer(format!(
                "vocab lists {} tokens but specials, bytes and merges give {}",
                vocab_entries.len(),
                tok.tokens.len()
            )));
        }
        for (i, (id, shown)) in vocab_entries.iter().enumerate() {
            let expected = if is_special(i as u32) {
                SPECIAL_TOKENS[i].to_string()
            } else {
                display(&tok.tokens[i], &table)
            };
            if *id as usize != i || *shown != expected {
                return Err(Error::Tokenizer(format!(
                    "vocab entry {i} is `{shown}`/{id}, expected `{expected}`/{i}"
                )));
            }
        }
        Ok(tok)
    }
}
