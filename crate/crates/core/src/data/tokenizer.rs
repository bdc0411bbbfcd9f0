//! Byte-level BPE with byte fallback and an extensible vocabulary.
//!
//! Id layout: `0..256` are raw bytes, then BOS, EOS and PAD, then one id per
//! learned merge in learning order, then tokens added by
//! [`Tokenizer::extend_vocabulary`]. Added tokens are matched longest-first
//! before BPE runs on the text between them.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const BYTE_TOKENS: usize = 256;
pub const BOS: u32 = 256;
pub const EOS: u32 = 257;
pub const PAD: u32 = 258;
/// Byte tokens plus the three specials.
pub const BASE_VOCAB: usize = 259;

const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpecialIds {
    pub bos: u32,
    pub eos: u32,
    pub pad: u32,
}

#[derive(Clone, Debug)]
pub struct Tokenizer {
    vocab: Vec<Vec<u8>>,
    lookup: HashMap<Vec<u8>, u32>,
    merges: Vec<(u32, u32)>,
    merge_rank: HashMap<(u32, u32), usize>,
    added: Vec<u32>,
    special: SpecialIds,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TokenizerFile {
    version: u32,
    vocab: Vec<Vec<u8>>,
    merges: Vec<(u32, u32)>,
    #[serde(default)]
    added: Vec<u32>,
    special: SpecialIds,
}

impl PartialEq for Tokenizer {
    fn eq(&self, other: &Self) -> bool {
        self.vocab == other.vocab
            && self.merges == other.merges
            && self.added == other.added
            && self.special == other.special
    }
}

impl Default for Tokenizer {
    fn default() -> Self {
        Self::byte_level()
    }
}

impl Tokenizer {
    /// Byte tokens and specials only; no merges.
    pub fn byte_level() -> Self {
        let mut vocab: Vec<Vec<u8>> = (0..=255u8).map(|b| vec![b]).collect();
        vocab.push(b"<bos>".to_vec());
        vocab.push(b"<eos>".to_vec());
        vocab.push(b"<pad>".to_vec());
        let lookup = (0..BYTE_TOKENS).map(|b| (vec![b as u8], b as u32)).collect();
        Self {
            vocab,
            lookup,
            merges: Vec::new(),
            merge_rank: HashMap::new(),
            added: Vec::new(),
            special: SpecialIds { bos: BOS, eos: EOS, pad: PAD },
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn special(&self) -> SpecialIds {
        self.special
    }

    pub fn eos(&self) -> u32 {
        self.special.eos
    }

    pub fn pad(&self) -> u32 {
        self.special.pad
    }

    pub fn merges(&self) -> &[(u32, u32)] {
        &self.merges
    }

    pub fn token_bytes(&self, id: u32) -> Option<&[u8]> {
        self.vocab.get(id as usize).map(Vec::as_slice)
    }

    pub fn token_id(&self, token: &str) -> Option<u32> {
        self.lookup.get(token.as_bytes()).copied()
    }

    fn is_special(&self, id: u32) -> bool {
        id == self.special.bos || id == self.special.eos || id == self.special.pad
    }

    /// Greedy byte-pair training over `texts`, each text a separate sequence.
    ///
    /// The most frequent adjacent pair is merged until the vocabulary reaches
    /// `target_vocab` or no pair occurs twice. Ties go to the pair that occurs
    /// earliest in the corpus. Pairs whose merged bytes already name a token
    /// are skipped so token strings stay unique.
    pub fn train_bpe<S: AsRef<str>>(texts: &[S], target_vocab: usize) -> Result<Self> {
        if target_vocab < BASE_VOCAB {
            return Err(Error::Config(format!(
                "target vocabulary {target_vocab} is below the {BASE_VOCAB} base tokens"
            )));
        }
        let mut seqs: Vec<Vec<u32>> = texts
            .iter()
            .map(|t| t.as_ref().bytes().map(u32::from).collect::<Vec<_>>())
            .filter(|s| !s.is_empty())
            .collect();
        if seqs.is_empty() {
            return Err(Error::DegenerateInput("BPE corpus is empty".into()));
        }
        let mut tok = Self::byte_level();
        while tok.vocab.len() < target_vocab {
            // pair -> (count, first occurrence)
            let mut stats: HashMap<(u32, u32), (usize, usize)> = HashMap::new();
            let mut pos = 0usize;
            for seq in &seqs {
                for w in seq.windows(2) {
                    let e = stats.entry((w[0], w[1])).or_insert((0, pos));
                    e.0 += 1;
                    pos += 1;
                }
                pos += 1;
            }
            let best = stats
                .into_iter()
                .filter(|&((a, b), (count, _))| {
                    count >= 2
                        && !tok
                            .lookup
                            .contains_key(&[tok.vocab[a as usize].as_slice(), &tok.vocab[b as usize]].concat())
                })
                .min_by(|(pa, (ca, fa)), (pb, (cb, fb))| {
                    cb.cmp(ca).then(fa.cmp(fb)).then_with(|| {
                        let key = |p: &(u32, u32)| (tok.vocab[p.0 as usize].clone(), tok.vocab[p.1 as usize].clone());
                        key(pa).cmp(&key(pb))
                    })
                });
            let Some(((a, b), _)) = best else { break };
            let id = tok.push_merge(a, b);
            for seq in &mut seqs {
                apply_merge(seq, a, b, id);
            }
        }
        Ok(tok)
    }

    fn push_merge(&mut self, a: u32, b: u32) -> u32 {
        let id = self.vocab.len() as u32;
        let bytes = [self.vocab[a as usize].as_slice(), &self.vocab[b as usize]].concat();
        self.lookup.insert(bytes.clone(), id);
        self.vocab.push(bytes);
        self.merge_rank.insert((a, b), self.merges.len());
        self.merges.push((a, b));
        id
    }

    /// Appends `tokens` to the vocabulary and returns how many were added.
    /// Existing ids never change.
    pub fn extend_vocabulary<S: AsRef<str>>(&mut self, tokens: &[S]) -> Result<usize> {
        let specials: Vec<&[u8]> = [self.special.bos, self.special.eos, self.special.pad]
            .iter()
            .map(|&i| self.vocab[i as usize].as_slice())
            .collect();
        let mut dupes = Vec::new();
        let mut seen = std::collections::HashSet::new();
        for t in tokens {
            let b = t.as_ref().as_bytes();
            if b.is_empty() || self.lookup.contains_key(b) || specials.contains(&b) || !seen.insert(b) {
                dupes.push(t.as_ref().to_string());
            }
        }
        if !dupes.is_empty() {
            return Err(Error::Conflict(format!("tokens already in vocabulary: {dupes:?}")));
        }
        for t in tokens {
            let id = self.vocab.len() as u32;
            let b = t.as_ref().as_bytes().to_vec();
            self.lookup.insert(b.clone(), id);
            self.vocab.push(b);
            self.added.push(id);
        }
        Ok(tokens.len())
    }

    /// Encodes `text`; every string encodes thanks to the byte fallback.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        let bytes = text.as_bytes();
        let mut out = Vec::new();
        let mut segment_start = 0;
        let mut i = 0;
        while i < bytes.len() {
            match self.longest_added_at(&bytes[i..]) {
                Some((id, len)) => {
                    self.encode_bpe(&bytes[segment_start..i], &mut out);
                    out.push(id);
                    i += len;
                    segment_start = i;
                }
                None => i += 1,
            }
        }
        self.encode_bpe(&bytes[segment_start..], &mut out);
        out
    }

    fn longest_added_at(&self, rest: &[u8]) -> Option<(u32, usize)> {
        self.added
            .iter()
            .filter_map(|&id| {
                let tb = &self.vocab[id as usize];
                rest.starts_with(tb).then_some((id, tb.len()))
            })
            .max_by_key(|&(id, len)| (len, std::cmp::Reverse(id)))
    }

    fn encode_bpe(&self, bytes: &[u8], out: &mut Vec<u32>) {
        let mut seq: Vec<u32> = bytes.iter().map(|&b| u32::from(b)).collect();
        while seq.len() > 1 {
            let best =
                seq.windows(2).filter_map(|w| self.merge_rank.get(&(w[0], w[1])).map(|&r| (r, w[0], w[1]))).min();
            let Some((rank, a, b)) = best else { break };
            apply_merge(&mut seq, a, b, (BASE_VOCAB + rank) as u32);
        }
        out.extend(seq);
    }

    /// Raw bytes of `ids`, skipping BOS/EOS/PAD.
    pub fn decode_bytes(&self, ids: &[u32]) -> Vec<u8> {
        let mut out = Vec::new();
        for &id in ids {
            if self.is_special(id) {
                continue;
            }
            if let Some(b) = self.vocab.get(id as usize) {
                out.extend_from_slice(b);
            }
        }
        out
    }

    pub fn decode(&self, ids: &[u32]) -> String {
        String::from_utf8_lossy(&self.decode_bytes(ids)).into_owned()
    }

    pub fn to_json(&self) -> String {
        let file = TokenizerFile {
            version: FORMAT_VERSION,
            vocab: self.vocab.clone(),
            merges: self.merges.clone(),
            added: self.added.clone(),
            special: self.special,
        };
        serde_json::to_string(&file).expect("tokenizer serializes")
    }

    /// Parses and validates a persisted tokenizer.
    pub fn from_json(text: &str) -> Result<Self> {
        let bad = |msg: String| Error::format("tokenizer", msg);
        let file: TokenizerFile = serde_json::from_str(text).map_err(|e| bad(e.to_string()))?;
        if file.version != FORMAT_VERSION {
            return Err(Error::Version(format!("tokenizer format {} (expected {FORMAT_VERSION})", file.version)));
        }
        let mut tok = Self::byte_level();
        if file.special != tok.special {
            return Err(bad(format!("unexpected special ids {:?}", file.special)));
        }
        if file.vocab.len() != BASE_VOCAB + file.merges.len() + file.added.len() {
            return Err(bad("vocab length disagrees with merges and added tokens".into()));
        }
        if file.vocab[..BASE_VOCAB] != tok.vocab[..] {
            return Err(bad("base byte/special tokens are not in canonical order".into()));
        }
        for (i, &(a, b)) in file.merges.iter().enumerate() {
            let id = BASE_VOCAB + i;
            if a as usize >= id || b as usize >= id {
                return Err(bad(format!("merge {i} refers to a later token")));
            }
            if tok.is_special(a) || tok.is_special(b) {
                return Err(bad(format!("merge {i} uses a special token")));
            }
            if tok.merge_rank.contains_key(&(a, b)) {
                return Err(bad(format!("merge {i} is repeated")));
            }
            let merged = tok.push_merge(a, b);
            if tok.vocab[merged as usize] != file.vocab[id] {
                return Err(bad(format!("vocab entry {id} does not match merge {i}")));
            }
        }
        let first_added = BASE_VOCAB + file.merges.len();
        let expected_added: Vec<u32> = (first_added..file.vocab.len()).map(|i| i as u32).collect();
        if file.added != expected_added {
            return Err(bad("added token ids must follow the merges densely".into()));
        }
        let extra: Vec<String> = file.vocab[first_added..]
            .iter()
            .map(|b| String::from_utf8(b.clone()))
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| bad("added tokens must be UTF-8".into()))?;
        tok.extend_vocabulary(&extra).map_err(|e| bad(e.to_string()))?;
        Ok(tok)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = crate::error::read_text(path)?;
        Self::from_json(&text)
    }
}

/// Replaces non-overlapping `(a, b)` occurrences, scanning left to right.
fn apply_merge(seq: &mut Vec<u32>, a: u32, b: u32, id: u32) {
    let mut w = 0;
    let mut r = 0;
    while r < seq.len() {
        if r + 1 < seq.len() && seq[r] == a && seq[r + 1] == b {
            seq[w] = id;
            r += 2;
        } else {
            seq[w] = seq[r];
            r += 1;
        }
        w += 1;
    }
    seq.truncate(w);
}
