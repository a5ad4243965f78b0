//! Symbol <-> id tables with a frequency cutoff and four fixed specials.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const BOS: TokenId = 1;
pub const EOS: TokenId = 2;
pub const UNK: TokenId = 3;
pub const NUM_SPECIALS: usize = 4;

pub const SPECIAL_SYMBOLS: [&str; NUM_SPECIALS] = ["<pad>", "<s>", "</s>", "<unk>"];

#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    symbols: Vec<String>,
    freqs: Vec<u64>,
    index: HashMap<String, TokenId>,
}

impl Vocabulary {
    fn from_entries(entries: Vec<(String, u64)>) -> Result<Self> {
        let mut symbols: Vec<String> = SPECIAL_SYMBOLS.iter().map(|s| s.to_string()).collect();
        let mut freqs = vec![0; NUM_SPECIALS];
        let mut index: HashMap<String, TokenId> = symbols
            .iter()
            .enumerate()
            .map(|(i, s)| (s.clone(), i as TokenId))
            .collect();
        for (sym, f) in entries {
            if index.contains_key(&sym) {
                return Err(Error::Format(format!("duplicate vocabulary symbol {sym:?}")));
            }
            index.insert(sym.clone(), symbols.len() as TokenId);
            symbols.push(sym);
            freqs.push(f);
        }
        Ok(Vocabulary { symbols, freqs, index })
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.len() == NUM_SPECIALS
    }

    pub fn id(&self, symbol: &str) -> TokenId {
        self.index.get(symbol).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, symbol: &str) -> bool {
        self.index.contains_key(symbol)
    }

    pub fn symbol(&self, id: TokenId) -> Option<&str> {
        self.symbols.get(id as usize).map(String::as_str)
    }

    pub fn symbols(&self) -> &[String] {
        &self.symbols
    }

    pub fn encode(&self, subwords: &[String]) -> Vec<TokenId> {
        subwords.iter().map(|s| self.id(s)).collect()
    }

    /// Inverse of [`encode`](Self::encode); PAD ids are dropped.
    pub fn decode(&self, ids: &[TokenId]) -> Result<Vec<String>> {
        ids.iter()
            .filter(|&&id| id != PAD)
            .map(|&id| {
                self.symbol(id)
                    .map(str::to_owned)
                    .ok_or_else(|| Error::Range(format!("token id {id} outside vocabulary of {}", self.len())))
            })
            .collect()
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("vocab 1; size={}; specials={}\n", self.len(), SPECIAL_SYMBOLS.join(","));
        for (sym, f) in self.symbols.iter().zip(&self.freqs) {
            s.push_str(sym);
            s.push('\t');
            s.push_str(&f.to_string());
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::Format("empty vocabulary file".into()))?;
        let size: usize = header
            .strip_prefix("vocab 1; size=")
            .and_then(|rest| rest.split(';').next())
            .and_then(|n| n.parse().ok())
            .ok_or_else(|| Error::Format(format!("bad vocabulary header {header:?}")))?;
        let mut entries = Vec::new();
        for (i, line) in lines.enumerate() {
            let (sym, f) = line
                .split_once('\t')
                .ok_or_else(|| Error::Format(format!("bad vocabulary line {line:?}")))?;
            let f: u64 = f.parse().map_err(|_| Error::Format(format!("bad frequency in {line:?}")))?;
            if i < NUM_SPECIALS {
                if sym != SPECIAL_SYMBOLS[i] {
                    return Err(Error::Format(format!("expected special {} at id {i}", SPECIAL_SYMBOLS[i])));
                }
                continue;
            }
            entries.push((sym.to_owned(), f));
        }
        let v = Self::from_entries(entries)?;
        if v.len() != size {
            return Err(Error::Format(format!("header says {size} entries, found {}", v.len())));
        }
        Ok(v)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    pub fn content_hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_text().as_bytes()))
    }
}

/// Keeps the `max_size` most frequent symbols; equal counts are ordered
/// lexicographically.
pub fn build_vocab<'a, I>(side: I, max_size: usize) -> Result<Vocabulary>
where
    I: IntoIterator<Item = &'a [String]>,
{
    if max_size == 0 {
        return Err(Error::Invalid("vocabulary max_size must be at least 1".into()));
    }
    let mut counts: HashMap<&str, u64> = HashMap::new();
    for seq in side {
        for s in seq {
            *counts.entry(s.as_str()).or_insert(0) += 1;
        }
    }
    let mut ranked: Vec<(&str, u64)> = counts
        .into_iter()
        .filter(|(s, _)| !SPECIAL_SYMBOLS.contains(s))
        .collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    ranked.truncate(max_size);
    Vocabulary::from_entries(ranked.into_iter().map(|(s, f)| (s.to_owned(), f)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seqs(lines: &[&str]) -> Vec<Vec<String>> {
        lines.iter().map(|l| l.split_whitespace().map(String::from).collect()).collect()
    }

    fn build(lines: &[&str], max: usize) -> Vocabulary {
        let s = seqs(lines);
        build_vocab(s.iter().map(|v| v.as_slice()), max).unwrap()
    }

    #[test]
    fn under_capacity_keeps_everything() {
        let v = build(&["a b c a"], 32_000);
        assert_eq!(v.len(), 7);
    }

    #[test]
    fn frequency_cutoff_with_lexicographic_ties() {
        let v = build(&["b a c a b a b a b a b"], 2);
        assert_eq!(v.len(), 6);
        assert_eq!(v.symbol(4), Some("a"));
        assert_eq!(v.symbol(5), Some("b"));
        assert!(!v.contains("c"));
    }

    #[test]
    fn empty_input_gives_specials_only() {
        let v = build(&[], 10);
        assert_eq!(v.len(), NUM_SPECIALS);
        assert!(v.is_empty());
    }

    #[test]
    fn encode_decode() {
        let v = build(&["x y z"], 10);
        let s = seqs(&["z x y"]).remove(0);
        assert_eq!(v.decode(&v.encode(&s)).unwrap(), s);
        assert_eq!(v.encode(&["nope".to_owned()]), vec![UNK]);
        assert_eq!(v.decode(&[BOS, EOS]).unwrap(), vec!["<s>".to_owned(), "</s>".to_owned()]);
        assert_eq!(v.decode(&[PAD, 4]).unwrap().len(), 1);
        assert!(v.decode(&[99]).is_err());
    }

    #[test]
    fn file_round_trip() {
        let v = build(&["de la de le"], 10);
        let text = v.to_text();
        assert!(text.starts_with("vocab 1; size=7; specials=<pad>,<s>,</s>,<unk>\n"));
        assert_eq!(Vocabulary::from_text(&text).unwrap(), v);
        assert_eq!(v.content_hash(), Vocabulary::from_text(&text).unwrap().content_hash());
    }

    #[test]
    fn bpe_closed_vocabulary_has_no_unk() {
        let c = crate::corpus::synth_two_domain(2, 500, 200).unwrap().generic_train;
        let codes = crate::subword::learn_bpe(&c, 60).unwrap();
        let src: Vec<Vec<String>> = c.sources().map(|s| codes.apply(s)).collect();
        let v = build_vocab(src.iter().map(|v| v.as_slice()), 32_000).unwrap();
        assert!(src.iter().all(|s| !v.encode(s).contains(&UNK)));
    }
}
