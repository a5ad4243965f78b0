//! Byte-pair-encoding subword segmentation.
//!
//! Words are split into characters with an end-of-word marker glued to the
//! last character (`"ab"` -> `a b</w>`), then the learned merges are replayed
//! in order.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::cmp::Reverse;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const DEFAULT_EOW: &str = "</w>";

pub type SymbolPair = (String, String);

#[derive(Debug, Clone)]
pub struct BpeCodes {
    merges: Vec<SymbolPair>,
    eow: String,
    ranks: HashMap<SymbolPair, usize>,
}

impl PartialEq for BpeCodes {
    fn eq(&self, other: &Self) -> bool {
        self.merges == other.merges && self.eow == other.eow
    }
}

impl BpeCodes {
    pub fn new(merges: Vec<SymbolPair>, eow: impl Into<String>) -> Result<Self> {
        let eow = eow.into();
        if eow.is_empty() || eow.chars().any(char::is_whitespace) {
            return Err(Error::Invalid(format!("bad end-of-word marker {eow:?}")));
        }
        let mut ranks = HashMap::with_capacity(merges.len());
        for (i, m) in merges.iter().enumerate() {
            if ranks.insert(m.clone(), i).is_some() {
                return Err(Error::Format(format!("duplicate merge {} {}", m.0, m.1)));
            }
        }
        Ok(BpeCodes { merges, eow, ranks })
    }

    pub fn merges(&self) -> &[SymbolPair] {
        &self.merges
    }

    pub fn num_merges(&self) -> usize {
        self.merges.len()
    }

    pub fn eow(&self) -> &str {
        &self.eow
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("version 1; merges={}; eow={}\n", self.merges.len(), self.eow);
        for (l, r) in &self.merges {
            s.push_str(l);
            s.push(' ');
            s.push_str(r);
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::Format("empty codes file".into()))?;
        let bad = || Error::Format(format!("bad codes header {header:?}"));
        let mut fields = header.split("; ");
        if fields.next() != Some("version 1") {
            return Err(bad());
        }
        let n: usize = fields
            .next()
            .and_then(|f| f.strip_prefix("merges="))
            .and_then(|v| v.parse().ok())
            .ok_or_else(bad)?;
        let eow = fields.next().and_then(|f| f.strip_prefix("eow=")).ok_or_else(bad)?;
        let merges: Vec<SymbolPair> = lines
            .map(|l| {
                let mut it = l.split(' ');
                match (it.next(), it.next(), it.next()) {
                    (Some(a), Some(b), None) if !a.is_empty() && !b.is_empty() => {
                        Ok((a.to_owned(), b.to_owned()))
                    }
                    _ => Err(Error::Format(format!("bad merge line {l:?}"))),
                }
            })
            .collect::<Result<_>>()?;
        if merges.len() != n {
            return Err(Error::Format(format!("header says {n} merges, found {}", merges.len())));
        }
        BpeCodes::new(merges, eow)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    /// SHA-256 of the codes file bytes, lowercase hex.
    pub fn content_hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_text().as_bytes()))
    }

    fn initial_symbols(&self, word: &str) -> Vec<String> {
        let mut syms: Vec<String> = word.chars().map(String::from).collect();
        if let Some(last) = syms.last_mut() {
            last.push_str(&self.eow);
        }
        syms
    }

    /// Segments one word.
    pub fn segment_word(&self, word: &str) -> Vec<String> {
        let mut syms = self.initial_symbols(word);
        loop {
            let best = syms
                .windows(2)
                .filter_map(|w| self.ranks.get(&(w[0].clone(), w[1].clone())).copied())
                .min();
            let Some(rank) = best else { break };
            let (l, r) = &self.merges[rank];
            syms = merge_pair(&syms, l, r);
        }
        syms
    }

    pub fn apply(&self, sentence: &[String]) -> Vec<String> {
        sentence.iter().flat_map(|w| self.segment_word(w)).collect()
    }

    pub fn decode(&self, subwords: &[String]) -> Vec<String> {
        let mut words = Vec::new();
        let mut cur = String::new();
        for s in subwords {
            match s.strip_suffix(self.eow.as_str()) {
                Some(stem) => {
                    cur.push_str(stem);
                    words.push(std::mem::take(&mut cur));
                }
                None => cur.push_str(s),
            }
        }
        if !cur.is_empty() {
            words.push(cur);
        }
        words
    }
}

/// Replaces every non-overlapping occurrence of `(l, r)`, scanning left to right.
fn merge_pair(syms: &[String], l: &str, r: &str) -> Vec<String> {
    let mut out = Vec::with_capacity(syms.len());
    let mut i = 0;
    while i < syms.len() {
        if i + 1 < syms.len() && syms[i] == l && syms[i + 1] == r {
            out.push(format!("{l}{r}"));
            i += 2;
        } else {
            out.push(syms[i].clone());
            i += 1;
        }
    }
    out
}

pub fn apply_bpe(codes: &BpeCodes, sentence: &[String]) -> Vec<String> {
    codes.apply(sentence)
}

pub fn decode_bpe(codes: &BpeCodes, subwords: &[String]) -> Vec<String> {
    codes.decode(subwords)
}

/// Incremental learner state: per-word symbol sequences with a pair index.
struct Learner {
    words: Vec<Vec<String>>,
    freqs: Vec<u64>,
    counts: HashMap<SymbolPair, u64>,
    occurs_in: HashMap<SymbolPair, BTreeSet<usize>>,
    queue: BTreeSet<(Reverse<u64>, SymbolPair)>,
}

impl Learner {
    fn new(vocab: BTreeMap<String, u64>, eow: &str) -> Self {
        let mut l = Learner {
            words: Vec::with_capacity(vocab.len()),
            freqs: Vec::with_capacity(vocab.len()),
            counts: HashMap::new(),
            occurs_in: HashMap::new(),
            queue: BTreeSet::new(),
        };
        for (word, freq) in vocab {
            let mut syms: Vec<String> = word.chars().map(String::from).collect();
            if let Some(last) = syms.last_mut() {
                last.push_str(eow);
            }
            let id = l.words.len();
            l.words.push(syms);
            l.freqs.push(freq);
            l.add_word(id);
        }
        l
    }

    fn bump(&mut self, pair: SymbolPair, delta: i64, word: usize) {
        let old = self.counts.get(&pair).copied().unwrap_or(0);
        let new = (old as i64 + delta) as u64;
        if old > 0 {
            self.queue.remove(&(Reverse(old), pair.clone()));
        }
        if new > 0 {
            self.queue.insert((Reverse(new), pair.clone()));
            self.counts.insert(pair.clone(), new);
        } else {
            self.counts.remove(&pair);
        }
        if delta > 0 {
            self.occurs_in.entry(pair).or_default().insert(word);
        }
    }

    fn add_word(&mut self, id: usize) {
        let f = self.freqs[id] as i64;
        let pairs: Vec<SymbolPair> = self.words[id]
            .windows(2)
            .map(|w| (w[0].clone(), w[1].clone()))
            .collect();
        for p in pairs {
            self.bump(p, f, id);
        }
    }

    fn remove_word(&mut self, id: usize) {
        let f = self.freqs[id] as i64;
        let pairs: Vec<SymbolPair> = self.words[id]
            .windows(2)
            .map(|w| (w[0].clone(), w[1].clone()))
            .collect();
        for p in pairs {
            self.bump(p, -f, id);
        }
    }

    /// Highest count first; ties go to the lexicographically smallest pair.
    fn best(&self) -> Option<(SymbolPair, u64)> {
        self.queue.first().map(|(Reverse(c), p)| (p.clone(), *c))
    }

    fn merge(&mut self, pair: &SymbolPair) {
        let ids: Vec<usize> = self
            .occurs_in
            .get(pair)
            .map(|s| s.iter().copied().collect())
            .unwrap_or_default();
        for id in ids {
            if !self.words[id].windows(2).any(|w| w[0] == pair.0 && w[1] == pair.1) {
                continue;
            }
            self.remove_word(id);
            self.words[id] = merge_pair(&self.words[id], &pair.0, &pair.1);
            self.add_word(id);
        }
        self.occurs_in.remove(pair);
    }
}

/// Learns merges over the pooled word multiset of the given sentences.
pub fn learn_bpe_from<'a, I>(sentences: I, num_merges: usize, eow: &str) -> Result<BpeCodes>
where
    I: IntoIterator<Item = &'a [String]>,
{
    let mut vocab: BTreeMap<String, u64> = BTreeMap::new();
    for s in sentences {
        for w in s {
            if w.contains(eow) {
                return Err(Error::Invalid(format!(
                    "word {w:?} contains the end-of-word marker {eow:?}"
                )));
            }
            *vocab.entry(w.clone()).or_insert(0) += 1;
        }
    }
    if vocab.is_empty() {
        return Err(Error::Invalid("cannot learn BPE on an empty corpus".into()));
    }
    let mut learner = Learner::new(vocab, eow);
    let mut merges = Vec::with_capacity(num_merges);
    while merges.len() < num_merges {
        match learner.best() {
            Some((pair, count)) if count >= 2 => {
                learner.merge(&pair);
                merges.push(pair);
            }
            _ => break,
        }
    }
    BpeCodes::new(merges, eow)
}

/// Joint learning over both sides of a corpus.
pub fn learn_bpe(corpus: &crate::corpus::ParallelCorpus, num_merges: usize) -> Result<BpeCodes> {
    learn_bpe_from(corpus.sources().chain(corpus.targets()), num_merges, DEFAULT_EOW)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{DomainTag, ParallelCorpus, SentencePair};
    use proptest::prelude::*;

    fn words(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    #[test]
    fn zero_merges() {
        let c = ParallelCorpus::new("c", DomainTag::Generic, vec![SentencePair::new("ab", "cd")]);
        let codes = learn_bpe(&c, 0).unwrap();
        assert_eq!(codes.num_merges(), 0);
        assert_eq!(codes.apply(&words("ab")), vec!["a".to_owned(), "b</w>".to_owned()]);
    }

    #[test]
    fn empty_corpus_is_rejected() {
        let c = ParallelCorpus::new("c", DomainTag::Generic, vec![]);
        assert!(learn_bpe(&c, 10).is_err());
    }

    #[test]
    fn marker_in_text_is_rejected() {
        let s = vec![words("x</w>y")];
        assert!(learn_bpe_from(s.iter().map(|v| v.as_slice()), 3, DEFAULT_EOW).is_err());
    }

    #[test]
    fn aaab_first_merge() {
        // Pair counts for "a a a b</w>" x3: (a,a)=6, (a,b</w>)=3.
        let s = vec![words("aaab aaab aaab")];
        let codes = learn_bpe_from(s.iter().map(|v| v.as_slice()), 10, DEFAULT_EOW).unwrap();
        assert_eq!(codes.merges()[0], ("a".to_owned(), "a".to_owned()));
        // aa a b</w> -> (aa,a)=3 vs (a,b</w>)=3, lexicographic tie-break picks (a,b</w>)
        assert_eq!(codes.merges()[1], ("a".to_owned(), "b</w>".to_owned()));
        assert_eq!(codes.merges()[2], ("aa".to_owned(), "ab</w>".to_owned()));
        assert_eq!(codes.num_merges(), 3);
        assert_eq!(codes.apply(&words("aaab")), vec!["aaab</w>".to_owned()]);
    }

    #[test]
    fn decode_examples() {
        let codes = BpeCodes::new(vec![], DEFAULT_EOW).unwrap();
        assert_eq!(codes.decode(&["a".into(), "b</w>".into()]), vec!["ab".to_owned()]);
        assert!(codes.decode(&[]).is_empty());
    }

    #[test]
    fn unknown_characters_pass_through() {
        let s = vec![words("ab ab")];
        let codes = learn_bpe_from(s.iter().map(|v| v.as_slice()), 5, DEFAULT_EOW).unwrap();
        assert_eq!(codes.apply(&words("zé")), vec!["z".to_owned(), "é</w>".to_owned()]);
    }

    #[test]
    fn codes_file_round_trip_and_header() {
        let s = vec![words("low lower lowest newer wider")];
        let codes = learn_bpe_from(s.iter().map(|v| v.as_slice()), 8, DEFAULT_EOW).unwrap();
        let text = codes.to_text();
        assert!(text.starts_with(&format!("version 1; merges={}; eow=</w>\n", codes.num_merges())));
        assert_eq!(BpeCodes::from_text(&text).unwrap(), codes);
        assert!(BpeCodes::from_text("version 2; merges=0; eow=</w>\n").is_err());
        assert!(BpeCodes::from_text("version 1; merges=2; eow=</w>\na b\n").is_err());
    }

    #[test]
    fn learning_is_deterministic() {
        let c = crate::corpus::synth_two_domain(1, 300, 100).unwrap().generic_train;
        let a = learn_bpe(&c, 100).unwrap();
        let b = learn_bpe(&c, 100).unwrap();
        assert_eq!(a.to_text(), b.to_text());
    }

    proptest! {
        #[test]
        fn decode_inverts_apply(sent in prop::collection::vec("[a-e]{1,6}", 1..8), merges in 0usize..30) {
            let corpus = vec![sent.clone()];
            let codes = learn_bpe_from(corpus.iter().map(|v| v.as_slice()), merges, DEFAULT_EOW).unwrap();
            let probe: Vec<String> = sent.iter().rev().cloned().collect();
            prop_assert_eq!(codes.decode(&codes.apply(&sent)), sent);
            prop_assert_eq!(codes.decode(&codes.apply(&probe)), probe);
        }
    }
}
