//! Parallel text ingestion, prefix slicing and the seeded two-domain toy task.
//!
//! Files follow the one-sentence-per-line convention with source and target
//! in separate files. Tokenization here is whitespace splitting only.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SentencePair {
    pub source: Vec<String>,
    pub target: Vec<String>,
}

impl SentencePair {
    pub fn new(source: &str, target: &str) -> Self {
        SentencePair {
            source: tokenize(source),
            target: tokenize(target),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DomainTag {
    Generic,
    InDomain,
}

impl fmt::Display for DomainTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DomainTag::Generic => f.write_str("generic"),
            DomainTag::InDomain => f.write_str("in-domain"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParallelCorpus {
    pub name: String,
    pub domain: DomainTag,
    pub pairs: Vec<SentencePair>,
}

pub fn tokenize(line: &str) -> Vec<String> {
    line.split_whitespace().map(str::to_owned).collect()
}

impl ParallelCorpus {
    pub fn new(name: impl Into<String>, domain: DomainTag, pairs: Vec<SentencePair>) -> Self {
        ParallelCorpus {
            name: name.into(),
            domain,
            pairs,
        }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn sources(&self) -> impl Iterator<Item = &[String]> {
        self.pairs.iter().map(|p| p.source.as_slice())
    }

    pub fn targets(&self) -> impl Iterator<Item = &[String]> {
        self.pairs.iter().map(|p| p.target.as_slice())
    }

    /// Concatenation in order: `self` then `other`.
    pub fn concat(&self, other: &ParallelCorpus, name: impl Into<String>) -> ParallelCorpus {
        let mut pairs = self.pairs.clone();
        pairs.extend(other.pairs.iter().cloned());
        ParallelCorpus::new(name, self.domain, pairs)
    }

    /// SHA-256 over the text form of both sides, lowercase hex.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for p in &self.pairs {
            h.update(p.source.join(" ").as_bytes());
            h.update(b"\t");
            h.update(p.target.join(" ").as_bytes());
            h.update(b"\n");
        }
        hex::encode(h.finalize())
    }

    pub fn save(&self, source_path: &Path, target_path: &Path) -> Result<()> {
        write_lines(source_path, self.sources())?;
        write_lines(target_path, self.targets())
    }
}

fn write_lines<'a>(path: &Path, lines: impl Iterator<Item = &'a [String]>) -> Result<()> {
    let mut out = Vec::new();
    for line in lines {
        out.extend_from_slice(line.join(" ").as_bytes());
        out.push(b'\n');
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

/// Reads a text file as whitespace-tokenized lines, rejecting blank lines.
pub fn read_sentences(path: &Path) -> Result<Vec<Vec<String>>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .map(|(i, line)| {
            let toks = tokenize(line);
            if toks.is_empty() {
                Err(Error::EmptyLine {
                    path: path.to_path_buf(),
                    line: i + 1,
                })
            } else {
                Ok(toks)
            }
        })
        .collect()
}

pub fn load_parallel(source_path: &Path, target_path: &Path) -> Result<ParallelCorpus> {
    let sources = read_sentences(source_path)?;
    let targets = read_sentences(target_path)?;
    if sources.len() != targets.len() {
        return Err(Error::Alignment {
            source_lines: sources.len(),
            target_lines: targets.len(),
        });
    }
    let name = source_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "corpus".to_owned());
    let pairs = sources
        .into_iter()
        .zip(targets)
        .map(|(source, target)| SentencePair { source, target })
        .collect();
    Ok(ParallelCorpus::new(name, DomainTag::Generic, pairs))
}

/// Prefix slicing: sizes are line counts, strictly increasing.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SliceSpec {
    pub sizes: Vec<usize>,
    pub seedless: bool,
}

impl SliceSpec {
    pub fn prefixes(sizes: Vec<usize>) -> Self {
        SliceSpec {
            sizes,
            seedless: true,
        }
    }
}

pub fn slice(corpus: &ParallelCorpus, spec: &SliceSpec) -> Result<Vec<ParallelCorpus>> {
    if spec.sizes.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Invalid(format!(
            "slice sizes must be strictly increasing: {:?}",
            spec.sizes
        )));
    }
    spec.sizes
        .iter()
        .map(|&n| {
            if n > corpus.len() {
                return Err(Error::Range(format!(
                    "slice of {n} lines exceeds corpus of {} lines",
                    corpus.len()
                )));
            }
            Ok(ParallelCorpus::new(
                format!("{}-{}", corpus.name, size_label(n)),
                corpus.domain,
                corpus.pairs[..n].to_vec(),
            ))
        })
        .collect()
}

/// "500" -> "0.5K", "5000" -> "5K", "120" -> "120".
pub fn size_label(n: usize) -> String {
    if n >= 1000 && n.is_multiple_of(100) {
        let k = n as f64 / 1000.0;
        if n.is_multiple_of(1000) {
            format!("{}K", n / 1000)
        } else {
            format!("{k}K")
        }
    } else if n >= 100 && n.is_multiple_of(100) {
        format!("{}K", n as f64 / 1000.0)
    } else {
        n.to_string()
    }
}

/// Splits off the last `n` pairs as a held-out set.
pub fn split_heldout(corpus: &ParallelCorpus, n: usize) -> Result<(ParallelCorpus, ParallelCorpus)> {
    if n >= corpus.len() && !(n == 0 && corpus.is_empty()) {
        return Err(Error::Range(format!(
            "held-out size {n} must be below corpus length {}",
            corpus.len()
        )));
    }
    let cut = corpus.len() - n;
    Ok((
        ParallelCorpus::new(
            format!("{}-train", corpus.name),
            corpus.domain,
            corpus.pairs[..cut].to_vec(),
        ),
        ParallelCorpus::new(
            format!("{}-test", corpus.name),
            corpus.domain,
            corpus.pairs[cut..].to_vec(),
        ),
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Pos {
    Noun,
    Verb,
    Adj,
}

struct Template {
    pattern: &'static [Pos],
    order: &'static [usize],
}

use Pos::{Adj as A, Noun as N, Verb as V};

const GENERIC_TEMPLATES: &[Template] = &[
    Template { pattern: &[N, V, N], order: &[0, 1, 2] },
    Template { pattern: &[A, N, V, N], order: &[1, 0, 2, 3] },
    Template { pattern: &[N, V, A, N], order: &[0, 1, 3, 2] },
    Template { pattern: &[A, N, V, A, N], order: &[1, 0, 2, 4, 3] },
    Template { pattern: &[V, N], order: &[1, 0] },
    Template { pattern: &[N, V, N, N], order: &[0, 3, 2, 1] },
];

const DOMAIN_TEMPLATES: &[Template] = &[
    Template { pattern: &[N, N, V], order: &[2, 1, 0] },
    Template { pattern: &[A, A, N, V, N], order: &[2, 0, 1, 3, 4] },
];

const NOUNS: usize = 30;
const VERBS: usize = 20;
const ADJS: usize = 10;
const DOMAIN_FRACTION: f64 = 0.3;

const SRC_CONSONANTS: &[u8] = b"bdgklmnprst";
const SRC_VOWELS: &[u8] = b"aeiou";
const TGT_CONSONANTS: &[u8] = b"cfhjqvwxyz";
const TGT_VOWELS: &[u8] = b"aeiouy";

/// Source word -> target word, per part of speech.
#[derive(Debug, Clone)]
struct Lexicon {
    nouns: Vec<(String, String)>,
    verbs: Vec<(String, String)>,
    adjs: Vec<(String, String)>,
}

impl Lexicon {
    fn entries(&self, pos: Pos) -> &[(String, String)] {
        match pos {
            Pos::Noun => &self.nouns,
            Pos::Verb => &self.verbs,
            Pos::Adj => &self.adjs,
        }
    }

    fn entries_mut(&mut self, pos: Pos) -> &mut Vec<(String, String)> {
        match pos {
            Pos::Noun => &mut self.nouns,
            Pos::Verb => &mut self.verbs,
            Pos::Adj => &mut self.adjs,
        }
    }
}

fn fresh_word(
    rng: &mut ChaCha8Rng,
    consonants: &[u8],
    vowels: &[u8],
    syllables: usize,
    taken: &mut BTreeSet<String>,
) -> String {
    loop {
        let mut w = String::with_capacity(syllables * 2);
        for _ in 0..syllables {
            w.push(*consonants.choose(rng).unwrap() as char);
            w.push(*vowels.choose(rng).unwrap() as char);
        }
        if taken.insert(w.clone()) {
            return w;
        }
    }
}

fn fresh_entries(
    rng: &mut ChaCha8Rng,
    n: usize,
    syllables: usize,
    src_taken: &mut BTreeSet<String>,
    tgt_taken: &mut BTreeSet<String>,
) -> Vec<(String, String)> {
    (0..n)
        .map(|_| {
            let s = fresh_word(rng, SRC_CONSONANTS, SRC_VOWELS, syllables, src_taken);
            let t = fresh_word(rng, TGT_CONSONANTS, TGT_VOWELS, syllables, tgt_taken);
            (s, t)
        })
        .collect()
}

fn sample_pair(rng: &mut ChaCha8Rng, lex: &Lexicon, templates: &[&Template]) -> SentencePair {
    let t = templates[rng.gen_range(0..templates.len())];
    let words: Vec<&(String, String)> = t
        .pattern
        .iter()
        .map(|&pos| {
            let entries = lex.entries(pos);
            &entries[rng.gen_range(0..entries.len())]
        })
        .collect();
    SentencePair {
        source: words.iter().map(|w| w.0.clone()).collect(),
        target: t.order.iter().map(|&i| words[i].1.clone()).collect(),
    }
}

/// The four corpora of the toy two-domain task plus the domain-only terms
/// (source and target side) that the generic side never contains.
#[derive(Debug, Clone)]
pub struct TwoDomainCorpora {
    pub generic_train: ParallelCorpus,
    pub generic_test: ParallelCorpus,
    pub indomain_train: ParallelCorpus,
    pub indomain_test: ParallelCorpus,
    pub domain_terms: BTreeSet<String>,
}

/// Held-out lines generated alongside `lines` training lines.
pub fn synth_test_lines(lines: usize) -> usize {
    (lines / 10).clamp(50, 1000)
}

/// Deterministic word-for-word translation task with reordering templates.
/// The in-domain variant swaps 30% of every part-of-speech class for new
/// terms and adds templates the generic side never uses.
pub fn synth_two_domain(seed: u64, generic_lines: usize, indomain_lines: usize) -> Result<TwoDomainCorpora> {
    if generic_lines < 100 || indomain_lines < 100 {
        return Err(Error::Invalid(format!(
            "synthetic corpora need at least 100 lines each (got {generic_lines} and {indomain_lines})"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut src_taken = BTreeSet::new();
    let mut tgt_taken = BTreeSet::new();
    let generic = Lexicon {
        nouns: fresh_entries(&mut rng, NOUNS, 2, &mut src_taken, &mut tgt_taken),
        verbs: fresh_entries(&mut rng, VERBS, 2, &mut src_taken, &mut tgt_taken),
        adjs: fresh_entries(&mut rng, ADJS, 2, &mut src_taken, &mut tgt_taken),
    };

    let mut domain = generic.clone();
    let mut domain_terms = BTreeSet::new();
    for pos in [Pos::Noun, Pos::Verb, Pos::Adj] {
        let n = generic.entries(pos).len();
        let k = (n as f64 * DOMAIN_FRACTION).round() as usize;
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut rng);
        let fresh = fresh_entries(&mut rng, k, 3, &mut src_taken, &mut tgt_taken);
        let entries = domain.entries_mut(pos);
        for (&i, e) in idx[..k].iter().zip(fresh) {
            domain_terms.insert(e.0.clone());
            domain_terms.insert(e.1.clone());
            entries[i] = e;
        }
    }

    let generic_templates: Vec<&Template> = GENERIC_TEMPLATES.iter().collect();
    let domain_templates: Vec<&Template> = GENERIC_TEMPLATES.iter().chain(DOMAIN_TEMPLATES).collect();

    let mut gen = |name: &str, tag: DomainTag, lex: &Lexicon, templates: &[&Template], n: usize| {
        let pairs = (0..n).map(|_| sample_pair(&mut rng, lex, templates)).collect();
        ParallelCorpus::new(name, tag, pairs)
    };
    let generic_train = gen("generic-train", DomainTag::Generic, &generic, &generic_templates, generic_lines);
    let generic_test = gen(
        "generic-test",
        DomainTag::Generic,
        &generic,
        &generic_templates,
        synth_test_lines(generic_lines),
    );
    let indomain_train = gen("indomain-train", DomainTag::InDomain, &domain, &domain_templates, indomain_lines);
    let indomain_test = gen(
        "indomain-test",
        DomainTag::InDomain,
        &domain,
        &domain_templates,
        synth_test_lines(indomain_lines),
    );
    Ok(TwoDomainCorpora {
        generic_train,
        generic_test,
        indomain_train,
        indomain_test,
        domain_terms,
    })
}
