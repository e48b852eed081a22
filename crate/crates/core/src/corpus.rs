//! Byte-level corpora, their fixed train/eval split, and window sampling.
//!
//! A corpus is cut once: the last 10% of bytes (by offset) is the evaluation
//! split and everything before it is the training region. Windows are
//! `seq_len + 1` bytes: `seq_len` inputs and the same span shifted by one as
//! next-token targets. Training-region windows live on a fixed grid of
//! non-overlapping slots so that sets drawn for different purposes can be
//! kept disjoint.

use std::collections::BTreeSet;
use std::ops::Range;
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::persistence::sha256_hex;

#[derive(Debug, Clone)]
pub struct Corpus {
    bytes: Vec<u8>,
    digest: String,
}

impl Corpus {
    pub fn from_bytes(bytes: Vec<u8>) -> Self {
        let digest = sha256_hex(&bytes);
        Corpus { bytes, digest }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(Corpus::from_bytes(bytes))
    }

    pub fn len(&self) -> usize {
        self.bytes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bytes.is_empty()
    }

    pub fn bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn digest(&self) -> &str {
        &self.digest
    }

    pub fn eval_range(&self) -> Range<usize> {
        let n = self.bytes.len();
        n - n / 10..n
    }

    pub fn train_range(&self) -> Range<usize> {
        0..self.eval_range().start
    }

    /// Number of disjoint training slots of `seq_len + 1` bytes.
    pub fn train_slots(&self, seq_len: usize) -> usize {
        self.train_range().len() / (seq_len + 1)
    }

    pub fn window(&self, offset: usize, seq_len: usize) -> Vec<u32> {
        self.bytes[offset..offset + seq_len + 1].iter().map(|&b| b as u32).collect()
    }

    /// Smallest corpus whose training region holds `slots` windows.
    pub fn required_len(slots: usize, seq_len: usize) -> usize {
        let need = slots * (seq_len + 1);
        // train = n - n/10 is nondecreasing in n; start from the lower bound.
        let mut n = need;
        while n - n / 10 < need {
            n += 1;
        }
        n.max(2)
    }
}

/// Fixed token sequences used for calibration passes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationSet {
    /// Each entry is `seq_len + 1` token ids.
    pub sequences: Vec<Vec<u32>>,
    /// Byte offset of each window in the source corpus.
    pub offsets: Vec<usize>,
    pub seq_len: usize,
    pub corpus_digest: String,
    pub seed: u64,
    /// Digest over the offsets and token content.
    pub digest: String,
}

impl CalibrationSet {
    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    /// Total number of input tokens `t`.
    pub fn token_count(&self) -> usize {
        self.sequences.len() * self.seq_len
    }

    pub fn inputs(&self, i: usize) -> &[u32] {
        &self.sequences[i][..self.seq_len]
    }

    pub fn targets(&self, i: usize) -> &[u32] {
        &self.sequences[i][1..]
    }

    /// Training-grid slot indices this set occupies.
    pub fn slot_indices(&self) -> BTreeSet<usize> {
        self.offsets.iter().map(|o| o / (self.seq_len + 1)).collect()
    }

    pub fn byte_ranges(&self) -> Vec<Range<usize>> {
        self.offsets.iter().map(|&o| o..o + self.seq_len + 1).collect()
    }
}

/// Draw `n_sequences` disjoint training windows without replacement.
pub fn build_calibration_set(corpus: &Corpus, n_sequences: usize, seq_len: usize, seed: u64) -> Result<CalibrationSet> {
    if n_sequences == 0 {
        return Err(Error::config("sequences", "at least one calibration sequence"));
    }
    if seq_len == 0 {
        return Err(Error::config("seq_len", "must be at least 1"));
    }
    let slots = corpus.train_slots(seq_len);
    if slots < n_sequences {
        return Err(Error::CorpusTooSmall {
            required: Corpus::required_len(n_sequences, seq_len),
            available: corpus.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen: Vec<usize> = index::sample(&mut rng, slots, n_sequences).into_vec();
    chosen.sort_unstable();
    let w = seq_len + 1;
    let offsets: Vec<usize> = chosen.iter().map(|s| s * w).collect();
    let sequences: Vec<Vec<u32>> = offsets.iter().map(|&o| corpus.window(o, seq_len)).collect();
    let mut buf = Vec::with_capacity(offsets.len() * (8 + w));
    for (o, s) in offsets.iter().zip(&sequences) {
        buf.extend_from_slice(&(*o as u64).to_le_bytes());
        buf.extend(s.iter().map(|&t| t as u8));
    }
    buf.extend_from_slice(corpus.digest().as_bytes());
    Ok(CalibrationSet {
        digest: sha256_hex(&buf),
        sequences,
        offsets,
        seq_len,
        corpus_digest: corpus.digest().to_string(),
        seed,
    })
}

/// Seeded stream of training windows drawn from slots not in `excluded`.
///
/// Without reuse, each slot is served at most once and running out is an
/// error. With reuse, the slot order is reshuffled for every pass.
#[derive(Debug)]
pub struct WindowStream<'a> {
    corpus: &'a Corpus,
    seq_len: usize,
    available: Vec<usize>,
    order: Vec<usize>,
    cursor: usize,
    epoch: u64,
    seed: u64,
    allow_reuse: bool,
    reused: bool,
}

impl<'a> WindowStream<'a> {
    pub fn new(corpus: &'a Corpus, seq_len: usize, excluded: &BTreeSet<usize>, seed: u64, allow_reuse: bool) -> Result<Self> {
        let available: Vec<usize> = (0..corpus.train_slots(seq_len)).filter(|s| !excluded.contains(s)).collect();
        if available.is_empty() {
            return Err(Error::CorpusTooSmall { required: Corpus::required_len(excluded.len() + 1, seq_len), available: corpus.len() });
        }
        let mut s = WindowStream { corpus, seq_len, order: Vec::new(), available, cursor: 0, epoch: 0, seed, allow_reuse, reused: false };
        s.shuffle();
        Ok(s)
    }

    fn shuffle(&mut self) {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ self.epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        self.order = self.available.clone();
        self.order.shuffle(&mut rng);
        self.cursor = 0;
    }

    /// Windows that can be served before any reuse.
    pub fn capacity(&self) -> usize {
        self.available.len()
    }

    pub fn reused(&self) -> bool {
        self.reused
    }

    pub fn next_window(&mut self) -> Result<Vec<u32>> {
        if self.cursor == self.order.len() {
            if !self.allow_reuse {
                return Err(Error::CorpusTooSmall {
                    required: Corpus::required_len(self.available.len() + 1, self.seq_len),
                    available: self.corpus.len(),
                });
            }
            self.epoch += 1;
            self.reused = true;
            self.shuffle();
        }
        let slot = self.order[self.cursor];
        self.cursor += 1;
        Ok(self.corpus.window(slot * (self.seq_len + 1), self.seq_len))
    }
}

/// Records which byte ranges of which corpus fed each stage, so an
/// evaluation split can be checked for leakage.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct DataRegistry {
    entries: Vec<RegistryEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RegistryEntry {
    corpus_digest: String,
    purpose: String,
    start: usize,
    end: usize,
}

impl DataRegistry {
    pub fn register(&mut self, corpus_digest: &str, purpose: &str, range: Range<usize>) {
        self.entries.push(RegistryEntry { corpus_digest: corpus_digest.to_string(), purpose: purpose.to_string(), start: range.start, end: range.end });
    }

    pub fn check_disjoint(&self, corpus_digest: &str, range: &Range<usize>) -> Result<()> {
        for e in &self.entries {
            if e.corpus_digest == corpus_digest && e.start < range.end && range.start < e.end {
                return Err(Error::SplitOverlap { purpose: e.purpose.clone() });
            }
        }
        Ok(())
    }
}

const PROSE_NOUNS: &[&str] = &[
    "river", "mountain", "garden", "village", "harbor", "forest", "letter", "window", "lantern", "machine",
    "teacher", "captain", "farmer", "painter", "market", "bridge", "castle", "storm", "meadow", "library",
];
const PROSE_ADJS: &[&str] = &[
    "quiet", "ancient", "bright", "narrow", "golden", "broken", "gentle", "distant", "crowded", "hollow",
    "silver", "patient", "restless", "careful", "open", "heavy",
];
const PROSE_VERBS: &[&str] = &[
    "crossed", "watched", "carried", "followed", "repaired", "painted", "visited", "described", "guarded", "remembered",
    "opened", "found",
];
const CODE_IDENTS: &[&str] = &["count", "total", "index", "value", "buffer", "offset", "limit", "state", "node", "item"];
const CODE_FNS: &[&str] = &["load", "store", "merge", "split", "scan", "push", "pop", "hash"];
const NAMES: &[&str] = &["alpha", "bravo", "delta", "echo", "kilo", "lima", "oscar", "sierra", "tango", "zulu"];

fn pick<'s>(rng: &mut ChaCha8Rng, words: &[&'s str]) -> &'s str {
    words[rng.random_range(0..words.len())]
}

fn capitalize(word: &str) -> String {
    let mut c = word.chars();
    match c.next() {
        Some(f) => f.to_ascii_uppercase().to_string() + c.as_str(),
        None => String::new(),
    }
}

fn prose_paragraph(rng: &mut ChaCha8Rng, out: &mut String) {
    for _ in 0..rng.random_range(3..8) {
        let sentence = format!(
            "{} {} {} {} the {} {}",
            capitalize(if rng.random_bool(0.5) { "the" } else { "a" }),
            pick(rng, PROSE_ADJS),
            pick(rng, PROSE_NOUNS),
            pick(rng, PROSE_VERBS),
            pick(rng, PROSE_ADJS),
            pick(rng, PROSE_NOUNS),
        );
        out.push_str(&sentence);
        out.push_str(if rng.random_bool(0.8) { ". " } else { "! " });
    }
}

fn arithmetic_paragraph(rng: &mut ChaCha8Rng, out: &mut String) {
    for _ in 0..rng.random_range(4..10) {
        let a: u32 = rng.random_range(0..50);
        let b: u32 = rng.random_range(0..50);
        if rng.random_bool(0.5) {
            out.push_str(&format!("{a} + {b} = {}\n", a + b));
        } else {
            out.push_str(&format!("{a} * {b} = {}\n", a * b));
        }
    }
}

fn code_paragraph(rng: &mut ChaCha8Rng, out: &mut String) {
    let name = pick(rng, CODE_FNS);
    let arg = pick(rng, CODE_IDENTS);
    out.push_str(&format!("fn {name}_{arg}({arg}: u32) -> u32 {{\n"));
    for _ in 0..rng.random_range(2..6) {
        let v = pick(rng, CODE_IDENTS);
        let n: u32 = rng.random_range(1..100);
        match rng.random_range(0..3) {
            0 => out.push_str(&format!("    let {v} = {}({arg}, {n});\n", pick(rng, CODE_FNS))),
            1 => out.push_str(&format!("    if {v} > {n} {{ return {v}; }}\n")),
            _ => out.push_str(&format!("    {v} += {arg} * {n};\n")),
        }
    }
    out.push_str(&format!("    {arg}\n}}\n"));
}

fn table_paragraph(rng: &mut ChaCha8Rng, out: &mut String) {
    out.push_str("id,name,score\n");
    for _ in 0..rng.random_range(3..9) {
        let id: u32 = rng.random_range(100..1000);
        let score: f64 = rng.random_range(0.0..100.0);
        out.push_str(&format!("{id},{},{score:.2}\n", pick(rng, NAMES)));
    }
}

fn dialog_paragraph(rng: &mut ChaCha8Rng, out: &mut String) {
    for _ in 0..rng.random_range(2..5) {
        let noun = pick(rng, PROSE_NOUNS);
        out.push_str(&format!("Q: WHERE IS THE {}?\n", noun.to_ascii_uppercase()));
        out.push_str(&format!("A: The {noun} is near the {} {}.\n", pick(rng, PROSE_ADJS), pick(rng, PROSE_NOUNS)));
    }
}

/// Deterministic mixed-register text: prose, arithmetic, code, tables and
/// dialog paragraphs in seeded order, truncated to exactly `len` bytes.
pub fn synthetic_text(len: usize, seed: u64) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = String::with_capacity(len + 1024);
    while out.len() < len {
        match rng.random_range(0..5) {
            0 => prose_paragraph(&mut rng, &mut out),
            1 => arithmetic_paragraph(&mut rng, &mut out),
            2 => code_paragraph(&mut rng, &mut out),
            3 => table_paragraph(&mut rng, &mut out),
            _ => dialog_paragraph(&mut rng, &mut out),
        }
        out.push_str("\n\n");
    }
    let mut bytes = out.into_bytes();
    bytes.truncate(len);
    bytes
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_corpus_and_seed_same_digest() {
        let corpus = Corpus::from_bytes(synthetic_text(100_000, 1));
        let a = build_calibration_set(&corpus, 8, 64, 5).unwrap();
        let b = build_calibration_set(&corpus, 8, 64, 5).unwrap();
        assert_eq!(a.digest, b.digest);
        let c = build_calibration_set(&corpus, 8, 64, 6).unwrap();
        assert_ne!(a.digest, c.digest);
    }

    #[test]
    fn one_byte_corpus_rejected() {
        let corpus = Corpus::from_bytes(vec![b'a']);
        match build_calibration_set(&corpus, 1, 4, 0) {
            Err(Error::CorpusTooSmall { required, available }) => {
                assert_eq!(available, 1);
                assert_eq!(required, 5);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn mebibyte_request_is_disjoint() {
        let corpus = Corpus::from_bytes(synthetic_text(1 << 20, 2));
        let set = build_calibration_set(&corpus, 64, 256, 9).unwrap();
        assert_eq!(set.token_count(), 16_384);
        // Overlap checker: sort byte ranges, every start past the previous end.
        let mut ranges = set.byte_ranges();
        ranges.sort_by_key(|r| r.start);
        for w in ranges.windows(2) {
            assert!(w[0].end <= w[1].start);
        }
        let eval = corpus.eval_range();
        assert!(ranges.iter().all(|r| r.end <= eval.start));
    }

    #[test]
    fn required_len_is_tight() {
        for (slots, seq) in [(1, 4), (64, 256), (7, 31)] {
            let n = Corpus::required_len(slots, seq);
            let fits = Corpus::from_bytes(vec![0; n]);
            let short = Corpus::from_bytes(vec![0; n - 1]);
            assert!(fits.train_slots(seq) >= slots);
            assert!(short.train_slots(seq) < slots);
        }
    }

    #[test]
    fn stream_without_reuse_exhausts() {
        let corpus = Corpus::from_bytes(synthetic_text(10 * 11 * 10 / 9 + 20, 3));
        let excluded: BTreeSet<usize> = [0, 1].into_iter().collect();
        let mut s = WindowStream::new(&corpus, 10, &excluded, 4, false).unwrap();
        let cap = s.capacity();
        for _ in 0..cap {
            s.next_window().unwrap();
        }
        assert!(s.next_window().is_err());

        let mut r = WindowStream::new(&corpus, 10, &excluded, 4, true).unwrap();
        for _ in 0..cap + 3 {
            r.next_window().unwrap();
        }
        assert!(r.reused());
    }

    #[test]
    fn registry_detects_overlap() {
        let mut reg = DataRegistry::default();
        reg.register("abc", "finetune", 0..100);
        assert!(reg.check_disjoint("abc", &(100..200)).is_ok());
        assert!(matches!(reg.check_disjoint("abc", &(50..150)), Err(Error::SplitOverlap { .. })));
        assert!(reg.check_disjoint("other", &(50..150)).is_ok());
    }

    #[test]
    fn synthetic_text_is_deterministic_and_sized() {
        let a = synthetic_text(5000, 11);
        assert_eq!(a.len(), 5000);
        assert_eq!(a, synthetic_text(5000, 11));
        assert_ne!(a, synthetic_text(5000, 12));
    }
}
