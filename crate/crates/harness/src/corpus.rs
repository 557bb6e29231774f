//! Byte-level corpora: loading, splitting, hashing and a seeded synthetic
//! text generator.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{invalid, io_err, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub train: Vec<usize>,
    pub eval: Vec<usize>,
    /// SHA-256 of the raw bytes.
    pub hash: String,
}

impl Corpus {
    /// Byte tokens with the trailing `split_fraction` held out for eval.
    pub fn from_bytes(bytes: &[u8], split_fraction: f64) -> Result<Self> {
        if bytes.is_empty() {
            return Err(invalid("corpus is empty"));
        }
        if !(split_fraction > 0.0 && split_fraction < 1.0) {
            return Err(invalid(format!("split fraction {split_fraction} outside (0, 1)")));
        }
        let n_eval = (bytes.len() as f64 * split_fraction).round() as usize;
        let cut = bytes.len() - n_eval;
        let tokens: Vec<usize> = bytes.iter().map(|&b| b as usize).collect();
        Ok(Self {
            eval: tokens[cut..].to_vec(),
            train: tokens[..cut].to_vec(),
            hash: hex::encode(Sha256::digest(bytes)),
        })
    }
}

pub fn load_corpus(path: &Path, split_fraction: f64) -> Result<Corpus> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    Corpus::from_bytes(&bytes, split_fraction)
        .map_err(|e| invalid(format!("{}: {e}", path.display())))
}

/// SHA-256 over tokens encoded as little-endian `u32`.
pub fn stream_hash(tokens: &[usize]) -> String {
    let mut h = Sha256::new();
    for &t in tokens {
        h.update((t as u32).to_le_bytes());
    }
    hex::encode(h.finalize())
}

/// Coarse byte class used as the domain tag of a token.
pub fn byte_class(byte: usize) -> &'static str {
    match u8::try_from(byte) {
        Ok(b) if b.is_ascii_lowercase() => "lower",
        Ok(b) if b.is_ascii_uppercase() => "upper",
        Ok(b) if b.is_ascii_digit() => "digit",
        Ok(b) if b.is_ascii_whitespace() => "space",
        Ok(b) if b.is_ascii_punctuation() => "punct",
        _ => "other",
    }
}

const ONSETS: &[&str] = &[
    "b", "c", "d", "f", "g", "h", "j", "k", "l", "m", "n", "p", "r", "s", "t", "v", "w", "z", "br", "ch", "cl", "dr",
    "fl", "gr", "pl", "pr", "sh", "sl", "st", "th", "tr", "wh",
];
const NUCLEI: &[&str] = &["a", "e", "i", "o", "u", "ai", "ea", "ee", "ie", "oo", "ou", "y"];
const CODAS: &[&str] = &["", "", "", "n", "r", "s", "t", "l", "nd", "st", "ng", "ck", "m", "rd"];
const TOPICS: usize = 8;

fn make_word(rng: &mut ChaCha8Rng) -> String {
    let syllables = match rng.gen_range(0..10) {
        0..=3 => 1,
        4..=7 => 2,
        _ => 3,
    };
    let mut w = String::new();
    for _ in 0..syllables {
        w.push_str(ONSETS.choose(rng).unwrap());
        w.push_str(NUCLEI.choose(rng).unwrap());
    }
    w.push_str(CODAS.choose(rng).unwrap());
    w
}

/// Zipf-like draw from `0..n`.
fn zipf(rng: &mut ChaCha8Rng, n: usize) -> usize {
    let u: f64 = rng.gen();
    ((n as f64).powf(u) - 1.0).floor().min(n as f64 - 1.0) as usize
}

/// Deterministic English-like text of exactly `n_bytes` bytes: a Zipfian
/// pseudo-word lexicon, topic-specific vocabularies, preferred word
/// successors, capitalized sentences, punctuation and numbers.
pub fn synthetic_text(seed: u64, n_bytes: usize) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut lexicon: Vec<String> = Vec::new();
    while lexicon.len() < 2000 {
        let w = make_word(&mut rng);
        if !lexicon.contains(&w) {
            lexicon.push(w);
        }
    }
    let function_words = ["the", "of", "and", "to", "a", "in", "is", "that", "for", "it", "with", "as", "was", "on"];
    let topic_words: Vec<Vec<usize>> = (0..TOPICS)
        .map(|_| (0..120).map(|_| rng.gen_range(0..lexicon.len())).collect())
        .collect();
    let successors: Vec<Vec<usize>> = (0..lexicon.len())
        .map(|_| (0..4).map(|_| zipf(&mut rng, lexicon.len())).collect())
        .collect();

    let mut out = String::with_capacity(n_bytes + 256);
    while out.len() < n_bytes {
        let topic = rng.gen_range(0..TOPICS);
        for _ in 0..rng.gen_range(3..8) {
            let words = rng.gen_range(6..18);
            let mut prev: Option<usize> = None;
            for i in 0..words {
                let word: String = if rng.gen_bool(0.25) {
                    prev = None;
                    function_words[zipf(&mut rng, function_words.len())].to_string()
                } else if rng.gen_bool(0.03) {
                    prev = None;
                    rng.gen_range(1..2000u32).to_string()
                } else {
                    let idx = match prev {
                        Some(p) if rng.gen_bool(0.4) => successors[p][rng.gen_range(0..4)],
                        _ if rng.gen_bool(0.5) => topic_words[topic][zipf(&mut rng, 120)],
                        _ => zipf(&mut rng, lexicon.len()),
                    };
                    prev = Some(idx);
                    lexicon[idx].clone()
                };
                if i == 0 {
                    let mut c = word.chars();
                    if let Some(f) = c.next() {
                        out.extend(f.to_uppercase());
                        out.push_str(c.as_str());
                    }
                } else {
                    out.push(' ');
                    out.push_str(&word);
                }
                if i + 1 < words && rng.gen_bool(0.06) {
                    out.push(',');
                }
            }
            out.push(*['.', '.', '.', '.', '?', '!'].choose(&mut rng).unwrap());
            out.push(' ');
        }
        out.push('\n');
    }
    let mut bytes = out.into_bytes();
    bytes.truncate(n_bytes);
    bytes
}
