//! Corpora: a synthetic topic-mixture generator with known ground-truth
//! similarity, STS-style evaluation pairs, and plain-text ingestion.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;
use crate::tokens::FIRST_WORD_ID;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticCorpusConfig {
    pub num_sentences: usize,
    pub vocab_size: usize,
    pub num_topics: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Dirichlet concentration of each sentence's topic mixture. Small values
    /// give nearly single-topic sentences.
    pub topic_concentration: f64,
    /// Share of each topic's mass spread over the whole vocabulary.
    pub background_mass: f64,
    pub seed: u64,
}

impl Default for SyntheticCorpusConfig {
    fn default() -> Self {
        Self {
            num_sentences: 2000,
            vocab_size: 128,
            num_topics: 8,
            min_len: 10,
            max_len: 16,
            topic_concentration: 0.1,
            background_mass: 0.05,
            seed: 0,
        }
    }
}

impl SyntheticCorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_topics == 0 {
            return Err(Error::config("corpus.num_topics", "must be positive"));
        }
        let words = self.vocab_size.saturating_sub(FIRST_WORD_ID as usize);
        if words <= self.num_topics * 10 {
            return Err(Error::config(
                "corpus.vocab_size",
                format!("{} leaves {words} word ids; need more than 10 per topic", self.vocab_size),
            ));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::config("corpus.min_len", "need 1 <= min_len <= max_len"));
        }
        if !(self.topic_concentration > 0.0) {
            return Err(Error::config("corpus.topic_concentration", "must be positive"));
        }
        if !(0.0..=1.0).contains(&self.background_mass) {
            return Err(Error::config("corpus.background_mass", "must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Token sequences (without CLS) plus, for synthetic corpora, the latent
/// topic mixture of each sentence.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Corpus {
    pub sentences: Vec<Vec<u32>>,
    pub latents: Vec<Vec<f64>>,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    pub fn has_latents(&self) -> bool {
        !self.latents.is_empty()
    }
}

/// Per-topic unigram distributions: each topic owns a contiguous block of
/// the word ids, with Zipf-like weights inside the block.
fn topic_distributions(config: &SyntheticCorpusConfig) -> Vec<Vec<f64>> {
    let first = FIRST_WORD_ID as usize;
    let words = config.vocab_size - first;
    let block = words / config.num_topics;
    (0..config.num_topics)
        .map(|t| {
            let mut p = vec![0.0; config.vocab_size];
            let background = config.background_mass / words as f64;
            p[first..].iter_mut().for_each(|v| *v = background);
            let harmonic: f64 = (0..block).map(|r| 1.0 / (r + 1) as f64).sum();
            for r in 0..block {
                p[first + t * block + r] += (1.0 - config.background_mass) / ((r + 1) as f64 * harmonic);
            }
            p
        })
        .collect()
}

fn sample_index(rng: &mut impl Rng, cumulative: &[f64]) -> usize {
    let total = *cumulative.last().unwrap();
    let u = rng.random::<f64>() * total;
    cumulative.partition_point(|&c| c <= u).min(cumulative.len() - 1)
}

fn cumulative(p: &[f64]) -> Vec<f64> {
    p.iter()
        .scan(0.0, |acc, &v| {
            *acc += v;
            Some(*acc)
        })
        .collect()
}

/// Samples sentences from a Dirichlet mixture of topic unigram models.
pub fn gen_corpus(config: &SyntheticCorpusConfig) -> Result<Corpus> {
    config.validate()?;
    let mut rng = seed::rng(seed::derive(config.seed, &[seed::role::CORPUS]));
    let topics: Vec<Vec<f64>> = topic_distributions(config).iter().map(|p| cumulative(p)).collect();
    // Dirichlet draw as normalized Gamma(alpha, 1) variates
    let gamma = Gamma::new(config.topic_concentration, 1.0)
        .map_err(|e| Error::config("corpus.topic_concentration", e.to_string()))?;
    let mut corpus = Corpus::default();
    for _ in 0..config.num_sentences {
        let theta: Vec<f64> = if config.num_topics == 1 {
            vec![1.0]
        } else {
            let raw: Vec<f64> = (0..config.num_topics).map(|_| gamma.sample(&mut rng).max(1e-300)).collect();
            let total: f64 = raw.iter().sum();
            raw.into_iter().map(|v| v / total).collect()
        };
        let mix = cumulative(&theta);
        let len = rng.random_range(config.min_len..=config.max_len);
        let tokens = (0..len)
            .map(|_| {
                let z = sample_index(&mut rng, &mix);
                sample_index(&mut rng, &topics[z]) as u32
            })
            .collect();
        corpus.sentences.push(tokens);
        corpus.latents.push(theta);
    }
    Ok(corpus)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StsPair {
    pub tokens_a: Vec<u32>,
    pub tokens_b: Vec<u32>,
    pub gold: f64,
}

/// `5 * clamp(cos(a, b), 0, 1)`.
pub fn gold_score(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    5.0 * (dot / (na * nb)).clamp(0.0, 1.0)
}

const GOLD_BINS: usize = 10;

/// Samples `n` pairs spread across the gold range: candidates are binned by
/// gold score and drawn round-robin over the bins.
pub fn gen_sts_pairs(corpus: &Corpus, n: usize, seed: u64) -> Result<Vec<StsPair>> {
    if corpus.is_empty() || !corpus.has_latents() {
        return Err(Error::Input("STS pairs need a nonempty corpus with latents".into()));
    }
    let mut rng = seed::rng(seed);
    let m = corpus.len();
    let mut bins: Vec<Vec<(usize, usize, f64)>> = vec![Vec::new(); GOLD_BINS];
    let candidates = (n * 40).max(200);
    for _ in 0..candidates {
        let (i, j) = (rng.random_range(0..m), rng.random_range(0..m));
        let gold = gold_score(&corpus.latents[i], &corpus.latents[j]);
        let bin = ((gold / 5.0 * GOLD_BINS as f64) as usize).min(GOLD_BINS - 1);
        bins[bin].push((i, j, gold));
    }
    let mut cursors = vec![0usize; GOLD_BINS];
    let mut pairs = Vec::with_capacity(n);
    'fill: while pairs.len() < n {
        let mut progressed = false;
        for b in 0..GOLD_BINS {
            if pairs.len() == n {
                break 'fill;
            }
            if let Some(&(i, j, gold)) = bins[b].get(cursors[b]) {
                cursors[b] += 1;
                progressed = true;
                pairs.push(StsPair { tokens_a: corpus.sentences[i].clone(), tokens_b: corpus.sentences[j].clone(), gold });
            }
        }
        if !progressed {
            break;
        }
    }
    Ok(pairs)
}

/// 64-bit FNV-1a.
fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// Hashes a word into the non-reserved id range.
pub fn hash_token(word: &str, vocab_size: usize) -> u32 {
    let first = FIRST_WORD_ID as u64;
    (first + fnv1a(word.as_bytes()) % (vocab_size as u64 - first)) as u32
}

/// Reads one sentence per line, splits on whitespace and hashes words into
/// `vocab_size` buckets. Sentences are cut to `max_seq_len - 1` words so the
/// CLS slot still fits. Blank lines are skipped.
pub fn load_text_corpus(path: &Path, max_sentences: usize, vocab_size: usize, max_seq_len: usize) -> Result<Corpus> {
    if vocab_size <= FIRST_WORD_ID as usize {
        return Err(Error::config("vocab_size", "must exceed the reserved ids"));
    }
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut corpus = Corpus::default();
    for line in BufReader::new(file).lines() {
        if corpus.len() >= max_sentences {
            break;
        }
        let line = line.map_err(|e| Error::io(path, e))?;
        let ids: Vec<u32> = line
            .split_whitespace()
            .take(max_seq_len.saturating_sub(1))
            .map(|w| hash_token(w, vocab_size))
            .collect();
        if !ids.is_empty() {
            corpus.sentences.push(ids);
        }
    }
    Ok(corpus)
}

fn join_ids(ids: &[u32]) -> String {
    ids.iter().map(u32::to_string).collect::<Vec<_>>().join(" ")
}

/// Writes pairs as `tokens_a;tokens_b;gold`, token lists space-separated.
pub fn write_sts_pairs(path: &Path, pairs: &[StsPair]) -> Result<()> {
    let mut out = String::from("tokens_a;tokens_b;gold\n");
    for p in pairs {
        out.push_str(&format!("{};{};{}\n", join_ids(&p.tokens_a), join_ids(&p.tokens_b), p.gold));
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_sts_pairs(path: &Path) -> Result<Vec<StsPair>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let parse_ids = |s: &str| -> Result<Vec<u32>> {
        s.split_whitespace()
            .map(|t| t.parse().map_err(|_| Error::Input(format!("{}: bad token id {t:?}", path.display()))))
            .collect()
    };
    text.lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .map(|line| {
            let fields: Vec<&str> = line.split(';').collect();
            let [a, b, gold] = fields[..] else {
                return Err(Error::Input(format!("{}: expected 3 fields in {line:?}", path.display())));
            };
            let gold: f64 =
                gold.trim().parse().map_err(|_| Error::Input(format!("{}: bad gold {gold:?}", path.display())))?;
            Ok(StsPair { tokens_a: parse_ids(a)?, tokens_b: parse_ids(b)?, gold })
        })
        .collect()
}
