//! Subword-augmented skip-gram embeddings with negative sampling.
//!
//! A token's vector is its word vector (when in vocabulary) plus the mean of
//! its hashed character n-gram bucket vectors, so unseen tokens still embed
//! through shared n-grams.

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::lexer::{Token, TokenSequence, SEQ_LEN};
use crate::error::{Error, Result};
use crate::io::Checkpoint;
use crate::tensor::graph::sigmoid;
use crate::tensor::Tensor;

pub const EMBED_DIM: usize = 50;
pub const BUCKET_BITS: u32 = 18;
pub const BUCKETS: usize = 1 << BUCKET_BITS;
pub const MIN_N: usize = 3;
pub const MAX_N: usize = 6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingConfig {
    pub dim: usize,
    pub window: usize,
    pub negatives: usize,
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        EmbeddingConfig {
            dim: EMBED_DIM,
            window: 5,
            negatives: 5,
            epochs: 5,
            lr: 0.05,
            seed: 0,
        }
    }
}

/// 32-bit FNV-1a, the subword bucket hash.
pub fn fnv1a32(bytes: &[u8]) -> u32 {
    let mut h: u32 = 0x811c_9dc5;
    for &b in bytes {
        h ^= u32::from(b);
        h = h.wrapping_mul(0x0100_0193);
    }
    h
}

/// Character n-grams (n in 3..=6) of `<text>`.
pub fn char_ngrams(text: &str) -> Vec<String> {
    let chars: Vec<char> = std::iter::once('<').chain(text.chars()).chain(std::iter::once('>')).collect();
    let mut grams = Vec::new();
    for n in MIN_N..=MAX_N {
        if n > chars.len() {
            break;
        }
        for start in 0..=chars.len() - n {
            grams.push(chars[start..start + n].iter().collect());
        }
    }
    grams
}

pub fn ngram_buckets(text: &str) -> Vec<usize> {
    char_ngrams(text)
        .iter()
        .map(|g| fnv1a32(g.as_bytes()) as usize & (BUCKETS - 1))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingRecord {
    pub config: EmbeddingConfig,
    /// Mean loss per epoch.
    pub epoch_loss: Vec<f64>,
    /// Mean loss per processed sequence, in processing order.
    pub loss_trace: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    dim: usize,
    vocab: Vec<String>,
    index: HashMap<String, usize>,
    words: Vec<f64>,
    buckets: Vec<f64>,
    pub record: TrainingRecord,
}

impl EmbeddingTable {
    /// Assembles a table from stored parts (checkpoint loading).
    pub fn from_parts(
        dim: usize,
        vocab: Vec<String>,
        words: Vec<f64>,
        buckets: Vec<f64>,
        record: TrainingRecord,
    ) -> Result<Self> {
        if dim != EMBED_DIM {
            return Err(Error::invalid(format!("embedding dimension must be {EMBED_DIM}, got {dim}")));
        }
        if words.len() != vocab.len() * dim || buckets.len() != BUCKETS * dim {
            return Err(Error::data("embedding table parts have inconsistent sizes"));
        }
        let index = vocab.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        Ok(EmbeddingTable {
            dim,
            vocab,
            index,
            words,
            buckets,
            record,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn word_vectors(&self) -> &[f64] {
        &self.words
    }

    pub fn bucket_vectors(&self) -> &[f64] {
        &self.buckets
    }

    /// Composed vector of `token`; zero for PAD.
    pub fn vector(&self, token: &str) -> Vec<f64> {
        let mut v = vec![0.0; self.dim];
        if token == super::lexer::PAD_TEXT {
            return v;
        }
        if let Some(&i) = self.index.get(token) {
            v.copy_from_slice(&self.words[i * self.dim..(i + 1) * self.dim]);
        }
        let b = ngram_buckets(token);
        let inv = 1.0 / b.len() as f64;
        for &bi in &b {
            for (a, x) in v.iter_mut().zip(&self.buckets[bi * self.dim..(bi + 1) * self.dim]) {
                *a += x * inv;
            }
        }
        v
    }

    fn token_vector(&self, token: &Token) -> Vec<f64> {
        if token.is_pad() {
            vec![0.0; self.dim]
        } else {
            self.vector(&token.text)
        }
    }

    /// Composed vectors of the whole vocabulary, `[V, dim]` row-major.
    pub fn vocab_matrix(&self) -> Vec<f64> {
        self.vocab.iter().flat_map(|w| self.vector(w)).collect()
    }

    /// Only touched bucket rows are stored; the rest are zero by
    /// construction and the full table is 100 MB.
    pub fn to_checkpoint(&self) -> Checkpoint {
        let live: Vec<usize> = (0..BUCKETS)
            .filter(|&b| self.buckets[b * self.dim..(b + 1) * self.dim].iter().any(|&v| v != 0.0))
            .collect();
        let rows: Vec<f64> = live
            .iter()
            .flat_map(|&b| self.buckets[b * self.dim..(b + 1) * self.dim].iter().copied())
            .collect();
        let mut c = Checkpoint::new("embedding").with_meta(serde_json::json!({
            "dim": self.dim,
            "vocab": self.vocab,
            "record": self.record,
        }));
        c.push("words", Tensor::new(vec![self.vocab.len(), self.dim], self.words.clone()).expect("consistent"));
        c.push("bucket_index", Tensor::new(vec![live.len()], live.iter().map(|&b| b as f64).collect()).expect("consistent"));
        c.push("bucket_rows", Tensor::new(vec![live.len(), self.dim], rows).expect("consistent"));
        c
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        c.expect_kind("embedding")?;
        let field = |k: &str| c.meta.get(k).cloned().ok_or_else(|| Error::data(format!("embedding checkpoint lacks {k}")));
        let dim: usize = serde_json::from_value(field("dim")?)?;
        let vocab: Vec<String> = serde_json::from_value(field("vocab")?)?;
        let record: TrainingRecord = serde_json::from_value(field("record")?)?;
        let index = c.require("bucket_index")?;
        let rows = c.require("bucket_rows")?;
        if rows.shape() != [index.numel(), dim] {
            return Err(Error::data("embedding checkpoint bucket rows do not match the index"));
        }
        let mut buckets = vec![0.0; BUCKETS * dim];
        for (k, &b) in index.data().iter().enumerate() {
            if b < 0.0 || b.fract() != 0.0 || b as usize >= BUCKETS {
                return Err(Error::data(format!("bucket index {b} out of range")));
            }
            let b = b as usize;
            buckets[b * dim..(b + 1) * dim].copy_from_slice(&rows.data()[k * dim..(k + 1) * dim]);
        }
        Self::from_parts(dim, vocab, c.require("words")?.data().to_vec(), buckets, record)
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// Trains skip-gram with negative sampling on the token texts of `corpus`.
pub fn train_embeddings(corpus: &[TokenSequence], config: &EmbeddingConfig) -> Result<EmbeddingTable> {
    if config.dim != EMBED_DIM {
        return Err(Error::invalid(format!("embedding dimension must be {EMBED_DIM}, got {}", config.dim)));
    }
    let sentences: Vec<Vec<&str>> = corpus.iter().map(|s| s.texts()).filter(|s| !s.is_empty()).collect();
    if sentences.is_empty() {
        return Err(Error::invalid("cannot train embeddings on an empty corpus"));
    }
    let dim = config.dim;

    let mut counts: HashMap<&str, u64> = HashMap::new();
    for s in &sentences {
        for t in s {
            *counts.entry(t).or_default() += 1;
        }
    }
    let mut vocab: Vec<(&str, u64)> = counts.into_iter().collect();
    vocab.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    let index: HashMap<&str, usize> = vocab.iter().enumerate().map(|(i, (w, _))| (*w, i)).collect();
    let v = vocab.len();

    let mut rng = crate::rng::seeded(config.seed);
    let bound = 1.0 / dim as f64;
    let mut words: Vec<f64> = (0..v * dim).map(|_| rng.random_range(-bound..bound)).collect();
    let mut buckets = vec![0.0; BUCKETS * dim];
    let mut output = vec![0.0; v * dim];

    // unigram^0.75 sampling distribution
    let mut cdf = Vec::with_capacity(v);
    let mut acc = 0.0;
    for (_, c) in &vocab {
        acc += (*c as f64).powf(0.75);
        cdf.push(acc);
    }
    let total_mass = acc;

    let encoded: Vec<Vec<usize>> = sentences.iter().map(|s| s.iter().map(|t| index[t]).collect()).collect();
    let subwords: Vec<Vec<usize>> = vocab.iter().map(|(w, _)| ngram_buckets(w)).collect();

    let total_tokens: usize = encoded.iter().map(Vec::len).sum::<usize>() * config.epochs.max(1);
    let mut processed = 0usize;
    let mut epoch_loss = Vec::with_capacity(config.epochs);
    let mut loss_trace = Vec::new();
    let mut h = vec![0.0; dim];
    let mut gh = vec![0.0; dim];

    for _epoch in 0..config.epochs {
        let order = crate::rng::permutation(&mut rng, encoded.len());
        let (mut e_loss, mut e_pairs) = (0.0, 0usize);
        for &si in &order {
            let sent = &encoded[si];
            let (mut s_loss, mut s_pairs) = (0.0, 0usize);
            for (i, &center) in sent.iter().enumerate() {
                let lr = config.lr * (1.0 - processed as f64 / total_tokens as f64).max(1e-4);
                processed += 1;
                let span = rng.random_range(1..=config.window.max(1));
                let lo = i.saturating_sub(span);
                let hi = (i + span).min(sent.len() - 1);
                let grams = &subwords[center];
                let inv = 1.0 / grams.len() as f64;
                for j in lo..=hi {
                    if j == i {
                        continue;
                    }
                    h.copy_from_slice(&words[center * dim..(center + 1) * dim]);
                    for &b in grams {
                        for (a, x) in h.iter_mut().zip(&buckets[b * dim..(b + 1) * dim]) {
                            *a += x * inv;
                        }
                    }
                    gh.iter_mut().for_each(|x| *x = 0.0);
                    let mut pair_loss = 0.0;
                    for k in 0..=config.negatives {
                        let (target, label) = if k == 0 {
                            (sent[j], 1.0)
                        } else {
                            let r = rng.random::<f64>() * total_mass;
                            let t = cdf.partition_point(|&c| c <= r).min(v - 1);
                            if t == sent[j] {
                                continue;
                            }
                            (t, 0.0)
                        };
                        let out = &mut output[target * dim..(target + 1) * dim];
                        let score = sigmoid(out.iter().zip(&h).map(|(a, b)| a * b).sum());
                        pair_loss -= if label > 0.0 {
                            score.max(1e-12).ln()
                        } else {
                            (1.0 - score).max(1e-12).ln()
                        };
                        let g = lr * (label - score);
                        for ((ghv, ov), hv) in gh.iter_mut().zip(out.iter_mut()).zip(&h) {
                            *ghv += g * *ov;
                            *ov += g * hv;
                        }
                    }
                    for (w, g) in words[center * dim..(center + 1) * dim].iter_mut().zip(&gh) {
                        *w += g;
                    }
                    for &b in grams {
                        for (x, g) in buckets[b * dim..(b + 1) * dim].iter_mut().zip(&gh) {
                            *x += g * inv;
                        }
                    }
                    s_loss += pair_loss;
                    s_pairs += 1;
                }
            }
            if s_pairs > 0 {
                loss_trace.push(s_loss / s_pairs as f64);
                e_loss += s_loss;
                e_pairs += s_pairs;
            }
        }
        let mean = if e_pairs > 0 { e_loss / e_pairs as f64 } else { 0.0 };
        if !mean.is_finite() {
            return Err(Error::non_finite("embedding training loss"));
        }
        epoch_loss.push(mean);
    }

    EmbeddingTable::from_parts(
        dim,
        vocab.iter().map(|(w, _)| w.to_string()).collect(),
        words,
        buckets,
        TrainingRecord {
            config: config.clone(),
            epoch_loss,
            loss_trace,
        },
    )
}

/// One embedded query: a `[SEQ_LEN, dim]` matrix plus optional label.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddedQuery {
    pub matrix: Tensor,
    pub label: Option<u8>,
}

pub fn embed(seq: &TokenSequence, table: &EmbeddingTable) -> EmbeddedQuery {
    let data = seq.tokens().iter().flat_map(|t| table.token_vector(t)).collect();
    EmbeddedQuery {
        matrix: Tensor::from_parts(vec![SEQ_LEN, table.dim()], data),
        label: None,
    }
}

/// Embeds a batch into one `[N, SEQ_LEN, dim]` tensor.
pub fn embed_batch(seqs: &[TokenSequence], table: &EmbeddingTable) -> Tensor {
    let mut data = Vec::with_capacity(seqs.len() * SEQ_LEN * table.dim());
    for s in seqs {
        for t in s.tokens() {
            data.extend(table.token_vector(t));
        }
    }
    Tensor::from_parts(vec![seqs.len(), SEQ_LEN, table.dim()], data)
}
