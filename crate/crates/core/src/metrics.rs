//! Synthetic-data fidelity metrics and nearest-token decoding.
//!
//! Quantities that are mathematically undefined for the given input (for
//! example R² against constant data) are reported as `None` and serialize
//! as JSON `null`; they never propagate as NaN.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::kernels::gemm;
use crate::tensor::Tensor;
use crate::text::embedding::{embed_batch, EmbeddingTable};
use crate::text::{TokenSequence, EMBED_DIM, PAD_TEXT, SEQ_LEN};
use crate::vae::VaeParams;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Fidelity {
    pub mse: f64,
    pub r2: Option<f64>,
    pub evs: Option<f64>,
    pub mean_diff: f64,
    pub var_diff: f64,
}

fn mean_var(xs: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let (mut n, mut s) = (0usize, 0.0);
    for x in xs.clone() {
        n += 1;
        s += x;
    }
    let m = s / n as f64;
    let v = xs.map(|x| (x - m) * (x - m)).sum::<f64>() / n as f64;
    (m, v)
}

/// Elementwise comparison of paired real and synthetic data over the
/// flattened arrays.
pub fn statistical_fidelity(real: &Tensor, synth: &Tensor) -> Result<Fidelity> {
    if real.shape() != synth.shape() {
        return Err(Error::shape("statistical_fidelity", real.shape(), synth.shape()));
    }
    if real.numel() == 0 {
        return Err(Error::invalid("statistical_fidelity of empty data"));
    }
    let (r, s) = (real.data(), synth.data());
    let n = r.len() as f64;
    let resid = r.iter().zip(s).map(|(a, b)| a - b);
    let ss_res: f64 = resid.clone().map(|d| d * d).sum();
    let (mr, vr) = mean_var(r.iter().copied());
    let (ms, vs) = mean_var(s.iter().copied());
    let (_, vres) = mean_var(resid);
    let defined = vr > 0.0;
    Ok(Fidelity {
        mse: ss_res / n,
        r2: defined.then(|| 1.0 - ss_res / (vr * n)),
        evs: defined.then(|| 1.0 - vres / vr),
        mean_diff: (mr - ms).abs(),
        var_diff: (vr - vs).abs(),
    })
}

/// `a·b / (‖a‖‖b‖)`, or `None` when either vector is zero.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Option<f64> {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum();
    let nb: f64 = b.iter().map(|x| x * x).sum();
    if na == 0.0 || nb == 0.0 || a.len() != b.len() {
        return None;
    }
    Some((dot / (na * nb).sqrt()).clamp(-1.0, 1.0))
}

/// Token edit distance with unit costs.
pub fn levenshtein<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

fn ngram_counts<T: std::hash::Hash + Eq>(xs: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut m = HashMap::new();
    if xs.len() >= n {
        for w in xs.windows(n) {
            *m.entry(w).or_default() += 1;
        }
    }
    m
}

/// Clipped matches and candidate totals per order `1..=max_n`.
fn bleu_stats<T: std::hash::Hash + Eq>(reference: &[T], candidate: &[T], max_n: usize) -> Vec<(usize, usize)> {
    (1..=max_n)
        .map(|n| {
            let r = ngram_counts(reference, n);
            let c = ngram_counts(candidate, n);
            let matched = c.iter().map(|(g, &k)| k.min(r.get(g).copied().unwrap_or(0))).sum();
            (matched, candidate.len().saturating_sub(n - 1))
        })
        .collect()
}

fn bleu_from_stats(stats: &[(usize, usize)], ref_len: usize, cand_len: usize) -> f64 {
    if cand_len == 0 || stats.is_empty() {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for (i, &(m, t)) in stats.iter().enumerate() {
        let p = if i > 0 && m == 0 {
            1.0 / (t as f64 + 1.0)
        } else if t == 0 {
            return 0.0;
        } else {
            m as f64 / t as f64
        };
        if p == 0.0 {
            return 0.0;
        }
        log_sum += p.ln();
    }
    let bp = if cand_len > ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    };
    bp * (log_sum / stats.len() as f64).exp()
}

/// Sentence BLEU with add-one smoothing on empty higher orders.
pub fn bleu<T: std::hash::Hash + Eq>(reference: &[T], candidate: &[T], max_n: usize) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::invalid("bleu needs a non-empty reference"));
    }
    if max_n == 0 {
        return Err(Error::invalid("bleu max_n must be at least 1"));
    }
    Ok(bleu_from_stats(&bleu_stats(reference, candidate, max_n), reference.len(), candidate.len()))
}

/// `(corpus-level, mean of per-pair)` BLEU.
pub fn bleu_pairs<T: std::hash::Hash + Eq>(pairs: &[(&[T], &[T])], max_n: usize) -> Result<(f64, f64)> {
    if pairs.is_empty() {
        return Err(Error::invalid("bleu over no pairs"));
    }
    let mut agg = vec![(0usize, 0usize); max_n];
    let (mut rl, mut cl, mut mean) = (0, 0, 0.0);
    for (r, c) in pairs {
        mean += bleu(r, c, max_n)?;
        for (a, s) in agg.iter_mut().zip(bleu_stats(r, c, max_n)) {
            a.0 += s.0;
            a.1 += s.1;
        }
        rl += r.len();
        cl += c.len();
    }
    Ok((bleu_from_stats(&agg, rl, cl), mean / pairs.len() as f64))
}

/// Maps each embedding row to the vocabulary token of maximal cosine
/// similarity. Rows whose norm is below half the smallest vocabulary
/// vector norm decode to PAD; trailing PADs are stripped.
pub fn decode_to_tokens(vectors: &Tensor, table: &EmbeddingTable) -> Result<Vec<Vec<String>>> {
    let vocab = table.vocab();
    if vocab.is_empty() {
        return Err(Error::invalid("decode_to_tokens: empty vocabulary"));
    }
    let dim = table.dim();
    let (n, len) = match *vectors.shape() {
        [l, d] if d == dim => (1, l),
        [n, l, d] if d == dim => (n, l),
        _ => return Err(Error::shape("decode_to_tokens", vectors.shape(), &[SEQ_LEN, dim])),
    };
    let vm = table.vocab_matrix();
    let norms: Vec<f64> = vm.chunks(dim).map(|v| v.iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
    let floor = 0.5 * norms.iter().copied().filter(|&v| v > 0.0).fold(f64::INFINITY, f64::min);
    let unit: Vec<f64> = vm
        .chunks(dim)
        .zip(&norms)
        .flat_map(|(v, &nv)| v.iter().map(move |x| if nv > 0.0 { x / nv } else { 0.0 }))
        .collect();

    let data = vectors.data();
    let rows = n * len;
    let mut keep = Vec::new();
    let mut q = Vec::new();
    for r in 0..rows {
        let v = &data[r * dim..(r + 1) * dim];
        let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if nv >= floor && nv > 0.0 {
            keep.push(r);
            q.extend(v.iter().map(|x| x / nv));
        }
    }
    let mut best = vec![None; rows];
    const CHUNK: usize = 1024;
    let v = vocab.len();
    let mut scores = vec![0.0; CHUNK * v];
    for (ci, rows_chunk) in keep.chunks(CHUNK).enumerate() {
        let m = rows_chunk.len();
        let qs = &q[ci * CHUNK * dim..(ci * CHUNK + m) * dim];
        gemm(m, dim, v, qs, false, &unit, true, 0.0, &mut scores[..m * v]);
        for (k, &r) in rows_chunk.iter().enumerate() {
            let s = &scores[k * v..(k + 1) * v];
            let mut arg = 0;
            for j in 1..v {
                if s[j] > s[arg] {
                    arg = j;
                }
            }
            best[r] = Some(arg);
        }
    }
    Ok((0..n)
        .map(|i| {
            let mut toks: Vec<String> = best[i * len..(i + 1) * len]
                .iter()
                .map(|b| b.map_or_else(|| PAD_TEXT.to_string(), |j| vocab[j].clone()))
                .collect();
            while toks.last().is_some_and(|t| t == PAD_TEXT) {
                toks.pop();
            }
            toks
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QualityReport {
    pub mse: f64,
    pub r2: Option<f64>,
    pub evs: Option<f64>,
    /// Mean of per-pair sentence BLEU.
    pub bleu: f64,
    pub bleu_corpus: f64,
    /// Mean per-pair cosine over flattened matrices (pairs with a zero
    /// side are skipped).
    pub cosine: Option<f64>,
    pub levenshtein_mean: f64,
    pub mean_diff: f64,
    pub var_diff: f64,
    pub n_pairs: usize,
}

/// Full metric battery between paired real queries and synthetic vectors.
/// `synth` is `[N, SEQ_LEN, EMBED_DIM]`, or `[N, latent]` when `vae` is
/// given to decode it.
pub fn full_report(
    real: &[TokenSequence],
    synth: &Tensor,
    table: &EmbeddingTable,
    vae: Option<&VaeParams>,
) -> Result<QualityReport> {
    if real.is_empty() {
        return Err(Error::invalid("full_report over no pairs"));
    }
    let synth = match synth.ndim() {
        2 => vae
            .ok_or_else(|| Error::invalid("latent synthetic vectors need VAE params to decode"))?
            .decode(synth)?,
        _ => synth.clone(),
    };
    let real_m = embed_batch(real, table);
    if synth.shape() != real_m.shape() {
        return Err(Error::shape("full_report", real_m.shape(), synth.shape()));
    }
    let fid = statistical_fidelity(&real_m, &synth)?;
    let w = SEQ_LEN * EMBED_DIM;
    let cos: Vec<f64> = (0..real.len())
        .filter_map(|i| cosine_similarity(&real_m.data()[i * w..(i + 1) * w], &synth.data()[i * w..(i + 1) * w]))
        .collect();
    let decoded = decode_to_tokens(&synth, table)?;
    let refs: Vec<Vec<&str>> = real.iter().map(|s| s.texts()).collect();
    let cands: Vec<Vec<&str>> = decoded.iter().map(|c| c.iter().map(String::as_str).collect()).collect();
    let usable: Vec<(&[&str], &[&str])> = refs
        .iter()
        .zip(&cands)
        .filter(|(r, _)| !r.is_empty())
        .map(|(r, c)| (r.as_slice(), c.as_slice()))
        .collect();
    let (bleu_corpus, bleu_mean) = if usable.is_empty() {
        (0.0, 0.0)
    } else {
        bleu_pairs(&usable, 4)?
    };
    let lev = refs.iter().zip(&cands).map(|(r, c)| levenshtein(r, c) as f64).sum::<f64>() / real.len() as f64;
    Ok(QualityReport {
        mse: fid.mse,
        r2: fid.r2,
        evs: fid.evs,
        bleu: bleu_mean,
        bleu_corpus,
        cosine: (!cos.is_empty()).then(|| cos.iter().sum::<f64>() / cos.len() as f64),
        levenshtein_mean: lev,
        mean_diff: fid.mean_diff,
        var_diff: fid.var_diff,
        n_pairs: real.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fidelity_identity_and_shift() {
        let r = Tensor::vector(vec![1.0, 2.0, 4.0, -1.0]);
        let f = statistical_fidelity(&r, &r).unwrap();
        assert_eq!((f.mse, f.r2, f.evs, f.mean_diff, f.var_diff), (0.0, Some(1.0), Some(1.0), 0.0, 0.0));
        let s = r.map(|v| v + 0.5);
        let f = statistical_fidelity(&r, &s).unwrap();
        assert!((f.evs.unwrap() - 1.0).abs() < 1e-15);
        assert!(f.r2.unwrap() < 1.0);
    }

    #[test]
    fn mean_predictor_has_zero_r2() {
        let r = Tensor::vector(vec![1.0, 2.0, 6.0]);
        let s = Tensor::full(&[3], 3.0);
        assert!(statistical_fidelity(&r, &s).unwrap().r2.unwrap().abs() < 1e-15);
    }

    #[test]
    fn constant_real_is_undefined() {
        let r = Tensor::full(&[3], 2.0);
        let f = statistical_fidelity(&r, &Tensor::vector(vec![1.0, 2.0, 3.0])).unwrap();
        assert_eq!((f.r2, f.evs), (None, None));
        assert!(statistical_fidelity(&r, &Tensor::full(&[2], 0.0)).is_err());
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine_similarity(&[2.0, 1.0], &[2.0, 1.0]), Some(1.0));
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]), Some(0.0));
        let c = cosine_similarity(&[1.0, 0.0], &[1.0, 1.0]).unwrap();
        assert!((c - 2f64.sqrt() / 2.0).abs() < 1e-15);
        assert_eq!(cosine_similarity(&[0.0, 0.0], &[1.0, 1.0]), None);
    }

    #[test]
    fn levenshtein_examples() {
        assert_eq!(levenshtein(&["or", "1", "=", "1"], &["or", "1", "=", "1"]), 0);
        assert_eq!(levenshtein(&["or", "1", "=", "1"], &["or", "1", "=", "2"]), 1);
        assert_eq!(levenshtein::<u8>(&[], &[1, 2]), 2);
    }

    #[test]
    fn bleu_examples() {
        let r = ["a", "b", "c", "d"];
        assert_eq!(bleu(&r, &r, 4).unwrap(), 1.0);
        let got = bleu(&r, &["a", "b", "c", "e"], 4).unwrap();
        let want = (0.75f64 * (2.0 / 3.0) * 0.5 * 0.5).powf(0.25);
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        assert_eq!(bleu(&r, &[], 4).unwrap(), 0.0);
        assert!(bleu::<&str>(&[], &["a"], 4).is_err());
        assert_eq!(bleu(&["x"], &["x"], 4).unwrap(), 1.0);
    }

    #[test]
    fn bleu_corpus_matches_mean_on_identical_pairs() {
        let a = ["select", "1"];
        let b = ["x", "y", "z"];
        let (c, m) = bleu_pairs(&[(&a[..], &a[..]), (&b[..], &b[..])], 4).unwrap();
        assert_eq!((c, m), (1.0, 1.0));
    }
}
