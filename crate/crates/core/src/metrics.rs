//! Sequence metrics used both for evaluation and as RL rewards:
//! CIDEr-D, corpus/sentence BLEU-4, and ROUGE-L, all over token ids.
//!
//! Scoring follows the end-of-sequence conventions of the training loop:
//! a candidate is truncated at its first EOS and the EOS token itself is
//! kept as a scorable word, so completing a sentence is rewarded and
//! run-on fragments are not. Candidates that hit the length cap without
//! emitting EOS get no EOS credit.

use std::collections::{BTreeMap, HashSet};

use crate::error::{Error, Result};
use crate::vocab::{TokenId, EOS};

/// Highest n-gram order used by CIDEr-D and BLEU.
const MAX_N: usize = 4;

/// CIDEr-D Gaussian length-penalty width.
pub const CIDER_SIGMA: f64 = 6.0;

/// Smoothing for zero clipped counts in sentence-level BLEU.
const BLEU_EPS: f64 = 1e-9;

/// ROUGE-L F-measure beta.
const ROUGE_BETA: f64 = 1.2;

/// Which metric to compute / optimize.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MetricKind {
    CiderD,
    Bleu4,
    RougeL,
}

impl MetricKind {
    pub fn parse(s: &str) -> Result<MetricKind> {
        match s {
            "cider" | "cider-d" => Ok(MetricKind::CiderD),
            "bleu" | "bleu4" => Ok(MetricKind::Bleu4),
            "rouge" | "rouge-l" => Ok(MetricKind::RougeL),
            other => Err(Error::Usage(format!("unknown reward metric '{other}'"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            MetricKind::CiderD => "cider",
            MetricKind::Bleu4 => "bleu",
            MetricKind::RougeL => "rouge",
        }
    }
}

/// Sentence- and corpus-level values of one metric over one candidate set.
#[derive(Debug, Clone)]
pub struct MetricScore {
    pub kind: MetricKind,
    pub sentence: Vec<f64>,
    pub corpus: f64,
}

/// Apply the reward tokenization: cut at the first EOS, keeping the EOS
/// token as a word. A sequence without EOS is returned unchanged.
pub fn tokenize_for_reward(seq: &[TokenId]) -> Vec<TokenId> {
    match seq.iter().position(|&t| t == EOS) {
        Some(i) => seq[..=i].to_vec(),
        None => seq.to_vec(),
    }
}

// BTreeMap keeps iteration order a pure function of the keys, so float
// accumulations over n-grams are bit-reproducible across runs.
fn ngram_counts(tokens: &[TokenId], n: usize) -> BTreeMap<&[TokenId], u64> {
    let mut map: BTreeMap<&[TokenId], u64> = BTreeMap::new();
    if tokens.len() >= n {
        for i in 0..=tokens.len() - n {
            *map.entry(&tokens[i..i + n]).or_insert(0) += 1;
        }
    }
    map
}

/// Document frequencies of all n-grams (n = 1..4) over a reference corpus,
/// counted per image: an n-gram appearing in several references of the same
/// image still counts once. Frozen after construction so rewards computed
/// from it are stationary.
#[derive(Debug, Clone)]
pub struct NGramStats {
    df: BTreeMap<Vec<TokenId>, u64>,
    corpus_images: usize,
    log_corpus: f64,
}

impl NGramStats {
    pub fn from_refs(refs_per_image: &[Vec<Vec<TokenId>>]) -> Result<NGramStats> {
        if refs_per_image.is_empty() || refs_per_image.iter().any(|r| r.is_empty()) {
            return Err(Error::Usage("reference corpus must give every image a reference".into()));
        }
        let mut df: BTreeMap<Vec<TokenId>, u64> = BTreeMap::new();
        for refs in refs_per_image {
            let mut seen: HashSet<&[TokenId]> = HashSet::new();
            for r in refs {
                for n in 1..=MAX_N {
                    seen.extend(ngram_counts(r, n).into_keys());
                }
            }
            for gram in seen {
                *df.entry(gram.to_vec()).or_insert(0) += 1;
            }
        }
        let corpus_images = refs_per_image.len();
        Ok(NGramStats { df, corpus_images, log_corpus: (corpus_images as f64).ln() })
    }

    pub fn corpus_size(&self) -> usize {
        self.corpus_images
    }

    pub fn document_frequency(&self, gram: &[TokenId]) -> u64 {
        self.df.get(gram).copied().unwrap_or(0)
    }

    /// log(corpus size) - log(max(df, 1)).
    fn idf(&self, gram: &[TokenId]) -> f64 {
        self.log_corpus - (self.document_frequency(gram).max(1) as f64).ln()
    }
}

/// TF-IDF vector of a sentence at every n, with norms and token length.
struct TfIdfVecs {
    per_n: Vec<BTreeMap<Vec<TokenId>, f64>>,
    norms: Vec<f64>,
    len: usize,
}

fn tfidf_vecs(tokens: &[TokenId], stats: &NGramStats) -> TfIdfVecs {
    let mut per_n = Vec::with_capacity(MAX_N);
    let mut norms = Vec::with_capacity(MAX_N);
    for n in 1..=MAX_N {
        let mut vec: BTreeMap<Vec<TokenId>, f64> = BTreeMap::new();
        let mut sq = 0.0;
        for (gram, count) in ngram_counts(tokens, n) {
            let w = count as f64 * stats.idf(gram);
            sq += w * w;
            vec.insert(gram.to_vec(), w);
        }
        per_n.push(vec);
        norms.push(sq.sqrt());
    }
    TfIdfVecs { per_n, norms, len: tokens.len() }
}

/// CIDEr-D of candidates against their per-example reference sets, using
/// frozen corpus statistics. Per n, the clipped TF-IDF cosine against each
/// reference is damped by a Gaussian penalty on the length difference;
/// the final score averages over n and references and scales by 10.
pub fn cider_d(
    candidates: &[Vec<TokenId>],
    refs: &[Vec<Vec<TokenId>>],
    stats: &NGramStats,
    sigma: f64,
) -> Result<MetricScore> {
    check_pairs(candidates, refs)?;
    let mut sentence = Vec::with_capacity(candidates.len());
    for (cand, cand_refs) in candidates.iter().zip(refs.iter()) {
        let cand = tokenize_for_reward(cand);
        let cv = tfidf_vecs(&cand, stats);
        let mut acc = [0.0; MAX_N];
        for r in cand_refs {
            let rv = tfidf_vecs(r, stats);
            let delta = cv.len as f64 - rv.len as f64;
            let penalty = (-(delta * delta) / (2.0 * sigma * sigma)).exp();
            for n in 0..MAX_N {
                if cv.norms[n] == 0.0 || rv.norms[n] == 0.0 {
                    continue;
                }
                let mut dot = 0.0;
                for (gram, &cw) in &cv.per_n[n] {
                    if let Some(&rw) = rv.per_n[n].get(gram) {
                        dot += cw.min(rw) * rw;
                    }
                }
                acc[n] += dot / (cv.norms[n] * rv.norms[n]) * penalty;
            }
        }
        let m = cand_refs.len() as f64;
        let score = 10.0 * acc.iter().sum::<f64>() / (MAX_N as f64 * m);
        sentence.push(score);
    }
    let corpus = mean(&sentence);
    Ok(MetricScore { kind: MetricKind::CiderD, sentence, corpus })
}

/// Clipped n-gram matches of a candidate against a reference set, and the
/// total candidate n-gram count.
fn clipped_counts(cand: &[TokenId], refs: &[Vec<TokenId>], n: usize) -> (u64, u64) {
    let cand_counts = ngram_counts(cand, n);
    let ref_counts: Vec<_> = refs.iter().map(|r| ngram_counts(r, n)).collect();
    let mut clipped = 0;
    let mut total = 0;
    for (gram, &c) in &cand_counts {
        total += c;
        let best_ref = ref_counts.iter().map(|m| m.get(gram).copied().unwrap_or(0)).max().unwrap_or(0);
        clipped += c.min(best_ref);
    }
    (clipped, total)
}

/// Reference length closest to the candidate length; ties pick the shorter.
fn closest_ref_len(cand_len: usize, refs: &[Vec<TokenId>]) -> usize {
    refs.iter()
        .map(|r| r.len())
        .min_by_key(|&l| ((l as i64 - cand_len as i64).abs(), l as i64))
        .unwrap_or(0)
}

fn brevity_penalty(cand_len: u64, ref_len: u64) -> f64 {
    if cand_len == 0 {
        0.0
    } else if cand_len > ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    }
}

/// BLEU-4. The corpus value pools clipped counts over all candidates with a
/// brevity penalty against the closest reference lengths; sentence values
/// smooth zero clipped counts with a small epsilon so they remain usable as
/// per-example rewards.
pub fn bleu4(candidates: &[Vec<TokenId>], refs: &[Vec<Vec<TokenId>>]) -> Result<MetricScore> {
    check_pairs(candidates, refs)?;
    let mut pooled_clipped = [0u64; MAX_N];
    let mut pooled_total = [0u64; MAX_N];
    let mut pooled_cand_len = 0u64;
    let mut pooled_ref_len = 0u64;
    let mut sentence = Vec::with_capacity(candidates.len());

    for (cand, cand_refs) in candidates.iter().zip(refs.iter()) {
        let cand = tokenize_for_reward(cand);
        let mut precisions = [0.0; MAX_N];
        for n in 1..=MAX_N {
            let (clipped, total) = clipped_counts(&cand, cand_refs, n);
            pooled_clipped[n - 1] += clipped;
            pooled_total[n - 1] += total;
            precisions[n - 1] = if total == 0 {
                BLEU_EPS
            } else {
                (clipped as f64).max(BLEU_EPS) / total as f64
            };
        }
        let r = closest_ref_len(cand.len(), cand_refs) as u64;
        pooled_cand_len += cand.len() as u64;
        pooled_ref_len += r;
        let bp = brevity_penalty(cand.len() as u64, r);
        let gm = (precisions.iter().map(|p| p.ln()).sum::<f64>() / MAX_N as f64).exp();
        sentence.push(bp * gm);
    }

    let corpus = {
        let mut gm_log = 0.0;
        let mut ok = true;
        for n in 0..MAX_N {
            if pooled_total[n] == 0 || pooled_clipped[n] == 0 {
                ok = false;
                break;
            }
            gm_log += (pooled_clipped[n] as f64 / pooled_total[n] as f64).ln();
        }
        if ok {
            brevity_penalty(pooled_cand_len, pooled_ref_len) * (gm_log / MAX_N as f64).exp()
        } else {
            0.0
        }
    };
    Ok(MetricScore { kind: MetricKind::Bleu4, sentence, corpus })
}

fn lcs_len(a: &[TokenId], b: &[TokenId]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for &x in a {
        for (j, &y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
        cur.iter_mut().for_each(|v| *v = 0);
    }
    prev[b.len()]
}

/// ROUGE-L: LCS F-measure with beta = 1.2, best reference taken per example.
/// The corpus value is the mean of the sentence values.
pub fn rouge_l(candidates: &[Vec<TokenId>], refs: &[Vec<Vec<TokenId>>]) -> Result<MetricScore> {
    check_pairs(candidates, refs)?;
    let beta2 = ROUGE_BETA * ROUGE_BETA;
    let mut sentence = Vec::with_capacity(candidates.len());
    for (cand, cand_refs) in candidates.iter().zip(refs.iter()) {
        let cand = tokenize_for_reward(cand);
        let mut best = 0.0f64;
        for r in cand_refs {
            if cand.is_empty() || r.is_empty() {
                continue;
            }
            let lcs = lcs_len(&cand, r) as f64;
            let p = lcs / cand.len() as f64;
            let rec = lcs / r.len() as f64;
            if p > 0.0 && rec > 0.0 {
                best = best.max((1.0 + beta2) * p * rec / (rec + beta2 * p));
            }
        }
        sentence.push(best);
    }
    let corpus = mean(&sentence);
    Ok(MetricScore { kind: MetricKind::RougeL, sentence, corpus })
}

/// Per-example sentence-level rewards of the requested kind; this is the
/// reward the RL estimators consume and is identical to the eval path.
pub fn reward_fn(
    kind: MetricKind,
    candidates: &[Vec<TokenId>],
    refs: &[Vec<Vec<TokenId>>],
    stats: &NGramStats,
) -> Result<Vec<f64>> {
    let score = match kind {
        MetricKind::CiderD => cider_d(candidates, refs, stats, CIDER_SIGMA)?,
        MetricKind::Bleu4 => bleu4(candidates, refs)?,
        MetricKind::RougeL => rouge_l(candidates, refs)?,
    };
    Ok(score.sentence)
}

fn check_pairs(candidates: &[Vec<TokenId>], refs: &[Vec<Vec<TokenId>>]) -> Result<()> {
    if candidates.len() != refs.len() {
        return Err(Error::Usage(format!(
            "{} candidates but {} reference sets",
            candidates.len(),
            refs.len()
        )));
    }
    if refs.iter().any(|r| r.is_empty()) {
        return Err(Error::Usage("every candidate needs at least one reference".into()));
    }
    Ok(())
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}
