//! Brute-force reference implementations of the sequence metrics, kept
//! deliberately naive (no maps, linear scans everywhere) so they form an
//! independent oracle for the production scorers.

#![allow(dead_code)]

pub type Tok = u32;
pub const EOS: Tok = 1;

const SIGMA: f64 = 6.0;
const BETA: f64 = 1.2;
const EPS: f64 = 1e-9;

/// Cut at the first EOS, keeping it.
pub fn truncate(seq: &[Tok]) -> Vec<Tok> {
    let mut out = Vec::new();
    for &t in seq {
        out.push(t);
        if t == EOS {
            break;
        }
    }
    out
}

fn windows(seq: &[Tok], n: usize) -> Vec<&[Tok]> {
    if seq.len() < n {
        Vec::new()
    } else {
        (0..=seq.len() - n).map(|i| &seq[i..i + n]).collect()
    }
}

fn count_of(grams: &[&[Tok]], g: &[Tok]) -> u64 {
    grams.iter().filter(|&&w| w == g).count() as u64
}

fn uniques<'a>(grams: &[&'a [Tok]]) -> Vec<&'a [Tok]> {
    let mut out: Vec<&[Tok]> = Vec::new();
    for &g in grams {
        if !out.iter().any(|&u| u == g) {
            out.push(g);
        }
    }
    out
}

/// Number of corpus images whose reference set contains the n-gram.
fn doc_freq(corpus: &[Vec<Vec<Tok>>], g: &[Tok]) -> u64 {
    corpus
        .iter()
        .filter(|image_refs| {
            image_refs.iter().any(|r| windows(r, g.len()).iter().any(|&w| w == g))
        })
        .count() as u64
}

fn idf(corpus: &[Vec<Vec<Tok>>], g: &[Tok]) -> f64 {
    (corpus.len() as f64).ln() - (doc_freq(corpus, g).max(1) as f64).ln()
}

/// CIDEr-D of one candidate against its references, document frequencies
/// from `corpus`, computed literally from the formula.
pub fn cider_d(cand: &[Tok], refs: &[Vec<Tok>], corpus: &[Vec<Vec<Tok>>]) -> f64 {
    let cand = truncate(cand);
    let mut total = 0.0;
    for r in refs {
        let delta = cand.len() as f64 - r.len() as f64;
        let penalty = (-(delta * delta) / (2.0 * SIGMA * SIGMA)).exp();
        for n in 1..=4usize {
            let cg = windows(&cand, n);
            let rg = windows(r, n);
            let mut dot = 0.0;
            for g in uniques(&cg) {
                let wc = count_of(&cg, g) as f64 * idf(corpus, g);
                let wr = count_of(&rg, g) as f64 * idf(corpus, g);
                dot += wc.min(wr) * wr;
            }
            let norm_c: f64 = uniques(&cg)
                .iter()
                .map(|g| {
                    let w = count_of(&cg, g) as f64 * idf(corpus, g);
                    w * w
                })
                .sum::<f64>()
                .sqrt();
            let norm_r: f64 = uniques(&rg)
                .iter()
                .map(|g| {
                    let w = count_of(&rg, g) as f64 * idf(corpus, g);
                    w * w
                })
                .sum::<f64>()
                .sqrt();
            if norm_c > 0.0 && norm_r > 0.0 {
                total += dot / (norm_c * norm_r) * penalty;
            }
        }
    }
    10.0 * total / (4.0 * refs.len() as f64)
}

fn clipped(cand: &[Tok], refs: &[Vec<Tok>], n: usize) -> (u64, u64) {
    let cg = windows(cand, n);
    let mut clip = 0;
    for g in uniques(&cg) {
        let c = count_of(&cg, g);
        let best = refs.iter().map(|r| count_of(&windows(r, n), g)).max().unwrap_or(0);
        clip += c.min(best);
    }
    (clip, cg.len() as u64)
}

fn closest_len(cand_len: usize, refs: &[Vec<Tok>]) -> usize {
    let mut best = refs[0].len();
    for r in refs {
        let l = r.len();
        let d = (l as i64 - cand_len as i64).abs();
        let bd = (best as i64 - cand_len as i64).abs();
        if d < bd || (d == bd && l < best) {
            best = l;
        }
    }
    best
}

fn bp(c: u64, r: u64) -> f64 {
    if c == 0 {
        0.0
    } else if c > r {
        1.0
    } else {
        (1.0 - r as f64 / c as f64).exp()
    }
}

/// Smoothed sentence BLEU-4.
pub fn sentence_bleu(cand: &[Tok], refs: &[Vec<Tok>]) -> f64 {
    let cand = truncate(cand);
    let mut log_sum = 0.0;
    for n in 1..=4usize {
        let (clip, total) = clipped(&cand, refs, n);
        let p = if total == 0 { EPS } else { (clip as f64).max(EPS) / total as f64 };
        log_sum += p.ln();
    }
    bp(cand.len() as u64, closest_len(cand.len(), refs) as u64) * (log_sum / 4.0).exp()
}

/// Corpus BLEU-4 with pooled counts.
pub fn corpus_bleu(cands: &[Vec<Tok>], refs: &[Vec<Vec<Tok>>]) -> f64 {
    let mut pooled_clip = [0u64; 4];
    let mut pooled_total = [0u64; 4];
    let mut c_len = 0u64;
    let mut r_len = 0u64;
    for (cand, cr) in cands.iter().zip(refs) {
        let cand = truncate(cand);
        for n in 1..=4usize {
            let (clip, total) = clipped(&cand, cr, n);
            pooled_clip[n - 1] += clip;
            pooled_total[n - 1] += total;
        }
        c_len += cand.len() as u64;
        r_len += closest_len(cand.len(), cr) as u64;
    }
    let mut log_sum = 0.0;
    for n in 0..4 {
        if pooled_total[n] == 0 || pooled_clip[n] == 0 {
            return 0.0;
        }
        log_sum += (pooled_clip[n] as f64 / pooled_total[n] as f64).ln();
    }
    bp(c_len, r_len) * (log_sum / 4.0).exp()
}

/// LCS length by plain recursion with memoization.
fn lcs(a: &[Tok], b: &[Tok], i: usize, j: usize, memo: &mut Vec<Vec<Option<usize>>>) -> usize {
    if i == 0 || j == 0 {
        return 0;
    }
    if let Some(v) = memo[i][j] {
        return v;
    }
    let v = if a[i - 1] == b[j - 1] {
        lcs(a, b, i - 1, j - 1, memo) + 1
    } else {
        lcs(a, b, i - 1, j, memo).max(lcs(a, b, i, j - 1, memo))
    };
    memo[i][j] = Some(v);
    v
}

/// ROUGE-L F(beta = 1.2), best reference per candidate.
pub fn rouge_l(cand: &[Tok], refs: &[Vec<Tok>]) -> f64 {
    let cand = truncate(cand);
    let mut best = 0.0f64;
    for r in refs {
        if cand.is_empty() || r.is_empty() {
            continue;
        }
        let mut memo = vec![vec![None; r.len() + 1]; cand.len() + 1];
        let l = lcs(&cand, r, cand.len(), r.len(), &mut memo) as f64;
        let p = l / cand.len() as f64;
        let rec = l / r.len() as f64;
        if p > 0.0 && rec > 0.0 {
            let b2 = BETA * BETA;
            best = best.max((1.0 + b2) * p * rec / (rec + b2 * p));
        }
    }
    best
}
