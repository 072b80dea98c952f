//! Equivalence of the production metric scorers with the brute-force oracle
//! on randomly generated tiny corpora.

mod common;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use scst_core::metrics::{bleu4, cider_d, rouge_l, NGramStats, CIDER_SIGMA};
use scst_core::{TokenId, EOS};

struct Corpus {
    cands: Vec<Vec<TokenId>>,
    refs: Vec<Vec<Vec<TokenId>>>,
}

/// Random corpus over a 12-token alphabet. References always end in EOS;
/// candidates may contain EOS anywhere, may omit it, and may be empty.
fn random_corpus(seed: u64) -> Corpus {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let vocab = 12u32;
    let images = 5;
    let mut cands = Vec::new();
    let mut refs = Vec::new();
    for _ in 0..images {
        let n_refs = rng.random_range(2..=3);
        let image_refs: Vec<Vec<TokenId>> = (0..n_refs)
            .map(|_| {
                let len = rng.random_range(3..=9);
                let mut r: Vec<TokenId> = (0..len)
                    .map(|_| {
                        let t = rng.random_range(2..vocab);
                        if t == EOS {
                            t + 1
                        } else {
                            t
                        }
                    })
                    .collect();
                r.push(EOS);
                r
            })
            .collect();
        let cand_len = rng.random_range(0..=9);
        let cand: Vec<TokenId> =
            (0..cand_len).map(|_| rng.random_range(0..vocab)).collect();
        cands.push(cand);
        refs.push(image_refs);
    }
    Corpus { cands, refs }
}

#[test]
fn metrics_match_brute_force_oracle_on_random_corpora() {
    for seed in 0..50u64 {
        let corpus = random_corpus(seed);
        let stats = NGramStats::from_refs(&corpus.refs).unwrap();

        let cd = cider_d(&corpus.cands, &corpus.refs, &stats, CIDER_SIGMA).unwrap();
        let bl = bleu4(&corpus.cands, &corpus.refs).unwrap();
        let rg = rouge_l(&corpus.cands, &corpus.refs).unwrap();

        for (i, (cand, refs)) in corpus.cands.iter().zip(corpus.refs.iter()).enumerate() {
            let want_cd = common::cider_d(cand, refs, &corpus.refs);
            assert!(
                (cd.sentence[i] - want_cd).abs() < 1e-9,
                "seed {seed} example {i}: cider {} vs oracle {want_cd}",
                cd.sentence[i]
            );
            let want_bl = common::sentence_bleu(cand, refs);
            assert!(
                (bl.sentence[i] - want_bl).abs() < 1e-9,
                "seed {seed} example {i}: bleu {} vs oracle {want_bl}",
                bl.sentence[i]
            );
            let want_rg = common::rouge_l(cand, refs);
            assert!(
                (rg.sentence[i] - want_rg).abs() < 1e-9,
                "seed {seed} example {i}: rouge {} vs oracle {want_rg}",
                rg.sentence[i]
            );
        }
        let want_corpus_bleu = common::corpus_bleu(&corpus.cands, &corpus.refs);
        assert!((bl.corpus - want_corpus_bleu).abs() < 1e-9, "seed {seed}: corpus bleu");
    }
}

#[test]
fn identity_candidates_score_max_under_oracle_and_implementation() {
    // Disjoint per-image vocabularies keep every n-gram's document frequency
    // at 1, so no level degenerates to a zero-norm vector and an identical
    // candidate must reach the ceiling exactly.
    let mut rng = ChaCha12Rng::seed_from_u64(7);
    let images = 5usize;
    let mut refs: Vec<Vec<Vec<TokenId>>> = Vec::new();
    for img in 0..images {
        let base = 10 + 10 * img as TokenId;
        let image_refs: Vec<Vec<TokenId>> = (0..2)
            .map(|_| {
                let len = rng.random_range(4..=8);
                let mut r: Vec<TokenId> =
                    (0..len).map(|_| base + rng.random_range(0..8)).collect();
                r.push(EOS);
                r
            })
            .collect();
        refs.push(image_refs);
    }
    let cands: Vec<Vec<TokenId>> = refs.iter().map(|r| r[0].clone()).collect();
    let single_refs: Vec<Vec<Vec<TokenId>>> = refs.iter().map(|r| vec![r[0].clone()]).collect();
    let stats = NGramStats::from_refs(&refs).unwrap();
    let cd = cider_d(&cands, &single_refs, &stats, CIDER_SIGMA).unwrap();
    let bl = bleu4(&cands, &single_refs).unwrap();
    let rg = rouge_l(&cands, &single_refs).unwrap();
    for i in 0..cands.len() {
        assert!((cd.sentence[i] - 10.0).abs() < 1e-9, "cider {}", cd.sentence[i]);
        assert!((bl.sentence[i] - 1.0).abs() < 1e-9);
        assert!((rg.sentence[i] - 1.0).abs() < 1e-9);
        // the oracle agrees about the ceiling
        assert!((common::cider_d(&cands[i], &single_refs[i], &refs) - 10.0).abs() < 1e-9);
    }
}
