mod common;

use common::metric::{bleu_oracle, cider_oracle, corpus, Doc};
use dtnet_core::metrics::{bleu, corpus_bleu, tokenize, NGramStats};
use dtnet_tensor::RngState;
use proptest::prelude::*;

fn t(s: &str) -> Doc {
    tokenize(s)
}

#[test]
fn bleu_matches_oracle_on_a_ten_sentence_corpus() {
    let (cands, refs) = corpus();
    for n in 1..=4 {
        let got = corpus_bleu(&cands, &refs, n);
        let want = bleu_oracle(&cands, &refs, n);
        assert!((got - want).abs() < 1e-6, "BLEU-{n}: {got} vs {want}");
        assert!(got > 0.0);
    }
    for (c, r) in cands.iter().zip(&refs) {
        let got = bleu(c, r, 2);
        assert!((got - bleu_oracle(&[c.clone()], &[r.clone()], 2)).abs() < 1e-6);
    }
}

#[test]
fn cider_matches_oracle_on_a_ten_sentence_corpus() {
    let (cands, refs) = corpus();
    let stats = NGramStats::new(&refs);
    let (scores, mean) = stats.cider_d_corpus(&cands, &refs).unwrap();
    let want: Vec<f64> = cands.iter().zip(&refs).map(|(c, r)| cider_oracle(c, r, &refs)).collect();
    for (g, w) in scores.iter().zip(&want) {
        assert!((g - w).abs() < 1e-6, "{g} vs {w}");
    }
    assert!((mean - want.iter().sum::<f64>() / 10.0).abs() < 1e-6);
}

#[test]
fn identical_sentences_score_full_bleu() {
    let s = t("a red patch top left with marks");
    assert_eq!(bleu(&s, &[s.clone()], 4), 1.0);
    assert_eq!(corpus_bleu(&[s.clone(), s.clone()], &[vec![s.clone()], vec![s.clone()]], 4), 1.0);
}

#[test]
fn shorter_candidate_pays_the_brevity_penalty() {
    let got = bleu(&t("the cat sat"), &[t("the cat sat down")], 1);
    assert!((got - 0.7165).abs() < 1e-4);
}

#[test]
fn cider_hand_computed_three_document_corpus() {
    let corpus = vec![vec![t("a b")], vec![t("a c")], vec![t("d e")]];
    let stats = NGramStats::new(&corpus);
    // Unigram and bigram cosines are one, orders three and four are empty.
    let same = stats.cider_d(&t("a b"), &corpus[0]).unwrap();
    assert!((same - 5.0).abs() < 1e-12);
    let (ia, ib) = (1.5f64.ln(), 3f64.ln());
    let want = 10.0 / 4.0 * ia / (ia * ia + ib * ib).sqrt() * (-1.0f64 / 72.0).exp();
    let short = stats.cider_d(&t("a"), &corpus[0]).unwrap();
    assert!((short - want).abs() < 1e-12, "{short} vs {want}");
}

#[test]
fn empty_candidates_and_references_score_zero() {
    let (_, refs) = corpus();
    let stats = NGramStats::new(&refs);
    assert_eq!(stats.cider_d(&[], &refs[0]).unwrap(), 0.0);
    assert_eq!(stats.cider_d(&t("a"), &[]).unwrap(), 0.0);
    assert_eq!(bleu::<String>(&[], &refs[0], 1), 0.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn scores_ignore_reference_order(seed in 0u64..10_000, rot in 1usize..3) {
        let (cands, refs) = corpus();
        let mut rng = RngState::new(seed);
        let i = rng.below(10);
        let mut perm = refs[i].clone();
        let len = perm.len();
        perm.rotate_left(rot % len);
        perm.reverse();
        let stats = NGramStats::new(&refs);
        for n in 1..=4 {
            prop_assert_eq!(bleu(&cands[i], &refs[i], n), bleu(&cands[i], &perm, n));
        }
        let a = stats.cider_d(&cands[i], &refs[i]).unwrap();
        let b = stats.cider_d(&cands[i], &perm).unwrap();
        prop_assert!((a - b).abs() < 1e-9);
    }

    #[test]
    fn scores_are_bounded(words in prop::collection::vec(0usize..6, 0..10), refw in prop::collection::vec(0usize..6, 1..10)) {
        let c: Vec<usize> = words;
        let r = vec![refw];
        for n in 1..=4 {
            let b = bleu(&c, &r, n);
            prop_assert!((0.0..=1.0).contains(&b));
        }
        let stats = NGramStats::new(&[r.clone(), vec![vec![9, 9]]]);
        let s = stats.cider_d(&c, &r).unwrap();
        prop_assert!((0.0..=10.0 + 1e-9).contains(&s));
    }
}
