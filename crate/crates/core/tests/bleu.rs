use llast::bleu::{corpus_bleu, tokenize_13a, Smoothing};
use proptest::prelude::*;

const TOL: f64 = 1e-6;

#[test]
fn identity_scores_one_hundred() {
    let s = ["the cat is on the mat .", "a dog sees a bird"];
    let b = corpus_bleu(&s, &s, Smoothing::Exp).unwrap();
    assert!((b.score - 100.0).abs() < TOL);
    assert!(b.precisions.iter().all(|&p| (p - 1.0).abs() < TOL));
    assert_eq!(b.brevity_penalty, 1.0);
}

#[test]
fn hand_counted_precisions() {
    let b = corpus_bleu(&["the cat sat on the mat"], &["the cat is on the mat"], Smoothing::None).unwrap();
    let want = [5.0 / 6.0, 3.0 / 5.0, 1.0 / 4.0, 0.0 / 3.0];
    for (p, w) in b.precisions.iter().zip(want) {
        assert!((p - w).abs() < TOL, "{p} vs {w}");
    }
    assert_eq!(b.matches, [5, 3, 1, 0]);
    assert_eq!(b.totals, [6, 5, 4, 3]);
    assert_eq!(b.brevity_penalty, 1.0);
    assert_eq!(b.score, 0.0);
}

#[test]
fn unigram_counts_are_clipped() {
    let b = corpus_bleu(
        &["the the the the the the the"],
        &["the cat is on the mat"],
        Smoothing::None,
    )
    .unwrap();
    assert!((b.precisions[0] - 2.0 / 7.0).abs() < TOL);
}

#[test]
fn brevity_penalty_by_hand() {
    let b = corpus_bleu(&["the cat is on"], &["the cat is on the mat"], Smoothing::Exp).unwrap();
    let bp = (1.0f64 - 6.0 / 4.0).exp();
    assert!((b.brevity_penalty - bp).abs() < TOL);
    let p = [1.0f64, 1.0, 1.0, 1.0];
    let want = 100.0 * bp * (p.iter().map(|x| x.ln()).sum::<f64>() / 4.0).exp();
    assert!((b.score - want).abs() < TOL);
}

#[test]
fn corpus_statistics_are_pooled() {
    let hyps = ["the cat sat on the mat", "a b c d"];
    let refs = ["the cat is on the mat", "a b c d"];
    let b = corpus_bleu(&hyps, &refs, Smoothing::None).unwrap();
    assert_eq!(b.matches, [9, 6, 3, 1]);
    assert_eq!(b.totals, [10, 8, 6, 4]);
    let mean_log = [9.0 / 10.0, 6.0 / 8.0, 3.0 / 6.0, 1.0f64 / 4.0]
        .iter()
        .map(|p| p.ln())
        .sum::<f64>()
        / 4.0;
    assert!((b.score - 100.0 * mean_log.exp()).abs() < TOL);
}

#[test]
fn punctuation_is_split() {
    assert_eq!(tokenize_13a("Hello, world!"), ["Hello", ",", "world", "!"]);
    assert_eq!(
        tokenize_13a("le chat voit le chien."),
        ["le", "chat", "voit", "le", "chien", "."]
    );
}

fn sentence() -> impl Strategy<Value = String> {
    prop::collection::vec(
        prop::sample::select(vec!["the", "cat", "dog", "sees", "a", "big", "."]),
        1..8,
    )
    .prop_map(|w| w.join(" "))
}

proptest! {
    #[test]
    fn permutation_invariant(pairs in prop::collection::vec((sentence(), sentence()), 1..6), rot in 0usize..6) {
        let (h, r): (Vec<String>, Vec<String>) = pairs.iter().cloned().unzip();
        let k = rot % pairs.len();
        let mut h2 = h.clone();
        let mut r2 = r.clone();
        h2.rotate_left(k);
        r2.rotate_left(k);
        h2.reverse();
        r2.reverse();
        let a = corpus_bleu(&h, &r, Smoothing::Exp).unwrap();
        let b = corpus_bleu(&h2, &r2, Smoothing::Exp).unwrap();
        prop_assert!((a.score - b.score).abs() < 1e-9);
    }

    #[test]
    fn score_and_penalty_bounds(pairs in prop::collection::vec((sentence(), sentence()), 1..6)) {
        let (h, r): (Vec<String>, Vec<String>) = pairs.into_iter().unzip();
        let b = corpus_bleu(&h, &r, Smoothing::Exp).unwrap();
        prop_assert!(b.brevity_penalty <= 1.0);
        prop_assert_eq!(b.brevity_penalty == 1.0, b.hyp_len >= b.ref_len);
        prop_assert!((0.0..=100.0 + 1e-9).contains(&b.score));
        if b.precisions.iter().all(|&p| p > 0.0) {
            let geo = (b.precisions.iter().map(|p| p.ln()).sum::<f64>() / 4.0).exp();
            prop_assert!((b.score - 100.0 * b.brevity_penalty * geo).abs() < 1e-6);
        }
        let strict = corpus_bleu(&h, &r, Smoothing::None).unwrap();
        if strict.matches[3] == 0 {
            prop_assert_eq!(strict.score, 0.0);
        }
    }
}
