mod common;

use common::{metric_cases, split};
use indexmap::IndexMap;
use percap::metrics::{bleu, evaluate_captions, ReferenceCorpus};
use percap::Error;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn fixture_suite_matches_oracle() {
    let cases = metric_cases();
    assert!(cases.len() >= 10);
    for c in &cases {
        let err = c.max_error();
        assert!(err <= 1e-6, "{}: max error {err}", c.name);
    }
}

#[test]
fn fixture_contains_anchor_cases() {
    let cases = metric_cases();
    let by_name = |n: &str| cases.iter().find(|c| c.name == n).unwrap().report();
    let clipped = by_name("clipped_unigram");
    assert!((clipped.bleu1 - 1.0 / 3.0).abs() < 1e-12);
    let id = by_name("identity_three_images");
    assert!((id.bleu1 - 1.0).abs() < 1e-12 && (id.bleu4 - 1.0).abs() < 1e-12);
    assert!((id.rouge_l - 1.0).abs() < 1e-12);
    assert!((id.cider - 10.0).abs() < 1e-9);
    let single = by_name("identity_single_image");
    assert!((single.rouge_l - 1.0).abs() < 1e-12 && (single.bleu4 - 1.0).abs() < 1e-12);
}

#[test]
fn ranges_and_bleu_order_hold_on_fixtures() {
    for c in metric_cases() {
        let r = c.report();
        for v in [r.bleu1, r.bleu2, r.bleu3, r.bleu4, r.rouge_l] {
            assert!((0.0..=1.0).contains(&v), "{}: {v}", c.name);
        }
        assert!((0.0..=10.0 + 1e-9).contains(&r.cider), "{}", c.name);
        // BLEU-4 <= BLEU-1 whenever n-gram precision does not grow with n
        let refs: Vec<Vec<Vec<String>>> = c.references.values().map(|v| v.iter().map(|s| split(s)).collect()).collect();
        let cands: Vec<Vec<String>> = c.references.keys().map(|k| split(&c.predictions[k])).collect();
        let st = bleu(&cands, &refs, 4);
        let p: Vec<f64> = (0..4).map(|k| st.matches[k] as f64 / st.totals[k].max(1) as f64).collect();
        if p.windows(2).all(|w| w[1] <= w[0]) {
            assert!(r.bleu4 <= r.bleu1 + 1e-12, "{}", c.name);
        }
    }
}

#[test]
fn short_candidates_can_lift_higher_orders() {
    // "green tea" adds to the unigram and bigram totals only, so p3 > p1
    let c = metric_cases().into_iter().find(|c| c.name == "disjoint").unwrap();
    let r = c.report();
    assert!(r.bleu4 > r.bleu1);
}

#[test]
fn prediction_order_is_irrelevant() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for c in metric_cases() {
        let mut preds = c.predictions();
        let base = evaluate_captions(&preds, &c.corpus()).unwrap();
        preds.shuffle(&mut rng);
        assert_eq!(evaluate_captions(&preds, &c.corpus()).unwrap(), base, "{}", c.name);
    }
}

#[test]
fn vocabulary_renaming_is_irrelevant() {
    for c in metric_cases() {
        let rename = |s: &str| split(s).iter().map(|w| format!("zz{}", w.chars().rev().collect::<String>())).collect::<Vec<_>>();
        let refs: IndexMap<String, Vec<Vec<String>>> = c
            .references
            .iter()
            .map(|(k, v)| (k.clone(), v.iter().map(|r| rename(r)).collect()))
            .collect();
        let preds: Vec<_> = c.predictions.iter().map(|(k, v)| (k.clone(), rename(v))).collect();
        let renamed = evaluate_captions(&preds, &ReferenceCorpus::new(refs).unwrap()).unwrap();
        let base = c.report();
        for (a, b) in [
            (renamed.bleu1, base.bleu1),
            (renamed.bleu4, base.bleu4),
            (renamed.rouge_l, base.rouge_l),
            (renamed.cider, base.cider),
        ] {
            assert!((a - b).abs() < 1e-12, "{}", c.name);
        }
    }
}

#[test]
fn missing_prediction_aborts_with_listing() {
    let c = &metric_cases()[5];
    let mut preds = c.predictions();
    let dropped = preds.pop().unwrap().0;
    match evaluate_captions(&preds, &c.corpus()) {
        Err(Error::Validation(msgs)) => assert!(msgs.iter().any(|m| m.contains(&dropped))),
        other => panic!("expected validation error, got {other:?}"),
    }
    preds.push(("nope".into(), split("a b")));
    assert!(evaluate_captions(&preds, &c.corpus()).is_err());
}

#[test]
fn references_beat_random_vocabulary_strings() {
    let data = percap::data::generate_synthetic(&Default::default()).unwrap();
    let corpus = ReferenceCorpus::from_records(&data.records, percap::data::Split::Test).unwrap();
    let vocab: Vec<String> = {
        let mut v: Vec<String> = corpus.ids().flat_map(|id| corpus.references(id).unwrap().iter().flatten().cloned()).collect();
        v.sort();
        v.dedup();
        v
    };
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let first: Vec<_> = corpus.ids().map(|id| (id.to_string(), corpus.references(id).unwrap()[0].clone())).collect();
    let random: Vec<_> = first
        .iter()
        .map(|(id, r)| (id.clone(), (0..r.len()).map(|_| vocab[rng.random_range(0..vocab.len())].clone()).collect::<Vec<_>>()))
        .collect();
    let a = evaluate_captions(&first, &corpus).unwrap();
    let b = evaluate_captions(&random, &corpus).unwrap();
    assert!(a.bleu1 >= b.bleu1 && a.bleu4 >= b.bleu4 && a.rouge_l >= b.rouge_l && a.cider >= b.cider);
}

#[test]
fn corpus_bleu_pools_brevity() {
    // per-sentence BP would be exp(1-2)=0.37 for the first and 1 for the second;
    // pooled, c=6 > r=5 so BP=1
    let cands = [split("a b"), split("c d e f")];
    let refs = [vec![split("a b c")], vec![split("c d")]];
    let st = bleu(&cands, &refs, 1);
    assert_eq!((st.candidate_len, st.reference_len), (6, 5));
    assert!((st.scores(1)[0] - 4.0 / 6.0).abs() < 1e-12);
}
