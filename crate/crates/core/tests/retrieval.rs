use percap::data::*;
use percap::retrieval::*;
use percap::tensor::{grad_check_params, with_precision, Graph, Precision, Tensor};
use percap::text::{EncoderKind, TextEncoderConfig, Vocabulary};

fn tiny_config(kind: EncoderKind, personality: bool) -> RetrievalConfig {
    let mut encoder = TextEncoderConfig::small(4);
    encoder.kind = kind;
    RetrievalConfig {
        feature_dim: 6,
        joint_dim: 5,
        image_layers: 2,
        num_traits: 3,
        personality,
        encoder,
    }
}

fn tiny_batch() -> (Tensor, Vec<usize>, Vec<Vec<usize>>) {
    let feats = Tensor::new(&[4, 6], (0..24).map(|i| ((i * 7 % 11) as f64 - 5.0) / 4.0).collect()).unwrap();
    (feats, vec![0, 2, 2, 1], vec![vec![4, 5, 6], vec![5, 7], vec![8, 4, 4, 9], vec![6]])
}

#[test]
fn zero_feature_zero_bias_gives_zero_image_vector() {
    let m = TransResNet::new(tiny_config(EncoderKind::Bow, true), 10, 1).unwrap();
    let mut g = Graph::new();
    let r = m.encode_images(&mut g, Tensor::zeros(&[2, 6])).unwrap();
    assert!(g.value(r).data().iter().all(|&x| x == 0.0));
    let mut g = Graph::new();
    assert!(m.encode_images(&mut g, Tensor::zeros(&[1, 7])).is_err());
}

#[test]
fn identity_mlp_is_relu_passthrough() {
    let cfg = RetrievalConfig {
        feature_dim: 3,
        joint_dim: 3,
        image_layers: 1,
        ..tiny_config(EncoderKind::Bow, true)
    };
    let mut m = TransResNet::new(cfg, 10, 1).unwrap();
    for name in ["image.l0.w", "image.l1.w"] {
        let id = m.params.id(name).unwrap();
        m.params.set(id, Tensor::identity(3)).unwrap();
    }
    let mut g = Graph::new();
    let r = m.encode_images(&mut g, Tensor::new(&[1, 3], vec![1.5, -2.0, 0.25]).unwrap()).unwrap();
    assert_eq!(g.value(r).data(), &[1.5, 0.0, 0.25]);
}

#[test]
fn personality_rows_and_ablation() {
    let m = TransResNet::new(tiny_config(EncoderKind::Bow, true), 10, 1).unwrap();
    let table = m.params.value(m.trait_table()).clone();
    let mut g = Graph::new();
    let p = m.encode_personality(&mut g, &[2, 0]).unwrap();
    assert_eq!(g.value(p).row(0), table.row(2));
    assert_eq!(g.value(p).row(1), table.row(0));
    assert!(m.encode_personality(&mut g, &[3]).is_err());

    let off = TransResNet::new(tiny_config(EncoderKind::Bow, false), 10, 1).unwrap();
    let mut g = Graph::new();
    let p = off.encode_personality(&mut g, &[2, 0]).unwrap();
    assert!(g.value(p).data().iter().all(|&x| x == 0.0));
}

#[test]
fn repeated_trait_gradients_accumulate() {
    let mut m = TransResNet::new(tiny_config(EncoderKind::Bow, true), 10, 1).unwrap();
    let mut g = Graph::with_precision(Precision::F64);
    let p = m.encode_personality(&mut g, &[1, 1, 0]).unwrap();
    let s = g.sum(p);
    g.backward(s).unwrap();
    g.accumulate_param_grads(&mut m.params);
    let grad = m.params.grad(m.trait_table());
    assert!(grad[5..10].iter().all(|&x| x == 2.0));
    assert!(grad[0..5].iter().all(|&x| x == 1.0));
    assert!(grad[10..15].iter().all(|&x| x == 0.0));
}

#[test]
fn score_is_bilinear_in_f32() {
    let m = TransResNet::new(tiny_config(EncoderKind::Transformer, true), 10, 2).unwrap();
    let (feats, traits, caps) = tiny_batch();
    let mut g = Graph::new();
    let s = m.score_matrix(&mut g, feats.clone(), &traits, &caps).unwrap();
    let ri = m.embed_queries(feats.clone(), &[0; 4]).unwrap();
    let rc = m.embed_captions(&caps).unwrap();
    let mut g2 = Graph::new();
    let ri_only = m.encode_images(&mut g2, feats).unwrap();
    let rp = m.encode_personality(&mut g2, &traits).unwrap();
    for i in 0..4 {
        for j in 0..4 {
            let direct = g.value(s).row(i)[j];
            let split: f64 = g2.value(ri_only).row(i).iter().zip(rc.row(j)).map(|(a, b)| a * b).sum::<f64>()
                + g2.value(rp).row(i).iter().zip(rc.row(j)).map(|(a, b)| a * b).sum::<f64>();
            assert!((direct - split).abs() <= 1e-6, "{direct} vs {split}");
        }
    }
    assert_eq!(ri.rows(), 4);
}

#[test]
fn retrieval_loss_gradients_pass_check() {
    with_precision(Precision::F64, || {
        for kind in [EncoderKind::Transformer, EncoderKind::Bow] {
            let m = TransResNet::new(tiny_config(kind, true), 10, 3).unwrap();
            let (feats, traits, caps) = tiny_batch();
            let report = grad_check_params(
                &m.params,
                |g, store| {
                    let mut mm = m.clone();
                    mm.params = store.clone();
                    mm.batch_loss(g, feats.clone(), &traits, &caps)
                },
                1e-5,
                1e-4,
                12,
                7,
            )
            .unwrap();
            assert!(report.passed, "{kind:?}: {report:?}");
            assert!(report.checked > 100);
        }
    });
}

fn default_setup(spec: &SyntheticSpec) -> (SyntheticCorpus, Vocabulary) {
    let corpus = generate_synthetic(spec).unwrap();
    let vocab = build_vocab(&corpus.records, 1).unwrap();
    (corpus, vocab)
}

fn desk_model(corpus: &SyntheticCorpus, vocab: &Vocabulary, personality: bool, seed: u64) -> TransResNet {
    let cfg = RetrievalConfig {
        feature_dim: corpus.features.dim(),
        joint_dim: 32,
        image_layers: 2,
        num_traits: corpus.traits.len(),
        personality,
        encoder: TextEncoderConfig::small(32),
    };
    TransResNet::new(cfg, vocab.len(), seed).unwrap()
}

#[test]
fn fresh_model_first_batch_loss_is_near_log_batch() {
    let (corpus, vocab) = default_setup(&SyntheticSpec::default());
    let mut m = desk_model(&corpus, &vocab, true, 0);
    let train = build_examples(&corpus.records, Split::Train, &corpus.traits, &vocab, &m).unwrap();
    let cfg = RetrievalTrainConfig {
        batch_size: 100,
        epochs: 1,
        ..Default::default()
    };
    let log = train_retrieval(&mut m, &train, &corpus.features, &cfg).unwrap();
    let first = log.batch_losses[0];
    assert!((first / 100f64.ln() - 1.0).abs() < 0.1, "first loss {first}");
}

#[test]
fn ranking_matches_brute_force_rescoring() {
    let (corpus, vocab) = default_setup(&SyntheticSpec {
        num_train: 20,
        num_test: 20,
        ..Default::default()
    });
    let m = desk_model(&corpus, &vocab, true, 4);
    let test = build_examples(&corpus.records, Split::Test, &corpus.traits, &vocab, &m).unwrap();
    let caps: Vec<Vec<usize>> = test.iter().map(|e| e.caption.clone()).collect();
    let cands = m.embed_captions(&caps).unwrap();
    let q = m.embed_queries(stack_features(&corpus.features, &[&test[0].image_id]).unwrap(), &[test[0].trait_id]).unwrap();
    let truth: Vec<bool> = test.iter().map(|e| e.image_id == test[0].image_id).collect();
    let (order, _, rank) = rank_candidates(q.row(0), &cands, &truth).unwrap();

    // Oracle: score each caption on its own graph through the plain formula.
    let mut g = Graph::new();
    let ri = m.encode_images(&mut g, stack_features(&corpus.features, &[&test[0].image_id]).unwrap()).unwrap();
    let rp = m.encode_personality(&mut g, &[test[0].trait_id]).unwrap();
    let (ri, rp) = (g.value(ri).row(0).to_vec(), g.value(rp).row(0).to_vec());
    let mut scored: Vec<(f64, usize)> = caps
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let mut g = Graph::new();
            let rc = m.encode_captions(&mut g, std::slice::from_ref(c)).unwrap();
            (score(&ri, &rp, g.value(rc).row(0)).unwrap(), i)
        })
        .collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let oracle: Vec<usize> = scored.iter().map(|s| s.1).collect();
    assert_eq!(order, oracle);
    assert_eq!(rank, oracle.iter().position(|&i| truth[i]).unwrap() + 1);
}

#[test]
fn untrained_recall_matches_chance() {
    let (corpus, vocab) = default_setup(&SyntheticSpec {
        num_train: 10,
        num_test: 600,
        captions_per_test_image: 1,
        ..Default::default()
    });
    let m = desk_model(&corpus, &vocab, true, 9);
    let test = build_examples(&corpus.records, Split::Test, &corpus.traits, &vocab, &m).unwrap();
    let r = eval_recall(&m, &test, &corpus.features, &EvalConfig { num_candidates: 50, seed: 3 }).unwrap();
    let (p, n) = (1.0 / 50.0, r.queries.len() as f64);
    let sigma = (p * (1.0 - p) / n).sqrt();
    assert!((r.r_at_1 - p).abs() <= 3.0 * sigma, "R@1 {} vs chance {p} (3σ = {})", r.r_at_1, 3.0 * sigma);
    assert!(r.r_at_1 <= r.r_at_5 && r.r_at_5 <= r.r_at_10);
    assert!(r.median_rank >= 1.0);
}

#[test]
fn zeroed_trait_table_matches_personality_off() {
    let (corpus, vocab) = default_setup(&SyntheticSpec {
        num_train: 10,
        num_test: 30,
        ..Default::default()
    });
    let mut on = desk_model(&corpus, &vocab, true, 5);
    let id = on.trait_table();
    let shape = on.params.value(id).shape().to_vec();
    on.params.set(id, Tensor::zeros(&shape)).unwrap();
    let mut off = on.clone();
    off.config.personality = false;
    let test = build_examples(&corpus.records, Split::Test, &corpus.traits, &vocab, &on).unwrap();
    let cfg = EvalConfig { num_candidates: 40, seed: 1 };
    let a = eval_recall(&on, &test, &corpus.features, &cfg).unwrap();
    let b = eval_recall(&off, &test, &corpus.features, &cfg).unwrap();
    assert_eq!(a, b);
}

#[test]
fn evaluation_is_deterministic_across_thread_counts() {
    let (corpus, vocab) = default_setup(&SyntheticSpec {
        num_train: 10,
        num_test: 40,
        ..Default::default()
    });
    let m = desk_model(&corpus, &vocab, true, 6);
    let test = build_examples(&corpus.records, Split::Test, &corpus.traits, &vocab, &m).unwrap();
    let cfg = EvalConfig { num_candidates: 30, seed: 2 };
    let run = |threads| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| eval_recall(&m, &test, &corpus.features, &cfg).unwrap())
    };
    let a = run(1);
    assert_eq!(a, run(4));
    assert_eq!(a, run(1));
}

#[test]
fn batch_larger_than_corpus_is_reduced() {
    let (corpus, vocab) = default_setup(&SyntheticSpec {
        num_train: 6,
        num_test: 2,
        ..Default::default()
    });
    let mut m = desk_model(&corpus, &vocab, true, 0);
    let train = build_examples(&corpus.records, Split::Train, &corpus.traits, &vocab, &m).unwrap();
    let log = train_retrieval(&mut m, &train, &corpus.features, &RetrievalTrainConfig { epochs: 1, ..Default::default() }).unwrap();
    assert_eq!(log.batch_losses.len(), 1);
    assert!((log.batch_losses[0] - 6f64.ln()).abs() < 0.1 * 6f64.ln());
}
