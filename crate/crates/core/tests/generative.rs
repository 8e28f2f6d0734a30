use percap::generative::*;
use percap::tensor::{grad_check_params, with_precision, Graph, Precision, Tensor};
use percap::text::{BOS, EOS, PAD};
use percap::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const V: usize = 9;
const P: usize = 4;
const F: usize = 3;

fn tiny(kind: DecoderKind, personality: bool) -> Decoder {
    let cfg = DecoderConfig {
        kind,
        feature_dim: F,
        embed_dim: 4,
        hidden_dim: 5,
        att_dim: 3,
        vocab_size: V,
        num_traits: 3,
        personality,
        max_len: 6,
    };
    Decoder::new(cfg, 11).unwrap()
}

fn feats(kind: DecoderKind, b: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape: Vec<usize> = if kind.attends() { vec![b, P, F] } else { vec![b, F] };
    let n = shape.iter().product();
    Tensor::new(&shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn one(t: &Tensor, i: usize) -> Tensor {
    let per = t.numel() / t.shape()[0];
    let mut shape = t.shape().to_vec();
    shape[0] = 1;
    Tensor::new(&shape, t.data()[i * per..(i + 1) * per].to_vec()).unwrap()
}

fn targets() -> Vec<Vec<usize>> {
    vec![vec![4, 5, 6, EOS], vec![7, EOS], vec![8, 4, 4, 5, EOS]]
}

fn zero_all(d: &mut Decoder) {
    let ids: Vec<_> = d.params.ids().collect();
    for id in ids {
        let shape = d.params.value(id).shape().to_vec();
        d.params.set(id, Tensor::zeros(&shape)).unwrap();
    }
}

#[test]
fn grid_reduction_is_position_shared_and_linear() {
    let d = tiny(DecoderKind::UpDown, true);
    let mut g = Graph::new();
    let x = Tensor::new(&[1, P, F], [0.3, -0.2, 0.9].repeat(P)).unwrap();
    let r = d.reduce_image(&mut g, x).unwrap();
    let r = g.value(r);
    assert_eq!(r.shape(), &[1, P, 4]);
    for p in 1..P {
        assert_eq!(&r.data()[..4], &r.data()[p * 4..(p + 1) * 4]);
    }
    let z = d.reduce_image(&mut g, Tensor::zeros(&[2, P, F])).unwrap();
    assert!(g.value(z).data().iter().all(|&v| v == 0.0));
}

#[test]
fn feature_rank_must_match_kind() {
    let st = tiny(DecoderKind::ShowTell, true);
    let mut g = Graph::new();
    assert!(matches!(st.reduce_image(&mut g, feats(DecoderKind::UpDown, 1, 0)), Err(Error::Config(_))));
    let ud = tiny(DecoderKind::UpDown, true);
    assert!(matches!(ud.reduce_image(&mut g, feats(DecoderKind::ShowTell, 1, 0)), Err(Error::Config(_))));
    assert!(matches!("lstm".parse::<DecoderKind>(), Err(Error::Config(_))));
}

fn set(d: &mut Decoder, name: &str, t: Tensor) {
    let id = d.params.id(name).unwrap();
    d.params.set(id, t).unwrap();
}

#[test]
fn attention_weights_behave() {
    let mut d = tiny(DecoderKind::ShowAttTell, true);
    let mut g = Graph::new();
    // identical positions: context equals that vector whatever the weights
    let x = Tensor::new(&[1, P, F], [0.5, 0.1, -0.4].repeat(P)).unwrap();
    let mem = d.encode_images(&mut g, x.clone()).unwrap();
    let q = g.constant(Tensor::new(&[1, 5], vec![0.3, -1.0, 0.2, 0.7, 0.1]).unwrap());
    let (ctx, w) = d.attend(&mut g, &mem, q).unwrap();
    let cell = d.reduce_image(&mut g, x).unwrap();
    let cell = g.value(cell).data()[..4].to_vec();
    for (a, b) in g.value(ctx).data().iter().zip(&cell) {
        assert!((a - b).abs() < 1e-6);
    }
    assert!((g.value(w).sum() - 1.0).abs() < 1e-6);

    // zero v: uniform weights
    set(&mut d, "att.v", Tensor::zeros(&[3, 1]));
    let mut g = Graph::new();
    let mem = d.encode_images(&mut g, feats(DecoderKind::ShowAttTell, 2, 3)).unwrap();
    let q = g.constant(Tensor::full(&[2, 5], 0.4));
    let (_, w) = d.attend(&mut g, &mem, q).unwrap();
    assert!(g.value(w).data().iter().all(|&v| (v - 1.0 / P as f64).abs() < 1e-6));

    // one position scoring +2000 above the rest takes all the weight
    let mut wp = Tensor::zeros(&[4, 3]);
    wp.data_mut()[0] = 1000.0;
    set(&mut d, "att.w_p", wp);
    set(&mut d, "att.w_q", Tensor::zeros(&[5, 3]));
    set(&mut d, "att.v", Tensor::new(&[3, 1], vec![1000.0, 0.0, 0.0]).unwrap());
    set(&mut d, "image.reduce.w", Tensor::new(&[3, 4], vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap());
    let mut grid = vec![-1.0, 0.0, 0.0].repeat(P);
    grid[2 * F] = 1.0;
    let mut g = Graph::new();
    let mem = d.encode_images(&mut g, Tensor::new(&[1, P, F], grid).unwrap()).unwrap();
    let q = g.constant(Tensor::zeros(&[1, 5]));
    let (_, w) = d.attend(&mut g, &mem, q).unwrap();
    assert!(g.value(w).data()[2] >= 1.0 - 1e-6);
}

#[test]
fn zero_weights_give_uniform_logits() {
    for kind in DecoderKind::ALL {
        let mut d = tiny(kind, true);
        zero_all(&mut d);
        let mut g = Graph::new();
        let mem = d.encode_images(&mut g, feats(kind, 2, 1)).unwrap();
        let st = d.initial_state(&mut g, &mem, &[0, 2]).unwrap();
        let (logits, _) = d.step(&mut g, &mem, &st, &[BOS, BOS], &[0, 2]).unwrap();
        let p = g.softmax(logits, 1).unwrap();
        assert!(g.value(p).data().iter().all(|&v| (v - 1.0 / V as f64).abs() < 1e-7), "{kind}");
    }
}

#[test]
fn step_distributions_sum_to_one() {
    for kind in DecoderKind::ALL {
        let d = tiny(kind, true);
        let s = DecoderSession::new(&d, one(&feats(kind, 1, 5), 0), 1).unwrap();
        let mut st = vec![s.initial().unwrap(); 2];
        let mut prev = vec![BOS, BOS];
        for t in 0..4 {
            let (lps, next) = s.step(&st, &prev).unwrap();
            for lp in &lps {
                let total: f64 = lp.iter().map(|l| l.exp()).sum();
                assert!((total - 1.0).abs() < 1e-6, "{kind} step {t}: {total}");
            }
            st = next;
            prev = vec![4 + t, 5];
        }
    }
}

/// Copies `off`'s weights into `on`, zero-filling the trait rows of every
/// LSTM input matrix and zeroing the trait table.
fn zero_extend(off: &Decoder, on: &mut Decoder) {
    for (name, v) in off.params.named_values() {
        let id = on.params.id(name).unwrap();
        let target = on.params.value(id).shape().to_vec();
        let mut t = Tensor::zeros(&target);
        t.data_mut()[..v.numel()].copy_from_slice(v.data());
        on.params.set(id, t).unwrap();
    }
    let table = on.trait_table();
    let shape = on.params.value(table).shape().to_vec();
    on.params.set(table, Tensor::zeros(&shape)).unwrap();
}

#[test]
fn personality_off_matches_zeroed_table() {
    for kind in DecoderKind::ALL {
        let off = tiny(kind, false);
        let mut on = tiny(kind, true);
        zero_extend(&off, &mut on);
        let x = feats(kind, 3, 8);
        let mut g1 = Graph::new();
        let a = off.sequence_logprobs(&mut g1, x.clone(), &[0, 1, 2], &targets()).unwrap();
        let mut g2 = Graph::new();
        let b = on.sequence_logprobs(&mut g2, x, &[0, 1, 2], &targets()).unwrap();
        assert!(g1.value(a).max_abs_diff(g2.value(b)) < 1e-9, "{kind}");
    }
}

#[test]
fn loss_gradients_pass_check() {
    with_precision(Precision::F64, || {
        for kind in DecoderKind::ALL {
            let d = tiny(kind, true);
            let x = feats(kind, 3, 2);
            let report = grad_check_params(
                &d.params,
                |g, store| {
                    let mut m = d.clone();
                    m.params = store.clone();
                    m.xe_loss(g, x.clone(), &[0, 1, 2], &targets())
                },
                1e-5,
                1e-4,
                10,
                3,
            )
            .unwrap();
            assert!(report.passed, "{kind}: {report:?}");
        }
    });
}

#[test]
fn scst_surrogate_gradient_with_frozen_sample() {
    with_precision(Precision::F64, || {
        for kind in DecoderKind::ALL {
            let d = tiny(kind, true);
            let x = feats(kind, 3, 4);
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            let samples: Vec<Vec<usize>> = (0..3)
                .map(|i| sample(&DecoderSession::new(&d, one(&x, i), i).unwrap(), 6, &mut rng).unwrap().target())
                .filter(|t| !t.is_empty())
                .collect();
            let n = samples.len();
            let adv = [0.7, -1.3, 2.0];
            let report = grad_check_params(
                &d.params,
                |g, store| {
                    let mut m = d.clone();
                    m.params = store.clone();
                    m.scst_loss(g, x.clone(), &[0, 1, 2][..n], &samples, &adv[..n])
                },
                1e-5,
                1e-4,
                10,
                5,
            )
            .unwrap();
            assert!(report.passed, "{kind}: {report:?}");
        }
    });
}

#[test]
fn zero_advantage_gives_zero_gradient() {
    let mut d = tiny(DecoderKind::UpDown, true);
    let x = feats(DecoderKind::UpDown, 2, 6);
    let mut g = Graph::new();
    let loss = d.scst_loss(&mut g, x, &[0, 1], &targets()[..2], &[0.0, 0.0]).unwrap();
    g.backward(loss).unwrap();
    g.accumulate_param_grads(&mut d.params);
    let ids: Vec<_> = d.params.ids().collect();
    assert!(ids.iter().all(|&id| d.params.grad(id).iter().all(|&v| v == 0.0)));
}

#[test]
fn padding_is_masked() {
    for kind in DecoderKind::ALL {
        let d = tiny(kind, true);
        let x = feats(kind, 3, 9);
        let mut g = Graph::new();
        let a = d.xe_loss(&mut g, x.clone(), &[0, 1, 2], &targets()).unwrap();
        let padded: Vec<Vec<usize>> = targets()
            .into_iter()
            .map(|mut t| {
                t.extend([PAD, PAD, PAD]);
                t
            })
            .collect();
        let b = d.xe_loss(&mut g, x, &[0, 1, 2], &padded).unwrap();
        assert!((g.value(a).item() - g.value(b).item()).abs() < 1e-6, "{kind}");
    }
}

#[test]
fn loss_is_invariant_to_batch_order() {
    for kind in DecoderKind::ALL {
        let d = tiny(kind, true);
        let x = feats(kind, 3, 10);
        let mut g = Graph::new();
        let a = d.xe_loss(&mut g, x.clone(), &[0, 1, 2], &targets()).unwrap();
        let order = [2, 0, 1];
        let parts: Vec<Tensor> = order.iter().map(|&i| one(&x, i)).collect();
        let mut data = Vec::new();
        for p in &parts {
            data.extend_from_slice(p.data());
        }
        let xp = Tensor::new(x.shape(), data).unwrap();
        let tp: Vec<Vec<usize>> = order.iter().map(|&i| targets()[i].clone()).collect();
        let b = d.xe_loss(&mut g, xp, &order, &tp).unwrap();
        assert!((g.value(a).item() - g.value(b).item()).abs() < 1e-5, "{kind}");
    }
}

#[test]
fn session_scores_match_teacher_forcing() {
    for kind in DecoderKind::ALL {
        let d = tiny(kind, true);
        let x = feats(kind, 1, 12);
        let s = DecoderSession::new(&d, x.clone(), 2).unwrap();
        let dec = greedy(&s, 6).unwrap();
        let target = dec.target();
        let mut g = Graph::new();
        let lp = d.sequence_logprobs(&mut g, x, &[2], &[target]).unwrap();
        assert!((g.value(lp).item() - dec.log_prob).abs() < 1e-5, "{kind}");
    }
}

#[test]
fn beam_widths_are_consistent() {
    for kind in DecoderKind::ALL {
        let d = tiny(kind, true);
        let x = feats(kind, 4, 13);
        for i in 0..4 {
            let s = DecoderSession::new(&d, one(&x, i), i % 3).unwrap();
            let gr = greedy(&s, 6).unwrap();
            let b1 = beam_search(&s, &DecodeConfig { beam: 1, max_len: 6, monotone: true }).unwrap();
            assert_eq!(b1, gr, "{kind}");
            let mut last = b1.log_prob;
            for beam in 2..=4 {
                let b = beam_search(&s, &DecodeConfig { beam, max_len: 6, monotone: true }).unwrap();
                assert!(b.log_prob >= last - 1e-12, "{kind} beam {beam}");
                last = b.log_prob;
            }
        }
    }
}

#[test]
fn short_max_len_is_rejected() {
    let cfg = DecodeConfig { beam: 2, max_len: 2, monotone: true };
    assert!(matches!(cfg.validate(), Err(Error::Config(_))));
}

#[test]
fn decoders_share_all_but_architecture_tensors() {
    let names = |k| -> Vec<String> { tiny(k, true).params.manifest().into_iter().map(|(n, _)| n).collect() };
    let shared = ["word_emb", "personality.table", "image.reduce.w", "image.reduce.b", "out.w", "out.b"];
    for k in DecoderKind::ALL {
        let n = names(k);
        assert!(shared.iter().all(|s| n.iter().any(|x| x == s)), "{k}");
    }
    let st = names(DecoderKind::ShowTell);
    assert!(st.iter().all(|n| !n.starts_with("att.")));
    let sat = names(DecoderKind::ShowAttTell);
    assert!(sat.contains(&"lstm.w_ctx".to_string()) && sat.contains(&"att.v".to_string()));
    let ud = names(DecoderKind::UpDown);
    assert!(ud.contains(&"lstm1.w_ih".to_string()) && ud.contains(&"lstm2.w_ih".to_string()));
}

/// Table-driven model over the tokens {EOS, a=4, b=5}: greedy takes `a`
/// (0.6) but the best complete caption starts with `b`.
struct Toy;

impl Toy {
    fn dist(prefix: &[usize]) -> [(usize, f64); 3] {
        match prefix {
            [] => [(EOS, 0.0), (4, 0.6), (5, 0.4)],
            [4] => [(EOS, 0.3), (4, 0.35), (5, 0.35)],
            [5] => [(EOS, 0.9), (4, 0.05), (5, 0.05)],
            _ => [(EOS, 0.5), (4, 0.25), (5, 0.25)],
        }
    }
}

impl StepModel for Toy {
    type State = Vec<usize>;

    fn vocab_size(&self) -> usize {
        6
    }

    fn initial(&self) -> percap::Result<Vec<usize>> {
        Ok(Vec::new())
    }

    fn step(&self, states: &[Vec<usize>], prev: &[usize]) -> percap::Result<(Vec<Vec<f64>>, Vec<Vec<usize>>)> {
        let mut lps = Vec::new();
        let mut next = Vec::new();
        for (s, &p) in states.iter().zip(prev) {
            let mut s = s.clone();
            if p != BOS {
                s.push(p);
            }
            let mut lp = vec![f64::NEG_INFINITY; 6];
            for (w, pr) in Toy::dist(&s) {
                lp[w] = pr.ln();
            }
            lps.push(lp);
            next.push(s);
        }
        Ok((lps, next))
    }
}

#[test]
fn beam_finds_the_exhaustive_optimum() {
    // all finished sequences of at most 3 tokens, EOS included
    let mut best = (f64::NEG_INFINITY, vec![]);
    let mut frontier = vec![(0.0, vec![])];
    for _ in 0..3 {
        let mut grown = Vec::new();
        for (lp, prefix) in frontier {
            for (w, p) in Toy::dist(&prefix) {
                if p == 0.0 {
                    continue;
                }
                let score = lp + p.ln();
                if w == EOS {
                    if score > best.0 {
                        best = (score, prefix.clone());
                    }
                } else {
                    let mut q = prefix.clone();
                    q.push(w);
                    grown.push((score, q));
                }
            }
        }
        frontier = grown;
    }
    assert_eq!(best.1, vec![5]);
    let g = greedy(&Toy, 3).unwrap();
    assert!(g.log_prob < best.0);
    let b = beam_search(&Toy, &DecodeConfig { beam: 2, max_len: 3, monotone: false }).unwrap();
    assert_eq!(b.tokens, best.1);
    assert!((b.log_prob - best.0).abs() < 1e-12);
    assert!(b.finished);
}

#[test]
fn sampling_is_seeded_and_respects_limits() {
    let d = tiny(DecoderKind::UpDown, true);
    let s = DecoderSession::new(&d, feats(DecoderKind::UpDown, 1, 1), 0).unwrap();
    let a = sample_many(&s, 5, 6, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    let b = sample_many(&s, 5, 6, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    assert_eq!(a, b);
    for d in &a {
        assert!(d.tokens.len() <= 6);
        assert!(d.tokens.iter().all(|&t| t != PAD && t != BOS && t != EOS));
        assert!(d.finished || d.tokens.len() == 6);
    }
}

mod training {
    use super::*;
    use percap::data::{build_vocab, generate_synthetic, Split, SyntheticSpec};
    use percap::metrics::ReferenceCorpus;
    use percap::tensor::OptimizerConfig;

    fn setup(num_train: usize) -> (percap::data::SyntheticCorpus, percap::text::Vocabulary, Decoder) {
        let spec = SyntheticSpec {
            num_train,
            ..SyntheticSpec::generative()
        };
        let corpus = generate_synthetic(&spec).unwrap();
        let vocab = build_vocab(&corpus.records, 1).unwrap();
        let cfg = DecoderConfig {
            kind: DecoderKind::UpDown,
            feature_dim: spec.feature_dim,
            embed_dim: 24,
            hidden_dim: 24,
            att_dim: 24,
            vocab_size: vocab.len(),
            num_traits: corpus.traits.len(),
            personality: true,
            max_len: 16,
        };
        let d = Decoder::new(cfg, 0).unwrap();
        (corpus, vocab, d)
    }

    #[test]
    fn untrained_loss_is_near_log_vocab() {
        let (corpus, vocab, d) = setup(100);
        let ex = build_gen_examples(&corpus.records, Split::Train, &corpus.traits, &vocab, 16).unwrap();
        let loss = teacher_forced_loss(&d, &ex[..50], &corpus.features).unwrap();
        let ln_v = (vocab.len() as f64).ln();
        assert!((loss - ln_v).abs() <= 0.1 * ln_v, "{loss} vs {ln_v}");
    }

    #[test]
    fn memorizes_ten_captions() {
        let (corpus, vocab, mut d) = setup(10);
        let ex = build_gen_examples(&corpus.records, Split::Train, &corpus.traits, &vocab, 16).unwrap();
        assert_eq!(ex.len(), 10);
        let cfg = XeConfig {
            batch_size: 10,
            epochs: 150,
            optimizer: OptimizerConfig::adam(1e-2),
            seed: 0,
        };
        train_xe(&mut d, &ex, &corpus.features, &cfg).unwrap();
        let loss = teacher_forced_loss(&d, &ex, &corpus.features).unwrap();
        assert!(loss < 0.1, "{loss}");
        assert_eq!(d.stage, Stage::Xe);
    }

    #[test]
    fn scst_needs_a_cross_entropy_checkpoint() {
        let (corpus, vocab, mut d) = setup(20);
        let ex = build_gen_examples(&corpus.records, Split::Train, &corpus.traits, &vocab, 16).unwrap();
        let refs = ReferenceCorpus::from_records(&corpus.records, Split::Train).unwrap();
        let err = train_scst(&mut d, &ex, &corpus.features, &vocab, &refs, &ScstConfig::default()).unwrap_err();
        assert!(matches!(err, Error::Config(ref m) if m.contains("cross-entropy")), "{err}");
    }

    #[test]
    fn long_captions_are_truncated_without_eos() {
        let (corpus, vocab, _) = setup(20);
        let ex = build_gen_examples(&corpus.records, Split::Train, &corpus.traits, &vocab, 3).unwrap();
        assert!(ex.iter().all(|e| e.target.len() == 3 && !e.target.contains(&EOS)));
    }
}
