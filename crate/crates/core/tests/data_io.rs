use percap::data::checkpoint::{checkpoint_bytes, parse_checkpoint};
use percap::data::*;
use percap::tensor::{ParamStore, Tensor};
use percap::traits::TraitTable;
use percap::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tmp() -> tempfile::TempDir {
    tempfile::tempdir().unwrap()
}

#[test]
fn feature_store_round_trip_is_byte_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut store = FeatureStore::new(&[7, 7, 3]).unwrap();
    for i in 0..100 {
        let v: Vec<f32> = (0..147).map(|_| rng.random_range(-5.0..5.0)).collect();
        store.insert(format!("img{i}"), v).unwrap();
    }
    let dir = tmp();
    let p = dir.path().join("f.pcf");
    store.write(&p).unwrap();
    let back = FeatureStore::read(&p).unwrap();
    assert_eq!(back, store);
    assert_eq!(back.to_bytes(), std::fs::read(&p).unwrap());
}

#[test]
fn feature_store_rejects_trailing_bytes() {
    let mut b = FeatureStore::new(&[4]).unwrap().to_bytes();
    b.push(0);
    assert!(matches!(FeatureStore::from_bytes(&b, "x"), Err(Error::Format { offset: 16, .. })));
}

#[test]
fn captions_round_trip_and_validation() {
    let traits = TraitTable::default_table();
    let dir = tmp();
    let p = dir.path().join("c.jsonl");
    let recs: Vec<CaptionRecord> = (0..3)
        .map(|i| CaptionRecord {
            image_id: format!("i{i}"),
            personality: "sweet".into(),
            caption: format!("what a lovely view {i}"),
            split: Split::Train,
        })
        .collect();
    write_captions(&p, &recs).unwrap();
    assert_eq!(read_captions(&p, &traits).unwrap(), recs);

    let bad = concat!(
        r#"{"image_id":"a","personality":"sweet","caption":"a fine dog","split":"train"}"#,
        "\n",
        r#"{"image_id":"b","personality":"sweet","caption":"hi there","split":"train"}"#,
        "\n",
        r#"{"image_id":"c","personality":"nope","caption":"a fine dog","split":"test"}"#,
        "\n",
        r#"{"image_id":"d","caption":"a fine dog","split":"test"}"#,
        "\n",
    );
    std::fs::write(&p, bad).unwrap();
    match read_captions(&p, &traits) {
        Err(Error::Validation(problems)) => {
            assert_eq!(problems.len(), 3, "{problems:?}");
            assert!(problems[0].contains(":2:") && problems[0].contains("2 token"));
            assert!(problems[1].contains(":3:") && problems[1].contains("nope"));
            assert!(problems[2].contains(":4:") && problems[2].contains("personality"));
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn vocab_rebuild_is_identical() {
    let corpus = generate_synthetic(&SyntheticSpec::default()).unwrap();
    let dir = tmp();
    let (a, b) = (dir.path().join("a.txt"), dir.path().join("b.txt"));
    build_vocab(&corpus.records, 1).unwrap().save(&a).unwrap();
    build_vocab(&corpus.records, 1).unwrap().save(&b).unwrap();
    assert_eq!(std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
}

#[test]
fn checkpoint_round_trip_and_refusals() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut store = ParamStore::new();
    for (name, shape) in [("img.w", vec![8, 6]), ("img.b", vec![6]), ("traits", vec![3, 6])] {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-1.0f32..1.0) as f64).collect();
        store.add(name, Tensor::new(&shape, data).unwrap()).unwrap();
    }
    let dir = tmp();
    let p = dir.path().join("m.ckpt");
    save_checkpoint(&p, &store).unwrap();
    let header_line = std::fs::read(&p).unwrap();
    let sep = header_line.iter().position(|&b| b == b'\n').unwrap();
    let header: serde_json::Value = serde_json::from_slice(&header_line[..sep]).unwrap();
    assert_eq!(header["format_version"], 1);
    assert_eq!(header["tensors"][1]["offset"], 8 * 6 * 4);

    let mut fresh = store.clone();
    for id in fresh.ids().collect::<Vec<_>>() {
        let shape = fresh.value(id).shape().to_vec();
        fresh.set(id, Tensor::zeros(&shape)).unwrap();
    }
    load_into(&p, &mut fresh).unwrap();
    for ((_, a), (_, b)) in store.named_values().zip(fresh.named_values()) {
        assert_eq!(a, b);
    }

    let mut wider = ParamStore::new();
    wider.add("img.w", Tensor::zeros(&[8, 7])).unwrap();
    wider.add("img.b", Tensor::zeros(&[7])).unwrap();
    wider.add("traits", Tensor::zeros(&[3, 7])).unwrap();
    match load_into(&p, &mut wider) {
        Err(Error::CheckpointShape { name, expected, found }) => {
            assert_eq!(name, "img.w");
            assert_eq!(expected, vec![8, 7]);
            assert_eq!(found, vec![8, 6]);
        }
        other => panic!("{other:?}"),
    }
    assert!(wider.named_values().all(|(_, t)| t.data().iter().all(|&x| x == 0.0)));

    let t = Tensor::ones(&[3]);
    let bytes = checkpoint_bytes(&[("w".into(), &t)]).unwrap();
    assert!(matches!(parse_checkpoint(&bytes[..bytes.len() - 1], "x"), Err(Error::Format { .. })));
}

#[test]
fn synthetic_is_seed_deterministic() {
    let spec = SyntheticSpec::default();
    let a = generate_synthetic(&spec).unwrap();
    let b = generate_synthetic(&spec).unwrap();
    assert_eq!(a.features.to_bytes(), b.features.to_bytes());
    assert_eq!(a.records, b.records);
    let c = generate_synthetic(&SyntheticSpec { seed: 1, ..spec }).unwrap();
    assert_ne!(a.records, c.records);
}

#[test]
fn synthetic_structure() {
    for spec in [
        SyntheticSpec::default(),
        SyntheticSpec::trait_dependent(),
        SyntheticSpec::synonym_shift(),
        SyntheticSpec::generative(),
    ] {
        let corpus = generate_synthetic(&spec).unwrap();
        assert_eq!(corpus.traits.len(), spec.num_traits);
        validate_records(&corpus.records, &corpus.traits, Some(&corpus.features)).unwrap();
        let train = corpus.records.iter().filter(|r| r.split == Split::Train).count();
        assert_eq!(train, spec.num_train);
        for img in corpus.images.iter().filter(|i| i.split == Split::Test) {
            let refs: Vec<_> = corpus.records.iter().filter(|r| r.image_id == img.image_id).collect();
            assert_eq!(refs.len(), spec.captions_per_test_image);
            assert!(refs.iter().all(|r| r.split == Split::Test));
        }
    }
}

#[test]
fn nearest_centroid_recovers_concepts() {
    for grid in [false, true] {
        let spec = SyntheticSpec {
            noise: 0.1,
            grid,
            ..Default::default()
        };
        let world = SyntheticWorld::new(spec).unwrap();
        let corpus = world.corpus().unwrap();
        let hits = corpus
            .images
            .iter()
            .filter(|i| world.nearest_concept(corpus.features.raw(&i.image_id).unwrap()) == i.concept)
            .count();
        let acc = hits as f64 / corpus.images.len() as f64;
        assert!(acc >= 0.99, "grid={grid}: accuracy {acc}");
    }
}

#[test]
fn traits_change_the_caption() {
    let world = SyntheticWorld::new(SyntheticSpec::default()).unwrap();
    let a: std::collections::HashSet<_> = world.lexicons[0].iter().collect();
    assert!(world.lexicons[1].iter().all(|w| !a.contains(w)));
}

#[test]
fn undersized_lexicon_is_rejected() {
    let spec = SyntheticSpec {
        lexicon_size: 1,
        trait_words: 1,
        fillers: 2,
        captions_per_test_image: 5,
        ..Default::default()
    };
    assert!(matches!(generate_synthetic(&spec), Err(Error::Config(_))));
}
