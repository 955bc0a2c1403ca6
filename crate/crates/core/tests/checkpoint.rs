use hidec_core::checkpoint::{checkpoint_precision, from_bytes, load_checkpoint, save_checkpoint, to_bytes};
use hidec_core::datagen::{generate_corpus, generate_taxonomy, SynthSpec};
use hidec_core::inference::predict;
use hidec_core::training::{fit, ModelBundle, Precision, TrainConfig};
use hidec_core::{Error, Graph, Taxonomy};
use hidec_core::encoder::TextEncoder;

fn trained() -> (ModelBundle<f32>, Vec<hidec_core::Document>) {
    let spec = SynthSpec { depth: 3, train_docs: 12, dev_docs: 0, test_docs: 0, seed: 2, ..SynthSpec::default() };
    let t = generate_taxonomy(&spec).unwrap();
    let docs = generate_corpus(&spec, &t).unwrap().train;
    let cfg = TrainConfig { epochs: 1, batch_size: 4, embed_dim: 8, hidden: 8, d_model: 8, ffn_dim: 8, ..TrainConfig::default() };
    (fit::<f32>(&t, &docs, &[], &cfg).unwrap().best, docs)
}

#[test]
fn round_trip_is_bit_identical() {
    let (bundle, docs) = trained();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&bundle, &path).unwrap();
    assert_eq!(checkpoint_precision(&path).unwrap(), Precision::F32);
    let back = load_checkpoint::<f32>(&path, Some(&bundle.taxonomy)).unwrap();
    assert_eq!(back.config, bundle.config);
    assert_eq!(back.vocab, bundle.vocab);
    assert_eq!(back.tokenizer, bundle.tokenizer);
    assert_eq!(back.taxonomy, bundle.taxonomy);
    for ((_, a), (_, b)) in bundle.store.iter().zip(back.store.iter()) {
        assert_eq!(a.name, b.name);
        assert_eq!(a.value, b.value);
    }
    for d in &docs {
        let ids = bundle.encode_text(&d.text);
        assert_eq!(ids, back.encode_text(&d.text));
        let h1 = {
            let mut g = Graph::eval(&bundle.store);
            let h = bundle.model.encoder.encode(&mut g, &ids).unwrap();
            g.value(h).to_owned()
        };
        let h2 = {
            let mut g = Graph::eval(&back.store);
            let h = back.model.encoder.encode(&mut g, &ids).unwrap();
            g.value(h).to_owned()
        };
        assert_eq!(h1, h2);
        let p1 = predict(&bundle.store, &bundle.model, &bundle.taxonomy, &ids, 0.5).unwrap();
        let p2 = predict(&back.store, &back.model, &back.taxonomy, &ids, 0.5).unwrap();
        assert_eq!(p1, p2);
    }
    // saving again yields the same bytes
    assert_eq!(to_bytes(&back), std::fs::read(&path).unwrap());
}

#[test]
fn edited_taxonomy_is_rejected() {
    let (bundle, _) = trained();
    let bytes = to_bytes(&bundle);
    let edited = Taxonomy::parse(&format!("{}Root\tExtra\n", bundle.taxonomy.to_tsv())).unwrap();
    assert!(matches!(from_bytes::<f32>(&bytes, Some(&edited)), Err(Error::TaxonomyMismatch)));
    assert!(from_bytes::<f32>(&bytes, None).is_ok());
}

#[test]
fn truncated_or_flipped_file_fails_checksum() {
    let (bundle, _) = trained();
    let bytes = to_bytes(&bundle);
    for cut in [0, 10, bytes.len() / 2, bytes.len() - 1] {
        assert!(matches!(from_bytes::<f32>(&bytes[..cut], None), Err(Error::ChecksumError(_))), "cut {cut}");
    }
    let mut flipped = bytes.clone();
    flipped[bytes.len() / 3] ^= 1;
    assert!(matches!(from_bytes::<f32>(&flipped, None), Err(Error::ChecksumError(_))));
}

#[test]
fn other_version_is_incompatible() {
    use sha2::{Digest, Sha256};
    let (bundle, _) = trained();
    let mut bytes = to_bytes(&bundle);
    bytes.truncate(bytes.len() - 32);
    bytes[8] = 9;
    let digest = Sha256::digest(&bytes);
    bytes.extend_from_slice(&digest);
    assert!(matches!(from_bytes::<f32>(&bytes, None), Err(Error::IncompatibleCheckpoint(_))));
}

#[test]
fn f32_checkpoint_loads_as_f64() {
    let (bundle, _) = trained();
    let back = from_bytes::<f64>(&to_bytes(&bundle), None).unwrap();
    for ((_, a), (_, b)) in bundle.store.iter().zip(back.store.iter()) {
        assert!(a.value.iter().zip(b.value.iter()).all(|(&x, &y)| x as f64 == y));
    }
}
