use std::collections::{BTreeMap, BTreeSet};
use std::fs;

use proptest::prelude::*;

use super::*;
use crate::encoders::ModelConfig;
use crate::error::Error;
use crate::numerics::Tensor;

fn small_config() -> ModelConfig {
    ModelConfig { frames: 3, patches: 2, d_input: 5, ..ModelConfig::desk() }
}

fn small_params(seed: u64, noise: f64) -> SyntheticParams {
    SyntheticParams { seed, size: 40, latent_dim: 6, noise_scale: noise, frame_spread: 0.5, bins: 6 }
}

#[test]
fn frame_sampling_examples() {
    assert_eq!(sample_frames_uniform(12, 12).unwrap(), (0..12).collect::<Vec<_>>());
    assert_eq!(sample_frames_uniform(24, 12).unwrap(), (0..12).map(|k| 2 * k).collect::<Vec<_>>());
    assert_eq!(sample_frames_uniform(3, 4).unwrap(), vec![0, 0, 1, 2]);
    assert!(matches!(sample_frames_uniform(0, 4), Err(Error::EmptyInput(_))));
}

proptest! {
    #[test]
    fn frame_sampling_is_ordered(t in 1usize..200, f in 1usize..40) {
        let idx = sample_frames_uniform(t, f).unwrap();
        prop_assert_eq!(idx.len(), f);
        prop_assert!(idx.windows(2).all(|w| w[0] <= w[1]));
        prop_assert!(idx.iter().all(|&i| i < t));
    }
}

#[test]
fn corpus_is_deterministic() {
    let c = small_config();
    let a = generate_synthetic_corpus(&small_params(3, 0.1), &c).unwrap();
    let b = generate_synthetic_corpus(&small_params(3, 0.1), &c).unwrap();
    assert_eq!(a, b);
    let other = generate_synthetic_corpus(&small_params(4, 0.1), &c).unwrap();
    assert_ne!(a.records[0].frames, other.records[0].frames);
    let r = &a.records[0];
    assert_eq!(r.frames.shape(), &[3, 3, 5]);
    assert_eq!(r.caption_tokens.len(), 7);
    assert_eq!(*r.caption_tokens.last().unwrap(), EOS);
    assert_eq!(r.pseudo_tokens.as_ref().unwrap().len(), 3);
    assert!(generate_synthetic_corpus(&SyntheticParams { size: 1, ..small_params(0, 0.1) }, &c).is_err());
}

fn affinities(c: &Corpus) -> (Vec<Vec<f64>>, usize) {
    let n = c.len();
    let m = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| {
                    latent_affinity(c.records[i].text_latent.as_ref().unwrap(), c.records[j].video_latent.as_ref().unwrap())
                })
                .collect()
        })
        .collect();
    (m, n)
}

#[test]
fn noiseless_latents_retrieve_perfectly() {
    let c = generate_synthetic_corpus(&small_params(5, 0.0), &small_config()).unwrap();
    let (a, n) = affinities(&c);
    for i in 0..n {
        for j in 0..n {
            if i != j {
                assert!(a[i][i] > a[i][j]);
            }
        }
    }
}

#[test]
fn matched_margin_shrinks_with_noise() {
    let margin = |noise: f64| {
        let c = generate_synthetic_corpus(&SyntheticParams { size: 80, ..small_params(6, noise) }, &small_config()).unwrap();
        let (a, n) = affinities(&c);
        let matched = (0..n).map(|i| a[i][i]).sum::<f64>() / n as f64;
        let off = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| a[i][j]).sum::<f64>()
            / (n * (n - 1)) as f64;
        matched - off
    };
    let m = [margin(0.0), margin(0.1), margin(1.0)];
    assert!(m[0] > m[1] && m[1] > m[2] && m[2] > 0.0, "{m:?}");
}

#[test]
fn tokenizer_is_seeded_and_in_range() {
    let t = HashTokenizer::new(1, 50).unwrap();
    let ids = t.encode("a b c a");
    assert_eq!(ids.len(), 5);
    assert_eq!(ids[0], ids[3]);
    assert_eq!(ids[4], EOS);
    assert!(ids[..4].iter().all(|&i| (2..50).contains(&i)));
    assert_eq!(t.encode("a b c a"), HashTokenizer::new(1, 50).unwrap().encode("a b c a"));
    assert!(HashTokenizer::new(1, 2).is_err());
}

#[test]
fn feature_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("feats.bin");
    let values: Vec<f64> = (0..2 * 3 * 4).map(|i| f64::from(i as f32 * 0.37 - 1.0)).collect();
    let table = FeatureTable::new(vec!["a".into(), "b".into()], Tensor::new([2, 3, 4], values).unwrap()).unwrap();
    write_feature_file(&path, &table).unwrap();
    let back = load_feature_file(&path, 4, 3).unwrap();
    assert_eq!(back, table);

    assert!(matches!(load_feature_file(&path, 4, 2), Err(Error::Arity { expected: 2, actual: 3, .. })));
    assert!(matches!(load_feature_file(&path, 5, 3), Err(Error::Format { offset: 9, .. })));

    let bytes = fs::read(&path).unwrap();
    fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
    let err = load_feature_file(&path, 4, 3).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("expected 117 bytes, found 114"), "{msg}");

    let mut bad = bytes.clone();
    bad[0] = b'X';
    fs::write(&path, &bad).unwrap();
    assert!(matches!(load_feature_file(&path, 4, 3), Err(Error::Format { offset: 0, .. })));

    let mut nan = bytes.clone();
    nan[21..25].copy_from_slice(&f32::NAN.to_le_bytes());
    fs::write(&path, &nan).unwrap();
    assert!(matches!(load_feature_file(&path, 4, 3), Err(Error::Format { offset: 21, .. })));
}

#[test]
fn pseudo_caption_tsv_round_trip_and_errors() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("caps.tsv");
    let caps = vec!["a man runs".to_string(), "a dog".to_string()];
    write_pseudo_captions(&path, [("v1", caps.as_slice())]).unwrap();
    let map = load_pseudo_captions(&path, 2).unwrap();
    assert_eq!(map["v1"], caps);

    fs::write(&path, "v1\t0\tx\nv1\t0\ty\n").unwrap();
    assert!(matches!(load_pseudo_captions(&path, 2), Err(Error::Format { offset: 7, .. })));
    fs::write(&path, "v1\t0\tx\n").unwrap();
    assert!(matches!(load_pseudo_captions(&path, 2), Err(Error::Arity { expected: 2, actual: 1, .. })));
    fs::write(&path, "v1\t5\tx\n").unwrap();
    assert!(matches!(load_pseudo_captions(&path, 2), Err(Error::Format { .. })));
    fs::write(&path, "v1 0 x\n").unwrap();
    assert!(matches!(load_pseudo_captions(&path, 2), Err(Error::Format { .. })));
}

#[test]
fn prompt_fills_video_caption() {
    let p = pseudo_caption_prompt("a cat sleeping");
    assert_eq!(
        p,
        "The provided image is a frame sampled from the video, which describes a cat sleeping. Based on the video's content, provide a caption for the provided image."
    );
}

#[test]
fn batching_examples() {
    let b = Batcher::new(10, 4, 0, true).unwrap();
    assert_eq!(b.batches_per_epoch(), 2);
    assert_eq!(b.epoch_indices(0).len(), 2);
    assert_eq!(b.epoch_indices(3), Batcher::new(10, 4, 0, true).unwrap().epoch_indices(3));
    assert_ne!(b.epoch_indices(0), b.epoch_indices(1));

    let full = Batcher::new(10, 4, 9, false).unwrap();
    let seen: Vec<usize> = full.epoch_indices(2).into_iter().flatten().collect();
    assert_eq!(seen.len(), 10);
    assert_eq!(seen.iter().copied().collect::<BTreeSet<_>>(), (0..10).collect());

    assert!(matches!(Batcher::new(3, 4, 0, true), Err(Error::Config(_))));
    assert!(matches!(Batcher::new(3, 1, 0, true), Err(Error::Config(_))));
}

#[test]
fn batches_keep_diagonal_pairing() {
    let c = generate_synthetic_corpus(&small_params(7, 0.1), &small_config()).unwrap();
    let b = Batcher::new(c.len(), 8, 1, true).unwrap();
    for batch in b.epoch(&c, 0) {
        let batch = batch.unwrap();
        assert_eq!(batch.frames.shape(), &[8, 3, 3, 5]);
        for (k, &i) in batch.indices.iter().enumerate() {
            assert_eq!(batch.captions[k], c.records[i].caption_tokens);
            let per = 3 * 3 * 5;
            assert_eq!(&batch.frames.data()[k * per..(k + 1) * per], c.records[i].frames.data());
            assert_eq!(batch.pseudo_captions.as_ref().unwrap()[k * 3], c.records[i].pseudo_tokens.as_ref().unwrap()[0]);
        }
    }
}

#[test]
fn split_drops_held_out_pseudo_captions() {
    let c = generate_synthetic_corpus(&small_params(8, 0.1), &small_config()).unwrap();
    let (train, test) = c.split(30).unwrap();
    assert_eq!((train.len(), test.len()), (30, 10));
    assert!(train.records.iter().all(|r| r.pseudo_tokens.is_some()));
    assert!(test.records.iter().all(|r| r.pseudo_tokens.is_none()));
    let batch = Batch::assemble(&test, &[0, 1]).unwrap();
    assert!(batch.pseudo_captions.is_none());
}

#[test]
fn corpus_file_round_trip_and_caption_attachment() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = generate_synthetic_corpus(&small_params(9, 0.1), &small_config()).unwrap();
    let path = dir.path().join("corpus.json");
    c.save(&path).unwrap();
    assert_eq!(Corpus::load(&path).unwrap(), c);

    let caps: BTreeMap<String, Vec<String>> =
        c.records.iter().map(|r| (r.video_id.clone(), vec!["x y".to_string(); 3])).collect();
    c.attach_pseudo_captions(&caps).unwrap();
    assert_eq!(c.records[0].pseudo_tokens.as_ref().unwrap()[2], c.tokenizer.encode("x y"));
    let mut short = caps.clone();
    short.remove(&c.records[1].video_id);
    assert!(c.attach_pseudo_captions(&short).is_err());
    assert!(c.check_compatible(&small_config()).is_ok());
    assert!(matches!(c.check_compatible(&ModelConfig::desk()), Err(Error::Arity { .. })));
}
