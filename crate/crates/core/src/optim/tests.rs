use super::*;
use crate::dataset::{gen_synthetic, pad_batch, SyntheticConfig};
use crate::tensor_graph::Activation;

struct Fixture {
    train: Vec<Session>,
    valid: Vec<Session>,
    pipeline: FeaturePipeline,
    catalog: TrackCatalog,
}

fn fixture(n: usize) -> Fixture {
    let (tracks, sessions) = gen_synthetic(&SyntheticConfig {
        n_sessions: n,
        n_tracks: 50,
        acoustic_dim: 2,
        seed: 13,
        label_noise: 0.05,
    })
    .unwrap();
    let catalog = TrackCatalog::new(tracks, None);
    let (train, valid) = sessions.split_at(n * 3 / 4);
    let pipeline = FeaturePipeline::new(catalog.layout())
        .fit(train, &catalog.tracks)
        .unwrap();
    Fixture {
        train: train.to_vec(),
        valid: valid.to_vec(),
        pipeline,
        catalog,
    }
}

fn data(f: &Fixture) -> TrainData<'_> {
    TrainData {
        train: &f.train,
        valid: &f.valid,
        pipeline: &f.pipeline,
        catalog: &f.catalog,
        embedding: None,
    }
}

fn small_variant(use_batchnorm: bool) -> VariantConfig {
    VariantConfig {
        activation: Activation::Elu,
        hidden_size: 4,
        use_batchnorm,
    }
}

fn cfg(epochs: usize) -> TrainConfig {
    TrainConfig {
        batch_size: 8,
        epochs,
        lr: 0.01,
        ..TrainConfig::default()
    }
}

#[test]
fn seeded_training_is_reproducible() {
    let f = fixture(40);
    let a: Checkpoint<f64> = train(&data(&f), small_variant(true), &cfg(2)).unwrap();
    let b: Checkpoint<f64> = train(&data(&f), small_variant(true), &cfg(2)).unwrap();
    assert_eq!(a.meta.history, b.meta.history);
    assert_eq!(a.digest().unwrap(), b.digest().unwrap());
}

#[test]
fn zero_epochs_returns_the_initialization() {
    let f = fixture(20);
    let c: Checkpoint<f64> = train(&data(&f), small_variant(false), &cfg(0)).unwrap();
    let config = ModelConfig::for_pipeline(&f.pipeline, small_variant(false)).unwrap();
    assert_eq!(c.params, ModelParams::init(config, cfg(0).seed));
    assert_eq!(c.meta.best_epoch, 0);
    assert!(c.meta.history.is_empty());
}

#[test]
fn best_checkpoint_matches_logged_maximum() {
    let f = fixture(40);
    let c: Checkpoint<f64> = train(&data(&f), small_variant(false), &cfg(4)).unwrap();
    let max = c
        .meta
        .history
        .iter()
        .map(|e| e.valid_mean_aa)
        .fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(c.meta.best_valid_mean_aa, Some(max));
    let truth = truths(&f.valid).unwrap();
    let batches = vec![pad_batch(&f.valid, &f.pipeline, &f.catalog).unwrap()];
    let aa = evaluate_batches(&c.params, &batches, &truth, 0.5).unwrap();
    assert_eq!(aa, max);
}

#[test]
fn empty_sets_are_config_errors() {
    let f = fixture(20);
    let mut d = data(&f);
    d.valid = &[];
    assert!(matches!(
        train::<f64>(&d, small_variant(false), &cfg(1)),
        Err(Error::Config(_))
    ));
}

#[test]
fn overfits_one_micro_batch() {
    let f = fixture(8);
    let variant = VariantConfig {
        hidden_size: 16,
        ..small_variant(false)
    };
    let config = ModelConfig::for_pipeline(&f.pipeline, variant).unwrap();
    let mut p = ModelParams::<f64>::init(config, 5);
    let batch = pad_batch(&f.train[..2], &f.pipeline, &f.catalog).unwrap();
    let mut adam = new_adam(
        &p,
        AdamConfig {
            lr: 0.02,
            ..AdamConfig::default()
        },
    );
    let first = train_step(&mut p, &mut adam, &batch, &DEFAULT_TASK_WEIGHTS).unwrap();
    let mut last = first;
    for _ in 1..50 {
        last = train_step(&mut p, &mut adam, &batch, &DEFAULT_TASK_WEIGHTS).unwrap();
    }
    assert!(last < 0.1 * first, "{first} -> {last}");
}

fn trained() -> (Fixture, Checkpoint<f64>) {
    let f = fixture(24);
    let c = train(&data(&f), small_variant(true), &cfg(1)).unwrap();
    (f, c)
}

#[test]
fn checkpoint_round_trip_is_bit_identical() {
    let (f, c) = trained();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    c.save(&path).unwrap();
    let back = Checkpoint::<f64>::load(&path).unwrap();
    assert_eq!(back, c);
    let a = c
        .params
        .predict_sessions(&f.valid, &c.pipeline, &f.catalog, 4)
        .unwrap();
    let b = back
        .params
        .predict_sessions(&f.valid, &back.pipeline, &f.catalog, 7)
        .unwrap();
    for (x, y) in a.iter().zip(&b) {
        for (p, q) in x.probs.iter().flatten().zip(y.probs.iter().flatten()) {
            assert_eq!(p.to_bits(), q.to_bits());
        }
    }
}

#[test]
fn checkpoint_failures_are_distinct() {
    let (_, c) = trained();
    let bytes = c.to_bytes().unwrap();

    let mut flipped = bytes.clone();
    let mid = bytes.len() / 2;
    flipped[mid] ^= 0x40;
    assert!(matches!(
        Checkpoint::<f64>::from_bytes(&flipped),
        Err(Error::CheckpointIntegrity(_))
    ));

    let mut version = bytes.clone();
    version[8] = 9;
    assert!(matches!(
        Checkpoint::<f64>::from_bytes(&version),
        Err(Error::CheckpointVersion {
            found: 9,
            expected: 1
        })
    ));

    assert!(matches!(
        Checkpoint::<f64>::from_bytes(&bytes[..bytes.len() - 10]),
        Err(Error::CheckpointTruncated { .. })
    ));
    assert!(matches!(
        Checkpoint::<f64>::from_bytes(&bytes[..5]),
        Err(Error::CheckpointTruncated { .. })
    ));

    let mut magic = bytes;
    magic[0] = b'X';
    assert!(matches!(
        Checkpoint::<f64>::from_bytes(&magic),
        Err(Error::CheckpointIntegrity(_))
    ));
}

#[test]
fn embedding_reference_detects_edits() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("emb.txt");
    std::fs::write(&path, "t0001 0.5 0.25\n").unwrap();
    let r = EmbeddingRef::of_file(&path).unwrap();
    assert_eq!(r.load().unwrap().dim(), 2);
    std::fs::write(&path, "t0001 0.5 0.26\n").unwrap();
    assert!(matches!(r.load(), Err(Error::EmbeddingHash { .. })));
}
