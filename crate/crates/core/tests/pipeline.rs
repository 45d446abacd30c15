use focuslite::data::{load_manifest, load_tiles, procedural_textures, synth_blur_dataset, LabelKind};
use focuslite::training::{fold_seed, run_folds, train, TrainConfig};
use focuslite::LossKind;

fn small_config() -> TrainConfig {
    TrainConfig {
        epochs: 3,
        batch_size: 6,
        validate_every: 1,
        ..TrainConfig::default()
    }
}

#[test]
fn synthetic_dataset_survives_disk_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let textures = procedural_textures(2, 240, 1).unwrap();
    let data = synth_blur_dataset(&textures, &[0.0, 1.0, 2.5]).unwrap();
    let path = data.write(dir.path()).unwrap();
    let manifest = load_manifest(&path).unwrap();
    assert_eq!(manifest.kind, LabelKind::ZLevel);
    assert_eq!(manifest.records, data.manifest.records);
    let tiles = load_tiles(&manifest).unwrap();
    assert_eq!(tiles.len(), 6);
    // PNG quantizes to 8 bits, nothing more.
    for (t, img) in tiles.iter().zip(&data.images) {
        let worst = t
            .image
            .data()
            .iter()
            .zip(img.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(worst <= 0.5 / 255.0 + 1e-6, "{}: {worst}", t.id);
    }
}

#[test]
fn training_does_not_depend_on_thread_count() {
    let textures = procedural_textures(3, 240, 2).unwrap();
    let tiles = synth_blur_dataset(&textures, &[0.0, 1.0, 2.0, 4.0]).unwrap().tiles();
    let (train_set, val_set) = tiles.split_at(9);
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| train(&small_config(), train_set, val_set).unwrap())
    };
    let a = run(1);
    let b = run(4);
    assert_eq!(a.params, b.params);
    assert_eq!(a.log, b.log);
    assert_eq!(a.log.len(), 3);

    let other = train(&TrainConfig { seed: 99, ..small_config() }, train_set, val_set).unwrap();
    assert_ne!(other.params, a.params);
}

#[test]
fn folds_use_disjoint_splits_and_consecutive_seeds() {
    let textures = procedural_textures(2, 240, 3).unwrap();
    let tiles = synth_blur_dataset(&textures, &[0.0, 0.5, 1.0, 2.0, 3.0]).unwrap().tiles();
    let config = TrainConfig {
        loss: LossKind::Mse,
        ..small_config()
    };
    let summary = run_folds(&config, &tiles, LabelKind::ZLevel, 3).unwrap();
    assert_eq!(summary.folds.len(), 3);
    for f in &summary.folds {
        assert_eq!(f.seed, fold_seed(config.seed, f.fold));
        let mut all: Vec<&String> = f.train_ids.iter().chain(&f.val_ids).chain(&f.test_ids).collect();
        assert_eq!((f.train_ids.len(), f.val_ids.len(), f.test_ids.len()), (6, 2, 2));
        all.sort();
        all.dedup();
        assert_eq!(all.len(), tiles.len());
        assert_eq!(f.report.samples.len(), f.test_ids.len());
        assert_eq!(f.outcome.params.trained_with, LossKind::Mse);
    }
    assert_ne!(summary.folds[0].test_ids, summary.folds[1].test_ids);
}
