//! Trainer contracts across module boundaries: resume, failure handling and
//! folder-backed data.

use stereofb::config::{ModelConfig, RunConfig};
use stereofb::data::Dataset;
use stereofb::io::write_png;
use stereofb::synthetic::scene_set;
use stereofb::train::{OutputDir, Trainer};
use stereofb::Error;

fn small() -> RunConfig {
    let mut cfg = RunConfig::desk();
    cfg.model = ModelConfig {
        channels: 4,
        rdb_blocks: 1,
        rdb_layers: 2,
        rdb_growth: 4,
        cascade: 1,
        hypotheses: 4,
        search_range: 4.0,
        ..ModelConfig::default()
    };
    cfg.train.batch_size = 2;
    cfg.train.checkpoint_every = 2;
    cfg
}

fn scenes() -> Dataset {
    Dataset::from_scenes(&scene_set(3, 3, 8, 24, 1, 3, 2).unwrap())
}

#[test]
fn resumed_run_continues_bit_identically() {
    let mut cfg = small();
    cfg.train.steps = 4;
    let data = scenes();
    let dir = tempfile::tempdir().unwrap();
    let out = OutputDir::create(dir.path()).unwrap();
    let ckpt = out.checkpoint_path(2);
    let mut straight = Trainer::new(&cfg, &data, Some(out)).unwrap();
    let full = straight.run(|_| {}).unwrap();

    let mut resumed = Trainer::resume(&cfg, &data, None, &ckpt).unwrap();
    assert_eq!(resumed.state.step, 2);
    let tail = resumed.run(|_| {}).unwrap();
    assert_eq!(tail.records.len(), 2);
    for (a, b) in full.records[2..].iter().zip(&tail.records) {
        assert_eq!(a.step, b.step);
        assert_eq!(a.loss.total.to_bits(), b.loss.total.to_bits());
    }
    assert_eq!(straight.state.store, resumed.state.store);
}

#[test]
fn resume_rejects_a_different_model() {
    let mut cfg = small();
    cfg.train.steps = 2;
    let data = scenes();
    let dir = tempfile::tempdir().unwrap();
    let out = OutputDir::create(dir.path()).unwrap();
    let ckpt = out.checkpoint_path(2);
    Trainer::new(&cfg, &data, Some(out)).unwrap().run(|_| {}).unwrap();
    cfg.model.channels = 6;
    assert!(Trainer::resume(&cfg, &data, None, &ckpt).is_err());
}

#[test]
fn non_finite_loss_aborts_and_keeps_last_good_state() {
    let mut cfg = small();
    cfg.train.steps = 3;
    let mut data = scenes();
    for s in &mut data.samples {
        s.lr[0].data_mut()[0] = f64::NAN as _;
    }
    let dir = tempfile::tempdir().unwrap();
    let mut t = Trainer::new(&cfg, &data, Some(OutputDir::create(dir.path()).unwrap())).unwrap();
    let before = t.state.store.clone();
    let err = t.run(|_| {}).unwrap_err();
    assert!(matches!(err, Error::NonFiniteLoss { step: 0 }), "{err}");
    assert_eq!(t.state.store, before);
    let (saved, _) = stereofb::checkpoint::load(&dir.path().join("checkpoints/last_good.ckpt")).unwrap();
    assert_eq!(saved.store, before);
}

#[test]
fn trains_from_a_folder_of_png_pairs() {
    let dir = tempfile::tempdir().unwrap();
    for sub in ["left", "right"] {
        std::fs::create_dir_all(dir.path().join(sub)).unwrap();
    }
    for (i, s) in scene_set(7, 2, 16, 48, 2, 4, 2).unwrap().iter().enumerate() {
        write_png(dir.path().join("left").join(format!("{i}.png")), &s.hr[0]).unwrap();
        write_png(dir.path().join("right").join(format!("{i}.png")), &s.hr[1]).unwrap();
    }
    let mut cfg = small();
    cfg.train.steps = 1;
    cfg.train.patch_h = 8;
    cfg.train.patch_w = 24;
    let data = Dataset::from_folder(dir.path(), 2, 8, 24, 20).unwrap();
    assert!(data.len() >= 2);
    assert!(data.samples.iter().all(|s| s.hr[0].shape() == [1, 3, 8, 24] && s.lr[0].shape() == [1, 3, 4, 12]));
    let out = Trainer::new(&cfg, &data, None).unwrap().run(|_| {}).unwrap();
    assert!(out.records[0].loss.total.is_finite());
}
