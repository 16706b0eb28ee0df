use sha2::{Digest, Sha256};

use super::*;
use crate::datasets::synth::{synth_samples, SynthConfig, SynthDomain};
use crate::detector::DetLossOn;

fn tiny(iterations: usize) -> TrainConfig {
    let mut cfg = TrainConfig::desk();
    cfg.iterations = iterations;
    cfg.lr_drops = vec![];
    cfg.batch_size = 2;
    cfg.detector.channels = 8;
    cfg.detector.hidden = 16;
    cfg
}

fn data(n: usize) -> Vec<DatasetSample> {
    synth_samples(SynthDomain::SourcePlain, n, 3, &SynthConfig::default()).unwrap()
}

#[test]
fn identity_pool_has_zero_alignment_every_step() {
    let mut cfg = tiny(6);
    cfg.pool = "identity".into();
    let out = train(&cfg, &data(6), None).unwrap();
    assert_eq!(out.log.len(), 6);
    for row in &out.log {
        assert_eq!((row.l_cal, row.l_ral), (0.0, 0.0));
        assert_eq!(row.l_tot, row.l_det);
    }
}

#[test]
fn loss_accounting_holds_each_step() {
    let mut cfg = tiny(4);
    cfg.alpha = 0.7;
    cfg.beta = 2.5;
    let out = train(&cfg, &data(6), None).unwrap();
    for row in &out.log {
        assert!(row.l_cal > 0.0 && row.l_ral > 0.0);
        let expect = row.l_det + 0.7 * row.l_cal + 2.5 * row.l_ral;
        assert!((row.l_tot - expect).abs() <= 1e-12 * expect.abs().max(1.0));
    }
}

#[test]
fn weightless_identity_training_matches_single_view_training() {
    let mut cfg = tiny(10);
    cfg.pool = "identity".into();
    cfg.alpha = 0.0;
    cfg.beta = 0.0;
    let samples = data(8);
    let pair_log = train(&cfg, &samples, None).unwrap().log;
    let mut state = TrainState::new(&cfg).unwrap();
    for (it, row) in pair_log.iter().enumerate() {
        let batch: Vec<&DatasetSample> = batch_indices(&cfg, samples.len(), it).into_iter().map(|i| &samples[i]).collect();
        let loss = single_view_step(&mut state, &cfg, &batch).unwrap();
        assert!((loss.l_tot - row.l_tot).abs() < 1e-6, "step {it}: {} vs {}", loss.l_tot, row.l_tot);
    }
    // Supervising both identical views is the same objective.
    cfg.det_loss_on = DetLossOn::Both;
    let both = train(&cfg, &samples, None).unwrap().log;
    for (a, b) in both.iter().zip(&pair_log) {
        assert!((a.l_tot - b.l_tot).abs() < 1e-6);
    }
}

#[test]
fn learning_rate_schedule() {
    let mut cfg = TrainConfig::desk();
    assert_eq!(lr_at(&cfg, 0), 0.01);
    assert_eq!(lr_at(&cfg, 2_666), 0.01);
    assert!((lr_at(&cfg, 2_667) - 0.001).abs() < 1e-15);
    assert!((lr_at(&cfg, 3_556) - 0.0001).abs() < 1e-15);
    let full = TrainConfig::full();
    assert!((lr_at(&full, 12_000) - 0.1 * full.base_lr).abs() < 1e-15);
    cfg.warmup_iters = 10;
    assert!((lr_at(&cfg, 0) - 0.001).abs() < 1e-15);
    assert_eq!(lr_at(&cfg, 10), 0.01);
}

#[test]
fn batches_walk_epoch_permutations() {
    let mut cfg = tiny(1);
    cfg.batch_size = 4;
    let mut seen: Vec<usize> = (0..3).flat_map(|it| batch_indices(&cfg, 12, it)).collect();
    seen.sort_unstable();
    assert_eq!(seen, (0..12).collect::<Vec<_>>());
    assert_eq!(batch_indices(&cfg, 12, 5), batch_indices(&cfg, 12, 5));
}

fn file_hash(path: &Path) -> String {
    hex::encode(Sha256::digest(std::fs::read(path).unwrap()))
}

#[test]
fn equal_seeds_give_identical_checkpoints_and_logs() {
    let cfg = tiny(5);
    let samples = data(6);
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    train(&cfg, &samples, Some(a.path())).unwrap();
    train(&cfg, &samples, Some(b.path())).unwrap();
    for f in [FINAL_CHECKPOINT, LOG_FILE, CONFIG_FILE] {
        assert_eq!(file_hash(&a.path().join(f)), file_hash(&b.path().join(f)), "{f}");
    }
    let log = std::fs::read_to_string(a.path().join(LOG_FILE)).unwrap();
    assert_eq!(log.lines().next().unwrap(), LOG_HEADER);
    assert_eq!(log.lines().count(), 6);
    let mut other = cfg.clone();
    other.seed = 1;
    let c = tempfile::tempdir().unwrap();
    train(&other, &samples, Some(c.path())).unwrap();
    assert_ne!(file_hash(&a.path().join(FINAL_CHECKPOINT)), file_hash(&c.path().join(FINAL_CHECKPOINT)));
}

#[test]
fn resume_from_checkpoint_reproduces_the_run() {
    let mut cfg = tiny(6);
    cfg.checkpoint_every = 3;
    let samples = data(6);
    let dir = tempfile::tempdir().unwrap();
    let full = train(&cfg, &samples, Some(dir.path())).unwrap();
    let ck = Checkpoint::load(&dir.path().join("checkpoint_000003.bin"), &cfg.detector.hash()).unwrap();
    assert_eq!(ck.iteration, 3);
    let state = TrainState::from_checkpoint(&cfg, ck).unwrap();
    let rest = resume(&cfg, &samples, state, None).unwrap();
    assert_eq!(rest.log, full.log[3..]);
    assert_eq!(rest.state.detector.params(), full.state.detector.params());
    let mut other = cfg.clone();
    other.detector.hidden = 32;
    assert!(matches!(
        load_detector(&other, &dir.path().join(FINAL_CHECKPOINT)),
        Err(Error::Checkpoint(_))
    ));
    assert!(load_detector(&cfg, &dir.path().join(FINAL_CHECKPOINT)).is_ok());
}

#[test]
fn non_finite_loss_aborts_with_batch_ids() {
    let cfg = tiny(3);
    let samples = data(4);
    let mut state = TrainState::new(&cfg).unwrap();
    let id = state.detector.params().id_of("head.cls.bias").unwrap();
    state.detector.params_mut().get_mut(id)[0] = f32::NAN;
    let pool = cfg.corruption_pool().unwrap();
    let batch = make_batch(&cfg, &samples, &pool, 0).unwrap();
    match train_step(&mut state, &cfg, &batch) {
        Err(Error::NaNLoss { iteration, image_ids }) => {
            assert_eq!(iteration, 0);
            assert_eq!(image_ids, batch.iter().map(|p| p.image_id.clone()).collect::<Vec<_>>());
        }
        other => panic!("expected NaNLoss, got {:?}", other.map(|_| ())),
    }
}

#[test]
fn gap_report_rows_and_identity() {
    let cfg = tiny(1);
    let det = build_detector(&cfg.detector, 0).unwrap();
    let val = data(4);
    let names = vec!["identity".to_string(), "gaussian_noise".to_string(), "contrast".to_string()];
    let r = domain_gap_report(det.as_ref(), &val, &names, 0).unwrap();
    assert_eq!(r.rows.len(), 3);
    assert_eq!(r.rows[0].gap, 0.0);
    assert_eq!(r.rows[1].severity, GAP_SEVERITY);
    assert_eq!(r.to_csv().lines().count(), 5);
}
