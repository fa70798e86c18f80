use faenet::data::{generate, Sample, SynthSpec};
use faenet::detector::{build_detector, DetectorConfig};
use faenet::nn::{ParamKind, ParamStore};
use faenet::train::{
    config_fingerprint, lr_at, overfit, read_metrics, run_ablation, train, Checkpoint, MetricRecord, Sgd, TrainConfig,
    TrainOptions, CHECKPOINT_FILE, METRICS_FILE,
};
use faenet::{Error, Tensor};

fn full() -> TrainConfig {
    TrainConfig::full_scale()
}

#[test]
fn full_schedule_values() {
    let c = full();
    assert_eq!(lr_at(175.0, &c), 4e-4);
    assert_eq!(lr_at(5.0, &c), 4e-3);
    assert_eq!(lr_at(149.999, &c), 4e-3);
    assert_eq!(lr_at(150.0, &c), 4e-4);
    assert_eq!(lr_at(200.0, &c), 4e-5);
    assert_eq!(lr_at(250.0, &c), 4e-5);
}

#[test]
fn warmup_ramp_matches_its_formula() {
    let c = full();
    assert_eq!(lr_at(0.0, &c), c.base_lr / 100.0);
    assert_eq!(lr_at(c.warmup_epochs as f64, &c), c.base_lr);
    for k in 0..=50 {
        let e = k as f64 * 0.1;
        let want = 4e-5 + (4e-3 - 4e-5) * e / 5.0;
        assert!((lr_at(e, &c) - want).abs() <= 1e-17, "{e}");
    }
    let below = lr_at(5.0 - 1e-9, &c);
    assert!((below - 4e-3).abs() < 1e-11);
    let mut prev = f64::INFINITY;
    for k in 0..=2500 {
        let lr = lr_at(5.0 + k as f64 * 0.1, &c);
        assert!(lr <= prev);
        prev = lr;
    }
}

#[test]
fn schedule_validation() {
    let ok = TrainConfig::toy();
    ok.validate().unwrap();
    for bad in [
        TrainConfig { milestone_epochs: vec![50, 40], ..ok.clone() },
        TrainConfig { milestone_epochs: vec![40, 60], ..ok.clone() },
        TrainConfig { warmup_epochs: 40, ..ok.clone() },
        TrainConfig { batch_size: 0, ..ok.clone() },
        TrainConfig { base_lr: -1.0, ..ok.clone() },
    ] {
        assert!(matches!(bad.validate(), Err(Error::Config(_))), "{bad:?}");
    }
}

fn scalar_store(value: f64) -> ParamStore {
    let mut s = ParamStore::new();
    s.add("w", Tensor::scalar(value), ParamKind::Trainable).unwrap();
    s
}

#[test]
fn sgd_zero_gradient_is_a_fixed_point() {
    let mut s = scalar_store(1.25);
    let id = s.id("w").unwrap();
    let mut sgd = Sgd::new(0.9, 0.0);
    sgd.step(&mut s, &[(id, Tensor::scalar(0.0))], 0.1).unwrap();
    assert_eq!(s.get(id).data()[0], 1.25);
}

#[test]
fn sgd_single_step_formula() {
    let (p, g, lr, wd) = (0.7, -0.3, 0.05, 5e-4);
    let mut s = scalar_store(p);
    let id = s.id("w").unwrap();
    let mut sgd = Sgd::new(0.9, wd);
    sgd.step(&mut s, &[(id, Tensor::scalar(g))], lr).unwrap();
    assert_eq!(s.get(id).data()[0], p - lr * (g + wd * p));
}

#[test]
fn sgd_three_steps_match_hand_unroll() {
    let (mu, wd) = (0.9, 5e-4);
    let grads = [0.4, -1.1, 0.25];
    let lrs = [0.1, 0.05, 0.02];
    let mut s = scalar_store(2.0);
    let id = s.id("w").unwrap();
    let mut sgd = Sgd::new(mu, wd);
    for (g, lr) in grads.iter().zip(lrs) {
        sgd.step(&mut s, &[(id, Tensor::scalar(*g))], lr).unwrap();
    }
    let p0 = 2.0;
    let v1 = grads[0] + wd * p0;
    let p1 = p0 - lrs[0] * v1;
    let v2 = mu * v1 + grads[1] + wd * p1;
    let p2 = p1 - lrs[1] * v2;
    let v3 = mu * v2 + grads[2] + wd * p2;
    let p3 = p2 - lrs[2] * v3;
    assert!((s.get(id).data()[0] - p3).abs() <= 1e-15);
    assert!((sgd.velocity["w"].data()[0] - v3).abs() <= 1e-15);
}

#[test]
fn sgd_rejects_non_finite_gradients_by_name() {
    let mut s = scalar_store(1.0);
    s.add("b", Tensor::scalar(3.0), ParamKind::Trainable).unwrap();
    let (w, b) = (s.id("w").unwrap(), s.id("b").unwrap());
    let mut sgd = Sgd::new(0.9, 0.0);
    let err = sgd.step(&mut s, &[(w, Tensor::scalar(1.0)), (b, Tensor::scalar(f64::NAN))], 0.1).unwrap_err();
    assert!(err.to_string().contains("grad of b"), "{err}");
    assert_eq!((s.get(w).data()[0], s.get(b).data()[0]), (1.0, 3.0));
}

fn tiny_data(n: usize, seed: u64) -> Vec<Sample> {
    generate(&SynthSpec { seed, num_images: n, ..Default::default() }).unwrap()
}

fn tiny_config(epochs: usize) -> TrainConfig {
    TrainConfig {
        batch_size: 6,
        total_epochs: epochs,
        warmup_epochs: usize::from(epochs > 2),
        milestone_epochs: vec![epochs - 1],
        seed: 5,
        ..TrainConfig::toy()
    }
}

#[test]
fn checkpoint_round_trip_is_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = DetectorConfig::mini(4);
    let data = tiny_data(6, 1);
    let out = train(&cfg, &tiny_config(2), &data, &data[..2], TrainOptions::default()).unwrap();
    let path = dir.path().join("m.ckpt");
    let ck = Checkpoint::capture(&cfg, 2, &out.store, None);
    ck.save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    assert_eq!(loaded, ck);

    let (det, mut fresh) = build_detector(&cfg, 99).unwrap();
    loaded.restore(&cfg, &mut fresh, None).unwrap();
    let images = faenet::data::stack_images(&data.iter().map(|s| &s.image).collect::<Vec<_>>()).unwrap();
    let a = out.detector.predict(&out.store, &images).unwrap();
    let b = det.predict(&fresh, &images).unwrap();
    assert_eq!(a.loc.data(), b.loc.data());
    assert_eq!(a.conf.data(), b.conf.data());

    let other = cfg.clone().with_toggles(false, true, true);
    let (_, mut s2) = build_detector(&other, 0).unwrap();
    match loaded.restore(&other, &mut s2, None) {
        Err(Error::FingerprintMismatch { checkpoint, config }) => {
            assert_eq!(checkpoint, config_fingerprint(&cfg));
            assert_eq!(config, config_fingerprint(&other));
        }
        r => panic!("expected a fingerprint mismatch, got {r:?}"),
    }
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    let cfg = DetectorConfig::mini(2);
    let (_, store) = build_detector(&cfg, 0).unwrap();
    let bytes = Checkpoint::capture(&cfg, 0, &store, None).to_bytes();
    assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]), Err(Error::Checkpoint(_))));
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Checkpoint(_))));
    let mut extra = bytes;
    extra.push(0);
    assert!(matches!(Checkpoint::from_bytes(&extra), Err(Error::Checkpoint(_))));
}

#[test]
fn training_is_deterministic_and_resumes_identically() {
    let cfg = DetectorConfig::mini(4);
    let data = tiny_data(12, 2);
    let (tr, ev) = data.split_at(9);
    let tc = tiny_config(3);
    let dir = tempfile::tempdir().unwrap();
    let full = train(&cfg, &tc, tr, ev, TrainOptions { out_dir: Some(dir.path().into()), ..Default::default() }).unwrap();
    let again = train(&cfg, &tc, tr, ev, TrainOptions::default()).unwrap();
    assert_eq!(full.records, again.records);
    assert_eq!(read_metrics(&dir.path().join(METRICS_FILE)).unwrap(), full.records);

    let short = TrainConfig { total_epochs: 1, milestone_epochs: vec![], ..tc.clone() };
    let d2 = tempfile::tempdir().unwrap();
    train(&cfg, &short, tr, ev, TrainOptions { out_dir: Some(d2.path().into()), ..Default::default() }).unwrap();
    let ck = Checkpoint::load(&d2.path().join(CHECKPOINT_FILE)).unwrap();
    assert_eq!(ck.epoch, 1);
    let resumed = train(&cfg, &tc, tr, ev, TrainOptions { resume: Some(ck), ..Default::default() }).unwrap();
    let tail: Vec<_> = full
        .records
        .iter()
        .filter(|r| match r {
            MetricRecord::Iteration { epoch, .. } | MetricRecord::Epoch { epoch, .. } => *epoch >= 1,
        })
        .cloned()
        .collect();
    assert_eq!(resumed.records, tail);
    assert_eq!(resumed.report, full.report);
}

#[test]
fn divergence_aborts_and_keeps_last_good_checkpoint() {
    let cfg = DetectorConfig::mini(4);
    let data = tiny_data(6, 3);
    let tc = tiny_config(3);
    let dir = tempfile::tempdir().unwrap();
    let opts = TrainOptions { out_dir: Some(dir.path().into()), fault_at_iteration: Some(1), ..Default::default() };
    match train(&cfg, &tc, &data, &data, opts) {
        Err(Error::Diverged { epoch, iteration, reason }) => {
            assert_eq!((epoch, iteration), (1, 1));
            assert!(reason.contains("loss"));
        }
        Err(e) => panic!("unexpected error {e}"),
        Ok(_) => panic!("training should have diverged"),
    }
    let ck = Checkpoint::load(&dir.path().join(CHECKPOINT_FILE)).unwrap();
    assert_eq!(ck.epoch, 1);
    let (_, mut store) = build_detector(&tc.apply_toggles(&cfg), 0).unwrap();
    ck.restore(&tc.apply_toggles(&cfg), &mut store, None).unwrap();
    assert!(store.ids().all(|id| store.get(id).is_finite()));
}

#[test]
fn overfitting_one_batch_halves_the_loss() {
    let data = tiny_data(4, 7);
    let cfg = TrainConfig { base_lr: 0.01, ..TrainConfig::toy() };
    let losses = overfit(&DetectorConfig::mini(4), &cfg, &data, 150).unwrap();
    let (first, last) = (losses[0], *losses.last().unwrap());
    assert!(last < 0.5 * first, "{first} -> {last}");
}

#[test]
fn ablation_table_is_complete_and_reproducible() {
    let cfg = DetectorConfig::mini(4);
    let data = tiny_data(10, 4);
    let (tr, ev) = data.split_at(8);
    let tc = TrainConfig { total_epochs: 1, warmup_epochs: 0, milestone_epochs: vec![], batch_size: 8, ..TrainConfig::toy() };
    let decode = Default::default();
    let a = run_ablation(&cfg, &tc, tr, ev, &decode, None).unwrap();
    let b = run_ablation(&cfg, &tc, tr, ev, &decode, None).unwrap();
    assert_eq!(a, b);
    let names: Vec<_> = a.rows.iter().map(|r| r.variant.as_str()).collect();
    assert_eq!(names, ["baseline", "+SFE", "+SFE+DFE", "+SFE+DFE+FAM"]);
    let refs: Vec<_> = a.rows.iter().map(|r| r.reference_map).collect();
    assert_eq!(refs, [77.5, 79.0, 79.5, 80.1]);
    assert!(a.rows.windows(2).all(|w| w[0].params <= w[1].params));
    assert!(a.rows.iter().all(|r| (0.0..=1.0).contains(&r.map)));
    assert!(a.to_text().lines().count() == 6);
}
