use usvs::detector::{monte_carlo_cv, train_detector, CnnDetector, CvConfig, DetectorTrainConfig, PreparedSet};
use usvs::nn::{train, LayerSpec, LossKind, Network, NnError, Shape, TrainConfig};
use usvs::renderer::{generate_dataset, DatasetConfig, FrameGeometry, Renderer};
use usvs::{PhantomModel, VesselDetector};

fn toy_classifier(seed: u64) -> Network {
    Network::new(
        Shape::Flat(2),
        &[LayerSpec::Dense { neurons: 8 }, LayerSpec::Relu, LayerSpec::Dense { neurons: 2 }, LayerSpec::Softmax],
        LossKind::CrossEntropy,
        seed,
    )
    .unwrap()
}

/// 20 points split by the line x0 + 0.5 x1 = 0 with a clear gap.
fn separable() -> (Vec<[f32; 2]>, Vec<[f32; 2]>) {
    let mut xs = Vec::new();
    let mut ts = Vec::new();
    for i in 0..20 {
        let side = if i % 2 == 0 { 1.0 } else { -1.0 };
        let t = i as f32 / 20.0;
        xs.push([side * (0.5 + t), (t * 7.0).sin()]);
        ts.push(if side > 0.0 { [0.0, 1.0] } else { [1.0, 0.0] });
    }
    (xs, ts)
}

#[test]
fn separable_toy_set_is_learned_perfectly() {
    let (xs, ts) = separable();
    let xr: Vec<&[f32]> = xs.iter().map(|x| x.as_slice()).collect();
    let tr: Vec<&[f32]> = ts.iter().map(|t| t.as_slice()).collect();
    let mut net = toy_classifier(1);
    let cfg = TrainConfig { epochs: 100, batch_size: 2, ..TrainConfig::default() };
    let report = train(&mut net, &xr, &tr, &cfg).unwrap();
    assert_eq!(report.epoch_losses.len(), 100);
    assert!(report.epoch_losses[99] < report.epoch_losses[0]);
    let correct = xs.iter().zip(&ts).filter(|(x, t)| {
        let p = net.predict(x.as_slice()).unwrap();
        (p[1] > p[0]) == (t[1] == 1.0)
    });
    assert_eq!(correct.count(), 20);
}

#[test]
fn zero_epochs_leave_weights_unchanged() {
    let (xs, ts) = separable();
    let xr: Vec<&[f32]> = xs.iter().map(|x| x.as_slice()).collect();
    let tr: Vec<&[f32]> = ts.iter().map(|t| t.as_slice()).collect();
    let mut net = toy_classifier(2);
    let before = net.clone();
    let report = train(&mut net, &xr, &tr, &TrainConfig { epochs: 0, ..TrainConfig::default() }).unwrap();
    assert!(report.epoch_losses.is_empty());
    assert_eq!(net, before);
}

#[test]
fn training_is_reproducible() {
    let (xs, ts) = separable();
    let xr: Vec<&[f32]> = xs.iter().map(|x| x.as_slice()).collect();
    let tr: Vec<&[f32]> = ts.iter().map(|t| t.as_slice()).collect();
    let cfg = TrainConfig { epochs: 5, batch_size: 4, seed: 9, ..TrainConfig::default() };
    let (mut a, mut b) = (toy_classifier(3), toy_classifier(3));
    assert_eq!(train(&mut a, &xr, &tr, &cfg).unwrap(), train(&mut b, &xr, &tr, &cfg).unwrap());
    assert_eq!(a, b);
}

#[test]
fn non_finite_loss_reports_the_epoch() {
    let mut net = Network::new(Shape::Flat(1), &[LayerSpec::Dense { neurons: 1 }, LayerSpec::LinearOutput], LossKind::Mse, 0).unwrap();
    net.layers[0].weights[0] = 1.0;
    let x = [f32::MAX];
    let t = [0.0f32];
    let r = train(&mut net, &[&x], &[&t], &TrainConfig { epochs: 3, ..TrainConfig::default() });
    assert_eq!(r.unwrap_err(), NnError::Diverged { epoch: 0 });
}

#[test]
fn cosine_schedule_ends_at_the_final_factor() {
    let cfg = TrainConfig { epochs: 11, lr_final_factor: 0.1, ..TrainConfig::default() };
    assert!((cfg.lr_at(0) - 1e-3).abs() < 1e-9);
    assert!((cfg.lr_at(10) - 1e-4).abs() < 1e-9);
    assert!(cfg.lr_at(5) < cfg.lr_at(4));
    assert_eq!(TrainConfig::default().lr_at(50), 1e-3);
}

fn small_set(n: usize, seed: u64) -> PreparedSet {
    let r = Renderer::new(FrameGeometry::default());
    let ds = generate_dataset(&PhantomModel::default(), &r, &DatasetConfig::new(n, seed, 0.5)).unwrap();
    PreparedSet::from_dataset(&ds).unwrap()
}

fn quick() -> DetectorTrainConfig {
    let mut c = DetectorTrainConfig::default().with_epochs(1, 1);
    c.classifier.batch_size = 16;
    c.regressor.batch_size = 16;
    c
}

#[test]
fn regressor_runs_once_per_positive_classification() {
    let set = small_set(60, 4);
    let (det, _) = train_detector(&set, None, &quick()).unwrap();
    let r = Renderer::new(FrameGeometry::default());
    let ph = PhantomModel::default();
    let mut positives = 0;
    for i in 0..12 {
        let pose = ph.start_pose(-12.0);
        let pose = usvs::ProbePose::new(pose.position.x + 4.0 * i as f64 - 24.0, pose.position.y + 3.0 * i as f64, pose.position.z);
        let (frame, truth) = r.render(&ph, &pose, i);
        let d = det.detect(&frame, &truth).unwrap();
        positives += d.vessel_present as usize;
        assert_eq!(d.vessel_present, d.presence_prob >= det.threshold);
        assert_eq!(d.vessel_present, d.center_px.is_some());
    }
    assert_eq!(det.regressor_calls(), positives);
}

#[test]
fn weights_survive_a_save_load_cycle() {
    let set = small_set(40, 5);
    let (det, _) = train_detector(&set, None, &quick()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    det.save(dir.path()).unwrap();
    let back = CnnDetector::load(dir.path(), det.geometry).unwrap();
    assert_eq!(back.classifier, det.classifier);
    assert_eq!(back.regressor, det.regressor);
    assert!(CnnDetector::load(&dir.path().join("missing"), det.geometry).is_err());
}

#[test]
fn cv_report_has_one_row_per_fold_and_a_summary() {
    let set = small_set(50, 6);
    let cfg = CvConfig { folds: 3, train_fraction: 0.8, seed: 1, train: quick() };
    let report = monte_carlo_cv(&set, &cfg).unwrap();
    assert_eq!(report.folds.len(), 3);
    for f in &report.folds {
        assert_eq!(f.train_indices.len(), 40);
        assert_eq!(f.test_indices.len(), 10);
        assert!((0.0..=1.0).contains(&f.accuracy));
        assert!(f.mae_x_mm <= f.max_x_mm && f.mae_y_mm <= f.max_y_mm);
    }
    let mut buf = Vec::new();
    report.write_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 5);
    let header: Vec<&str> = lines[0].split(',').collect();
    for col in ["accuracy", "mae_x_mm", "mae_y_mm", "max_x_mm", "max_y_mm"] {
        assert!(header.contains(&col), "missing column {col}");
    }
    assert!(lines[4].starts_with("summary,"));
    // identical seeds give identical reports
    assert_eq!(monte_carlo_cv(&set, &cfg).unwrap(), report);
}
