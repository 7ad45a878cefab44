//! Acceptance run: prints one PASS/FAIL line per criterion and exits non-zero
//! if any criterion fails.

mod common;

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use usvs::control::{control_step, seek_force, x_correction, ControlConfig, ControlState, Phase, StopReason};
use usvs::detector::{monte_carlo_cv, train_detector, CvConfig, Detection, DetectorTrainConfig, PreparedSet};
use usvs::harness::{compute_metrics, experiment_suite, SuiteConfig};
use usvs::nn::{build_classifier, build_regressor, LayerSpec, LossKind, Network, Shape};
use usvs::renderer::{generate_dataset, DatasetConfig, FrameGeometry, Renderer, UsFrame};
use usvs::stream::{
    decode_all, serve_frames, Command, CommandMessage, FrameClient, FrameMessage, RobotStatus, ServerConfig, SimStation,
    WireMessage,
};
use usvs::{CnnDetector, PhantomModel};

const DATASET_SIZE: usize = 4000;
const NEG_FRACTION: f64 = 0.541;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn report(n: usize, o: &Outcome) -> bool {
    println!("criterion {n}: {} {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
    o.pass
}

fn detection(offset: f64) -> Detection {
    Detection::at(0.9, (255.5 + offset / 0.137, 120.0), &FrameGeometry::default())
}

fn scanning(ph: &PhantomModel, cfg: &ControlConfig) -> ControlState {
    seek_force(&ControlState::new(cfg.start_pose(ph)), ph, cfg).unwrap()
}

/// Runs `check` on `cases` random draws; returns (all held, elapsed).
fn property(cases: usize, seed: u64, mut check: impl FnMut(&mut ChaCha8Rng) -> bool) -> (bool, Duration) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t = Instant::now();
    let ok = (0..cases).all(|_| check(&mut rng));
    (ok, t.elapsed())
}

fn control_properties() -> Outcome {
    let cfg = ControlConfig::default();
    let ph = PhantomModel::straight();
    let long = ControlConfig { scan_length_mm: 1000.0, ..cfg };
    let base = scanning(&ph, &cfg);
    let mut results = Vec::new();

    results.push(("deadband", property(1000, 1, |r| {
        x_correction(&detection(r.gen_range(-2.74..=2.74)), &cfg).unwrap() == 0.0
    })));
    results.push(("sign", property(1000, 2, |r| {
        let o: f64 = r.gen_range(-30.0..30.0);
        let dx = x_correction(&detection(o), &cfg).unwrap();
        dx * o <= 0.0 && dx.abs() <= cfg.max_x_step_mm && (o.abs() <= 2.75 || dx != 0.0)
    })));
    results.push(("termination", property(20, 3, |r| {
        let mut s = base;
        let mut steps = 0;
        while !s.is_stopped() {
            s = control_step(&s, &detection(r.gen_range(-2.7..2.7)), &ph, &cfg).unwrap().0;
            steps += 1;
        }
        steps == 70 && s.stop_reason == StopReason::LengthReached && (s.distance_scanned_mm - 140.0).abs() < 1e-9
    })));
    results.push(("absorbing", property(300, 4, |r| {
        let mut s = base;
        s.phase = Phase::Stopped;
        s.stop_reason = [StopReason::VesselLost, StopReason::LengthReached, StopReason::Contact][r.gen_range(0..3)];
        let det = if r.gen_bool(0.5) { detection(r.gen_range(-8.0..8.0)) } else { Detection::absent(0.0) };
        control_step(&s, &det, &ph, &cfg).unwrap().0 == s
    })));
    results.push(("first negative", property(200, 5, |r| {
        let mut s = base;
        for _ in 0..r.gen_range(0..20) {
            s = control_step(&s, &detection(r.gen_range(-8.0..8.0)), &ph, &long).unwrap().0;
        }
        let before = s;
        let after = control_step(&s, &Detection::absent(0.1), &ph, &long).unwrap().0;
        after.is_stopped() && after.stop_reason == StopReason::VesselLost && after.pose == before.pose
    })));

    let pass = results.iter().all(|(_, (ok, t))| *ok && *t < Duration::from_secs(1));
    let detail = results
        .iter()
        .map(|(name, (ok, t))| format!("{name} {} in {:.0} ms", if *ok { "held" } else { "violated" }, t.as_secs_f64() * 1e3))
        .collect::<Vec<_>>()
        .join(", ");
    outcome(pass, detail)
}

fn force_seek() -> Outcome {
    let ph = PhantomModel::default();
    let cfg = ControlConfig::default();
    let s = scanning(&ph, &cfg);
    let depth = ph.indentation(&s.pose);
    let analytic = cfg.force_target_n / ph.stiffness_n_per_mm;
    let pass = ph.stiffness_n_per_mm == 0.5 && (s.force_n - 6.0).abs() <= 0.1 && (depth - analytic).abs() <= 0.4;
    outcome(pass, format!("force {:.3} N, indentation {depth:.3} mm (analytic {analytic:.1} mm)", s.force_n))
}

fn gradients() -> Outcome {
    let kinds: Vec<(&str, Shape, Vec<LayerSpec>, LossKind)> = vec![
        ("dense", Shape::Flat(7), vec![LayerSpec::Dense { neurons: 4 }, LayerSpec::LinearOutput], LossKind::Mse),
        (
            "conv",
            Shape::Image { c: 2, h: 7, w: 6 },
            vec![LayerSpec::Conv2d { filters: 3, kernel: 3 }, LayerSpec::Flatten, LayerSpec::Dense { neurons: 2 }, LayerSpec::LinearOutput],
            LossKind::Mse,
        ),
        (
            "relu",
            Shape::Flat(6),
            vec![LayerSpec::Dense { neurons: 8 }, LayerSpec::Relu, LayerSpec::Dense { neurons: 3 }, LayerSpec::LinearOutput],
            LossKind::Mse,
        ),
        (
            "maxpool",
            Shape::Image { c: 1, h: 9, w: 8 },
            vec![
                LayerSpec::Conv2d { filters: 2, kernel: 3 },
                LayerSpec::MaxPool { size: 2 },
                LayerSpec::Flatten,
                LayerSpec::Dense { neurons: 2 },
                LayerSpec::LinearOutput,
            ],
            LossKind::Mse,
        ),
        (
            "softmax",
            Shape::Image { c: 2, h: 3, w: 3 },
            vec![LayerSpec::Flatten, LayerSpec::Dense { neurons: 3 }, LayerSpec::Softmax],
            LossKind::CrossEntropy,
        ),
    ];
    let mut errors = Vec::new();
    for (name, shape, specs, loss) in kinds {
        let net = Network::new(shape, &specs, loss, 11).unwrap();
        let (x, t) = common::random_data(&net, 3, 5);
        errors.push((name, common::gradient_error(&net, &x, &t, 400, 2)));
    }
    for (name, net) in [
        ("classifier", build_classifier(Shape::Image { c: 1, h: 16, w: 16 }, 4).unwrap()),
        ("regressor", build_regressor(Shape::Image { c: 1, h: 36, w: 36 }, 4).unwrap()),
    ] {
        let (x, t) = common::random_data(&net, 2, 8);
        errors.push((name, common::gradient_error(&net, &x, &t, 60, 3)));
    }
    let pass = errors.iter().all(|(_, e)| *e < 1e-2);
    let detail = errors.iter().map(|(n, e)| format!("{n} {e:.1e}")).collect::<Vec<_>>().join(", ");
    outcome(pass, format!("relative errors: {detail}"))
}

fn random_command(r: &mut ChaCha8Rng) -> CommandMessage {
    let command = match r.gen_range(0..4) {
        0 => Command::MoveDelta { dx_um: r.gen(), dy_um: r.gen(), dz_um: r.gen() },
        1 => Command::Stop,
        2 => Command::StatusRequest,
        _ => Command::Status(RobotStatus {
            x_um: r.gen(),
            y_um: r.gen(),
            z_um: r.gen(),
            force_mn: r.gen(),
            timestamp_ms: r.gen(),
            flags: r.gen(),
        }),
    };
    CommandMessage { seq: r.gen(), command }
}

fn random_frame(r: &mut ChaCha8Rng) -> FrameMessage {
    let (rows, cols) = (r.gen_range(0..24u16), r.gen_range(0..24u16));
    FrameMessage {
        seq: r.gen(),
        timestamp_ms: r.gen(),
        rows,
        cols,
        spacing_um: r.gen(),
        payload: (0..rows as usize * cols as usize).map(|_| r.gen()).collect(),
    }
}

fn garbage(r: &mut ChaCha8Rng) -> Vec<u8> {
    (0..r.gen_range(0..40)).map(|_| r.gen()).collect()
}

fn wire_protocol() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let round_trips = (0..1000).all(|_| {
        let c = random_command(&mut rng);
        let f = random_frame(&mut rng);
        let (cb, fb) = (c.encode(), f.encode());
        CommandMessage::decode(&cb).ok() == Some((c, cb.len())) && FrameMessage::decode(&fb).ok() == Some((f, fb.len()))
    });

    let resync = (0..200).all(|_| {
        let cmds: Vec<CommandMessage> = (0..rng.gen_range(1..8)).map(|_| random_command(&mut rng)).collect();
        let frames: Vec<FrameMessage> = (0..rng.gen_range(1..4)).map(|_| random_frame(&mut rng)).collect();
        let (mut cb, mut fb) = (Vec::new(), Vec::new());
        for c in &cmds {
            cb.extend(garbage(&mut rng));
            cb.extend(c.encode());
        }
        for f in &frames {
            fb.extend(garbage(&mut rng));
            fb.extend(f.encode());
        }
        decode_all::<CommandMessage>(&cb) == cmds && decode_all::<FrameMessage>(&fb) == frames
    });

    let frame = UsFrame::new(FrameGeometry::default(), vec![0; 277 * 512]).unwrap();
    let size = FrameMessage::from_frame(&frame, 0).unwrap().encode().len();

    let (count, rate) = match pacing(3.9, Duration::from_secs(10)) {
        Ok(v) => v,
        Err(e) => return outcome(false, format!("pacing run failed: {e}")),
    };
    let rate_ok = (rate - 3.9).abs() <= 0.05 * 3.9 && (count as f64 - 39.0).abs() <= 0.05 * 39.0;

    let pass = round_trips && resync && size == 141_846 && rate_ok;
    outcome(
        pass,
        format!(
            "1000 round trips {}, resync {}, 277x512 frame {size} bytes, {count} frames in 10 s ({rate:.3} Hz)",
            if round_trips { "ok" } else { "broken" },
            if resync { "ok" } else { "broken" },
        ),
    )
}

/// Frames received during `window` and the rate implied by their arrival times.
fn pacing(rate_hz: f64, window: Duration) -> Result<(usize, f64), usvs::stream::StreamError> {
    let station = SimStation::new(
        PhantomModel::default(),
        Renderer::new(FrameGeometry::default()),
        ControlConfig::default(),
        0,
    );
    let server = serve_frames(station, &ServerConfig::on_port(0, rate_hz))?;
    let mut client = FrameClient::connect(server.frame_addr, Duration::from_secs(5))?;
    client.next_frame()?;
    let start = Instant::now();
    let mut arrivals = Vec::new();
    loop {
        client.next_frame()?;
        let t = start.elapsed();
        if t > window {
            break;
        }
        arrivals.push(t.as_secs_f64());
    }
    let rate = match (arrivals.first(), arrivals.last()) {
        (Some(a), Some(b)) if arrivals.len() > 1 => (arrivals.len() - 1) as f64 / (b - a),
        _ => 0.0,
    };
    Ok((arrivals.len(), rate))
}

fn closed_loop_oracle() -> Outcome {
    let mut parts = Vec::new();
    let mut pass = true;
    for rot in [0.0, 30.0] {
        let log = common::oracle_straight_scan(rot, 500);
        let m = compute_metrics(&log, 2.74).unwrap();
        pass &= log.entries.len() == 500 && m.frames_without_offset == 0 && m.max_mm <= 4.74;
        parts.push(format!("{rot} deg: {} steps, max |offset| {:.2} mm", log.entries.len(), m.max_mm));
    }
    outcome(pass, parts.join("; "))
}

fn dataset() -> PreparedSet {
    let r = Renderer::new(FrameGeometry::default());
    let ds = generate_dataset(&PhantomModel::default(), &r, &DatasetConfig::new(DATASET_SIZE, 0, NEG_FRACTION)).unwrap();
    PreparedSet::from_dataset(&ds).unwrap()
}

fn train_config() -> DetectorTrainConfig {
    let mut c = DetectorTrainConfig::default().with_epochs(2, 12);
    c.regressor.batch_size = 16;
    c
}

fn detector_quality(set: &PreparedSet, prep: Duration) -> Outcome {
    let t = Instant::now();
    let cfg = CvConfig { folds: 10, train_fraction: 0.8, seed: 0, train: train_config() };
    let r = match monte_carlo_cv(set, &cfg) {
        Ok(r) => r,
        Err(e) => return outcome(false, format!("cross-validation failed: {e}")),
    };
    let total = prep + t.elapsed();
    let pass = r.accuracy_mean >= 0.99 && r.mae_x_mean <= 1.0 && r.max_x_mm <= 4.0 && total <= Duration::from_secs(30 * 60);
    outcome(
        pass,
        format!(
            "{} samples, accuracy {:.2} %, MAE_x {:.2} +/- {:.2} mm, max_x {:.2} mm, {:.0} s",
            set.len(),
            r.accuracy_mean * 100.0,
            r.mae_x_mean,
            r.abs_err_x_std,
            r.max_x_mm,
            total.as_secs_f64()
        ),
    )
}

fn scans(detector: &CnnDetector) -> (Outcome, Outcome) {
    let renderer = Renderer::new(FrameGeometry::default());
    let mut feasibility = Vec::new();
    let mut maes = Vec::new();
    let mut feasible = true;
    for rot in [0.0, 30.0] {
        let cfg = SuiteConfig { rotations_deg: vec![rot], ..SuiteConfig::default() };
        let t = Instant::now();
        let suite = match experiment_suite(&cfg, detector, &renderer) {
            Ok(s) => s,
            Err(e) => {
                let o = outcome(false, format!("{rot} deg scan failed: {e}"));
                return (o, outcome(false, "no scan results".into()));
            }
        };
        let elapsed = t.elapsed();
        let s = &suite.scenarios[0];
        feasible &= s.log.stop_reason == StopReason::LengthReached
            && s.log.distance_scanned_mm >= 140.0 - 1e-9
            && s.metrics.pct_full_lumen_visible == 100.0
            && elapsed < Duration::from_secs(120);
        feasibility.push(format!(
            "{rot} deg: {:.0} mm ({}), {:.1} % full lumen, {:.1} s",
            s.log.distance_scanned_mm,
            s.log.stop_reason,
            s.metrics.pct_full_lumen_visible,
            elapsed.as_secs_f64()
        ));
        maes.push((rot, s.metrics.mae_mm, s.metrics.max_mm));
    }
    let (m0, m30) = (maes[0].1, maes[1].1);
    let quality = m0 <= 2.74 && m30 <= 4.74 && m30 >= m0;
    let detail = maes.iter().map(|(r, mae, max)| format!("{r} deg MAE {mae:.2} mm (max {max:.2})")).collect::<Vec<_>>();
    (outcome(feasible, feasibility.join("; ")), outcome(quality, detail.join(", ")))
}

fn main() {
    let mut all = true;
    all &= report(4, &control_properties());
    all &= report(5, &force_seek());
    all &= report(6, &gradients());
    all &= report(7, &wire_protocol());
    all &= report(8, &closed_loop_oracle());

    let t = Instant::now();
    let set = dataset();
    all &= report(3, &detector_quality(&set, t.elapsed()));

    let (detector, _) = train_detector(&set, None, &train_config()).unwrap();
    let (c1, c2) = scans(&detector);
    all &= report(1, &c1);
    all &= report(2, &c2);

    if !all {
        std::process::exit(1);
    }
}
