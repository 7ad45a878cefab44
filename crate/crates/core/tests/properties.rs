use proptest::prelude::*;

use usvs::control::{control_step, seek_force, x_correction, ControlConfig, ControlState, Phase, StopReason};
use usvs::detector::Detection;
use usvs::renderer::{FrameGeometry, Renderer};
use usvs::stream::{decode_all, Command, CommandMessage, FrameMessage, MessageReader, RobotStatus, WireMessage};
use usvs::{PhantomModel, ProbePose};

fn detection(offset: f64) -> Detection {
    Detection::at(0.9, (255.5 + offset / 0.137, 120.0), &FrameGeometry::default())
}

fn scanning(ph: &PhantomModel) -> ControlState {
    let cfg = ControlConfig::default();
    seek_force(&ControlState::new(cfg.start_pose(ph)), ph, &cfg).unwrap()
}

proptest! {
    #[test]
    fn deadband_is_exact(offset in -2.74f64..=2.74) {
        prop_assert_eq!(x_correction(&detection(offset), &ControlConfig::default()).unwrap(), 0.0);
    }

    #[test]
    fn correction_opposes_the_offset(offset in -30.0f64..30.0) {
        let dx = x_correction(&detection(offset), &ControlConfig::default()).unwrap();
        prop_assert!(dx * offset <= 0.0);
        prop_assert!(dx.abs() <= 2.0);
        if offset.abs() > 2.75 {
            prop_assert!(dx != 0.0);
        }
    }

    #[test]
    fn y_advances_only_on_positive_frames(offsets in prop::collection::vec(prop::option::of(-8.0f64..8.0), 1..20)) {
        let ph = PhantomModel::straight();
        let cfg = ControlConfig { scan_length_mm: 1000.0, ..ControlConfig::default() };
        let mut s = scanning(&ph);
        for o in offsets {
            let before = s;
            let det = o.map(detection).unwrap_or(Detection::absent(0.0));
            s = control_step(&s, &det, &ph, &cfg).unwrap().0;
            let dy = s.pose.position.y - before.pose.position.y;
            if before.is_stopped() || o.is_none() {
                prop_assert_eq!(s.pose, before.pose);
                prop_assert_eq!(s.distance_scanned_mm, before.distance_scanned_mm);
            } else {
                prop_assert!((dy - 2.0).abs() < 1e-9);
                prop_assert_eq!(s.distance_scanned_mm, before.distance_scanned_mm + 2.0);
            }
            if o.is_none() && !before.is_stopped() {
                prop_assert_eq!(s.stop_reason, StopReason::VesselLost);
            }
        }
    }

    #[test]
    fn stopped_state_is_absorbing(offset in prop::option::of(-8.0f64..8.0), reason in 0usize..3) {
        let ph = PhantomModel::straight();
        let mut s = scanning(&ph);
        s.phase = Phase::Stopped;
        s.stop_reason = [StopReason::VesselLost, StopReason::LengthReached, StopReason::Contact][reason];
        let det = offset.map(detection).unwrap_or(Detection::absent(0.0));
        let (n, _) = control_step(&s, &det, &ph, &ControlConfig::default()).unwrap();
        prop_assert_eq!(n, s);
    }

    #[test]
    fn cross_sections_follow_the_centerline(y in 1.0f64..159.0, dx in -10.0f64..10.0, rot in -30.0f64..30.0) {
        let ph = PhantomModel::default().with_rotation(rot);
        let pose = ProbePose::new(dx, y, -12.0);
        if let Some(cs) = ph.vessel_cross_section(&pose) {
            prop_assert!((cs.axis_point.y - y).abs() < 1e-6);
            prop_assert!((cs.lateral_mm - (cs.axis_point.x - dx)).abs() < 1e-9);
            prop_assert!(cs.radius_mm >= cs.lumen_radius_mm);
            prop_assert!((cs.depth_mm - 8.0).abs() < 1e-9);
        }
    }

    #[test]
    fn contact_force_grows_with_indentation(z1 in -30.0f64..5.0, z2 in -30.0f64..5.0) {
        let ph = PhantomModel::default();
        let (lo, hi) = if z1 < z2 { (z1, z2) } else { (z2, z1) };
        let f_deep = ph.contact_force(&ProbePose::new(0.0, 50.0, lo));
        let f_shallow = ph.contact_force(&ProbePose::new(0.0, 50.0, hi));
        prop_assert!(f_deep >= f_shallow);
        prop_assert!(f_shallow >= 0.0);
    }
}

fn status() -> impl Strategy<Value = RobotStatus> {
    (any::<i32>(), any::<i32>(), any::<i32>(), any::<i32>(), any::<u64>(), any::<u8>()).prop_map(
        |(x_um, y_um, z_um, force_mn, timestamp_ms, flags)| RobotStatus { x_um, y_um, z_um, force_mn, timestamp_ms, flags },
    )
}

fn command() -> impl Strategy<Value = CommandMessage> {
    let cmd = prop_oneof![
        (any::<i32>(), any::<i32>(), any::<i32>()).prop_map(|(dx_um, dy_um, dz_um)| Command::MoveDelta { dx_um, dy_um, dz_um }),
        Just(Command::Stop),
        Just(Command::StatusRequest),
        status().prop_map(Command::Status),
    ];
    (any::<u32>(), cmd).prop_map(|(seq, command)| CommandMessage { seq, command })
}

fn frame() -> impl Strategy<Value = FrameMessage> {
    (any::<u32>(), any::<u64>(), 0u16..24, 0u16..24, any::<u16>()).prop_flat_map(|(seq, ts, rows, cols, sp)| {
        prop::collection::vec(any::<u8>(), rows as usize * cols as usize).prop_map(move |payload| FrameMessage {
            seq,
            timestamp_ms: ts,
            rows,
            cols,
            spacing_um: sp,
            payload,
        })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn command_codec_round_trips(m in command()) {
        let bytes = m.encode();
        prop_assert_eq!(CommandMessage::decode(&bytes).unwrap(), (m, bytes.len()));
    }

    #[test]
    fn frame_codec_round_trips(m in frame()) {
        let bytes = m.encode();
        prop_assert_eq!(bytes.len(), 22 + m.payload.len());
        prop_assert_eq!(FrameMessage::decode(&bytes).unwrap(), (m, bytes.len()));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn commands_survive_garbage_between_them(
        msgs in prop::collection::vec(command(), 1..8),
        garbage in prop::collection::vec(prop::collection::vec(any::<u8>(), 0..40), 8),
    ) {
        let mut bytes = Vec::new();
        for (m, g) in msgs.iter().zip(&garbage) {
            bytes.extend_from_slice(g);
            bytes.extend(m.encode());
        }
        bytes.extend_from_slice(&garbage[7]);
        prop_assert_eq!(decode_all::<CommandMessage>(&bytes), msgs.clone());
        let mut r = MessageReader::new(bytes.as_slice());
        for m in &msgs {
            prop_assert_eq!(r.next_message::<CommandMessage>().unwrap(), Some(*m));
        }
    }

    #[test]
    fn frames_survive_garbage_between_them(
        msgs in prop::collection::vec(frame(), 1..5),
        garbage in prop::collection::vec(prop::collection::vec(any::<u8>(), 0..40), 5),
    ) {
        let mut bytes = Vec::new();
        for (m, g) in msgs.iter().zip(&garbage) {
            bytes.extend_from_slice(g);
            bytes.extend(m.encode());
        }
        prop_assert_eq!(decode_all::<FrameMessage>(&bytes), msgs);
    }
}

#[test]
fn lumen_is_darker_than_surrounding_tissue() {
    let ph = PhantomModel::default();
    let r = Renderer::new(FrameGeometry::default());
    for seed in 0..5 {
        let (frame, truth) = r.render(&ph, &ProbePose::new(0.0, 40.0, -12.0), seed);
        let (c, row) = truth.center_px.unwrap();
        let mean = |dr: i64, dc: i64, half: i64| {
            let mut sum = 0.0;
            let mut n = 0.0;
            for y in -half..=half {
                for x in -half..=half {
                    sum += frame.at((row as i64 + dr + y) as usize, (c as i64 + dc + x) as usize) as f64;
                    n += 1.0;
                }
            }
            sum / n
        };
        let inside = mean(0, 0, 8);
        let beside = 0.5 * (mean(0, -60, 8) + mean(0, 60, 8));
        assert!(inside * 3.0 < beside, "seed {seed}: lumen {inside}, tissue {beside}");
    }
}
