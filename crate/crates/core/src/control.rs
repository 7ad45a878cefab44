//! Translational visual servoing: hold the contact force, step distally
//! while a vessel is detected, re-centre laterally outside the margin.

use std::fmt;
use std::io::Write as _;
use std::path::Path;

use thiserror::Error;

use crate::detector::{derive_seed, DetectError, Detection, VesselDetector};
use crate::error::ConfigError;
use crate::geom::{EeDelta, ProbePose};
use crate::kv::KeyValues;
use crate::phantom::PhantomModel;
use crate::renderer::{GroundTruth, Renderer, UsFrame};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ControlConfig {
    pub force_target_n: f64,
    pub force_tolerance_n: f64,
    pub y_step_mm: f64,
    pub margin_px: f64,
    pub spacing_mm: f64,
    pub max_x_step_mm: f64,
    pub z_seek_increment_mm: f64,
    pub scan_length_mm: f64,
    pub seek_max_iterations: usize,
    /// Consecutive negative frames required before stopping.
    pub debounce: usize,
    pub frame_rate_hz: f64,
    /// Start pose: height above the skin, lateral offset from the vessel start.
    pub start_height_mm: f64,
    pub start_offset_x_mm: f64,
}

impl Default for ControlConfig {
    fn default() -> Self {
        Self {
            force_target_n: 6.0,
            force_tolerance_n: 0.1,
            y_step_mm: 2.0,
            margin_px: 20.0,
            spacing_mm: 0.137,
            max_x_step_mm: 2.0,
            z_seek_increment_mm: 0.2,
            scan_length_mm: 140.0,
            seek_max_iterations: 1000,
            debounce: 1,
            frame_rate_hz: 3.9,
            start_height_mm: 3.0,
            start_offset_x_mm: 0.0,
        }
    }
}

const KNOWN_KEYS: &[&str] = &[
    "force_target_n",
    "force_tolerance_n",
    "y_step_mm",
    "margin_px",
    "spacing_mm",
    "max_x_step_mm",
    "z_seek_increment_mm",
    "scan_length_mm",
    "seek_max_iterations",
    "debounce",
    "frame_rate_hz",
    "start_height_mm",
    "start_offset_x_mm",
];

impl ControlConfig {
    pub fn margin_mm(&self) -> f64 {
        self.margin_px * self.spacing_mm
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let positive = [
            ("force_target_n", self.force_target_n),
            ("force_tolerance_n", self.force_tolerance_n),
            ("y_step_mm", self.y_step_mm),
            ("margin_px", self.margin_px),
            ("spacing_mm", self.spacing_mm),
            ("max_x_step_mm", self.max_x_step_mm),
            ("z_seek_increment_mm", self.z_seek_increment_mm),
            ("scan_length_mm", self.scan_length_mm),
            ("frame_rate_hz", self.frame_rate_hz),
        ];
        for (key, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(ConfigError::InvalidValue { key: key.into(), value: v.to_string() });
            }
        }
        if self.seek_max_iterations == 0 || self.debounce == 0 {
            return Err(ConfigError::Invalid("seek_max_iterations and debounce must be at least 1".into()));
        }
        if !self.start_height_mm.is_finite() || !self.start_offset_x_mm.is_finite() {
            return Err(ConfigError::Invalid("start pose must be finite".into()));
        }
        Ok(())
    }

    pub fn from_kv(kv: &KeyValues) -> Result<Self, ConfigError> {
        kv.check_known(KNOWN_KEYS)?;
        let mut c = Self::default();
        kv.apply("force_target_n", &mut c.force_target_n)?;
        kv.apply("force_tolerance_n", &mut c.force_tolerance_n)?;
        kv.apply("y_step_mm", &mut c.y_step_mm)?;
        kv.apply("margin_px", &mut c.margin_px)?;
        kv.apply("spacing_mm", &mut c.spacing_mm)?;
        kv.apply("max_x_step_mm", &mut c.max_x_step_mm)?;
        kv.apply("z_seek_increment_mm", &mut c.z_seek_increment_mm)?;
        kv.apply("scan_length_mm", &mut c.scan_length_mm)?;
        kv.apply("seek_max_iterations", &mut c.seek_max_iterations)?;
        kv.apply("debounce", &mut c.debounce)?;
        kv.apply("frame_rate_hz", &mut c.frame_rate_hz)?;
        kv.apply("start_height_mm", &mut c.start_height_mm)?;
        kv.apply("start_offset_x_mm", &mut c.start_offset_x_mm)?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        Self::from_kv(&KeyValues::load(path)?)
    }

    /// Start pose over the vessel start of `phantom`.
    pub fn start_pose(&self, phantom: &PhantomModel) -> ProbePose {
        let mut pose = phantom.start_pose(self.start_height_mm);
        pose.position.x += self.start_offset_x_mm;
        pose
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    SeekForce,
    Scanning,
    Stopped,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    None,
    VesselLost,
    LengthReached,
    Contact,
}

impl StopReason {
    pub fn as_str(self) -> &'static str {
        match self {
            StopReason::None => "none",
            StopReason::VesselLost => "vessel_lost",
            StopReason::LengthReached => "length_reached",
            StopReason::Contact => "contact",
        }
    }

    /// Stops other than reaching the planned length abort the scan.
    pub fn is_abort(self) -> bool {
        matches!(self, StopReason::VesselLost | StopReason::Contact)
    }
}

impl fmt::Display for StopReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ControlState {
    pub phase: Phase,
    pub pose: ProbePose,
    pub force_n: f64,
    pub distance_scanned_mm: f64,
    pub stop_reason: StopReason,
    pub consecutive_negatives: usize,
}

impl ControlState {
    pub fn new(pose: ProbePose) -> Self {
        Self {
            phase: Phase::SeekForce,
            pose,
            force_n: 0.0,
            distance_scanned_mm: 0.0,
            stop_reason: StopReason::None,
            consecutive_negatives: 0,
        }
    }

    pub fn is_stopped(&self) -> bool {
        self.phase == Phase::Stopped
    }

    fn stop(&mut self, reason: StopReason) {
        self.phase = Phase::Stopped;
        self.stop_reason = reason;
    }
}

#[derive(Debug, Error)]
pub enum ControlError {
    #[error("no contact force within {iterations} seek iterations (probe off the phantom?)")]
    Contact { iterations: usize },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error(transparent)]
    Detect(#[from] DetectError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("plant: {0}")]
    Plant(String),
}

/// Moves the probe along the end-effector z axis in fixed increments until
/// the contact force is within tolerance of the target.
pub fn seek_force(state: &ControlState, phantom: &PhantomModel, cfg: &ControlConfig) -> Result<ControlState, ControlError> {
    if state.is_stopped() {
        return Err(ControlError::Contract("cannot seek force in a stopped state".into()));
    }
    let mut pose = state.pose;
    let mut force = phantom.contact_force(&pose);
    let mut iterations = 0;
    while (force - cfg.force_target_n).abs() > cfg.force_tolerance_n {
        if iterations == cfg.seek_max_iterations {
            return Err(ControlError::Contact { iterations });
        }
        // end-effector +z points into the tissue
        let dz = if force < cfg.force_target_n { cfg.z_seek_increment_mm } else { -cfg.z_seek_increment_mm };
        pose = pose.translated_ee(EeDelta { dx: 0.0, dy: 0.0, dz });
        force = phantom.contact_force(&pose);
        iterations += 1;
    }
    Ok(ControlState { phase: Phase::Scanning, pose, force_n: force, ..*state })
}

/// Lateral end-effector command for a positive detection.
pub fn x_correction(detection: &Detection, cfg: &ControlConfig) -> Result<f64, ControlError> {
    if !detection.vessel_present {
        return Err(ControlError::Contract("x_correction needs a positive detection".into()));
    }
    let offset = detection
        .center_mm_offset
        .ok_or_else(|| ControlError::Contract("positive detection without a centre".into()))?;
    if !offset.is_finite() {
        return Err(ControlError::Contract(format!("non-finite offset {offset}")));
    }
    if offset.abs() <= cfg.margin_mm() + 1e-9 {
        return Ok(0.0);
    }
    Ok(-offset.signum() * offset.abs().min(cfg.max_x_step_mm))
}

/// What the controller wants the robot to do after one frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Decision {
    Stop(StopReason),
    /// Negative frame below the debounce count: stay put.
    Hold,
    /// Combined lateral correction and distal step, followed by a re-seek.
    Advance(EeDelta),
}

/// Decision part of a control step. Updates the negative-frame counter.
pub fn decide(state: &mut ControlState, detection: &Detection, cfg: &ControlConfig) -> Result<Decision, ControlError> {
    if !detection.vessel_present {
        state.consecutive_negatives += 1;
        return Ok(if state.consecutive_negatives >= cfg.debounce {
            Decision::Stop(StopReason::VesselLost)
        } else {
            Decision::Hold
        });
    }
    state.consecutive_negatives = 0;
    let dx = x_correction(detection, cfg)?;
    Ok(Decision::Advance(EeDelta { dx, dy: cfg.y_step_mm, dz: 0.0 }))
}

/// Command issued in one control step, in the end-effector frame. `dz`
/// is the net re-seek travel.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct CommandRecord {
    pub delta: EeDelta,
}

/// A robot with force control plus an imaging source.
pub trait Plant {
    /// Establishes contact at the current pose.
    fn seek(&mut self, cfg: &ControlConfig) -> Result<(ProbePose, f64), ControlError>;
    /// Applies a translation, then re-seeks the contact force.
    fn move_and_seek(&mut self, delta: EeDelta, cfg: &ControlConfig) -> Result<(ProbePose, f64), ControlError>;
    /// Latest frame and its ground truth, plus the acquisition time.
    fn acquire(&mut self, step: usize, cfg: &ControlConfig) -> Result<(UsFrame, GroundTruth), ControlError>;
}

fn apply_decision(
    state: &ControlState,
    decision: Decision,
    cfg: &ControlConfig,
    mut move_and_seek: impl FnMut(EeDelta) -> Result<(ProbePose, f64), ControlError>,
) -> Result<(ControlState, CommandRecord), ControlError> {
    let mut next = *state;
    match decision {
        Decision::Stop(reason) => {
            next.stop(reason);
            Ok((next, CommandRecord::default()))
        }
        Decision::Hold => Ok((next, CommandRecord::default())),
        Decision::Advance(delta) => match move_and_seek(delta) {
            Ok((pose, force)) => {
                let dz = state.pose.position.z - pose.position.z;
                next.pose = pose;
                next.force_n = force;
                next.phase = Phase::Scanning;
                next.distance_scanned_mm += delta.dy;
                if next.distance_scanned_mm >= cfg.scan_length_mm - 1e-9 {
                    next.stop(StopReason::LengthReached);
                }
                Ok((next, CommandRecord { delta: EeDelta { dz, ..delta } }))
            }
            Err(ControlError::Contact { .. }) => {
                next.stop(StopReason::Contact);
                Ok((next, CommandRecord { delta }))
            }
            Err(e) => Err(e),
        },
    }
}

/// One sense-decide-act cycle against the simulated phantom. A stopped
/// state is returned unchanged.
pub fn control_step(
    state: &ControlState,
    detection: &Detection,
    phantom: &PhantomModel,
    cfg: &ControlConfig,
) -> Result<(ControlState, CommandRecord), ControlError> {
    match state.phase {
        Phase::Stopped => return Ok((*state, CommandRecord::default())),
        Phase::SeekForce => return Err(ControlError::Contract("control_step before contact was established".into())),
        Phase::Scanning => {}
    }
    let mut next = *state;
    let decision = decide(&mut next, detection, cfg)?;
    apply_decision(&next, decision, cfg, |delta| {
        let moved = ControlState { pose: state.pose.translated_ee(delta), ..next };
        let sought = seek_force(&moved, phantom, cfg)?;
        Ok((sought.pose, sought.force_n))
    })
}

/// In-process plant: kinematic robot on the phantom, frames from the renderer.
#[derive(Debug, Clone)]
pub struct SimPlant<'a> {
    pub phantom: &'a PhantomModel,
    pub renderer: &'a Renderer,
    pub pose: ProbePose,
    pub seed: u64,
}

impl<'a> SimPlant<'a> {
    pub fn new(phantom: &'a PhantomModel, renderer: &'a Renderer, pose: ProbePose, seed: u64) -> Self {
        Self { phantom, renderer, pose, seed }
    }
}

impl Plant for SimPlant<'_> {
    fn seek(&mut self, cfg: &ControlConfig) -> Result<(ProbePose, f64), ControlError> {
        let s = seek_force(&ControlState::new(self.pose), self.phantom, cfg)?;
        self.pose = s.pose;
        Ok((s.pose, s.force_n))
    }

    fn move_and_seek(&mut self, delta: EeDelta, cfg: &ControlConfig) -> Result<(ProbePose, f64), ControlError> {
        self.pose = self.pose.translated_ee(delta);
        self.seek(cfg)
    }

    fn acquire(&mut self, step: usize, cfg: &ControlConfig) -> Result<(UsFrame, GroundTruth), ControlError> {
        let (mut frame, truth) = self.renderer.render(self.phantom, &self.pose, derive_seed(self.seed, step as u64));
        frame.seq = step as u32;
        frame.timestamp_ms = simulated_time_ms(step, cfg);
        Ok((frame, truth))
    }
}

/// Frame time of control cycle `step` at the configured frame rate.
pub fn simulated_time_ms(step: usize, cfg: &ControlConfig) -> u64 {
    (step as f64 * 1000.0 / cfg.frame_rate_hz).round() as u64
}

/// One row of a scan log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScanEntry {
    pub step: usize,
    pub time_ms: u64,
    pub pose: ProbePose,
    pub force_n: f64,
    pub detected: bool,
    pub det_center_col_px: Option<f64>,
    pub det_offset_mm: Option<f64>,
    pub gt_center_col_px: Option<f64>,
    pub gt_offset_mm: Option<f64>,
    pub gt_lumen_fully_visible: bool,
    pub cmd_dx_mm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScanLog {
    pub entries: Vec<ScanEntry>,
    pub stop_reason: StopReason,
    pub distance_scanned_mm: f64,
}

pub const SCAN_LOG_HEADER: [&str; 13] = [
    "step",
    "time_ms",
    "pose_x_mm",
    "pose_y_mm",
    "pose_z_mm",
    "force_n",
    "detected",
    "det_center_col_px",
    "det_offset_mm",
    "gt_center_col_px",
    "gt_offset_mm",
    "gt_lumen_fully_visible",
    "cmd_dx_mm",
];

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn parse_opt(s: &str) -> anyhow::Result<Option<f64>> {
    Ok(if s.is_empty() { None } else { Some(s.parse()?) })
}

impl ScanLog {
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(SCAN_LOG_HEADER)?;
        for e in &self.entries {
            let p = e.pose.position;
            w.write_record(&[
                e.step.to_string(),
                e.time_ms.to_string(),
                p.x.to_string(),
                p.y.to_string(),
                p.z.to_string(),
                e.force_n.to_string(),
                (e.detected as u8).to_string(),
                opt(e.det_center_col_px),
                opt(e.det_offset_mm),
                opt(e.gt_center_col_px),
                opt(e.gt_offset_mm),
                (e.gt_lumen_fully_visible as u8).to_string(),
                e.cmd_dx_mm.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> anyhow::Result<()> {
        let mut f = std::fs::File::create(path)?;
        self.write_csv(&mut f)?;
        f.flush()?;
        Ok(())
    }

    /// Reads the entries back. The stop reason is not part of the CSV and
    /// comes back as `None`; distance is taken from the y travel.
    pub fn read_csv<R: std::io::Read>(input: R) -> anyhow::Result<Self> {
        let mut r = csv::Reader::from_reader(input);
        let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
        anyhow::ensure!(header == SCAN_LOG_HEADER, "unexpected scan log header {header:?}");
        let mut entries = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let f = |i: usize| rec.get(i).unwrap_or("");
            entries.push(ScanEntry {
                step: f(0).parse()?,
                time_ms: f(1).parse()?,
                pose: ProbePose::new(f(2).parse()?, f(3).parse()?, f(4).parse()?),
                force_n: f(5).parse()?,
                detected: f(6) == "1",
                det_center_col_px: parse_opt(f(7))?,
                det_offset_mm: parse_opt(f(8))?,
                gt_center_col_px: parse_opt(f(9))?,
                gt_offset_mm: parse_opt(f(10))?,
                gt_lumen_fully_visible: f(11) == "1",
                cmd_dx_mm: f(12).parse()?,
            });
        }
        let distance = match (entries.first(), entries.last()) {
            (Some(a), Some(b)) => b.pose.position.y - a.pose.position.y,
            _ => 0.0,
        };
        Ok(Self { entries, stop_reason: StopReason::None, distance_scanned_mm: distance })
    }
}

/// Runs a scan in-process on the simulated phantom.
pub fn run_scan(
    phantom: &PhantomModel,
    cfg: &ControlConfig,
    detector: &dyn VesselDetector,
    renderer: &Renderer,
    seed: u64,
) -> Result<ScanLog, ControlError> {
    cfg.validate()?;
    let mut plant = SimPlant::new(phantom, renderer, cfg.start_pose(phantom), seed);
    run_scan_on(&mut plant, cfg, detector)
}

/// Control loop against any plant. Every frame is logged; the loop ends
/// when the controller stops.
pub fn run_scan_on(plant: &mut dyn Plant, cfg: &ControlConfig, detector: &dyn VesselDetector) -> Result<ScanLog, ControlError> {
    cfg.validate()?;
    let mut log = ScanLog { entries: Vec::new(), stop_reason: StopReason::None, distance_scanned_mm: 0.0 };
    let mut state = ControlState::new(ProbePose::default());
    match plant.seek(cfg) {
        Ok((pose, force)) => {
            state.pose = pose;
            state.force_n = force;
            state.phase = Phase::Scanning;
        }
        Err(ControlError::Contact { iterations }) => {
            log::warn!("no initial contact after {iterations} seek iterations");
            log.stop_reason = StopReason::Contact;
            return Ok(log);
        }
        Err(e) => return Err(e),
    }
    let max_steps = ((cfg.scan_length_mm / cfg.y_step_mm).ceil() as usize + 1) * cfg.debounce + 1;
    for step in 0..max_steps {
        let (frame, truth) = plant.acquire(step, cfg)?;
        let detection = detector.detect(&frame, &truth)?;
        let mut next = state;
        let decision = decide(&mut next, &detection, cfg)?;
        let (next, cmd) = apply_decision(&next, decision, cfg, |d| plant.move_and_seek(d, cfg))?;
        log.entries.push(ScanEntry {
            step,
            time_ms: frame.timestamp_ms,
            pose: state.pose,
            force_n: state.force_n,
            detected: detection.vessel_present,
            det_center_col_px: detection.center_px.map(|c| c.0),
            det_offset_mm: detection.center_mm_offset,
            gt_center_col_px: truth.center_px.map(|c| c.0),
            gt_offset_mm: truth.offset_mm,
            gt_lumen_fully_visible: truth.lumen_fully_inside,
            cmd_dx_mm: cmd.delta.dx,
        });
        state = next;
        if state.is_stopped() {
            break;
        }
    }
    if state.stop_reason == StopReason::VesselLost && log.entries.len() == 1 {
        log::warn!("initial frame classified negative; stopping immediately");
    }
    log.stop_reason = state.stop_reason;
    log.distance_scanned_mm = state.distance_scanned_mm;
    Ok(log)
}
