//! Synthetic B-mode frames and labeled datasets.
//!
//! Frames are `rows x cols` 8-bit images. Rows run along depth from the
//! probe face, columns along the probe's lateral axis (world `+x`), with the
//! probe centre at column `(cols - 1) / 2`.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{ConfigError, DomainError};
use crate::geom::{ProbePose, Vec3};
use crate::kv::KeyValues;
use crate::phantom::{CrossSection, PhantomModel};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameGeometry {
    pub rows: usize,
    pub cols: usize,
    pub spacing_mm: f64,
}

impl Default for FrameGeometry {
    fn default() -> Self {
        Self { rows: 277, cols: 512, spacing_mm: 0.137 }
    }
}

impl FrameGeometry {
    pub fn center_col(&self) -> f64 {
        (self.cols as f64 - 1.0) / 2.0
    }

    pub fn lateral_mm_to_col(&self, lateral_mm: f64) -> f64 {
        self.center_col() + lateral_mm / self.spacing_mm
    }

    pub fn col_to_lateral_mm(&self, col: f64) -> f64 {
        (col - self.center_col()) * self.spacing_mm
    }

    pub fn depth_mm_to_row(&self, depth_mm: f64) -> f64 {
        depth_mm / self.spacing_mm
    }

    pub fn row_to_depth_mm(&self, row: f64) -> f64 {
        row * self.spacing_mm
    }

    pub fn pixel_count(&self) -> usize {
        self.rows * self.cols
    }

    /// Half of the lateral field of view, measured to the outer pixel centres.
    pub fn half_width_mm(&self) -> f64 {
        self.center_col() * self.spacing_mm
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.rows == 0 || self.cols == 0 || !(self.spacing_mm > 0.0 && self.spacing_mm.is_finite()) {
            return Err(ConfigError::Invalid(format!("bad frame geometry {self:?}")));
        }
        if self.rows > u16::MAX as usize || self.cols > u16::MAX as usize {
            return Err(ConfigError::Invalid("frame dimensions exceed 65535".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UsFrame {
    pub pixels: Vec<u8>,
    pub rows: usize,
    pub cols: usize,
    pub spacing_mm: f64,
    pub seq: u32,
    pub timestamp_ms: u64,
}

impl UsFrame {
    pub fn new(geometry: FrameGeometry, pixels: Vec<u8>) -> Result<Self, DomainError> {
        if pixels.len() != geometry.pixel_count() {
            return Err(DomainError::Invalid(format!(
                "pixel buffer has {} bytes, expected {}",
                pixels.len(),
                geometry.pixel_count()
            )));
        }
        Ok(Self {
            pixels,
            rows: geometry.rows,
            cols: geometry.cols,
            spacing_mm: geometry.spacing_mm,
            seq: 0,
            timestamp_ms: 0,
        })
    }

    pub fn geometry(&self) -> FrameGeometry {
        FrameGeometry { rows: self.rows, cols: self.cols, spacing_mm: self.spacing_mm }
    }

    pub fn at(&self, row: usize, col: usize) -> u8 {
        self.pixels[row * self.cols + col]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroundTruth {
    pub vessel_visible: bool,
    /// `(col, row)` in pixels.
    pub center_px: Option<(f64, f64)>,
    pub lumen_fully_inside: bool,
    /// Lateral offset of the vessel centre from the image centre line,
    /// available whenever the imaging plane cuts the vessel (even out of view).
    pub offset_mm: Option<f64>,
}

impl GroundTruth {
    pub fn analytic(phantom: &PhantomModel, pose: &ProbePose, geometry: &FrameGeometry) -> Self {
        let Some(cs) = phantom.vessel_cross_section(pose) else {
            return Self { vessel_visible: false, center_px: None, lumen_fully_inside: false, offset_mm: None };
        };
        let col = geometry.lateral_mm_to_col(cs.lateral_mm);
        let row = geometry.depth_mm_to_row(cs.depth_mm);
        let max_col = geometry.cols as f64 - 1.0;
        let max_row = geometry.rows as f64 - 1.0;
        let visible = (0.0..=max_col).contains(&col) && (0.0..=max_row).contains(&row);
        let half_w = cs.radius_mm / geometry.spacing_mm;
        let half_h = cs.depth_radius_mm / geometry.spacing_mm;
        let fully = visible
            && col - half_w >= 0.0
            && col + half_w <= max_col
            && row - half_h >= 0.0
            && row + half_h <= max_row;
        Self {
            vessel_visible: visible,
            center_px: visible.then_some((col, row)),
            lumen_fully_inside: fully,
            offset_mm: Some(cs.lateral_mm),
        }
    }

    /// True when no part of the lumen ellipse reaches into the frame.
    fn lumen_entirely_outside(cs: &CrossSection, geometry: &FrameGeometry) -> bool {
        let col = geometry.lateral_mm_to_col(cs.lateral_mm);
        let row = geometry.depth_mm_to_row(cs.depth_mm);
        let half_w = cs.radius_mm / geometry.spacing_mm;
        let half_h = cs.depth_radius_mm / geometry.spacing_mm;
        col + half_w < 0.0
            || col - half_w > geometry.cols as f64 - 1.0
            || row + half_h < 0.0
            || row - half_h > geometry.rows as f64 - 1.0
    }
}

/// Appearance parameters for the synthetic B-mode image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Appearance {
    pub tissue_level: f64,
    /// Amplitude attenuation per millimetre of depth.
    pub attenuation_per_mm: f64,
    pub lumen_level: f64,
    pub wall_gain: f64,
    pub wall_thickness_mm: f64,
    pub skin_level: f64,
    pub skin_thickness_mm: f64,
    /// Level of the near-empty image seen without acoustic coupling.
    pub uncoupled_level: f64,
}

impl Default for Appearance {
    fn default() -> Self {
        Self {
            tissue_level: 110.0,
            attenuation_per_mm: 0.02,
            lumen_level: 10.0,
            wall_gain: 1.8,
            wall_thickness_mm: 0.7,
            skin_level: 200.0,
            skin_thickness_mm: 0.8,
            uncoupled_level: 4.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Renderer {
    pub geometry: FrameGeometry,
    pub appearance: Appearance,
}

/// Unit-mean Rayleigh sample.
fn speckle(rng: &mut ChaCha8Rng) -> f64 {
    const SIGMA: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
    let u: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    SIGMA * (-2.0 * u.ln()).sqrt()
}

impl Renderer {
    pub fn new(geometry: FrameGeometry) -> Self {
        Self { geometry, appearance: Appearance::default() }
    }

    /// Renders one frame. Deterministic in `(phantom, pose, seed)`.
    pub fn render(&self, phantom: &PhantomModel, pose: &ProbePose, seed: u64) -> (UsFrame, GroundTruth) {
        self.render_with_gain(phantom, pose, seed, 1.0)
    }

    pub fn render_with_gain(
        &self,
        phantom: &PhantomModel,
        pose: &ProbePose,
        seed: u64,
        gain: f64,
    ) -> (UsFrame, GroundTruth) {
        let g = self.geometry;
        let a = self.appearance;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let truth = GroundTruth::analytic(phantom, pose, &g);
        let mut pixels = vec![0u8; g.pixel_count()];
        let p = pose.position;

        if phantom.indentation(pose) <= 0.0 {
            for px in pixels.iter_mut() {
                *px = (a.uncoupled_level * speckle(&mut rng)).round().clamp(0.0, 255.0) as u8;
            }
            return (UsFrame::new(g, pixels).expect("geometry-sized buffer"), truth);
        }

        let cross = phantom.vessel_cross_section(pose);
        let r_lumen = phantom.lumen_radius_mm;
        let r_wall = r_lumen + a.wall_thickness_mm;
        let in_tissue: Vec<bool> = (0..g.cols)
            .map(|c| {
                let x = p.x + g.col_to_lateral_mm(c as f64);
                phantom.surface_height(x, p.y).is_some()
            })
            .collect();

        for row in 0..g.rows {
            let depth = g.row_to_depth_mm(row as f64);
            let base = if depth < a.skin_thickness_mm {
                a.skin_level
            } else {
                a.tissue_level * (-a.attenuation_per_mm * depth).exp()
            };
            let z = p.z - depth;
            for (col, &coupled) in in_tissue.iter().enumerate() {
                let idx = row * g.cols + col;
                let noise = speckle(&mut rng);
                if !coupled {
                    pixels[idx] = (a.uncoupled_level * noise).round().clamp(0.0, 255.0) as u8;
                    continue;
                }
                let mut level = base;
                if let Some(cs) = &cross {
                    let q = Vec3::new(p.x + g.col_to_lateral_mm(col as f64), p.y, z);
                    let d = q - cs.axis_point;
                    let along = d.dot(cs.axis_dir);
                    let dist = (d.dot(d) - along * along).max(0.0).sqrt();
                    if dist < r_lumen {
                        level = a.lumen_level;
                    } else if dist < r_wall {
                        level = base * a.wall_gain;
                    }
                }
                pixels[idx] = (gain * level * noise).round().clamp(0.0, 255.0) as u8;
            }
        }
        (UsFrame::new(g, pixels).expect("geometry-sized buffer"), truth)
    }
}

/// Dataset generation parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DatasetConfig {
    pub n: usize,
    pub seed: u64,
    pub neg_fraction: f64,
    /// Extra phantom yaw drawn per sample from `[-j, j]` degrees so the
    /// networks see both orthogonal and oblique vessel crossings.
    pub yaw_jitter_deg: f64,
    pub indentation_range_mm: (f64, f64),
    pub gain_range: (f64, f64),
    /// Minimum gap between the vessel wall and the frame's lateral edge for
    /// positives, which are also always fully coupled across the probe face.
    /// The networks' valid convolutions cannot see a strip about 8 mm wide
    /// along each edge.
    pub edge_margin_mm: f64,
}

impl DatasetConfig {
    pub fn new(n: usize, seed: u64, neg_fraction: f64) -> Self {
        Self {
            n,
            seed,
            neg_fraction,
            yaw_jitter_deg: 35.0,
            indentation_range_mm: (10.0, 14.0),
            gain_range: (0.85, 1.15),
            edge_margin_mm: 8.0,
        }
    }
}

/// Pose and label for one sample, decided before rendering.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlannedSample {
    pub pose: ProbePose,
    pub yaw_deg: f64,
    pub gain: f64,
    pub render_seed: u64,
    pub truth: GroundTruth,
}

impl PlannedSample {
    pub fn label(&self) -> bool {
        self.truth.vessel_visible
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub pixels: Vec<u8>,
    pub label: bool,
    pub center_px: Option<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub geometry: FrameGeometry,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn positives(&self) -> usize {
        self.samples.iter().filter(|s| s.label).count()
    }
}

fn validate_dataset_config(cfg: &DatasetConfig) -> Result<(), DomainError> {
    if cfg.n == 0 {
        return Err(DomainError::Invalid("dataset size must be positive".into()));
    }
    if !(0.0..=1.0).contains(&cfg.neg_fraction) {
        return Err(DomainError::Invalid(format!("neg_fraction {} outside [0, 1]", cfg.neg_fraction)));
    }
    let (lo, hi) = cfg.indentation_range_mm;
    if !(lo > 0.0 && hi >= lo) {
        return Err(DomainError::Invalid("indentation range must be positive and ordered".into()));
    }
    if cfg.edge_margin_mm.is_nan() || cfg.edge_margin_mm < 0.0 {
        return Err(DomainError::Invalid(format!("edge margin {} mm must be non-negative", cfg.edge_margin_mm)));
    }
    Ok(())
}

/// Draws poses and labels. Exactly `round(n * neg_fraction)` samples are
/// negatives, in a seeded random order.
pub fn plan_dataset(
    phantom: &PhantomModel,
    geometry: &FrameGeometry,
    cfg: &DatasetConfig,
) -> Result<Vec<PlannedSample>, DomainError> {
    validate_dataset_config(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n_neg = ((cfg.n as f64) * cfg.neg_fraction).round() as usize;
    let mut labels: Vec<bool> = (0..cfg.n).map(|i| i >= n_neg).collect();
    for i in (1..labels.len()).rev() {
        let j = rng.gen_range(0..=i);
        labels.swap(i, j);
    }
    labels
        .into_iter()
        .map(|positive| {
            let yaw = if cfg.yaw_jitter_deg > 0.0 {
                rng.gen_range(-cfg.yaw_jitter_deg..=cfg.yaw_jitter_deg)
            } else {
                0.0
            };
            let ph = phantom.clone().with_rotation(phantom.rotation_z_deg + yaw);
            let pose = if positive {
                positive_pose(&ph, geometry, cfg, &mut rng)
            } else {
                negative_pose(&ph, geometry, cfg, &mut rng)
            }?;
            let gain = rng.gen_range(cfg.gain_range.0..=cfg.gain_range.1);
            Ok(PlannedSample {
                pose,
                yaw_deg: ph.rotation_z_deg,
                gain,
                render_seed: rng.gen(),
                truth: GroundTruth::analytic(&ph, &pose, geometry),
            })
        })
        .collect()
}

const MAX_TRIES: usize = 1000;

fn positive_pose(
    ph: &PhantomModel,
    g: &FrameGeometry,
    cfg: &DatasetConfig,
    rng: &mut ChaCha8Rng,
) -> Result<ProbePose, DomainError> {
    let end = ph.vessel_end();
    for _ in 0..MAX_TRIES {
        let s = rng.gen_range(0.05 * end..=0.95 * end);
        let c = ph.centerline_at(s)?;
        let indent = rng.gen_range(cfg.indentation_range_mm.0..=cfg.indentation_range_mm.1);
        let z = ph.surface_z_mm - indent;
        let probe = ProbePose::new(c.x, c.y, z);
        let Some(cs) = ph.vessel_cross_section(&probe) else { continue };
        let reach = g.half_width_mm() - cs.radius_mm - cfg.edge_margin_mm;
        if reach <= 0.0 {
            continue;
        }
        let u = rng.gen_range(-reach..=reach);
        let pose = ProbePose::new(cs.axis_point.x - u, c.y, z);
        let truth = GroundTruth::analytic(ph, &pose, g);
        let coupled = [-1.0, 1.0]
            .iter()
            .all(|side| ph.surface_height(pose.position.x + side * g.half_width_mm(), pose.position.y).is_some());
        if truth.lumen_fully_inside && coupled && ph.contact_force(&pose) > 0.0 {
            return Ok(pose);
        }
    }
    Err(DomainError::Invalid("could not place a positive sample; frame too small for the lumen".into()))
}

fn negative_pose(
    ph: &PhantomModel,
    g: &FrameGeometry,
    cfg: &DatasetConfig,
    rng: &mut ChaCha8Rng,
) -> Result<ProbePose, DomainError> {
    let end = ph.vessel_end();
    for _ in 0..MAX_TRIES {
        let indent = rng.gen_range(cfg.indentation_range_mm.0..=cfg.indentation_range_mm.1);
        let z = ph.surface_z_mm - indent;
        let pose = if rng.gen_bool(0.75) {
            // Beside the vessel, far enough that no lumen pixel is in view.
            let s = rng.gen_range(0.05 * end..=0.95 * end);
            let c = ph.centerline_at(s)?;
            let probe = ProbePose::new(c.x, c.y, z);
            let Some(cs) = ph.vessel_cross_section(&probe) else { continue };
            let min = g.half_width_mm() + cs.radius_mm + 2.0;
            let off = rng.gen_range(min..=min + 20.0);
            let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            ProbePose::new(cs.axis_point.x + sign * off, c.y, z)
        } else {
            // Past either end of the vessel.
            let (s, dir) = if rng.gen_bool(0.5) { (0.0, -1.0) } else { (end, 1.0) };
            let c = ph.centerline_at(s)?;
            let gap = rng.gen_range(6.0..=ph.end_margin_mm.max(6.5) - 0.5);
            let lateral = rng.gen_range(-10.0..=10.0);
            ProbePose::new(c.x + lateral, c.y + dir * gap, z)
        };
        if ph.contact_force(&pose) <= 0.0 {
            continue;
        }
        let clear = match ph.vessel_cross_section(&pose) {
            None => true,
            Some(cs) => GroundTruth::lumen_entirely_outside(&cs, g),
        };
        if clear {
            return Ok(pose);
        }
    }
    Err(DomainError::Invalid("could not place a negative sample on the tissue block".into()))
}

/// Renders one planned sample.
pub fn render_planned(
    phantom: &PhantomModel,
    renderer: &Renderer,
    plan: &PlannedSample,
) -> Sample {
    let ph = phantom.clone().with_rotation(plan.yaw_deg);
    let (frame, truth) = renderer.render_with_gain(&ph, &plan.pose, plan.render_seed, plan.gain);
    Sample { pixels: frame.pixels, label: truth.vessel_visible, center_px: truth.center_px }
}

/// Generates `cfg.n` labeled frames from randomized poses.
pub fn generate_dataset(
    phantom: &PhantomModel,
    renderer: &Renderer,
    cfg: &DatasetConfig,
) -> Result<Dataset, DomainError> {
    let plan = plan_dataset(phantom, &renderer.geometry, cfg)?;
    let samples = plan.iter().map(|p| render_planned(phantom, renderer, p)).collect();
    Ok(Dataset { geometry: renderer.geometry, samples })
}

pub const MANIFEST_FILE: &str = "manifest.csv";
pub const GEOMETRY_FILE: &str = "geometry.txt";

/// Writes raw frames plus `manifest.csv` (`filename,label,center_col_px,center_row_px`)
/// and `geometry.txt`.
pub fn write_dataset(dataset: &Dataset, dir: &Path) -> std::io::Result<()> {
    fs::create_dir_all(dir)?;
    let g = dataset.geometry;
    fs::write(
        dir.join(GEOMETRY_FILE),
        format!("rows = {}\ncols = {}\nspacing_mm = {}\n", g.rows, g.cols, g.spacing_mm),
    )?;
    let mut manifest = std::io::BufWriter::new(fs::File::create(dir.join(MANIFEST_FILE))?);
    for (i, s) in dataset.samples.iter().enumerate() {
        let name = format!("frame_{i:06}.raw");
        fs::write(dir.join(&name), &s.pixels)?;
        match s.center_px {
            Some((c, r)) if s.label => writeln!(manifest, "{name},1,{c},{r}")?,
            _ => writeln!(manifest, "{name},0,,")?,
        }
    }
    manifest.flush()
}

pub fn read_dataset(dir: &Path) -> anyhow::Result<Dataset> {
    use anyhow::Context;
    let kv = KeyValues::load(&dir.join(GEOMETRY_FILE))?;
    let geometry = FrameGeometry {
        rows: kv.get("rows")?.context("geometry.txt: rows missing")?,
        cols: kv.get("cols")?.context("geometry.txt: cols missing")?,
        spacing_mm: kv.get("spacing_mm")?.context("geometry.txt: spacing_mm missing")?,
    };
    geometry.validate()?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .from_path(dir.join(MANIFEST_FILE))
        .context("opening manifest")?;
    let mut samples = Vec::new();
    for record in reader.records() {
        let record = record?;
        anyhow::ensure!(record.len() == 4, "manifest line {:?} must have 4 fields", record);
        let pixels = fs::read(dir.join(&record[0])).with_context(|| format!("reading {}", &record[0]))?;
        anyhow::ensure!(
            pixels.len() == geometry.pixel_count(),
            "{}: {} bytes, expected {}",
            &record[0],
            pixels.len(),
            geometry.pixel_count()
        );
        let label = match &record[1] {
            "1" => true,
            "0" => false,
            other => anyhow::bail!("bad label {other:?}"),
        };
        let center_px = if label {
            Some((record[2].parse::<f64>()?, record[3].parse::<f64>()?))
        } else {
            None
        };
        samples.push(Sample { pixels, label, center_px });
    }
    Ok(Dataset { geometry, samples })
}
