//! Simulated leg phantom: one vessel tube below a flat skin surface, a
//! linear contact spring, and a yaw rotation used for the oblique scan
//! scenario.

use std::f64::consts::PI;
use std::path::Path;

use crate::error::{ConfigError, DomainError};
use crate::geom::{ProbePose, Vec3};
use crate::kv::KeyValues;

/// Vessel centerline shape in the phantom's own (unrotated) frame, where
/// the vessel runs along `+y`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Centerline {
    Straight,
    /// Lateral wander `x(s) = amplitude * sin(2 pi s / wavelength)`.
    Sine { amplitude_mm: f64, wavelength_mm: f64 },
}

impl Centerline {
    fn lateral(&self, s: f64) -> f64 {
        match *self {
            Centerline::Straight => 0.0,
            Centerline::Sine { amplitude_mm, wavelength_mm } => {
                amplitude_mm * (2.0 * PI * s / wavelength_mm).sin()
            }
        }
    }

    fn lateral_slope(&self, s: f64) -> f64 {
        match *self {
            Centerline::Straight => 0.0,
            Centerline::Sine { amplitude_mm, wavelength_mm } => {
                let w = 2.0 * PI / wavelength_mm;
                amplitude_mm * w * (w * s).cos()
            }
        }
    }

    fn max_lateral_deviation(&self) -> f64 {
        match *self {
            Centerline::Straight => 0.0,
            Centerline::Sine { amplitude_mm, .. } => 2.0 * amplitude_mm.abs(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomModel {
    pub centerline: Centerline,
    /// World `(x, y)` of the centerline start `s = 0`; also the rotation pivot.
    pub origin_x_mm: f64,
    pub origin_y_mm: f64,
    /// Centerline arc length `L`.
    pub length_mm: f64,
    /// Depth of the centerline below the skin.
    pub depth_mm: f64,
    pub lumen_radius_mm: f64,
    pub stiffness_n_per_mm: f64,
    pub rotation_z_deg: f64,
    /// World `z` of the (flat) skin surface.
    pub surface_z_mm: f64,
    /// Half width of the tissue block across the vessel.
    pub half_width_mm: f64,
    /// Tissue extends this far beyond both vessel ends along the limb.
    pub end_margin_mm: f64,
    /// The lumen is occluded beyond this arc length, when set.
    pub vessel_end_mm: Option<f64>,
    pub max_lateral_deviation_mm: f64,
}

impl Default for PhantomModel {
    fn default() -> Self {
        Self {
            centerline: Centerline::Sine { amplitude_mm: 5.0, wavelength_mm: 160.0 },
            origin_x_mm: 0.0,
            origin_y_mm: 0.0,
            length_mm: 200.0,
            depth_mm: 20.0,
            lumen_radius_mm: 3.0,
            stiffness_n_per_mm: 0.5,
            rotation_z_deg: 0.0,
            surface_z_mm: 0.0,
            half_width_mm: 60.0,
            end_margin_mm: 20.0,
            vessel_end_mm: None,
            max_lateral_deviation_mm: 15.0,
        }
    }
}

/// Intersection of the imaging plane with the vessel tube, in image-plane
/// millimetres: `lateral` along the image columns (world `+x`) relative to
/// the probe centre, `depth` below the probe face.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CrossSection {
    pub lateral_mm: f64,
    pub depth_mm: f64,
    /// Lateral semi-axis of the lumen ellipse; equals the lumen radius when
    /// the vessel crosses the plane orthogonally.
    pub radius_mm: f64,
    /// Semi-axis along depth.
    pub depth_radius_mm: f64,
    /// Centerline point and unit tangent where the plane cuts the vessel.
    pub axis_point: Vec3,
    pub axis_dir: Vec3,
    pub lumen_radius_mm: f64,
}

const KNOWN_KEYS: &[&str] = &[
    "centerline",
    "sine_amplitude_mm",
    "sine_wavelength_mm",
    "origin_x_mm",
    "origin_y_mm",
    "length_mm",
    "depth_mm",
    "lumen_radius_mm",
    "stiffness_n_per_mm",
    "rotation_z_deg",
    "surface_z_mm",
    "half_width_mm",
    "end_margin_mm",
    "vessel_end_mm",
    "max_lateral_deviation_mm",
];

impl PhantomModel {
    pub fn straight() -> Self {
        Self { centerline: Centerline::Straight, ..Self::default() }
    }

    pub fn with_rotation(mut self, deg: f64) -> Self {
        self.rotation_z_deg = deg;
        self
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |msg: String| Err(ConfigError::Invalid(msg));
        let finite = [
            self.origin_x_mm,
            self.origin_y_mm,
            self.length_mm,
            self.depth_mm,
            self.lumen_radius_mm,
            self.stiffness_n_per_mm,
            self.rotation_z_deg,
            self.surface_z_mm,
            self.half_width_mm,
            self.end_margin_mm,
            self.max_lateral_deviation_mm,
        ];
        if finite.iter().any(|v| !v.is_finite()) {
            return bad("phantom parameters must be finite".into());
        }
        if self.length_mm < 160.0 {
            return bad(format!("length_mm {} < 160", self.length_mm));
        }
        if self.lumen_radius_mm <= 0.0 {
            return bad("lumen_radius_mm must be positive".into());
        }
        if self.depth_mm <= self.lumen_radius_mm + 1.0 {
            return bad(format!(
                "depth_mm {} must exceed lumen_radius_mm + 1 = {}",
                self.depth_mm,
                self.lumen_radius_mm + 1.0
            ));
        }
        if self.stiffness_n_per_mm <= 0.0 {
            return bad("stiffness_n_per_mm must be positive".into());
        }
        if self.half_width_mm <= 0.0 || self.end_margin_mm < 0.0 {
            return bad("tissue footprint must be non-empty".into());
        }
        if let Centerline::Sine { wavelength_mm, .. } = self.centerline {
            if !(wavelength_mm.is_finite() && wavelength_mm > 0.0) {
                return bad("sine_wavelength_mm must be positive".into());
            }
        }
        if self.centerline.max_lateral_deviation() > self.max_lateral_deviation_mm {
            return bad(format!(
                "centerline lateral deviation {} exceeds {} mm",
                self.centerline.max_lateral_deviation(),
                self.max_lateral_deviation_mm
            ));
        }
        if let Some(end) = self.vessel_end_mm {
            if !(end.is_finite() && end > 0.0 && end <= self.length_mm) {
                return bad(format!("vessel_end_mm {end} outside (0, length_mm]"));
            }
        }
        Ok(())
    }

    pub fn from_kv(kv: &KeyValues) -> Result<Self, ConfigError> {
        kv.check_known(KNOWN_KEYS)?;
        let mut m = Self::default();
        let (mut amp, mut wl) = match m.centerline {
            Centerline::Sine { amplitude_mm, wavelength_mm } => (amplitude_mm, wavelength_mm),
            Centerline::Straight => unreachable!(),
        };
        kv.apply("sine_amplitude_mm", &mut amp)?;
        kv.apply("sine_wavelength_mm", &mut wl)?;
        m.centerline = match kv.get_str("centerline").unwrap_or("sine") {
            "sine" => Centerline::Sine { amplitude_mm: amp, wavelength_mm: wl },
            "straight" => Centerline::Straight,
            other => {
                return Err(ConfigError::InvalidValue {
                    key: "centerline".into(),
                    value: other.into(),
                })
            }
        };
        kv.apply("origin_x_mm", &mut m.origin_x_mm)?;
        kv.apply("origin_y_mm", &mut m.origin_y_mm)?;
        kv.apply("length_mm", &mut m.length_mm)?;
        kv.apply("depth_mm", &mut m.depth_mm)?;
        kv.apply("lumen_radius_mm", &mut m.lumen_radius_mm)?;
        kv.apply("stiffness_n_per_mm", &mut m.stiffness_n_per_mm)?;
        kv.apply("rotation_z_deg", &mut m.rotation_z_deg)?;
        kv.apply("surface_z_mm", &mut m.surface_z_mm)?;
        kv.apply("half_width_mm", &mut m.half_width_mm)?;
        kv.apply("end_margin_mm", &mut m.end_margin_mm)?;
        kv.apply("max_lateral_deviation_mm", &mut m.max_lateral_deviation_mm)?;
        m.vessel_end_mm = kv.get("vessel_end_mm")?;
        m.validate()?;
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        Self::from_kv(&KeyValues::load(path)?)
    }

    /// Serializes to the `key = value` format accepted by [`Self::from_kv`].
    pub fn to_config_string(&self) -> String {
        let mut out = String::new();
        match self.centerline {
            Centerline::Straight => out.push_str("centerline = straight\n"),
            Centerline::Sine { amplitude_mm, wavelength_mm } => {
                out.push_str("centerline = sine\n");
                out.push_str(&format!("sine_amplitude_mm = {amplitude_mm}\n"));
                out.push_str(&format!("sine_wavelength_mm = {wavelength_mm}\n"));
            }
        }
        for (k, v) in [
            ("origin_x_mm", self.origin_x_mm),
            ("origin_y_mm", self.origin_y_mm),
            ("length_mm", self.length_mm),
            ("depth_mm", self.depth_mm),
            ("lumen_radius_mm", self.lumen_radius_mm),
            ("stiffness_n_per_mm", self.stiffness_n_per_mm),
            ("rotation_z_deg", self.rotation_z_deg),
            ("surface_z_mm", self.surface_z_mm),
            ("half_width_mm", self.half_width_mm),
            ("end_margin_mm", self.end_margin_mm),
            ("max_lateral_deviation_mm", self.max_lateral_deviation_mm),
        ] {
            out.push_str(&format!("{k} = {v}\n"));
        }
        if let Some(end) = self.vessel_end_mm {
            out.push_str(&format!("vessel_end_mm = {end}\n"));
        }
        out
    }

    fn pivot(&self) -> Vec3 {
        Vec3::new(self.origin_x_mm, self.origin_y_mm, 0.0)
    }

    fn rotation_rad(&self) -> f64 {
        self.rotation_z_deg.to_radians()
    }

    fn local_point(&self, s: f64) -> Vec3 {
        Vec3::new(
            self.origin_x_mm + self.centerline.lateral(s),
            self.origin_y_mm + s,
            self.surface_z_mm - self.depth_mm,
        )
    }

    /// Last arc length at which the lumen exists.
    pub fn vessel_end(&self) -> f64 {
        self.vessel_end_mm.unwrap_or(self.length_mm)
    }

    /// Centerline point `c(s)` in world coordinates.
    pub fn centerline_at(&self, s: f64) -> Result<Vec3, DomainError> {
        if !(0.0..=self.length_mm).contains(&s) {
            return Err(DomainError::ArcLengthOutOfRange { s, length: self.length_mm });
        }
        Ok(self.centerline_unchecked(s))
    }

    fn centerline_unchecked(&self, s: f64) -> Vec3 {
        self.local_point(s).rotate_z_about(self.pivot(), self.rotation_rad())
    }

    fn tangent_at(&self, s: f64) -> Vec3 {
        Vec3::new(self.centerline.lateral_slope(s), 1.0, 0.0)
            .normalized()
            .rotate_z_about(Vec3::default(), self.rotation_rad())
    }

    /// World `z` of the skin at `(x, y)`, or `None` off the tissue block.
    pub fn surface_height(&self, x: f64, y: f64) -> Option<f64> {
        let local = Vec3::new(x, y, 0.0).rotate_z_about(self.pivot(), -self.rotation_rad());
        let across = local.x - self.origin_x_mm;
        let along = local.y - self.origin_y_mm;
        let inside = across.abs() <= self.half_width_mm
            && along >= -self.end_margin_mm
            && along <= self.length_mm + self.end_margin_mm;
        inside.then_some(self.surface_z_mm)
    }

    /// Probe tip indentation below the skin, clamped at zero.
    pub fn indentation(&self, pose: &ProbePose) -> f64 {
        let p = pose.position;
        match self.surface_height(p.x, p.y) {
            Some(h) => (h - p.z).max(0.0),
            None => 0.0,
        }
    }

    /// Linear-spring contact force in newtons.
    pub fn contact_force(&self, pose: &ProbePose) -> f64 {
        self.stiffness_n_per_mm * self.indentation(pose)
    }

    /// Cuts the vessel with the imaging plane (world `y = pose.y`).
    pub fn vessel_cross_section(&self, pose: &ProbePose) -> Option<CrossSection> {
        let p = pose.position;
        if !p.is_finite() {
            return None;
        }
        let s = self.arc_length_at_y(p.y)?;
        let c = self.centerline_unchecked(s);
        let d = self.tangent_at(s);
        if d.y.abs() < 1e-9 {
            return None;
        }
        let r = self.lumen_radius_mm;
        let radius = r * (1.0 + (d.x / d.y).powi(2)).sqrt();
        let depth_radius = r * (1.0 + (d.z / d.y).powi(2)).sqrt();
        Some(CrossSection {
            lateral_mm: c.x - p.x,
            depth_mm: p.z - c.z,
            radius_mm: radius,
            depth_radius_mm: depth_radius,
            axis_point: c,
            axis_dir: d,
            lumen_radius_mm: r,
        })
    }

    /// Solves `c_y(s) = y` on the visible vessel by bisection.
    fn arc_length_at_y(&self, y: f64) -> Option<f64> {
        let end = self.vessel_end();
        let f = |s: f64| self.centerline_unchecked(s).y - y;
        let (mut lo, mut hi) = (0.0, end);
        let (flo, fhi) = (f(lo), f(hi));
        if flo == 0.0 {
            return Some(lo);
        }
        if fhi == 0.0 {
            return Some(hi);
        }
        if flo.signum() == fhi.signum() {
            return None;
        }
        let increasing = fhi > flo;
        for _ in 0..100 {
            let mid = 0.5 * (lo + hi);
            let fm = f(mid);
            if fm == 0.0 {
                return Some(mid);
            }
            if (fm < 0.0) == increasing {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi - lo < 1e-12 {
                break;
            }
        }
        Some(0.5 * (lo + hi))
    }

    /// Probe pose centred over the vessel start, `height_mm` above the skin.
    pub fn start_pose(&self, height_mm: f64) -> ProbePose {
        let c = self.centerline_unchecked(0.0);
        ProbePose::new(c.x, c.y, self.surface_z_mm + height_mm)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn straight_centerline_advances_along_y() {
        let m = PhantomModel::straight();
        let c0 = m.centerline_at(0.0).unwrap();
        let c = m.centerline_at(50.0).unwrap();
        assert_eq!(c.x, c0.x);
        assert_abs_diff_eq!(c.y - c0.y, 50.0, epsilon = 1e-12);
        assert_abs_diff_eq!(c.z, -20.0);
    }

    #[test]
    fn rotation_pivot_is_the_scan_start() {
        let a = PhantomModel::default().centerline_at(0.0).unwrap();
        let b = PhantomModel::default().with_rotation(30.0).centerline_at(0.0).unwrap();
        assert_abs_diff_eq!(a.x, b.x, epsilon = 1e-12);
        assert_abs_diff_eq!(a.y, b.y, epsilon = 1e-12);
    }

    #[test]
    fn sine_centerline_at_quarter_wavelength() {
        let m = PhantomModel::default();
        let c = m.centerline_at(40.0).unwrap();
        assert_abs_diff_eq!(c.x - m.origin_x_mm, 5.0, epsilon = 1e-12);
    }

    #[test]
    fn arc_length_outside_range_is_domain_error() {
        let m = PhantomModel::default();
        assert!(matches!(m.centerline_at(-0.1), Err(DomainError::ArcLengthOutOfRange { .. })));
        assert!(m.centerline_at(m.length_mm + 1e-6).is_err());
        assert!(m.centerline_at(m.length_mm).is_ok());
    }

    #[test]
    fn contact_force_examples() {
        let m = PhantomModel::default();
        assert_eq!(m.contact_force(&ProbePose::new(0.0, 10.0, 3.0)), 0.0);
        assert_abs_diff_eq!(m.contact_force(&ProbePose::new(0.0, 10.0, -12.0)), 6.0);
        assert_abs_diff_eq!(m.contact_force(&ProbePose::new(0.0, 10.0, -4.0)), 2.0);
        // off the tissue block
        assert_eq!(m.contact_force(&ProbePose::new(500.0, 10.0, -12.0)), 0.0);
    }

    #[test]
    fn cross_section_examples() {
        let m = PhantomModel::straight();
        let above = ProbePose::new(0.0, 50.0, -12.0);
        let cs = m.vessel_cross_section(&above).unwrap();
        assert_abs_diff_eq!(cs.lateral_mm, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(cs.radius_mm, 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(cs.depth_mm, 8.0, epsilon = 1e-12);

        let shifted = ProbePose::new(4.0, 50.0, -12.0);
        assert_abs_diff_eq!(m.vessel_cross_section(&shifted).unwrap().lateral_mm, -4.0, epsilon = 1e-9);

        assert!(m.vessel_cross_section(&ProbePose::new(0.0, -5.0, -12.0)).is_none());
        assert!(m.vessel_cross_section(&ProbePose::new(0.0, 250.0, -12.0)).is_none());
    }

    #[test]
    fn rotated_cross_section_is_elongated_laterally() {
        let m = PhantomModel::straight().with_rotation(30.0);
        let cs = m.vessel_cross_section(&ProbePose::new(0.0, 40.0, -12.0)).unwrap();
        assert_abs_diff_eq!(cs.radius_mm, 3.0 / 30f64.to_radians().cos(), epsilon = 1e-9);
        assert_abs_diff_eq!(cs.depth_radius_mm, 3.0, epsilon = 1e-9);
        // rotated towards -x: at y = 40 the vessel sits at x = -40 tan 30
        assert_abs_diff_eq!(cs.lateral_mm, -40.0 * 30f64.to_radians().tan(), epsilon = 1e-9);
    }

    #[test]
    fn vessel_end_truncates_cross_sections() {
        let m = PhantomModel { vessel_end_mm: Some(60.0), ..PhantomModel::straight() };
        assert!(m.vessel_cross_section(&ProbePose::new(0.0, 59.0, -12.0)).is_some());
        assert!(m.vessel_cross_section(&ProbePose::new(0.0, 61.0, -12.0)).is_none());
    }

    #[test]
    fn validation_rejects_bad_geometry() {
        let shallow = PhantomModel { depth_mm: 3.5, ..PhantomModel::default() };
        assert!(shallow.validate().is_err());
        let short = PhantomModel { length_mm: 100.0, ..PhantomModel::default() };
        assert!(short.validate().is_err());
        let wide = PhantomModel {
            centerline: Centerline::Sine { amplitude_mm: 10.0, wavelength_mm: 160.0 },
            ..PhantomModel::default()
        };
        assert!(wide.validate().is_err());
        assert!(PhantomModel::default().validate().is_ok());
    }

    #[test]
    fn config_round_trip() {
        let m = PhantomModel { vessel_end_mm: Some(60.0), ..PhantomModel::default().with_rotation(30.0) };
        let parsed = PhantomModel::from_kv(&KeyValues::parse(&m.to_config_string()).unwrap()).unwrap();
        assert_eq!(parsed, m);
        let straight = PhantomModel::from_kv(&KeyValues::parse("centerline = straight").unwrap()).unwrap();
        assert_eq!(straight.centerline, Centerline::Straight);
        assert!(PhantomModel::from_kv(&KeyValues::parse("depht_mm = 3").unwrap()).is_err());
    }
}
