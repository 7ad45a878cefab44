//! Scan metrics, the two-scenario experiment suite and SVG plotting.

use std::fmt;
use std::fmt::Write as _;
use std::path::Path;

use crate::control::{run_scan, ControlConfig, ControlError, ScanLog, StopReason};
use crate::detector::VesselDetector;
use crate::error::DomainError;
use crate::phantom::PhantomModel;
use crate::renderer::Renderer;

#[derive(Debug, Clone, PartialEq)]
pub struct ScanMetrics {
    pub pct_full_lumen_visible: f64,
    /// `(step, |ground-truth offset| mm)`; NaN for frames that do not cut the vessel.
    pub distance_series: Vec<(usize, f64)>,
    pub mae_mm: f64,
    pub max_mm: f64,
    pub margin_mm: f64,
    /// Frames excluded from the error statistics for lack of a ground-truth offset.
    pub frames_without_offset: usize,
}

/// Tracking metrics from ground truth, measured against the image centre line.
pub fn compute_metrics(log: &ScanLog, margin_mm: f64) -> Result<ScanMetrics, DomainError> {
    if log.entries.is_empty() {
        return Err(DomainError::Invalid("scan log is empty".into()));
    }
    let visible = log.entries.iter().filter(|e| e.gt_lumen_fully_visible).count();
    let series: Vec<(usize, f64)> =
        log.entries.iter().map(|e| (e.step, e.gt_offset_mm.map_or(f64::NAN, f64::abs))).collect();
    let values: Vec<f64> = series.iter().map(|s| s.1).filter(|v| !v.is_nan()).collect();
    if values.is_empty() {
        return Err(DomainError::Invalid("no frame in the log cuts the vessel".into()));
    }
    Ok(ScanMetrics {
        pct_full_lumen_visible: 100.0 * visible as f64 / log.entries.len() as f64,
        mae_mm: values.iter().sum::<f64>() / values.len() as f64,
        max_mm: values.iter().copied().fold(0.0, f64::max),
        frames_without_offset: series.len() - values.len(),
        distance_series: series,
        margin_mm,
    })
}

impl fmt::Display for ScanMetrics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "frames {:4}  lumen fully visible {:6.2} %  MAE {:5.2} mm  max {:5.2} mm",
            self.distance_series.len(),
            self.pct_full_lumen_visible,
            self.mae_mm,
            self.max_mm
        )
    }
}

#[derive(Debug, Clone)]
pub struct SuiteConfig {
    pub phantom: PhantomModel,
    pub control: ControlConfig,
    pub rotations_deg: Vec<f64>,
    pub seed: u64,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            phantom: PhantomModel::default(),
            control: ControlConfig::default(),
            rotations_deg: vec![0.0, 30.0],
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ScenarioResult {
    pub rotation_deg: f64,
    pub log: ScanLog,
    pub metrics: ScanMetrics,
}

impl ScenarioResult {
    pub fn name(&self) -> String {
        format!("scan_{}deg", self.rotation_deg)
    }
}

#[derive(Debug, Clone)]
pub struct SuiteReport {
    pub scenarios: Vec<ScenarioResult>,
}

/// Runs one scan per rotation with otherwise identical settings.
pub fn experiment_suite(
    cfg: &SuiteConfig,
    detector: &dyn VesselDetector,
    renderer: &Renderer,
) -> Result<SuiteReport, ControlError> {
    let mut scenarios = Vec::new();
    for &rot in &cfg.rotations_deg {
        let phantom = cfg.phantom.clone().with_rotation(rot);
        let log = run_scan(&phantom, &cfg.control, detector, renderer, cfg.seed)?;
        let metrics = compute_metrics(&log, cfg.control.margin_mm())
            .map_err(|e| ControlError::Contract(format!("scan at {rot} deg: {e}")))?;
        log::info!("{rot} deg: {metrics}, stop {}", log.stop_reason);
        scenarios.push(ScenarioResult { rotation_deg: rot, log, metrics });
    }
    Ok(SuiteReport { scenarios })
}

impl SuiteReport {
    /// Writes one CSV per scenario, `summary.csv` and `distance.svg`.
    pub fn save(&self, dir: &Path) -> anyhow::Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut w = csv::Writer::from_path(dir.join("summary.csv"))?;
        w.write_record([
            "rotation_deg",
            "frames",
            "distance_scanned_mm",
            "stop_reason",
            "pct_full_lumen_visible",
            "mae_mm",
            "max_mm",
        ])?;
        for s in &self.scenarios {
            s.log.save_csv(&dir.join(format!("{}.csv", s.name())))?;
            w.write_record(&[
                s.rotation_deg.to_string(),
                s.log.entries.len().to_string(),
                s.log.distance_scanned_mm.to_string(),
                s.log.stop_reason.to_string(),
                s.metrics.pct_full_lumen_visible.to_string(),
                s.metrics.mae_mm.to_string(),
                s.metrics.max_mm.to_string(),
            ])?;
        }
        w.flush()?;
        let margin = self.scenarios.first().map_or(0.0, |s| s.metrics.margin_mm);
        let series: Vec<PlotSeries> =
            self.scenarios.iter().map(|s| PlotSeries::signed_offsets(format!("{} deg", s.rotation_deg), &s.log)).collect();
        std::fs::write(dir.join("distance.svg"), plot_svg(&series, margin))?;
        Ok(())
    }

    pub fn all_completed(&self) -> bool {
        self.scenarios.iter().all(|s| s.log.stop_reason == StopReason::LengthReached)
    }
}

impl fmt::Display for SuiteReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for s in &self.scenarios {
            writeln!(
                f,
                "{:5.1} deg  {}  scanned {:6.1} mm  stop {}",
                s.rotation_deg, s.metrics, s.log.distance_scanned_mm, s.log.stop_reason
            )?;
        }
        Ok(())
    }
}

/// One line of the distance plot.
#[derive(Debug, Clone, PartialEq)]
pub struct PlotSeries {
    pub label: String,
    /// `(distance travelled mm, signed offset mm)`.
    pub points: Vec<(f64, f64)>,
}

impl PlotSeries {
    /// Signed ground-truth offsets against distance travelled along y.
    pub fn signed_offsets(label: String, log: &ScanLog) -> Self {
        let y0 = log.entries.first().map_or(0.0, |e| e.pose.position.y);
        let points = log
            .entries
            .iter()
            .filter_map(|e| e.gt_offset_mm.map(|o| (e.pose.position.y - y0, o)))
            .collect();
        Self { label, points }
    }
}

const COLORS: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];

/// Distance-to-centre plot with the insensitivity band shaded.
pub fn plot_svg(series: &[PlotSeries], margin_mm: f64) -> String {
    let (w, h) = (720.0, 360.0);
    let (left, right, top, bottom) = (60.0, 20.0, 20.0, 50.0);
    let pts = series.iter().flat_map(|s| s.points.iter());
    let x_max = pts.clone().map(|p| p.0).fold(1.0f64, f64::max);
    let y_abs = pts.map(|p| p.1.abs()).fold(margin_mm * 1.5, f64::max).max(1.0);
    let sx = |x: f64| left + x / x_max * (w - left - right);
    let sy = |y: f64| top + (y_abs - y) / (2.0 * y_abs) * (h - top - bottom);

    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r##"<rect x="{:.1}" y="{:.1}" width="{:.1}" height="{:.1}" fill="#cccccc" fill-opacity="0.5"/>"##,
        sx(0.0),
        sy(margin_mm),
        sx(x_max) - sx(0.0),
        sy(-margin_mm) - sy(margin_mm)
    );
    let _ = writeln!(s, r#"<line x1="{:.1}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="black" stroke-dasharray="4 3"/>"#, sx(0.0), sy(0.0), sx(x_max), sy(0.0));
    let _ = writeln!(
        s,
        r#"<rect x="{left}" y="{top}" width="{:.1}" height="{:.1}" fill="none" stroke="black"/>"#,
        w - left - right,
        h - top - bottom
    );
    for (i, se) in series.iter().enumerate() {
        if se.points.is_empty() {
            continue;
        }
        let path: Vec<String> = se.points.iter().map(|&(x, y)| format!("{:.1},{:.1}", sx(x), sy(y))).collect();
        let color = COLORS[i % COLORS.len()];
        let _ = writeln!(s, r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#, path.join(" "));
        let ly = top + 16.0 + 16.0 * i as f64;
        let _ = writeln!(s, r#"<text x="{:.1}" y="{ly:.1}" fill="{color}">{}</text>"#, w - right - 90.0, xml_escape(&se.label));
    }
    let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">distance scanned [mm] (0 to {x_max:.0})</text>"#, (left + w - right) / 2.0, h - 15.0);
    let _ = writeln!(
        s,
        r#"<text x="15" y="{:.1}" text-anchor="middle" transform="rotate(-90 15 {:.1})">offset to vessel centre [mm] (band: +/-{margin_mm:.2})</text>"#,
        (top + h - bottom) / 2.0,
        (top + h - bottom) / 2.0
    );
    for y in [-y_abs, 0.0, y_abs] {
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{y:.1}</text>"#, left - 5.0, sy(y) + 4.0);
    }
    s.push_str("</svg>\n");
    s
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
