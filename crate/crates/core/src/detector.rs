//! Hierarchical vessel detection: a presence classifier gates a centre
//! regressor. Also houses training helpers and Monte Carlo cross-validation.

use std::fmt;
use std::io::Write as _;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::nn::{self, Network, NnError, Shape, TrainConfig, TrainReport, Trace};
use crate::renderer::{Dataset, FrameGeometry, GroundTruth, UsFrame};

/// Frames are block-averaged by this factor before entering the networks.
pub const DOWNSAMPLE: usize = 4;
pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Debug, Error)]
pub enum DetectError {
    #[error("frame geometry {frame:?} does not match detector geometry {expected:?}")]
    Geometry { frame: FrameGeometry, expected: FrameGeometry },
    #[error(transparent)]
    Network(#[from] NnError),
    #[error("{0}")]
    Data(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub vessel_present: bool,
    pub presence_prob: f64,
    /// `(col, row)` in full-resolution pixels.
    pub center_px: Option<(f64, f64)>,
    /// Signed lateral offset from the image centre line; positive toward
    /// higher columns.
    pub center_mm_offset: Option<f64>,
}

impl Detection {
    pub fn absent(presence_prob: f64) -> Self {
        Self { vessel_present: false, presence_prob, center_px: None, center_mm_offset: None }
    }

    pub fn at(presence_prob: f64, center_px: (f64, f64), geometry: &FrameGeometry) -> Self {
        Self {
            vessel_present: true,
            presence_prob,
            center_px: Some(center_px),
            center_mm_offset: Some(geometry.col_to_lateral_mm(center_px.0)),
        }
    }
}

/// Anything that turns a frame into a [`Detection`]. `truth` is the
/// analytic ground truth for the same frame; only oracle detectors read it.
pub trait VesselDetector: Send + Sync {
    fn detect(&self, frame: &UsFrame, truth: &GroundTruth) -> Result<Detection, DetectError>;
}

/// Perfect detector that reports the analytic vessel position.
#[derive(Debug, Clone, Copy, Default)]
pub struct GroundTruthDetector;

impl VesselDetector for GroundTruthDetector {
    fn detect(&self, frame: &UsFrame, truth: &GroundTruth) -> Result<Detection, DetectError> {
        Ok(match truth.center_px {
            Some(c) if truth.vessel_visible => Detection::at(1.0, c, &frame.geometry()),
            _ => Detection::absent(0.0),
        })
    }
}

/// Network input shape for frames of `geometry`.
pub fn input_shape(geometry: &FrameGeometry) -> Shape {
    Shape::Image { c: 1, h: geometry.rows.div_ceil(DOWNSAMPLE), w: geometry.cols.div_ceil(DOWNSAMPLE) }
}

/// Block-averages a u8 image by [`DOWNSAMPLE`] and scales to `[0, 1]`.
/// Partial blocks at the bottom/right edge average the pixels they cover.
pub fn preprocess(pixels: &[u8], geometry: &FrameGeometry) -> Vec<f32> {
    let (rows, cols) = (geometry.rows, geometry.cols);
    let (oh, ow) = (rows.div_ceil(DOWNSAMPLE), cols.div_ceil(DOWNSAMPLE));
    let mut sums = vec![0u32; oh * ow];
    for r in 0..rows {
        let line = &pixels[r * cols..(r + 1) * cols];
        let out = &mut sums[(r / DOWNSAMPLE) * ow..(r / DOWNSAMPLE + 1) * ow];
        for (c, &p) in line.iter().enumerate() {
            out[c / DOWNSAMPLE] += p as u32;
        }
    }
    let mut result = Vec::with_capacity(oh * ow);
    for orow in 0..oh {
        let nr = (rows - orow * DOWNSAMPLE).min(DOWNSAMPLE);
        for ocol in 0..ow {
            let nc = (cols - ocol * DOWNSAMPLE).min(DOWNSAMPLE);
            result.push(sums[orow * ow + ocol] as f32 / (255.0 * (nr * nc) as f32));
        }
    }
    result
}

fn target_scale(geometry: &FrameGeometry) -> f64 {
    (geometry.cols.max(geometry.rows) as f64 - 1.0) / 2.0
}

/// Regression target: centre `(col, row)` relative to the image centre,
/// both axes divided by the same half-extent so a pixel of error costs the
/// same in either direction.
pub fn normalize_center(center_px: (f64, f64), geometry: &FrameGeometry) -> [f32; 2] {
    let s = target_scale(geometry);
    let (c0, r0) = ((geometry.cols as f64 - 1.0) / 2.0, (geometry.rows as f64 - 1.0) / 2.0);
    [((center_px.0 - c0) / s) as f32, ((center_px.1 - r0) / s) as f32]
}

pub fn denormalize_center(out: &[f32], geometry: &FrameGeometry) -> (f64, f64) {
    let s = target_scale(geometry);
    let (c0, r0) = ((geometry.cols as f64 - 1.0) / 2.0, (geometry.rows as f64 - 1.0) / 2.0);
    (c0 + out[0] as f64 * s, r0 + out[1] as f64 * s)
}

/// Classifier + regressor pair. The regressor runs only for frames the
/// classifier accepts; [`Self::regressor_calls`] counts its invocations.
#[derive(Debug)]
pub struct CnnDetector {
    pub classifier: Network,
    pub regressor: Network,
    pub geometry: FrameGeometry,
    pub threshold: f64,
    regressor_calls: AtomicUsize,
}

impl Clone for CnnDetector {
    fn clone(&self) -> Self {
        Self::new(self.classifier.clone(), self.regressor.clone(), self.geometry)
            .expect("already validated")
            .with_threshold(self.threshold)
    }
}

impl CnnDetector {
    pub fn new(classifier: Network, regressor: Network, geometry: FrameGeometry) -> Result<Self, DetectError> {
        let expected = input_shape(&geometry);
        for (name, net, out) in [("classifier", &classifier, 2), ("regressor", &regressor, 2)] {
            if net.input != expected {
                return Err(DetectError::Data(format!(
                    "{name} input {:?} does not match frames {expected:?}",
                    net.input
                )));
            }
            if net.output_shape() != Shape::Flat(out) {
                return Err(DetectError::Data(format!("{name} must have {out} outputs")));
            }
        }
        if classifier.loss != nn::LossKind::CrossEntropy || regressor.loss != nn::LossKind::Mse {
            return Err(DetectError::Data("classifier needs a softmax head, regressor a linear head".into()));
        }
        Ok(Self { classifier, regressor, geometry, threshold: DEFAULT_THRESHOLD, regressor_calls: AtomicUsize::new(0) })
    }

    /// Freshly initialized networks for `geometry`.
    pub fn untrained(geometry: FrameGeometry, seed: u64) -> Result<Self, DetectError> {
        let shape = input_shape(&geometry);
        Self::new(nn::build_classifier(shape, seed)?, nn::build_regressor(shape, seed.wrapping_add(1))?, geometry)
    }

    pub fn with_threshold(mut self, threshold: f64) -> Self {
        self.threshold = threshold;
        self
    }

    pub fn regressor_calls(&self) -> usize {
        self.regressor_calls.load(Ordering::Relaxed)
    }

    fn check_geometry(&self, frame: &UsFrame) -> Result<(), DetectError> {
        let g = frame.geometry();
        if g.rows != self.geometry.rows
            || g.cols != self.geometry.cols
            || (g.spacing_mm - self.geometry.spacing_mm).abs() > 1e-9
        {
            return Err(DetectError::Geometry { frame: g, expected: self.geometry });
        }
        Ok(())
    }

    /// Positive-class probability for a preprocessed input.
    pub fn presence_probability(&self, input: &[f32]) -> Result<f64, DetectError> {
        Ok(self.classifier.predict(input)?[1] as f64)
    }

    pub fn regress(&self, input: &[f32]) -> Result<(f64, f64), DetectError> {
        self.regressor_calls.fetch_add(1, Ordering::Relaxed);
        let out = self.regressor.predict(input)?;
        Ok(denormalize_center(&out, &self.geometry))
    }

    pub fn detect_frame(&self, frame: &UsFrame) -> Result<Detection, DetectError> {
        self.check_geometry(frame)?;
        let input = preprocess(&frame.pixels, &self.geometry);
        let prob = self.presence_probability(&input)?;
        if prob < self.threshold {
            return Ok(Detection::absent(prob));
        }
        let center = self.regress(&input)?;
        Ok(Detection::at(prob, center, &self.geometry))
    }

    pub fn save(&self, dir: &Path) -> Result<(), DetectError> {
        std::fs::create_dir_all(dir).map_err(|e| DetectError::Data(e.to_string()))?;
        nn::io::save(&self.classifier, &dir.join(CLASSIFIER_FILE))?;
        nn::io::save(&self.regressor, &dir.join(REGRESSOR_FILE))?;
        Ok(())
    }

    pub fn load(dir: &Path, geometry: FrameGeometry) -> Result<Self, DetectError> {
        let classifier = nn::io::load(&dir.join(CLASSIFIER_FILE))?;
        let regressor = nn::io::load(&dir.join(REGRESSOR_FILE))?;
        Self::new(classifier, regressor, geometry)
    }
}

pub const CLASSIFIER_FILE: &str = "classifier.usnn";
pub const REGRESSOR_FILE: &str = "regressor.usnn";

impl VesselDetector for CnnDetector {
    fn detect(&self, frame: &UsFrame, _truth: &GroundTruth) -> Result<Detection, DetectError> {
        self.detect_frame(frame)
    }
}

/// A dataset downsampled into network inputs.
#[derive(Debug, Clone)]
pub struct PreparedSet {
    pub geometry: FrameGeometry,
    pub inputs: Vec<Vec<f32>>,
    pub labels: Vec<bool>,
    pub centers: Vec<Option<(f64, f64)>>,
}

impl PreparedSet {
    pub fn from_dataset(ds: &Dataset) -> Result<Self, DetectError> {
        let mut set = Self { geometry: ds.geometry, inputs: Vec::new(), labels: Vec::new(), centers: Vec::new() };
        for s in &ds.samples {
            if s.label && s.center_px.is_none() {
                return Err(DetectError::Data("positive sample without centre annotation".into()));
            }
            set.inputs.push(preprocess(&s.pixels, &ds.geometry));
            set.labels.push(s.label);
            set.centers.push(if s.label { s.center_px } else { None });
        }
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct DetectorTrainConfig {
    pub classifier: TrainConfig,
    pub regressor: TrainConfig,
}

impl DetectorTrainConfig {
    pub fn with_epochs(mut self, classifier: usize, regressor: usize) -> Self {
        self.classifier.epochs = classifier;
        self.regressor.epochs = regressor;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.classifier.seed = seed;
        self.regressor.seed = seed.wrapping_add(1);
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectorTrainReport {
    pub classifier: TrainReport,
    pub regressor: TrainReport,
}

const CLASS_TARGETS: [[f32; 2]; 2] = [[1.0, 0.0], [0.0, 1.0]];

/// Trains fresh networks on the samples at `indices` (all when `None`).
/// The regressor sees positive samples only.
pub fn train_detector(
    set: &PreparedSet,
    indices: Option<&[usize]>,
    cfg: &DetectorTrainConfig,
) -> Result<(CnnDetector, DetectorTrainReport), DetectError> {
    let all: Vec<usize>;
    let idx = match indices {
        Some(i) => i,
        None => {
            all = (0..set.len()).collect();
            &all
        }
    };
    let mut det = CnnDetector::untrained(set.geometry, cfg.classifier.seed)?;

    let xs: Vec<&[f32]> = idx.iter().map(|&i| set.inputs[i].as_slice()).collect();
    let ts: Vec<&[f32]> = idx.iter().map(|&i| CLASS_TARGETS[set.labels[i] as usize].as_slice()).collect();
    let classifier = nn::train(&mut det.classifier, &xs, &ts, &cfg.classifier)?;

    let pos: Vec<usize> = idx.iter().copied().filter(|&i| set.labels[i]).collect();
    let targets: Vec<[f32; 2]> = pos
        .iter()
        .map(|&i| normalize_center(set.centers[i].expect("positives carry centres"), &set.geometry))
        .collect();
    let regressor = if pos.is_empty() {
        TrainReport::default()
    } else {
        let xs: Vec<&[f32]> = pos.iter().map(|&i| set.inputs[i].as_slice()).collect();
        let ts: Vec<&[f32]> = targets.iter().map(|t| t.as_slice()).collect();
        nn::train(&mut det.regressor, &xs, &ts, &cfg.regressor)?
    };
    Ok((det, DetectorTrainReport { classifier, regressor }))
}

/// Errors of a trained detector on held-out samples.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    /// Absolute centre errors in mm for every positive test sample.
    pub abs_err_x_mm: Vec<f64>,
    pub abs_err_y_mm: Vec<f64>,
}

/// Classification accuracy over `indices`, and centre errors of the
/// regressor on the positive-labeled ones.
pub fn evaluate(det: &CnnDetector, set: &PreparedSet, indices: &[usize]) -> Result<Evaluation, DetectError> {
    let mut trace = Trace::default();
    let mut correct = 0usize;
    let (mut ex, mut ey) = (Vec::new(), Vec::new());
    let sp = set.geometry.spacing_mm;
    for &i in indices {
        let out = det.classifier.predict_with(&set.inputs[i], &mut trace)?;
        let predicted = out[1] as f64 >= det.threshold;
        if predicted == set.labels[i] {
            correct += 1;
        }
        if let (true, Some((gc, gr))) = (set.labels[i], set.centers[i]) {
            let (pc, pr) = denormalize_center(&det.regressor.predict_with(&set.inputs[i], &mut trace)?, &set.geometry);
            ex.push((pc - gc).abs() * sp);
            ey.push((pr - gr).abs() * sp);
        }
    }
    Ok(Evaluation { accuracy: correct as f64 / indices.len().max(1) as f64, abs_err_x_mm: ex, abs_err_y_mm: ey })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CvConfig {
    pub folds: usize,
    pub train_fraction: f64,
    pub seed: u64,
    pub train: DetectorTrainConfig,
}

impl Default for CvConfig {
    fn default() -> Self {
        Self { folds: 10, train_fraction: 0.8, seed: 0, train: DetectorTrainConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FoldResult {
    pub fold: usize,
    pub train_indices: Vec<usize>,
    pub test_indices: Vec<usize>,
    /// Times the split was redrawn because its test set held a single class.
    pub resamples: usize,
    pub accuracy: f64,
    pub mae_x_mm: f64,
    pub mae_y_mm: f64,
    pub std_x_mm: f64,
    pub std_y_mm: f64,
    pub max_x_mm: f64,
    pub max_y_mm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CvReport {
    pub folds: Vec<FoldResult>,
    /// Fold-level mean and standard deviation of accuracy (fraction).
    pub accuracy_mean: f64,
    pub accuracy_std: f64,
    pub mae_x_mean: f64,
    pub mae_y_mean: f64,
    /// Standard deviation of absolute errors pooled over every fold.
    pub abs_err_x_std: f64,
    pub abs_err_y_std: f64,
    pub max_x_mm: f64,
    pub max_y_mm: f64,
}

pub(crate) fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.iter().sum::<f64>() / v.len() as f64
}

/// Population standard deviation.
pub(crate) fn std_dev(v: &[f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    let m = mean(v);
    (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64).sqrt()
}

fn max_of(v: &[f64]) -> f64 {
    v.iter().copied().fold(f64::NAN, f64::max)
}

/// SplitMix64 step; used to derive independent per-fold seeds.
pub fn derive_seed(master: u64, index: u64) -> u64 {
    let mut z = master.wrapping_add(0x9E37_79B9_7F4A_7C15u64.wrapping_mul(index.wrapping_add(1)));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Draws the train/test split of one fold. Each fold resamples the whole
/// index set independently, so test sets of different folds may overlap.
pub fn draw_split(labels: &[bool], train_fraction: f64, fold_seed: u64) -> Result<(Vec<usize>, Vec<usize>, usize), DetectError> {
    let n = labels.len();
    let n_train = ((n as f64) * train_fraction).round() as usize;
    if n_train == 0 || n_train >= n {
        return Err(DetectError::Data(format!("train fraction {train_fraction} leaves an empty split of {n} samples")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(fold_seed);
    let mut idx: Vec<usize> = (0..n).collect();
    for attempt in 0..1000 {
        idx.shuffle(&mut rng);
        let test = &idx[n_train..];
        let positives = test.iter().filter(|&&i| labels[i]).count();
        if positives > 0 && positives < test.len() {
            return Ok((idx[..n_train].to_vec(), test.to_vec(), attempt));
        }
        log::info!("fold split with single-class test set redrawn (attempt {})", attempt + 1);
    }
    Err(DetectError::Data("could not draw a test split containing both classes".into()))
}

/// Monte Carlo cross-validation: `folds` independent random splits, fresh
/// networks per fold.
pub fn monte_carlo_cv(set: &PreparedSet, cfg: &CvConfig) -> Result<CvReport, DetectError> {
    monte_carlo_cv_with(set, cfg, |_| {})
}

pub fn monte_carlo_cv_with(
    set: &PreparedSet,
    cfg: &CvConfig,
    mut on_fold: impl FnMut(&FoldResult),
) -> Result<CvReport, DetectError> {
    if cfg.folds < 2 {
        return Err(DetectError::Data("cross-validation needs at least 2 folds".into()));
    }
    if !(cfg.train_fraction > 0.0 && cfg.train_fraction < 1.0) {
        return Err(DetectError::Data(format!("train fraction {} outside (0, 1)", cfg.train_fraction)));
    }
    let positives = set.labels.iter().filter(|&&l| l).count();
    if positives == 0 || positives == set.len() {
        return Err(DetectError::Data("dataset must contain both classes".into()));
    }
    let mut folds = Vec::with_capacity(cfg.folds);
    let (mut all_x, mut all_y) = (Vec::new(), Vec::new());
    for fold in 0..cfg.folds {
        let fold_seed = derive_seed(cfg.seed, fold as u64);
        let (train_idx, test_idx, resamples) = draw_split(&set.labels, cfg.train_fraction, fold_seed)?;
        let train_cfg = cfg.train.with_seed(derive_seed(fold_seed, 1));
        let (det, _) = train_detector(set, Some(&train_idx), &train_cfg)?;
        let eval = evaluate(&det, set, &test_idx)?;
        let result = FoldResult {
            fold,
            train_indices: train_idx,
            test_indices: test_idx,
            resamples,
            accuracy: eval.accuracy,
            mae_x_mm: mean(&eval.abs_err_x_mm),
            mae_y_mm: mean(&eval.abs_err_y_mm),
            std_x_mm: std_dev(&eval.abs_err_x_mm),
            std_y_mm: std_dev(&eval.abs_err_y_mm),
            max_x_mm: max_of(&eval.abs_err_x_mm),
            max_y_mm: max_of(&eval.abs_err_y_mm),
        };
        on_fold(&result);
        all_x.extend(eval.abs_err_x_mm);
        all_y.extend(eval.abs_err_y_mm);
        folds.push(result);
    }
    let acc: Vec<f64> = folds.iter().map(|f| f.accuracy).collect();
    let mx: Vec<f64> = folds.iter().map(|f| f.mae_x_mm).collect();
    let my: Vec<f64> = folds.iter().map(|f| f.mae_y_mm).collect();
    Ok(CvReport {
        accuracy_mean: mean(&acc),
        accuracy_std: std_dev(&acc),
        mae_x_mean: mean(&mx),
        mae_y_mean: mean(&my),
        abs_err_x_std: std_dev(&all_x),
        abs_err_y_std: std_dev(&all_y),
        max_x_mm: max_of(&all_x),
        max_y_mm: max_of(&all_y),
        folds,
    })
}

impl CvReport {
    /// One row per fold plus a `summary` row of means (maxima for the max columns).
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["fold", "accuracy", "accuracy_pct", "mae_x_mm", "mae_y_mm", "max_x_mm", "max_y_mm"])?;
        for f in &self.folds {
            w.write_record(&[
                (f.fold + 1).to_string(),
                f.accuracy.to_string(),
                (100.0 * f.accuracy).to_string(),
                f.mae_x_mm.to_string(),
                f.mae_y_mm.to_string(),
                f.max_x_mm.to_string(),
                f.max_y_mm.to_string(),
            ])?;
        }
        w.write_record(&[
            "summary".to_string(),
            self.accuracy_mean.to_string(),
            (100.0 * self.accuracy_mean).to_string(),
            self.mae_x_mean.to_string(),
            self.mae_y_mean.to_string(),
            self.max_x_mm.to_string(),
            self.max_y_mm.to_string(),
        ])?;
        w.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> anyhow::Result<()> {
        let mut f = std::fs::File::create(path)?;
        self.write_csv(&mut f)?;
        f.flush()?;
        Ok(())
    }
}

impl fmt::Display for CvReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Monte Carlo cross-validation, {} folds", self.folds.len())?;
        writeln!(
            f,
            "  classification accuracy  {:.2} % +/- {:.2} pp  (fraction {:.4} +/- {:.4})",
            100.0 * self.accuracy_mean,
            100.0 * self.accuracy_std,
            self.accuracy_mean,
            self.accuracy_std
        )?;
        writeln!(f, "  centre MAE x             {:.2} +/- {:.2} mm", self.mae_x_mean, self.abs_err_x_std)?;
        writeln!(f, "  centre MAE y             {:.2} +/- {:.2} mm", self.mae_y_mean, self.abs_err_y_std)?;
        writeln!(f, "  max error x              {:.2} mm", self.max_x_mm)?;
        write!(f, "  max error y              {:.2} mm", self.max_y_mm)
    }
}
