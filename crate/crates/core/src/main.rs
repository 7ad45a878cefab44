use std::net::IpAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};

use usvs::control::{run_scan, run_scan_on, ControlConfig, ScanLog};
use usvs::detector::{monte_carlo_cv_with, train_detector, CnnDetector, CvConfig, DetectorTrainConfig, GroundTruthDetector, PreparedSet, VesselDetector};
use usvs::harness::{compute_metrics, experiment_suite, plot_svg, PlotSeries, SuiteConfig};
use usvs::renderer::{generate_dataset, read_dataset, write_dataset, Dataset, DatasetConfig, FrameGeometry, Renderer};
use usvs::stream::{self, RemotePlant, ServerConfig, SimStation};
use usvs::{ConfigError, PhantomModel};

#[derive(Parser)]
#[command(name = "usvs", version, about = "Simulated ultrasound visual servoing along a leg artery phantom")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Render a labeled dataset to a directory.
    GenDataset {
        #[command(flatten)]
        sim: SimArgs,
        #[arg(long, default_value_t = 4000)]
        n: usize,
        #[arg(long, default_value_t = 0.541)]
        neg_fraction: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train classifier and regressor on a dataset directory.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Monte Carlo cross-validation of the detector.
    Cv {
        #[command(flatten)]
        source: DataSource,
        #[arg(long, default_value_t = 10)]
        folds: usize,
        #[arg(long, default_value_t = 0.8)]
        train_fraction: f64,
        #[command(flatten)]
        train: TrainArgs,
        /// CSV report path.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run one scan, in-process or against a remote station.
    Scan {
        #[command(flatten)]
        sim: SimArgs,
        #[command(flatten)]
        detector: DetectorArgs,
        /// Connect to a running `serve` instance instead of simulating locally.
        #[arg(long)]
        remote: bool,
        #[arg(long, default_value = "127.0.0.1")]
        host: IpAddr,
        #[arg(long, env = "USVS_PORT", default_value_t = stream::DEFAULT_PORT)]
        port: u16,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Serve simulated frames and accept robot commands.
    Serve {
        #[command(flatten)]
        sim: SimArgs,
        #[arg(long, default_value_t = 3.9)]
        rate_hz: f64,
        #[arg(long, default_value = "127.0.0.1")]
        bind: IpAddr,
        #[arg(long, env = "USVS_PORT", default_value_t = stream::DEFAULT_PORT)]
        port: u16,
    },
    /// Run the 0 and 30 degree scans and write logs, summary and plot.
    Suite {
        #[command(flatten)]
        sim: SimArgs,
        #[command(flatten)]
        detector: DetectorArgs,
        #[arg(long, default_value = "suite")]
        out: PathBuf,
    },
    /// Metrics of a scan log CSV.
    Evaluate {
        log: PathBuf,
        #[arg(long, default_value_t = 2.74)]
        margin_mm: f64,
    },
    /// SVG of the distance-to-centre series of one or more scan logs.
    Plot {
        #[arg(required = true)]
        logs: Vec<PathBuf>,
        #[arg(long, default_value_t = 2.74)]
        margin_mm: f64,
        #[arg(long, default_value = "distance.svg")]
        out: PathBuf,
    },
}

#[derive(Args)]
struct SimArgs {
    /// Phantom `key = value` file.
    #[arg(long)]
    phantom: Option<PathBuf>,
    /// Extra phantom rotation about the vertical axis.
    #[arg(long, default_value_t = 0.0)]
    rotation_deg: f64,
    /// Controller `key = value` file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct DetectorArgs {
    /// Directory with trained weights.
    #[arg(long, conflicts_with = "oracle")]
    weights: Option<PathBuf>,
    /// Use ground truth instead of the networks.
    #[arg(long)]
    oracle: bool,
}

#[derive(Args)]
struct DataSource {
    /// Dataset directory; generated in memory when absent.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value_t = 4000)]
    n: usize,
    #[arg(long, default_value_t = 0.541)]
    neg_fraction: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, default_value_t = 100)]
    epochs: usize,
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
    /// Regressor epochs; defaults to `--epochs`.
    #[arg(long)]
    reg_epochs: Option<usize>,
    /// Regressor batch size; defaults to `--batch-size`.
    #[arg(long)]
    reg_batch_size: Option<usize>,
    #[arg(long, default_value_t = 0)]
    train_seed: u64,
}

impl TrainArgs {
    fn config(&self) -> DetectorTrainConfig {
        let mut c = DetectorTrainConfig::default()
            .with_epochs(self.epochs, self.reg_epochs.unwrap_or(self.epochs))
            .with_seed(self.train_seed);
        c.classifier.batch_size = self.batch_size;
        c.regressor.batch_size = self.reg_batch_size.unwrap_or(self.batch_size);
        c
    }
}

/// Errors that map to their own exit codes.
#[derive(Debug, thiserror::Error)]
enum Exit {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("scan aborted: {0}")]
    Aborted(String),
}

impl SimArgs {
    fn phantom(&self) -> Result<PhantomModel, ConfigError> {
        let base = match &self.phantom {
            Some(p) => PhantomModel::load(p)?,
            None => PhantomModel::default(),
        };
        let rot = base.rotation_z_deg + self.rotation_deg;
        let m = base.with_rotation(rot);
        m.validate()?;
        Ok(m)
    }

    fn control(&self) -> Result<ControlConfig, ConfigError> {
        match &self.config {
            Some(p) => ControlConfig::load(p),
            None => Ok(ControlConfig::default()),
        }
    }
}

fn load_detector(args: &DetectorArgs, geometry: FrameGeometry) -> anyhow::Result<Box<dyn VesselDetector>> {
    match (&args.weights, args.oracle) {
        (_, true) => Ok(Box::new(GroundTruthDetector)),
        (Some(dir), false) => Ok(Box::new(
            CnnDetector::load(dir, geometry).with_context(|| format!("loading weights from {}", dir.display()))?,
        )),
        (None, false) => Err(ConfigError::Invalid("pass --weights DIR or --oracle".into()).into()),
    }
}

fn renderer_for(control: &ControlConfig) -> Result<Renderer, ConfigError> {
    let g = FrameGeometry { spacing_mm: control.spacing_mm, ..FrameGeometry::default() };
    g.validate()?;
    Ok(Renderer::new(g))
}

fn load_or_generate(src: &DataSource) -> anyhow::Result<Dataset> {
    match &src.data {
        Some(dir) => read_dataset(dir),
        None => {
            let r = Renderer::new(FrameGeometry::default());
            Ok(generate_dataset(&PhantomModel::default(), &r, &DatasetConfig::new(src.n, src.seed, src.neg_fraction))?)
        }
    }
}

fn report_scan(log: &ScanLog, margin_mm: f64, out: Option<&Path>) -> anyhow::Result<()> {
    if let Some(path) = out {
        log.save_csv(path)?;
        println!("wrote {}", path.display());
    }
    match compute_metrics(log, margin_mm) {
        Ok(m) => println!("{m}"),
        Err(e) => println!("no metrics: {e}"),
    }
    println!("scanned {:.1} mm, stop reason {}", log.distance_scanned_mm, log.stop_reason);
    if log.stop_reason.is_abort() {
        return Err(Exit::Aborted(log.stop_reason.to_string()).into());
    }
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Cmd::GenDataset { sim, n, neg_fraction, out } => {
            let t = Instant::now();
            let r = Renderer::new(FrameGeometry::default());
            let ds = generate_dataset(&sim.phantom()?, &r, &DatasetConfig::new(n, sim.seed, neg_fraction))
                .map_err(|e| ConfigError::Invalid(e.to_string()))?;
            write_dataset(&ds, &out)?;
            println!("{} frames ({} positive) in {} ({:.1?})", ds.len(), ds.positives(), out.display(), t.elapsed());
        }
        Cmd::Train { data, out, train } => {
            let set = PreparedSet::from_dataset(&read_dataset(&data)?)?;
            let t = Instant::now();
            let (det, report) = train_detector(&set, None, &train.config())?;
            det.save(&out)?;
            println!(
                "trained on {} frames in {:.1?}; final losses: classifier {:?}, regressor {:?}",
                set.len(),
                t.elapsed(),
                report.classifier.final_loss(),
                report.regressor.final_loss()
            );
        }
        Cmd::Cv { source, folds, train_fraction, train, out } => {
            let set = PreparedSet::from_dataset(&load_or_generate(&source)?)?;
            let cfg = CvConfig { folds, train_fraction, seed: source.seed, train: train.config() };
            let t = Instant::now();
            let report = monte_carlo_cv_with(&set, &cfg, |f| {
                println!(
                    "fold {:2}: accuracy {:.4}  MAE x {:.3} y {:.3} mm  max x {:.3} y {:.3} mm  ({:.0?})",
                    f.fold + 1,
                    f.accuracy,
                    f.mae_x_mm,
                    f.mae_y_mm,
                    f.max_x_mm,
                    f.max_y_mm,
                    t.elapsed()
                )
            })?;
            println!("{report}");
            if let Some(path) = out {
                report.save_csv(&path)?;
                println!("wrote {}", path.display());
            }
        }
        Cmd::Scan { sim, detector, remote, host, port, out } => {
            let phantom = sim.phantom()?;
            let control = sim.control()?;
            let renderer = renderer_for(&control)?;
            let det = load_detector(&detector, renderer.geometry)?;
            let log = if remote {
                let mut plant = RemotePlant::connect_host(phantom, host, port)?;
                let log = run_scan_on(&mut plant, &control, det.as_ref())?;
                plant.stop()?;
                log
            } else {
                run_scan(&phantom, &control, det.as_ref(), &renderer, sim.seed)?
            };
            report_scan(&log, control.margin_mm(), out.as_deref())?;
        }
        Cmd::Serve { sim, rate_hz, bind, port } => {
            let control = sim.control()?;
            let station = SimStation::new(sim.phantom()?, renderer_for(&control)?, control, sim.seed);
            let cfg = ServerConfig { bind, ..ServerConfig::on_port(port, rate_hz) };
            let server = stream::serve_frames(station, &cfg)?;
            println!("frames on {}, commands on {}", server.frame_addr, server.command_addr);
            server.wait();
        }
        Cmd::Suite { sim, detector, out } => {
            let control = sim.control()?;
            let renderer = renderer_for(&control)?;
            let det = load_detector(&detector, renderer.geometry)?;
            let base = sim.phantom()?;
            let cfg = SuiteConfig {
                rotations_deg: vec![base.rotation_z_deg, base.rotation_z_deg + 30.0],
                phantom: base.with_rotation(0.0),
                control,
                seed: sim.seed,
            };
            let report = experiment_suite(&cfg, det.as_ref(), &renderer)?;
            report.save(&out)?;
            print!("{report}");
            println!("wrote {}", out.display());
            if !report.all_completed() {
                return Err(Exit::Aborted("not every scenario reached the scan length".into()).into());
            }
        }
        Cmd::Evaluate { log, margin_mm } => {
            let log = ScanLog::read_csv(std::fs::File::open(&log).with_context(|| log.display().to_string())?)?;
            println!("{}", compute_metrics(&log, margin_mm)?);
        }
        Cmd::Plot { logs, margin_mm, out } => {
            let mut series = Vec::new();
            for p in &logs {
                let log = ScanLog::read_csv(std::fs::File::open(p).with_context(|| p.display().to_string())?)?;
                let label = p.file_stem().map_or_else(|| p.display().to_string(), |s| s.to_string_lossy().into_owned());
                series.push(PlotSeries::signed_offsets(label, &log));
            }
            std::fs::write(&out, plot_svg(&series, margin_mm))?;
            println!("wrote {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if let Some(exit) = e.downcast_ref::<Exit>() {
                return ExitCode::from(match exit {
                    Exit::Config(_) => 2,
                    Exit::Aborted(_) => 3,
                });
            }
            if e.downcast_ref::<ConfigError>().is_some() {
                return ExitCode::from(2);
            }
            if let Some(usvs::control::ControlError::Config(_)) = e.downcast_ref() {
                return ExitCode::from(2);
            }
            ExitCode::FAILURE
        }
    }
}
