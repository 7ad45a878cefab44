//! Simulated robotic ultrasound scanning of a peripheral artery phantom.
//!
//! A parametric leg phantom and a B-mode renderer stand in for the
//! hardware; a hierarchical CNN pipeline (presence classifier, then centre
//! regressor) feeds a translational visual-servoing controller.

pub mod control;
pub mod detector;
pub mod error;
pub mod geom;
pub mod harness;
pub mod kv;
pub mod nn;
pub mod phantom;
pub mod renderer;
pub mod stream;

pub use control::{run_scan, ControlConfig, ControlState, ScanLog, StopReason};
pub use detector::{CnnDetector, Detection, GroundTruthDetector, VesselDetector};
pub use error::{ConfigError, DomainError};
pub use geom::{EeDelta, ProbePose, Vec3};
pub use phantom::PhantomModel;
pub use renderer::{FrameGeometry, GroundTruth, Renderer, UsFrame};
