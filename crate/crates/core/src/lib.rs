//! Plane-wave ultrasound beamforming lab.
//!
//! Synthetic RF channel data is delay-compensated onto a pixel grid and then
//! beamformed three ways: delay-and-sum, MVDR, and a learned patch transform
//! (a small U-Net applied before DAS summation, trained to imitate MVDR).

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod das;
pub mod delayrf;
pub mod domain;
pub mod error;
pub mod evalbench;
pub mod io;
pub mod mvdr;
pub mod neural;
pub mod objective;
pub mod pipeline;
pub mod simulator;
pub mod training;

pub use das::{BModePatch, DasConfig, Window};
pub use delayrf::{DelayedTensor, RfPatch};
pub use domain::{make_linear_array, make_pixel_grid, ArrayGeometry, Cyst, PhantomSpec, PixelGrid, PlaneWaveTx, Scatterer};
pub use error::{Error, Result};
pub use evalbench::{BenchResult, BenchTarget, CystRoi, MetricsReport, RoiMode};
pub use mvdr::MvdrConfig;
pub use neural::{UNetArch, UNetParams};
pub use objective::LossWeights;
pub use pipeline::{BModeImage, Bypass, ImagingContext, Method, PatchTransform};
pub use simulator::{RandomCysts, RfFrame, SimConfig};
pub use training::{PatchDataset, TrainConfig, TrainOutcome};
