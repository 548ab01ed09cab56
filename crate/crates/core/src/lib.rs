//! Field-boundary delineation from satellite image time series.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`]: dense row-major arrays, patch partitioning and contractions.
//! * [`pta3d`]: patch Tanimoto attention over spatio-temporal patches, with
//!   analytic gradients.
//! * [`nn`]: network blocks, the U-Net3D and dual-encoder fusion models, a
//!   reverse-mode tape and a toy gradient-descent trainer.
//! * [`loss`] and [`metrics`]: Tanimoto-with-complement losses and the
//!   evaluation suite.
//! * [`s1proc`]: Sentinel-1 band transforms, standardization, chipping, flips
//!   and the dual-pol entropy/alpha decomposition.
//! * [`postprocess`]: refined thresholding, thinning, polygonization,
//!   matching and threshold tuning.
//! * [`synth`]: seeded synthetic scenes.
//! * [`io`]: raster container, weights file, GeoJSON and report formats.

pub mod error;
pub mod io;
pub mod loss;
pub mod metrics;
pub mod nn;
pub mod postprocess;
pub mod prediction;
pub mod pta3d;
pub mod s1proc;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
pub use prediction::MultitaskPrediction;
pub use tensor::{DenseTensor, PatchSpec};
