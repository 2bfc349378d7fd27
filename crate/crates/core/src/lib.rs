//! Cross-view vehicle localization against georeferenced overhead imagery.
//!
//! A two-view (ground wedge / satellite patch) encoder is trained with a
//! contrastive objective; distances in its embedding space drive the
//! measurement update of a sequential Monte Carlo pose filter. Everything runs
//! on synthetic, seeded worlds so experiments are fully reproducible.
//!
//! Modules:
//! - [`geo`]: poses, affine georeferencing, rotated crops, pair labeling
//! - [`sim`]: worlds, trajectories, ground-view rendering
//! - [`embed`]: the two-view encoder, contrastive loss, backprop, Adam training
//! - [`matching`]: embedding index over pose grids, k-NN, PR / top-X evaluation
//! - [`filter`]: the particle filter
//! - [`io`]: binary and CSV persistence

pub mod embed;
pub mod error;
pub mod filter;
pub mod geo;
pub mod io;
pub mod matching;
pub mod seeds;
pub mod sim;

pub use error::{Error, Result};
pub use geo::{Bounds, CropSpec, GeoRaster, GeoTransform, Pose2D};
