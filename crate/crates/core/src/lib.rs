//! Occupancy grid mapping from sparse clustered radar.
//!
//! Three mapping routes share one grid geometry: classic inverse sensor models
//! with log-odds filtering ([`classic`]), direct visibility ray tracing on
//! aggregated radar ([`pipeline::raytrace`]), and a small encoder-decoder
//! network trained with a surrogate IoU loss ([`net`], [`lovasz`]). Ground
//! truth comes from aggregated lidar ([`autolabel`]); [`sim`] produces
//! synthetic recordings so the whole chain runs without external data.

pub mod aggregate;
pub mod autolabel;
pub mod classic;
pub mod error;
pub mod grid;
pub mod io;
pub mod lovasz;
pub mod metrics;
pub mod net;
pub mod par;
pub mod pipeline;
pub mod scene;
pub mod sim;

pub use error::{Error, FormatError, Result};
pub use grid::{Category, Cell, GridSpec, LabelGrid, Point2, Pose2};
pub use par::Exec;
