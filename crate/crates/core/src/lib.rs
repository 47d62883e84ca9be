//! Hierarchical cross-source image matching for UAV absolute visual
//! localization.
//!
//! The engine locates a downward-looking UAV frame on a geo-referenced
//! satellite map in three stages:
//!
//! 1. [`retrieval`]: the map is cut into overlapping tiles with global
//!    descriptors; the frame's descriptor selects the top-k tiles.
//! 2. [`sascm`]: dense semantic features of frame and tile are correlated
//!    into a 4D volume, filtered by soft mutual nearest neighbours and a 4D
//!    convolutional neighbourhood-consensus network ([`tensor`]), and the
//!    frame's center cells are matched to a satellite region.
//! 3. [`fine`]: keypoints and descriptors inside the two regions are
//!    matched and a RANSAC homography projects the frame center onto the
//!    tile, which [`geo`] turns into latitude and longitude.
//!
//! [`pipeline`] composes the stages and evaluates trajectories; [`store`]
//! holds the binary tensor format and dataset manifests.

pub mod dense;
pub mod error;
pub mod fine;
pub mod geo;
pub mod imaging;
pub mod pipeline;
pub mod retrieval;
pub mod sascm;
pub mod store;
pub mod tensor;

pub use error::{GeolocError, Result};
