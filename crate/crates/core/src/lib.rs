//! Core algorithms for hierarchical trajectory generation.
//!
//! GPS trajectories are compressed into multi-level travel-pattern tokens by a
//! residual-quantized autoencoder, token sequences are produced by a small
//! conditional language model, and tokens are decoded back into GPS points
//! constrained to a road route. This crate holds every numerical piece of that
//! pipeline and only needs `alloc`; file formats and the command line live in
//! the `htp` crate.
//!
//! The `std` feature (on by default) enables runtime CPU feature detection in
//! the matrix kernels.

#![cfg_attr(not(any(feature = "std", test)), no_std)]

extern crate alloc;

pub mod geo;
pub mod metrics;
pub mod nn;
pub mod patternlm;
pub mod rng;
pub mod roadnet;
pub mod rqvae;
pub mod tokens;
pub mod traj;

mod math;

pub use geo::{BBox, GridSpec, LonLat, Polyline};
pub use roadnet::{RoadNetwork, RoadSegment, Route};
pub use traj::{DatasetStats, GpsTrajectory, RelativeLabels};
