//! Local part-based 4D implicit surfaces.
//!
//! A dynamic clothed-body sequence is represented by a set of overlapping
//! spherical parts anchored to a skinned inner-body proxy. Each part carries
//! latent codes that condition three shared MLPs (motion, canonical shape,
//! texture); the composed field yields a time-varying signed distance and
//! color at any world-space point. The crate covers the full pipeline:
//! synthetic data generation, training, test-time auto-decoding against
//! sparse or partial observations, inner-body refining, iso-surface
//! extraction, and geometric evaluation metrics.

pub mod body;
pub mod extract;
pub mod fields;
pub mod geometry;
pub mod math;
pub mod metrics;
pub mod objectives;
pub mod optimize;
pub mod parts;
pub mod synth;
pub mod util;

pub use geometry::{Aabb, LocalFrame, OrientedPointCloud, TriMesh};
pub use parts::{LocalPart, PartSet};
