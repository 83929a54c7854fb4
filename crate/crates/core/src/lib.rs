//! Single-image 3D world synthesis toolkit.
//!
//! The crate turns one photograph into reconstruction-ready assets:
//! progressive panorama outpainting ([`pano`]), metric lifting to a point
//! cloud ([`lift`]), z-buffered point rendering and forward-backward warp
//! pairs ([`warp`]), a trainable per-image grid distortion ([`distortion`])
//! and the orchestration/export layer ([`pipeline`]). Every generative model
//! sits behind the [`oracle`] protocol so the geometry can be exercised with
//! deterministic mocks.

pub mod geometry;
pub mod raster;
pub mod scene;
pub mod formats;
pub mod lift;
pub mod oracle;
pub mod pano;
pub mod warp;
pub mod distortion;
pub mod pipeline;
