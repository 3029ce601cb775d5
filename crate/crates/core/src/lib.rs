pub mod edges;
pub mod error;
pub mod features;
pub mod geom;
pub mod integral;
pub mod masks;
pub mod mlregions;
pub mod proposals;

pub use error::{Error, Result};
pub use geom::Rect;
pub mod config;
pub mod eval;
pub mod forest;
pub mod manifest;
pub mod model;
pub mod pipeline;
pub mod probmap;
pub mod render;
pub mod rng;
pub mod synth;
