pub mod ablation;
pub mod config;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod gradsuite;
pub mod labels;
pub mod meta;
pub mod nets;
pub mod plot;
pub mod results;
pub mod rng;
pub mod synthdata;
pub mod tracker;
pub mod train;

pub use error::{Error, Result};
pub use geometry::BBox;
pub use rng::Seed;
