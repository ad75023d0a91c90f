pub mod attention;
pub mod dataset;
pub mod encoder;
pub mod error;
pub mod gradsuite;
pub mod heads;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod params;
pub mod pipeline;
pub mod sampling;
pub mod synth;

pub use error::{Error, Result};
pub use numerics::{Tape, Tensor, Var};
