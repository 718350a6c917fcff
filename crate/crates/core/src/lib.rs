pub mod clss;
pub mod error;
pub mod es;
pub mod landscape;
pub mod lyapunov;
pub mod metastability;
pub mod ou;
pub mod probes;
pub mod slq;
pub mod stats;
pub mod stochastics;

pub use error::{Error, Result};
pub use landscape::{Objective, Spectrum};
pub use stochastics::{Stream, StreamKey};
