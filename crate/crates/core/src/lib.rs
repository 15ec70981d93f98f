pub mod autodiff;
pub mod error;
pub mod fourier;
pub mod losses;
pub mod models;
pub mod phantom;
pub mod quality;
pub mod trainkit;
pub mod volgrid;

pub use error::{Error, Result};
pub use volgrid::Volume;
