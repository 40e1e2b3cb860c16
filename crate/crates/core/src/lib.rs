pub mod attention;
pub mod error;
pub mod gradients;
pub mod grid;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod optim;
pub mod phantom;
pub mod volume;
pub mod warp;

pub use error::{Error, Result};
pub use grid::{Dims, Spacing};
