pub mod attention;
pub mod autograd;
pub mod cli;
pub mod edt;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod nets;
pub mod perfusion;
pub mod phantom;
pub mod trainer;
pub mod volume_io;

pub use error::{Error, Result};
