pub mod diagnostics;
pub mod dynamics;
pub mod ensemble;
pub mod error;
pub mod experiments;
pub mod estimators;
pub mod jsonfmt;
pub mod linalg;
pub mod plot;
pub mod stream;

pub use error::{Error, Result};
