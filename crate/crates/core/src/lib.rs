pub mod attention;
pub mod episodes;
pub mod error;
pub mod model;
pub mod gclust;
pub mod harness;
pub mod ndgrad;
pub mod pretext;
pub mod sampling;

pub use error::{Error, Result};
