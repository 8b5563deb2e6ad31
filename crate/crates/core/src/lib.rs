pub mod autodiff;
pub mod data_model;
pub mod ingestion;
pub mod losses;
pub mod network;
pub mod phantom;
pub mod preprocess;
pub mod training;
pub mod util;
mod error;
pub use error::{Error, Result};
