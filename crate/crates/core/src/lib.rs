pub mod error;
pub mod linalg;
pub mod model;
pub mod moments;
pub mod spectrum;
pub mod tls;
pub mod dressed;
pub mod oracle;
pub mod reflection;
pub mod fit;
pub mod config;
pub mod cli;

pub use error::{Error, Result};
