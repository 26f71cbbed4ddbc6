//! Front end for the cardiolink tools: `simulate`, `serve`, `plot`, `report`.

pub mod app;
pub mod error;
pub mod replay;
pub mod scenario;
pub mod serve;
pub mod settings;
pub mod simulate;

pub use error::CliError;
