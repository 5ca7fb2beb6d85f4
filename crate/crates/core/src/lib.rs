pub mod acquisition;
pub mod cli;
pub mod domain;
pub mod driver;
pub mod error;
pub mod gp;
pub mod oracle;
mod linalg;
pub mod protocol;
pub mod scenario;
pub mod seeding;
pub mod simulator;

pub use error::{Error, Result};
