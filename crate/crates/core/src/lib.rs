pub mod encoder;
pub mod bench;
pub mod error;
pub mod numkit;
pub mod objectives;
pub mod promptpool;
pub mod replay;
pub mod voting;

pub use error::{Error, Result};
