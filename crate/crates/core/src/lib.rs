pub mod data_io;
pub mod error;
pub mod moe_head;
pub mod numerics;
pub mod retrieval_eval;
pub mod training;

pub use error::{Error, Result};
