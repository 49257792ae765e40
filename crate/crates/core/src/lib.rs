pub mod cli;
pub mod design;
pub mod error;
pub mod infer;
pub mod kalg;
pub mod matfun;
pub mod mc;
pub mod mdest;
pub mod moments;
pub mod qmle;
pub mod shrink;

pub use error::{Error, Result};
