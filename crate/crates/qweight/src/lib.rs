//! File formats, threaded matvec, reports and the command line for
//! [`qweight_core`].

pub mod bench;
pub mod cli;
pub mod container;
pub mod error;
pub mod io;
pub mod pipeline;
pub mod report;
pub mod synth;
pub mod verify;

pub use error::{Error, Result};
