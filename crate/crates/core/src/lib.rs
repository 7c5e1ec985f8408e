pub mod assimilation;
pub mod config;
pub mod ensemble;
pub mod error;
pub mod field;
pub mod forecast;
pub mod io;
pub mod kernels;
pub mod koopman;
pub mod linalg;
pub mod lyapunov;
pub mod pipeline;
pub mod qg;

pub use error::{Error, Result};
pub use field::{Field2D, FieldKind, Grid};
