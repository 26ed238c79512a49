pub mod density;
pub mod error;
pub mod experiment;
pub mod flow;
pub mod io;
pub mod model;
pub mod oracle;
pub mod quadrature;
pub mod response;

pub use error::{Error, Result};
