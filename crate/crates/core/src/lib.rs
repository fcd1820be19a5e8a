//! Physics-guided neural networks that predict the ground-state eigenpair of
//! parameterized symmetric matrices, with scheduled loss weights.

pub mod autodiff;
pub mod diagnostics;
pub(crate) mod io;
pub mod linalg;
pub mod losses;
pub mod quantum_data;
pub mod schedules;
pub mod training;

pub use io::FormatError;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
