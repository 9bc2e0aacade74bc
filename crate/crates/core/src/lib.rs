//! Energy-minimizing simplicial maps between complete ideal hyperbolic
//! metrics on finite 2-dimensional simplicial complexes.

pub mod complex;
pub mod energy;
pub mod error;
pub mod hyperbolic;
pub mod io;
pub mod mesh;
pub mod metric;
pub mod solver;
pub mod verify;
mod union_find;

pub use complex::{Complex, ComplexSpec};
pub use error::Error;
