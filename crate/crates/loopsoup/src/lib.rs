// Domain guards use negated comparisons (`!(t > 0.0)`) so NaN inputs are
// rejected along with out-of-range ones.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

//! Coupled loop-soup simulation library.
//!
//! Builds, on one probability space, coupled realizations of lattice
//! random-walk loop soups (discrete- and continuous-time) and the Brownian
//! loop soup, and measures the coupling quality: time-length gaps of order
//! N^{-2} and uniform path distances of order N^{-1} log N after scaling.

pub mod bridges;
pub mod coupling;
pub mod error;
pub mod experiment;
pub mod io;
pub mod loops;
pub mod masses;
pub mod quad;
pub mod rng;
pub mod sequences;
pub mod soup;
pub mod special;
pub mod stats;

pub use error::{Error, Result};
pub use loops::{Flavor, Path, RootedLoop};
pub use masses::{MassTable, Variant};
pub use sequences::{ASequence, CellTime};
