//! Block-diagram control engine: typed dataflow diagrams with algebraic
//! loop solving, a standard block library, control synthesis routines,
//! noise-robust image filtering for autofocus, signed message framing and
//! code generation.

pub mod autofocus;
pub mod codegen;
pub mod control;
pub mod diagfile;
pub mod expr;
pub mod graph;
pub mod imaging;
pub mod linalg;
pub mod loopsolve;
pub mod net;
pub mod scalar;
pub mod stdblocks;

pub use scalar::Scalar;

pub type Matrix = linalg::Matrix<f64>;
pub type ImageBuffer = imaging::ImageBuffer<f64>;
pub type Kernel2D = imaging::Kernel2D<f64>;
pub type SymbolTable = expr::SymbolTable<f64>;
pub type StateSpace = control::StateSpace<f64>;
pub type TransferFunction = control::TransferFunction<f64>;
