//! Dense tensors and a reverse-mode tape over them.

pub mod nn;
pub mod scan;
pub mod tape;
pub mod value;

pub use scan::{run_scan, scan_chunked, scan_sequential, ScanInputs, ScanMode, ScanOutput};
pub use tape::{Tape, Var};
pub use value::Tensor;
