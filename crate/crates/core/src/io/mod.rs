//! On-disk formats.

pub mod pgm;
pub mod tsr;

pub use pgm::{export_pgm, read_pgm, PgmImage, Selection};
pub use tsr::{read_tsr, read_tsr_any, write_tsr, AnyTensor, TsrElement};
