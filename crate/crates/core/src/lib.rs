pub mod data;
pub mod eval;
pub mod nets;
pub mod numerics;
pub mod sos;
pub mod train;
