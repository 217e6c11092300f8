pub mod arch;
pub mod bound;
pub mod cli;
pub mod config;
pub mod geometry;
pub mod ifs;
pub mod linalg;
pub mod nn;
pub mod ot;
pub mod plot;
pub mod train;
