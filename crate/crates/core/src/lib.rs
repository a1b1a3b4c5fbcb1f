pub mod augment;
pub mod datasets;
pub mod eval;
pub mod exec;
pub mod losses;
pub mod model;
pub mod nn;
pub mod training;
