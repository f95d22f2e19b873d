pub mod graph;
pub mod rng;
pub mod walker;
pub mod model;
pub mod trainer;
pub mod eval;
pub mod cli;
