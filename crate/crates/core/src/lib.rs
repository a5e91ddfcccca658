pub mod cli;
pub mod error;
pub mod linalg;
pub mod network;
pub mod optima;
pub mod regularizer;
pub mod training;
