pub mod error;
pub mod model;
pub mod qsolve;
pub mod arena;
pub mod admm;
pub mod hocbf;
pub mod baseline;
pub mod sim;
