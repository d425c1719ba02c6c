#![allow(dead_code)]

pub mod barrier_oracle;
pub mod qcqp_oracle;
