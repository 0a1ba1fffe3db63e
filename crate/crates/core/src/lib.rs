pub mod convdeepset;
pub mod diff;
pub mod gp_oracle;
pub mod kernels;
pub mod metrics;
pub mod models;
pub mod rng;
pub mod synth;
pub mod training;
