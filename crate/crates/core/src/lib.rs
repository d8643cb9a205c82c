pub mod bits;
pub mod config;
pub mod distill;
pub mod exec;
pub mod finite_key;
pub mod keystore;
pub mod link;
pub mod pipeline;
pub mod polarization;
pub mod relay;
pub mod rng;
pub mod source;
