pub mod autodiff;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod finite_prob;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod oracle;
pub mod preset;
pub mod rng;
pub mod train;
pub mod verify;
