//! Evolutionary optimization of data-augmentation policies for
//! self-supervised pretext tasks.

pub mod augment;
pub mod image;
pub mod policy;
pub mod rng;
pub mod evolve;
pub mod fitness;
pub mod data;
pub mod ssl;
pub mod explain;
pub mod landscape;
pub mod runlog;
pub mod harness;
