//! Low-dimensional encoding, synthesis and GAN-based augmentation of
//! acoustic impulse responses.

pub mod air;
pub mod bank;
pub mod estimation;
pub mod gan;
pub mod nn;
pub mod pca;
pub mod pipeline;
pub mod poly;
pub mod rep;
pub mod segment;
pub mod synthesis;
pub mod synthetic;
