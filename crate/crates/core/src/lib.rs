//! Progress-guided diffusion policy learning on a deterministic planar
//! manipulation world.

pub mod encoder;
pub mod numkernel;
pub mod evalkit;
pub mod pipeline;
pub mod policy;
pub mod progress;
pub mod pushworld;
pub mod rlft;
pub mod worldmodel;
