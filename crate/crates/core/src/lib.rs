pub mod autodiff;
pub mod error;
pub mod rng;
pub mod stats;
pub mod tensor;
pub mod world;
pub mod segment;
pub mod dissect;
pub mod intervene;
pub mod optimize;
pub mod quality;
pub mod export;
