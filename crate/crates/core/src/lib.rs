pub mod adversarial;
pub mod autodiff;
pub mod checkpoint;
pub mod cli;
pub mod error;
pub mod generator;
pub mod geometry;
pub mod image;
pub mod metrics;
pub mod nn;
pub mod perceptual;
pub mod radiance_field;
pub mod rng;
pub mod scene_io;
pub mod tensor;
pub mod training;
