//! Desk-scale adaptive multimodal controllable world generation.
//!
//! A small diffusion-transformer video denoiser extended with per-modality
//! control branches fused through spatiotemporal weight maps, together with
//! the surrounding machinery: control-signal extractors, weight-map recipes,
//! a tiled upscaler, an evaluation metric suite, a simulated head-parallel
//! inference engine, and a synthetic corpus generator for end-to-end runs.

pub mod checkpoint;
pub mod controlnet;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod extractors;
pub mod gradcheck;
pub mod metrics;
pub mod parinfer;
pub mod rng;
pub mod synth;
pub mod tape;
pub mod tokenizer;
pub mod tensor;
pub mod upscaler;
pub mod weightmaps;

pub use error::{CoreError, Result};
pub use rng::RngStream;
pub use tensor::Tensor;
