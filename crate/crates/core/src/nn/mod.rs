//! Minimal neural-network toolkit on top of candle tensors: a named
//! parameter store, the handful of layers the models need, and Adam.
//!
//! Parameters are initialized from this crate's seeded generators, never
//! from candle's global RNG, so a model is a pure function of its seed.

pub mod layers;
pub mod ops;
pub mod optim;
pub mod params;

pub use layers::{BatchNorm, Conv2d, ConvTranspose2d, Linear};
pub use optim::{clip_grad_norm, Adam, AdamConfig};
pub use params::ParamStore;
