//! Planted ReLU regression trained by mini-batch SGD and quantized SGD,
//! locally or across a synchronous master and `K` workers.

pub mod clock;
pub mod codec;
pub mod dist;
pub mod engine;
pub mod harness;
mod par;
pub mod planted;
pub mod rng;

pub use codec::{dequantize, quantize, QuantizedVector};
pub use engine::{run, RunConfig, Scheme, Trace};
pub use planted::{PlantedDataset, WStarSpec, WeightVector};
