pub mod baseline;
pub mod cli;
pub mod datagen;
pub mod error;
pub mod featsel;
pub mod flowkanet;
pub mod model;
pub mod netgraph;
pub mod rng;
pub mod splines;
pub mod symdistill;
pub mod tensor;
pub mod trainer;

pub use error::{FlowKanError, Result};
