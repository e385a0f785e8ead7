pub mod conll;
pub mod crf;
pub mod embedding;
pub mod emission;
pub mod episode;
pub mod error;
pub mod eval;
pub mod math;
pub mod model;
pub mod optim;
pub mod sampler;
pub mod synthetic;
pub mod tags;
pub mod trainer;
