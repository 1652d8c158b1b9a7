pub mod attention;
pub mod benchkit;
pub mod autodiff;
pub mod cfm;
pub mod diagnoser;
pub mod error;
pub mod experiment;
pub mod params;
pub mod planner;
pub mod rng;
pub mod tensor;
pub mod unit_gen;
pub mod weaving;

pub use error::{Error, Result};
pub use tensor::Mat;
