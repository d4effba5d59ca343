//! RealMLP: a tuned multilayer perceptron for tabular classification and
//! regression, with data loading, preprocessing, training, random-search
//! HPO, ensembles and benchmark aggregation.

pub mod bench;
pub mod config;
pub mod dataio;
pub mod diff;
pub mod ensemble;
pub mod error;
pub mod hpo;
pub mod model;
pub mod modelfile;
pub mod preprocess;
pub mod rng;
pub mod schedule;
pub mod train;

pub use config::RealMlpConfig;
pub use dataio::{Dataset, DatasetSchema, Task};
pub use error::{Error, Result};
