pub mod boxes;
pub mod cli;
pub mod container;
pub mod error;
pub mod evaluate;
pub mod loss;
pub mod model;
pub mod ontology;
pub mod optim;
pub mod record;
pub mod retrieval;
pub mod tensor;
pub mod train;
pub mod transformer;

pub use error::{Error, Result};
