//! Dataset files, structure import, toy corpora and run configuration.

pub mod config;
pub mod dataset;
pub mod pdb;
pub mod toy;

pub use config::RunConfig;
pub use dataset::{Dataset, DatasetHeader, MoleculeRecord, DATASET_FORMAT};
pub use pdb::import_backbone;
pub use toy::{generate_toy_corpus, ToyConfig};
