//! Experiment driver: synthetic data, models, probe, training, evaluation,
//! sweeps and reports.

pub mod config;
pub mod dataset;
pub mod model;
pub mod probe;
pub mod report;
pub mod train;

pub use config::{RunConfig, SaliencySource, Variant};
pub use dataset::{generate_dataset, Dataset, DialogInstance, Split};
pub use model::{Model, RoundAux};
pub use train::{evaluate_model, train_model, Evaluation, Experiment, TrainedModel};
