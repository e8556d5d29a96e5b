//! Dataset generation, preprocessing, training, evaluation, baselines and
//! ablations around [`stmformer_core`].

pub mod baselines;
pub mod bundle;
pub mod checkpoint;
pub mod checks;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod report;
pub mod split;
pub mod train;

pub use bundle::{generate_dataset, DatasetBundle};
pub use config::{GenConfig, KvConfig, RunConfig};
pub use data::{preprocess, NormalizerState, Prepared, WindowPair};
pub use error::{HarnessError, Result};
pub use metrics::{Metrics, MetricsReport};
pub use split::{Part, SplitSpec};
pub use train::{train, TrainConfig};
