//! End-to-end exercise of the soft gate: synthetic pose-skewed data, the
//! angular-margin loss, momentum-SGD training, and verification evaluation.

pub mod data;
pub mod eval;
pub mod loss;
pub mod train;

pub use data::{generate_dataset, Dataset, DatasetMeta, SynthSample, YawLaw};
pub use eval::{evaluate_verification, make_pairs, VerifPair, VerifReport};
pub use loss::{margin_loss, MarginLossOutput};
pub use train::{metrics_csv, train, EpochMetrics, TrainConfig, TrainOutcome};
