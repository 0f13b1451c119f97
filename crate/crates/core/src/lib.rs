//! Deterministic federated-learning simulator for text classification.
//!
//! The crate reproduces a worst-client fairness study at desk scale:
//! Dirichlet label-skew partitioning, FedAvg and the LoRA-selective inverse-size
//! variant FedAvgW, a TextCNN and a frozen-backbone transformer with LoRA
//! adapters, and per-client restricted evaluation with average, worst-client and
//! gap accuracy per round.
//!
//! Layout:
//!
//! - [`numkit`]: dense tensors, a reverse-mode tape, SGD and AdamW.
//! - [`textdata`]: CSV ingestion, vocabulary, batching and a synthetic corpus.
//! - [`partition`]: class-wise Dirichlet partitioning and skew statistics.
//! - [`models`]: parameter sets, TextCNN, the LoRA transformer, checkpoints.
//! - [`federation`]: local training, aggregation rules and the round loop.
//! - [`metrics`]: restricted evaluation, fairness summaries, `rounds.csv`.
//! - [`fedcli`]: declarative sweeps, run summaries and the markdown report.
//!
//! Runnable walkthroughs of each capability live in `examples/`.

pub mod error;
pub mod fedcli;
pub mod federation;
pub mod metrics;
pub mod models;
pub mod numkit;
pub mod partition;
pub mod seed;
pub mod selftest;
pub mod textdata;

pub use error::{Error, Result};
