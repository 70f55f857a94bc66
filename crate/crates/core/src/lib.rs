//! Capsule networks with dynamic and attention routing, built on a small
//! reverse-mode autodiff tape.
//!
//! The crate covers the full loop for a class-imbalanced binary task:
//! synthetic data ([`data`]), capsule layers ([`capsule`]), weighted margin
//! objectives ([`objectives`]), metrics ([`metrics`]), model assembly
//! ([`model`]), and a deterministic training harness ([`train`]).
//!
//! ```
//! use capsroute::autodiff::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let x = tape.param(Tensor::vector(vec![3.0, 4.0]));
//! let v = capsroute::capsule::squash(&mut tape, x).unwrap();
//! let n: f64 = tape.value(v).data().iter().map(|a| a * a).sum::<f64>().sqrt();
//! assert!((n - 25.0 / 26.0).abs() < 1e-12);
//! ```

pub mod autodiff;
pub mod capsule;
pub mod config;
pub mod data;
pub mod error;
pub mod metrics;
pub mod model;
pub mod objectives;
pub mod optim;
pub mod params;
pub mod routing_bench;
pub mod train;

pub use autodiff::{Tape, Tensor, Var};
pub use data::{Dataset, SynthConfig};
pub use error::{Error, Result};
pub use metrics::MetricsReport;
pub use model::{build_model, ModelConfig, Network};
pub use train::{ExperimentConfig, ExperimentRecord, TrainConfig};
