//! Synthetic dataset generation, feature providers, run configuration, and
//! the end-to-end pipeline behind the CLI.

pub mod config;
pub mod features;
pub mod manifest;
pub mod pipeline;
pub mod selftest;
pub mod shapes;

pub use config::{load_run_config, parse_run_config, EvalAggregator, ModelProfile, RunConfig};
pub use features::{class_text_feature, load_view_features, synthetic_view_features};
pub use manifest::{generate_synthetic_dataset, load_manifest, DatasetManifest, DatasetSpec};
pub use shapes::ShapeFamily;
