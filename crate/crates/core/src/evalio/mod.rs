pub mod container;
pub mod heatmap;
pub mod metrics;

pub use container::{read_container, write_container, Container, ContainerError, Dtype, TensorData, TensorRecord};
pub use heatmap::{export_heatmap, pgm_bytes};
pub use metrics::{evaluate, pr_auc, roc_auc, Level, Metrics, ScoredSet};
