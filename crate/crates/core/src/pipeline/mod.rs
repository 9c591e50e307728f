//! Stage orchestration. [`stages`] holds the in-memory steps; [`runner`]
//! wires them to a run directory with stage flags and cached artifacts.

mod config;
mod runner;
mod stages;

pub use config::{MitigationParams, PipelineConfig};
pub use runner::{
    metrics_table, mitigation_kind, PrototypeView, Runner, SelectRequest, SelectionRecord, SelectionSource, CLUSTERS,
    CONCEPTS, DATASET, METRICS_FILE, MODEL, PROTOTYPES, SELECTION_FILE, TEST_ACTIVATIONS, TRAIN_REPORT,
    VAL_ACTIVATIONS,
};
pub use stages::{
    cluster_check, export_splits, generate_data, mitigate, run_detection, train_model, ClusterCheck, Exports,
    MetricsReport, MitigationResult,
};
