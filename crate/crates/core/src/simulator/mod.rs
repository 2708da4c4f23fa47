//! Replay of logged requests under every grid instance: the parameter grid,
//! the coefficient table, its binary file format and business metrics.

mod format;
mod grid;
mod metrics;
mod table;

pub use format::{load_table, read_provenance, store_summary, store_table, TableFile, MAGIC};
pub use grid::{grid_params, BoxWidths, GridSpec, GridSteps, ParamGrid};
pub use metrics::{
    aggregate_metrics, baseline_metrics, category_totals, one_hot, CtrMode, MetricDeltas,
    MetricModes, MetricTotals, MetricsReport, Mixture, PvrMode,
};
pub use table::{
    build_coefficient_table, build_table_summary, CategoryColumns, CoefficientTable, RequestMeta,
    TableSummary,
};
