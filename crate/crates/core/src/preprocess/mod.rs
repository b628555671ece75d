//! Raw KPI logs to fixed-length training windows.
//!
//! The stages run in order: [`moving_average`] onto a uniform grid,
//! [`fill_and_filter`] for missing values, [`iqr_filter`] for outliers and
//! [`build_sequences`] for `(X, Y)` pairs. [`run`] chains them.

mod frame;
mod log;
mod sequence;

use serde::{Deserialize, Serialize};

pub use frame::{
    apply_bounds, fill_and_filter, iqr_bounds, iqr_filter, moving_average, percentile, Bounds,
    FillReport, FrameRow, IqrOutcome, KpiFrame, DELAY_SENTINEL,
};
pub use log::{parse_kpi_log, parse_kpi_reader, write_kpi_log, ColumnSchema, KpiRecord, ParsedLog};
pub use sequence::{
    build_sequences, fit_normalization, normalize_dataset, Normalization, SequenceDataset,
    DEFAULT_SEQ_LEN,
};

use crate::error::Result;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreprocessConfig {
    /// Averaging window in milliseconds.
    pub window_len: f64,
    /// Grid spacing in milliseconds.
    pub t_step: f64,
    pub lower_pct: f64,
    pub upper_pct: f64,
    pub n_seq: usize,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            window_len: 100.0,
            t_step: 20.0,
            lower_pct: 10.0,
            upper_pct: 90.0,
            n_seq: DEFAULT_SEQ_LEN,
        }
    }
}

/// Row accounting for one preprocessing run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PreprocessReport {
    pub records: usize,
    pub averaged_rows: usize,
    pub filled_rows: usize,
    pub dropped_incomplete: usize,
    pub removed_outliers: usize,
    pub samples: usize,
    pub warnings: Vec<String>,
}

/// Runs every stage and returns the (unnormalized) dataset.
pub fn run(
    records: &[KpiRecord],
    cfg: &PreprocessConfig,
) -> Result<(SequenceDataset, PreprocessReport)> {
    let averaged = moving_average(records, cfg.window_len, cfg.t_step)?;
    let (filled, fill) = fill_and_filter(&averaged);
    let iqr = iqr_filter(&filled, cfg.lower_pct, cfg.upper_pct)?;
    let ds = build_sequences(&iqr.frame, cfg.n_seq)?;
    let report = PreprocessReport {
        records: records.len(),
        averaged_rows: averaged.rows.len(),
        filled_rows: fill.filled,
        dropped_incomplete: fill.dropped,
        removed_outliers: iqr.removed,
        samples: ds.len(),
        warnings: iqr.warning.into_iter().collect(),
    };
    Ok((ds, report))
}
