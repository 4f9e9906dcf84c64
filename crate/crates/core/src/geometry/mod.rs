//! Homographies, their estimation, and the benchmark metrics.

mod dlt;
mod homography;
pub mod metrics;
mod ransac;

pub use dlt::dlt;
pub use homography::Homography;
pub use metrics::{auc, corner_error, format_table, mma, write_csv, Aggregate, CsvRow, MetricsReport, PairMetrics, Split, CSV_HEADER, THRESHOLDS};
pub use ransac::{ransac_homography, RansacParams, RansacResult};

/// A pixel position `[x, y]`.
pub type Point = [f64; 2];
