//! Delay recovery, drift tracking and coincidence matching between two tag
//! streams. Offsets are always `t_b - t_a`.

mod correlogram;
mod drift;
mod matching;
mod search;

pub use correlogram::{cross_correlogram, peak_stats, Correlogram, PeakStats};
pub use drift::{track_drift, DriftKnot, DriftModel};
pub use matching::{match_coincidences, match_coincidences_drift, Coincidence, Coincidences};
pub use search::{coarse_to_fine_delay, refine_delay, DelaySearch, LevelSummary, LEVEL_BINS, SIGNIFICANCE_THRESHOLD};

use thiserror::Error;

/// Default coincidence window.
pub const DEFAULT_WINDOW_PS: u64 = 1000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CorrelationError {
    #[error("bin width must be at least 1 ps")]
    ZeroBinWidth,
    #[error("empty offset range [{min}, {max})")]
    EmptyRange { min: i64, max: i64 },
    #[error("no correlation found (best peak {significance:.2} sigma at {bin_width_ps} ps bins)")]
    NoCorrelation { bin_width_ps: u64, significance: f64 },
    #[error("stream has no tags")]
    EmptyStream,
    #[error("block duration must be positive, got {0}")]
    BadBlock(f64),
    #[error("drift model needs at least one knot")]
    EmptyDriftModel,
    #[error("drift knots must be strictly increasing in time")]
    UnsortedKnots,
}
