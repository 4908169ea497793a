//! Multi-resolution delay search.

use serde::Serialize;

use super::correlogram::{cross_correlogram, peak_stats, Correlogram, PeakStats};
use super::CorrelationError;
use crate::tags::TimeTag;

/// Bins per level.
pub const LEVEL_BINS: u64 = 1024;
/// Peak significance required at every level.
pub const SIGNIFICANCE_THRESHOLD: f64 = 5.0;

/// Outcome of [`coarse_to_fine_delay`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DelaySearch {
    pub delay_ps: f64,
    /// Peak statistics at the finest level.
    pub peak: PeakStats,
    /// Finest-level histogram.
    pub correlogram: Correlogram,
    pub levels: Vec<LevelSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LevelSummary {
    pub bin_width_ps: u64,
    pub center_ps: f64,
    pub significance: f64,
}

/// Locates the correlation peak between `a` and `b` (`t_b - t_a`) somewhere
/// in `±search_span_ps`, narrowing to `final_bin_ps` resolution.
pub fn coarse_to_fine_delay(a: &[TimeTag], b: &[TimeTag], search_span_ps: u64, final_bin_ps: u64) -> Result<DelaySearch, CorrelationError> {
    refine(a, b, 0.0, search_span_ps, final_bin_ps)
}

/// Same as [`coarse_to_fine_delay`] but centred on `center_ps`.
pub fn refine_delay(a: &[TimeTag], b: &[TimeTag], center_ps: f64, search_span_ps: u64, final_bin_ps: u64) -> Result<DelaySearch, CorrelationError> {
    refine(a, b, center_ps, search_span_ps, final_bin_ps)
}

/// Peak search for a possibly smeared peak: starts at 64 bins across the
/// span and halves the bin width until the peak is resolved by
/// `RESOLVED_BINS` bins, the next level loses significance, or `final_bin_ps`
/// is reached. `None` when even the coarsest level is insignificant.
pub(crate) fn resolve_peak(a: &[TimeTag], b: &[TimeTag], center_ps: f64, search_span_ps: u64, final_bin_ps: u64) -> Option<PeakStats> {
    const RESOLVED_BINS: f64 = 8.0;
    let final_bin = final_bin_ps.max(1);
    let mut width = (2 * search_span_ps).div_ceil(64).max(final_bin);
    let mut center = center_ps.round() as i64;
    let mut best = None;
    loop {
        let half = (search_span_ps as i64).min((LEVEL_BINS / 2 * width) as i64).max(width as i64);
        let hist = cross_correlogram(a, b, width, (center - half, center + half)).ok()?;
        let stats = peak_stats(&hist);
        if !(stats.significance >= SIGNIFICANCE_THRESHOLD) {
            return best;
        }
        center = stats.delay_ps.round() as i64;
        let resolved = stats.fwhm_ps >= RESOLVED_BINS * width as f64;
        best = Some(stats);
        if resolved || width == final_bin {
            return best;
        }
        width = (width / 2).max(final_bin);
    }
}

fn refine(a: &[TimeTag], b: &[TimeTag], center: f64, span: u64, final_bin: u64) -> Result<DelaySearch, CorrelationError> {
    if final_bin == 0 {
        return Err(CorrelationError::ZeroBinWidth);
    }
    if span == 0 {
        return Err(CorrelationError::EmptyRange { min: 0, max: 0 });
    }
    let mut width = (2 * span).div_ceil(LEVEL_BINS).max(final_bin);
    let mut lo = center.round() as i64 - span as i64;
    let mut hi = center.round() as i64 + span as i64;
    let mut levels = Vec::new();
    loop {
        let hist = cross_correlogram(a, b, width, (lo, hi))?;
        let stats = peak_stats(&hist);
        if !(stats.significance >= SIGNIFICANCE_THRESHOLD) {
            return Err(CorrelationError::NoCorrelation { bin_width_ps: width, significance: stats.significance });
        }
        let peak_center = hist.bin_center_ps(hist.argmax());
        levels.push(LevelSummary { bin_width_ps: width, center_ps: peak_center, significance: stats.significance });
        if width == final_bin {
            return Ok(DelaySearch { delay_ps: stats.delay_ps, peak: stats, correlogram: hist, levels });
        }
        width = (width / 2).max(final_bin);
        let half = (LEVEL_BINS / 2 * width) as i64;
        lo = peak_center.round() as i64 - half;
        hi = peak_center.round() as i64 + half;
    }
}
