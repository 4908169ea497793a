//! Piecewise-linear tracking of the inter-station delay.

use serde::Serialize;

use super::search::resolve_peak;
use super::CorrelationError;
use crate::link::PS_PER_S;
use crate::tags::TimeTag;

const MAX_PASSES: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DriftKnot {
    /// Stream-B time.
    pub t_ps: u64,
    pub delay_ps: f64,
}

/// Delay as a function of stream-B time, linear between knots and
/// extrapolated along the end segments.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DriftModel {
    knots: Vec<DriftKnot>,
}

impl DriftModel {
    pub fn new(knots: Vec<DriftKnot>) -> Result<Self, CorrelationError> {
        if knots.is_empty() {
            return Err(CorrelationError::EmptyDriftModel);
        }
        if knots.windows(2).any(|w| w[1].t_ps <= w[0].t_ps) {
            return Err(CorrelationError::UnsortedKnots);
        }
        Ok(Self { knots })
    }

    pub fn constant(delay_ps: f64) -> Self {
        Self { knots: vec![DriftKnot { t_ps: 0, delay_ps }] }
    }

    pub fn knots(&self) -> &[DriftKnot] {
        &self.knots
    }

    pub fn delay_at(&self, t_ps: u64) -> f64 {
        let k = &self.knots;
        if k.len() == 1 {
            return k[0].delay_ps;
        }
        let i = k.partition_point(|x| x.t_ps <= t_ps).clamp(1, k.len() - 1);
        let (p, q) = (k[i - 1], k[i]);
        let f = (t_ps as f64 - p.t_ps as f64) / (q.t_ps as f64 - p.t_ps as f64);
        p.delay_ps + f * (q.delay_ps - p.delay_ps)
    }

    /// Least-squares slope of the knots, in ppm.
    pub fn slope_ppm(&self) -> f64 {
        let n = self.knots.len() as f64;
        if self.knots.len() < 2 {
            return 0.0;
        }
        let mt = self.knots.iter().map(|k| k.t_ps as f64).sum::<f64>() / n;
        let md = self.knots.iter().map(|k| k.delay_ps).sum::<f64>() / n;
        let (mut sxy, mut sxx) = (0.0, 0.0);
        for k in &self.knots {
            let dt = k.t_ps as f64 - mt;
            sxy += dt * (k.delay_ps - md);
            sxx += dt * dt;
        }
        sxy / sxx * 1e6
    }
}

/// Splits stream B into blocks of `block_duration_s` and locates the
/// correlation peak in each, searching `±search_span_ps` around the delay
/// predicted from earlier blocks (initially `coarse_delay_ps`). Later passes
/// remove the previous pass's drift inside each block and re-measure, until
/// no knot moves by more than `final_bin_ps`.
/// Blocks without a significant peak take their delay from neighbouring blocks.
pub fn track_drift(
    a: &[TimeTag],
    b: &[TimeTag],
    block_duration_s: f64,
    coarse_delay_ps: f64,
    search_span_ps: u64,
    final_bin_ps: u64,
) -> Result<DriftModel, CorrelationError> {
    if !(block_duration_s > 0.0) {
        return Err(CorrelationError::BadBlock(block_duration_s));
    }
    let (Some(first), Some(last)) = (b.first(), b.last()) else {
        return Err(CorrelationError::EmptyStream);
    };
    let block = ((block_duration_s * PS_PER_S) as u64).max(1);
    let n_blocks = ((last.t_ps - first.t_ps) / block + 1) as usize;
    let bounds: Vec<(u64, u64)> = (0..n_blocks).map(|i| (first.t_ps + i as u64 * block, first.t_ps + (i as u64 + 1) * block)).collect();

    let mids: Vec<u64> = bounds.iter().map(|&(start, _)| start + block / 2).collect();

    let mut found: Vec<Option<f64>> = Vec::with_capacity(n_blocks);
    for (&(start, end), &mid) in bounds.iter().zip(&mids) {
        let known: Vec<(u64, f64)> = mids.iter().zip(&found).filter_map(|(&t, d)| d.map(|d| (t, d))).collect();
        let center = match known.as_slice() {
            [] => coarse_delay_ps,
            [(_, d)] => *d,
            [.., (tp, dp), (tq, dq)] => dq + (dq - dp) * (mid as f64 - *tq as f64) / (*tq as f64 - *tp as f64),
        };
        found.push(block_peak(a, window(b, start, end), center, search_span_ps, final_bin_ps, None));
    }
    let mut model = fill_gaps(&mids, &found)?;
    for _ in 0..MAX_PASSES {
        let found: Vec<Option<f64>> = bounds
            .iter()
            .zip(&mids)
            .map(|(&(start, end), &mid)| block_peak(a, window(b, start, end), model.delay_at(mid), search_span_ps, final_bin_ps, Some((&model, mid))))
            .collect();
        let next = fill_gaps(&mids, &found)?;
        let moved = next.knots.iter().zip(&model.knots).map(|(p, q)| (p.delay_ps - q.delay_ps).abs()).fold(0.0, f64::max);
        model = next;
        if moved <= final_bin_ps as f64 {
            break;
        }
    }
    Ok(model)
}

fn window(tags: &[TimeTag], start: u64, end: u64) -> &[TimeTag] {
    crate::tags::slice_window(tags, start, end)
}

/// Peak delay for one block, or `None` when even the coarsest level is
/// insignificant. With `dedrift`, B times are first shifted by
/// `model(t) - model(mid)` so the block's peak is not smeared.
fn block_peak(a: &[TimeTag], b: &[TimeTag], center: f64, span: u64, final_bin: u64, dedrift: Option<(&DriftModel, u64)>) -> Option<f64> {
    if b.is_empty() {
        return None;
    }
    let owned: Vec<TimeTag>;
    let b = match dedrift {
        Some((model, mid)) => {
            let ref_delay = model.delay_at(mid);
            owned = b
                .iter()
                .map(|t| TimeTag { t_ps: (t.t_ps as f64 - (model.delay_at(t.t_ps) - ref_delay)).round().max(0.0) as u64, channel: t.channel })
                .collect();
            if owned.windows(2).any(|w| w[1].t_ps < w[0].t_ps) {
                return None;
            }
            &owned[..]
        }
        None => b,
    };
    let lo = (b[0].t_ps as f64 - center - span as f64).max(0.0) as u64;
    let hi = (b[b.len() - 1].t_ps as f64 - center + span as f64 + 1.0).max(0.0) as u64;
    resolve_peak(window(a, lo, hi), b, center, span, final_bin).map(|p| p.delay_ps)
}

/// Knots at every block midpoint; blocks without a measurement are
/// interpolated (or extrapolated) from the measured ones.
fn fill_gaps(mids: &[u64], found: &[Option<f64>]) -> Result<DriftModel, CorrelationError> {
    let good: Vec<DriftKnot> = mids.iter().zip(found).filter_map(|(&t_ps, d)| d.map(|delay_ps| DriftKnot { t_ps, delay_ps })).collect();
    if good.is_empty() {
        return Err(CorrelationError::NoCorrelation { bin_width_ps: 0, significance: 0.0 });
    }
    let measured = DriftModel::new(good)?;
    DriftModel::new(mids.iter().zip(found).map(|(&t_ps, d)| DriftKnot { t_ps, delay_ps: d.unwrap_or_else(|| measured.delay_at(t_ps)) }).collect())
}
