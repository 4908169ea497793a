//! All-pairs time-difference histograms and peak characterisation.

use rayon::prelude::*;
use serde::Serialize;

use super::CorrelationError;
use crate::tags::TimeTag;

/// Tags in B per parallel chunk.
const CHUNK: usize = 1 << 16;

/// Histogram of `t_b - t_a` over all tag pairs. Bin `k` covers
/// `[start_offset_ps + k w, start_offset_ps + (k + 1) w)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Correlogram {
    pub bin_width_ps: u64,
    pub start_offset_ps: i64,
    pub counts: Vec<u64>,
}

impl Correlogram {
    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// End of the last bin (exclusive).
    pub fn end_offset_ps(&self) -> i64 {
        self.start_offset_ps + (self.counts.len() as u64 * self.bin_width_ps) as i64
    }

    /// Offset at fractional bin position `x`; integer `x` is a bin centre.
    pub fn offset_at(&self, x: f64) -> f64 {
        self.start_offset_ps as f64 + (x + 0.5) * self.bin_width_ps as f64
    }

    pub fn bin_center_ps(&self, k: usize) -> f64 {
        self.offset_at(k as f64)
    }

    pub fn argmax(&self) -> usize {
        // first maximum on ties
        let mut best = 0;
        for (k, &c) in self.counts.iter().enumerate() {
            if c > self.counts[best] {
                best = k;
            }
        }
        best
    }
}

/// Builds the correlogram over `range = (min, max)` offsets, `min` inclusive.
/// The bin count is rounded up so the last bin may extend past `max`.
pub fn cross_correlogram(a: &[TimeTag], b: &[TimeTag], bin_width_ps: u64, range: (i64, i64)) -> Result<Correlogram, CorrelationError> {
    if bin_width_ps == 0 {
        return Err(CorrelationError::ZeroBinWidth);
    }
    let (min, max) = range;
    if max <= min {
        return Err(CorrelationError::EmptyRange { min, max });
    }
    let bins = ((max - min) as u64).div_ceil(bin_width_ps) as usize;
    let hist = if b.len() <= CHUNK {
        sweep(a, b, bin_width_ps, min, bins)
    } else {
        b.par_chunks(CHUNK)
            .map(|chunk| sweep(a, chunk, bin_width_ps, min, bins))
            .reduce(
                || vec![0; bins],
                |mut x, y| {
                    x.iter_mut().zip(y).for_each(|(p, q)| *p += q);
                    x
                },
            )
    };
    Ok(Correlogram { bin_width_ps, start_offset_ps: min, counts: hist })
}

/// For each `t_b`, the A tags with `t_b - t_a` in `[min, min + bins w)` form a
/// contiguous run whose ends only move forward.
fn sweep(a: &[TimeTag], b: &[TimeTag], w: u64, min: i64, bins: usize) -> Vec<u64> {
    let mut counts = vec![0u64; bins];
    let span = (bins as u64 * w) as i128;
    let (mut lo, mut hi) = (0usize, 0usize);
    for tb in b {
        let tb = tb.t_ps as i128;
        // t_a > tb - min - span
        let lo_bound = tb - min as i128 - span;
        // t_a <= tb - min
        let hi_bound = tb - min as i128;
        lo = gallop(a, lo, |t| t <= lo_bound);
        hi = gallop(a, hi.max(lo), |t| t <= hi_bound);
        for ta in &a[lo..hi] {
            let d = (tb - ta.t_ps as i128 - min as i128) as u64;
            counts[(d / w) as usize] += 1;
        }
    }
    counts
}

/// First index `>= from` where `before` is false, assuming `before` is
/// monotone. Exponential probe then binary search, so short hops stay cheap.
fn gallop(a: &[TimeTag], from: usize, before: impl Fn(i128) -> bool) -> usize {
    let test = |i: usize| before(a[i].t_ps as i128);
    if from >= a.len() || !test(from) {
        return from;
    }
    let mut step = 1;
    let mut lo = from;
    loop {
        let probe = lo + step;
        if probe >= a.len() || !test(probe) {
            let end = probe.min(a.len());
            return lo + 1 + a[lo + 1..end].partition_point(|t| before(t.t_ps as i128));
        }
        lo = probe;
        step *= 2;
    }
}

/// Peak location, width and significance in a correlogram.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PeakStats {
    /// Midpoint of the half-maximum crossings.
    pub delay_ps: f64,
    pub fwhm_ps: f64,
    pub peak_height: f64,
    pub background_mean: f64,
    /// `(peak - background) / sqrt(background)`, with the background floored at one count.
    pub significance: f64,
}

pub fn peak_stats(hist: &Correlogram) -> PeakStats {
    let k = hist.argmax();
    let peak = hist.counts[k] as f64;
    let all: Vec<u64> = hist.counts.clone();
    let mut background = median(all);
    let (mut left, mut right) = half_max_crossings(&hist.counts, k, background);
    let w = hist.bin_width_ps as f64;
    let far_bins = 10.0 * (right - left);
    let far: Vec<u64> = hist
        .counts
        .iter()
        .enumerate()
        .filter(|(i, _)| (*i as f64 - k as f64).abs() > far_bins)
        .map(|(_, c)| *c)
        .collect();
    if !far.is_empty() {
        background = median(far);
        (left, right) = half_max_crossings(&hist.counts, k, background);
    }
    PeakStats {
        delay_ps: hist.offset_at((left + right) / 2.0),
        fwhm_ps: (right - left) * w,
        peak_height: peak,
        background_mean: background,
        significance: (peak - background) / background.max(1.0).sqrt(),
    }
}

fn median(mut v: Vec<u64>) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.sort_unstable();
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2] as f64
    } else {
        (v[n / 2 - 1] as f64 + v[n / 2] as f64) / 2.0
    }
}

/// Fractional bin positions where the peak at `k` falls through half height
/// above `background`. Falls back to the histogram edge.
fn half_max_crossings(counts: &[u64], k: usize, background: f64) -> (f64, f64) {
    let peak = counts[k] as f64;
    if peak <= background {
        return (k as f64 - 0.5, k as f64 + 0.5);
    }
    let half = background + (peak - background) / 2.0;
    let interp = |inner: usize, outer: usize| {
        let (ci, co) = (counts[inner] as f64, counts[outer] as f64);
        inner as f64 + (outer as f64 - inner as f64) * (ci - half) / (ci - co)
    };
    let mut i = k;
    let left = loop {
        if i == 0 {
            break -0.5;
        }
        if (counts[i - 1] as f64) < half {
            break interp(i, i - 1);
        }
        i -= 1;
    };
    let mut j = k;
    let right = loop {
        if j + 1 == counts.len() {
            break counts.len() as f64 - 0.5;
        }
        if (counts[j + 1] as f64) < half {
            break interp(j, j + 1);
        }
        j += 1;
    };
    (left, right)
}
