//! One-to-one coincidence matching.

use std::collections::BTreeMap;

use serde::Serialize;

use super::drift::DriftModel;
use crate::tags::TimeTag;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Coincidence {
    pub t_a: u64,
    pub t_b: u64,
    pub channel_a: u8,
    pub channel_b: u8,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Coincidences {
    pub records: Vec<Coincidence>,
    /// Keyed by `(channel_a, channel_b)`.
    pub counts: BTreeMap<(u8, u8), u64>,
}

impl Coincidences {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn count(&self, channel_a: u8, channel_b: u8) -> u64 {
        self.counts.get(&(channel_a, channel_b)).copied().unwrap_or(0)
    }

    /// `[a port][b port]` for two-detector stations.
    pub fn matrix2(&self) -> [[u64; 2]; 2] {
        [[self.count(0, 0), self.count(0, 1)], [self.count(1, 0), self.count(1, 1)]]
    }

    fn push(&mut self, a: &TimeTag, b: &TimeTag) {
        self.records.push(Coincidence { t_a: a.t_ps, t_b: b.t_ps, channel_a: a.channel, channel_b: b.channel });
        *self.counts.entry((a.channel, b.channel)).or_insert(0) += 1;
    }
}

/// Pairs each A tag with the earliest unused B tag satisfying
/// `|t_b - delay - t_a| <= window / 2`, in a single pass.
pub fn match_coincidences(a: &[TimeTag], b: &[TimeTag], delay_ps: i64, window_ps: u64) -> Coincidences {
    match_with(a, b, window_ps, |t| t as i128 - delay_ps as i128)
}

/// As [`match_coincidences`] with a time-dependent delay. The drift model must
/// keep `t_b - delay(t_b)` non-decreasing, which holds for any physical drift.
pub fn match_coincidences_drift(a: &[TimeTag], b: &[TimeTag], model: &DriftModel, window_ps: u64) -> Coincidences {
    match_with(a, b, window_ps, |t| t as i128 - model.delay_at(t).round() as i128)
}

fn match_with(a: &[TimeTag], b: &[TimeTag], window_ps: u64, corrected: impl Fn(u64) -> i128) -> Coincidences {
    let mut out = Coincidences::default();
    let w = window_ps as i128;
    let mut j = 0;
    for ta in a {
        let t = ta.t_ps as i128;
        // 2|d| <= w keeps odd windows exact
        while j < b.len() && 2 * (corrected(b[j].t_ps) - t) < -w {
            j += 1;
        }
        if j < b.len() && 2 * (corrected(b[j].t_ps) - t) <= w {
            out.push(ta, &b[j]);
            j += 1;
        }
    }
    out
}
