#![allow(dead_code)]

use qlink::link::{LinkConfig, PS_PER_S};
use qlink::tags::TimeTag;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Sorted Poisson arrival times at `rate_per_s` over `[0, duration_s)`.
pub fn poisson_times(rate_per_s: f64, duration_s: f64, seed: u64) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rate = rate_per_s / PS_PER_S;
    let end = duration_s * PS_PER_S;
    let mut t = 0.0;
    let mut out = Vec::new();
    loop {
        t += -(1.0 - rng.random::<f64>()).ln() / rate;
        if t >= end {
            return out;
        }
        out.push(t as u64);
    }
}

pub fn tags(times: &[u64], channel: u8) -> Vec<TimeTag> {
    times.iter().map(|&t| TimeTag::new(channel, t)).collect()
}

/// All-pairs count of `t_b - t_a` in `[min, max)`.
pub fn all_pairs_in_range(a: &[TimeTag], b: &[TimeTag], min: i64, max: i64) -> u64 {
    let mut n = 0;
    for x in a {
        for y in b {
            let d = y.t_ps as i64 - x.t_ps as i64;
            if d >= min && d < max {
                n += 1;
            }
        }
    }
    n
}

/// For each A tag in order, take the earliest still-unused B tag inside the
/// window, by exhaustive search.
pub fn brute_force_matching(a: &[TimeTag], b: &[TimeTag], delay: i64, window: u64) -> Vec<(usize, usize)> {
    let mut used = vec![false; b.len()];
    let mut out = Vec::new();
    for (i, x) in a.iter().enumerate() {
        for (j, y) in b.iter().enumerate() {
            let d = y.t_ps as i128 - delay as i128 - x.t_ps as i128;
            if !used[j] && 2 * d.abs() <= window as i128 {
                used[j] = true;
                out.push((i, j));
                break;
            }
        }
    }
    out
}

/// A bright, short link: ~1e4 singles per station, ~5e3 coincidences per second.
pub fn bright_link(duration_s: f64) -> LinkConfig {
    let mut cfg = LinkConfig::default();
    cfg.duration_s = duration_s;
    cfg.pair_rate = 2e4;
    cfg.malta_arm_efficiency = 0.5;
    cfg.sicily_arm_efficiency = 0.5;
    cfg.fibre_delay_ps = 532_281_000;
    for d in cfg.malta.detectors.iter_mut().chain(cfg.sicily.detectors.iter_mut()) {
        d.jitter_fwhm_ps = 300.0;
        d.dark_rate = 100.0;
    }
    cfg
}
