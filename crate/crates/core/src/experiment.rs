//! End-to-end measurement runs: simulate, match, count, analyse.
//!
//! Long runs are simulated in chunks of at most [`MAX_CHUNK_S`] seconds so a
//! preset-rate measurement never holds more than one chunk of tags.

use std::f64::consts::FRAC_PI_4;

use thiserror::Error;

use crate::analysis::{
    block_stats, e_from_counts, pooled_qber, qber_from_counts, s_from_counts, AnalysisError, BlockStats, ChshResult, KeyConvention,
    QberValue, SettingCounts, VisibilityFit,
};
use crate::correlation::{coarse_to_fine_delay, match_coincidences, CorrelationError, DelaySearch};
use crate::link::{expected_rates, simulate_run, ConfigError, LinkConfig, Schedule, ScheduledSetting, SimError, PS_PER_S};
use crate::tags::{slice_window, TimeTag};

pub const MAX_CHUNK_S: f64 = 60.0;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Correlation(#[from] CorrelationError),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
    #[error("{0}")]
    Schedule(String),
}

/// SplitMix64 step: independent child seeds from one run seed.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed.wrapping_add(index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Counts of one scheduled slot, also split into equal time blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct SlotCounts {
    pub counts: SettingCounts,
    pub blocks: Vec<[[u64; 2]; 2]>,
}

/// Matches coincidences inside each schedule slot (Malta time) and splits
/// each slot into `blocks` equal parts.
pub fn count_schedule(a: &[TimeTag], b: &[TimeTag], schedule: &Schedule, delay_ps: i64, window_ps: u64, blocks: usize) -> Result<Vec<SlotCounts>, ExperimentError> {
    schedule.settings().iter().map(|s| count_slot(a, b, s, delay_ps, window_ps, blocks)).collect()
}

fn count_slot(a: &[TimeTag], b: &[TimeTag], s: &ScheduledSetting, delay_ps: i64, window_ps: u64, blocks: usize) -> Result<SlotCounts, ExperimentError> {
    let (start, end) = (s.start_ps, s.end_ps());
    let a_slot = slice_window(a, start, end);
    let pad = window_ps as i64;
    let b_lo = (start as i64 + delay_ps - pad).max(0) as u64;
    let b_hi = (end as i64 + delay_ps + pad).max(0) as u64;
    let m = match_coincidences(a_slot, slice_window(b, b_lo, b_hi), delay_ps, window_ps);
    let counts = SettingCounts::from_coincidences(s.malta_angle, s.sicily_angle, &m, s.duration_ps as f64 / PS_PER_S)?;
    Ok(SlotCounts { counts, blocks: crate::analysis::block_counts(&m, start, end, blocks) })
}

/// Config restricted to one fixed setting for `duration_s`.
pub fn fixed_setting(cfg: &LinkConfig, malta_angle: f64, sicily_angle: f64, duration_s: f64) -> LinkConfig {
    let mut c = cfg.clone();
    c.duration_s = duration_s;
    c.schedule = Schedule::constant(malta_angle, sicily_angle, duration_s);
    c
}

/// Simulates `duration_s` at one setting chunk by chunk and counts it as a
/// single slot split into `blocks` blocks.
pub fn measure_setting(
    cfg: &LinkConfig,
    malta_angle: f64,
    sicily_angle: f64,
    duration_s: f64,
    seed: u64,
    delay_ps: i64,
    window_ps: u64,
    blocks: usize,
) -> Result<SlotCounts, ExperimentError> {
    let n_chunks = (duration_s / MAX_CHUNK_S).ceil().max(1.0) as usize;
    let chunk_s = duration_s / n_chunks as f64;
    let blocks_per_chunk: Vec<usize> = (0..n_chunks).map(|i| (i + 1) * blocks / n_chunks - i * blocks / n_chunks).collect();
    let mut total: Option<SettingCounts> = None;
    let mut all_blocks = Vec::with_capacity(blocks);
    for (i, &nb) in blocks_per_chunk.iter().enumerate() {
        let c = fixed_setting(cfg, malta_angle, sicily_angle, chunk_s);
        let (a, b) = simulate_run(&c, derive_seed(seed, i as u64))?;
        let slot = &c.schedule.settings()[0];
        let r = count_slot(a.tags(), b.tags(), slot, delay_ps, window_ps, nb)?;
        total = Some(match total {
            None => r.counts,
            Some(t) => t.merged(&r.counts),
        });
        all_blocks.extend(r.blocks);
    }
    Ok(SlotCounts { counts: total.expect("at least one chunk"), blocks: all_blocks })
}

/// Locates the link delay on a short run of `cfg` at its first setting.
pub fn find_delay(cfg: &LinkConfig, duration_s: f64, seed: u64, search_span_ps: u64, final_bin_ps: u64) -> Result<DelaySearch, ExperimentError> {
    let s = cfg.effective_schedule().settings()[0].clone();
    let c = fixed_setting(cfg, s.malta_angle, s.sicily_angle, duration_s.min(MAX_CHUNK_S));
    let (a, b) = simulate_run(&c, seed)?;
    Ok(coarse_to_fine_delay(a.tags(), b.tags(), search_span_ps, final_bin_ps)?)
}

/// Simulated analyzer scan: one setting per Malta angle, Sicily fixed.
pub fn visibility_scan(
    cfg: &LinkConfig,
    sicily_angle: f64,
    malta_angles: &[f64],
    seconds_per_point: f64,
    seed: u64,
    delay_ps: i64,
    window_ps: u64,
) -> Result<Vec<SettingCounts>, ExperimentError> {
    malta_angles
        .iter()
        .enumerate()
        .map(|(i, &a)| Ok(measure_setting(cfg, a, sicily_angle, seconds_per_point, derive_seed(seed, i as u64), delay_ps, window_ps, 1)?.counts))
        .collect()
}

/// Fit of the transmit/transmit detector pair along a scan.
pub fn fit_scan(scan: &[SettingCounts]) -> Result<VisibilityFit, ExperimentError> {
    let points: Vec<(f64, f64)> = scan.iter().map(|s| (s.malta_angle, s.counts[0][0] as f64)).collect();
    Ok(crate::analysis::fit_visibility(&points)?)
}

/// `k` points at `step` spacing from zero.
pub fn angle_grid(points: usize, step_rad: f64) -> Vec<f64> {
    (0..points).map(|k| k as f64 * step_rad).collect()
}

/// CHSH analysis of four settings and their blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct BellAnalysis {
    /// Ordered `(a1,b1), (a1,b2), (a2,b1), (a2,b2)`.
    pub settings: [SettingCounts; 4],
    pub chsh: ChshResult,
    pub block_s: Vec<f64>,
    pub blocks: BlockStats,
}

/// Groups slots by setting and picks out the CHSH quadruple. `a1`/`b1` are
/// the first Malta/Sicily angles of the non-key settings in schedule order.
pub fn bell_from_slots(slots: &[SlotCounts]) -> Result<BellAnalysis, ExperimentError> {
    let grouped = group_by_setting(slots.iter().filter(|s| !is_key_basis(&s.counts)));
    if grouped.len() != 4 {
        return Err(ExperimentError::Schedule(format!("CHSH analysis needs exactly 4 distinct non-key settings, found {}", grouped.len())));
    }
    let a1 = grouped[0].0.malta_angle;
    let b1 = grouped[0].0.sicily_angle;
    let pick = |first_a: bool, first_b: bool| {
        grouped
            .iter()
            .find(|(c, _)| same_angle(c.malta_angle, a1) == first_a && same_angle(c.sicily_angle, b1) == first_b)
            .cloned()
            .ok_or_else(|| ExperimentError::Schedule("settings do not form a 2x2 grid of Malta and Sicily angles".into()))
    };
    let quad = [pick(true, true)?, pick(true, false)?, pick(false, true)?, pick(false, false)?];
    let settings = [quad[0].0, quad[1].0, quad[2].0, quad[3].0];
    let chsh = s_from_counts(&settings)?;
    let n_blocks = quad.iter().map(|q| q.1.len()).min().unwrap_or(0);
    let mut block_s = Vec::with_capacity(n_blocks);
    for k in 0..n_blocks {
        let per: Vec<SettingCounts> = quad
            .iter()
            .map(|(c, b)| SettingCounts::new(c.malta_angle, c.sicily_angle, b[k], c.duration_s / n_blocks as f64))
            .collect::<Result<_, _>>()?;
        block_s.push(s_from_counts(&[per[0], per[1], per[2], per[3]])?.s);
    }
    let blocks = block_stats(&block_s)?;
    Ok(BellAnalysis { settings, chsh, block_s, blocks })
}

/// Key-basis summary: pooled QBER, per-setting QBER and the coincidence rate
/// of the key-basis settings. `None` when the slots contain no key basis.
pub fn key_from_slots(slots: &[SlotCounts]) -> Result<Option<KeySummary>, ExperimentError> {
    let grouped = group_by_setting(slots.iter().filter(|s| is_key_basis(&s.counts)));
    if grouped.is_empty() {
        return Ok(None);
    }
    let with_conv: Vec<(SettingCounts, KeyConvention)> =
        grouped.iter().map(|(c, _)| (*c, KeyConvention::for_source(c.malta_angle, c.sicily_angle))).collect();
    let pooled = pooled_qber(&with_conv)?;
    let per_setting = with_conv
        .iter()
        .map(|(c, conv)| {
            Ok(QberValue {
                malta_deg: c.malta_angle.to_degrees(),
                sicily_deg: c.sicily_angle.to_degrees(),
                convention: *conv,
                qber: qber_from_counts(c, *conv)?.into(),
            })
        })
        .collect::<Result<Vec<_>, AnalysisError>>()?;
    let n: u64 = grouped.iter().map(|(c, _)| c.total()).sum();
    let t: f64 = grouped.iter().map(|(c, _)| c.duration_s).sum();
    Ok(Some(KeySummary { qber: pooled, per_setting, rate_cps: (n as f64 / t, (n as f64).sqrt() / t) }))
}

#[derive(Debug, Clone, PartialEq)]
pub struct KeySummary {
    pub qber: (f64, f64),
    pub per_setting: Vec<QberValue>,
    pub rate_cps: (f64, f64),
}

/// A setting is a key basis when the source is perfectly (anti)correlated
/// there, `|cos 2(a + b)| = 1`.
pub fn is_key_basis(c: &SettingCounts) -> bool {
    (2.0 * (c.malta_angle + c.sicily_angle)).cos().abs() > 1.0 - 1e-9
}

fn same_angle(x: f64, y: f64) -> bool {
    let d = (x - y).rem_euclid(std::f64::consts::PI);
    d < 1e-9 || std::f64::consts::PI - d < 1e-9
}

/// Sums repeated settings in first-appearance order, block arrays elementwise.
fn group_by_setting<'a>(slots: impl Iterator<Item = &'a SlotCounts>) -> Vec<(SettingCounts, Vec<[[u64; 2]; 2]>)> {
    let mut out: Vec<(SettingCounts, Vec<[[u64; 2]; 2]>)> = Vec::new();
    for s in slots {
        let c = &s.counts;
        match out.iter_mut().find(|(g, _)| same_angle(g.malta_angle, c.malta_angle) && same_angle(g.sicily_angle, c.sicily_angle)) {
            Some((g, blocks)) => {
                *g = g.merged(c);
                for (acc, b) in blocks.iter_mut().zip(&s.blocks) {
                    for i in 0..2 {
                        for j in 0..2 {
                            acc[i][j] += b[i][j];
                        }
                    }
                }
            }
            None => out.push((*c, s.blocks.clone())),
        }
    }
    out
}

/// Operating point: Malta 22.5° and 157.5°, Sicily 0° and -45°.
pub fn chsh_angles() -> [(f64, f64); 4] {
    let (a1, a2) = (22.5f64.to_radians(), 157.5f64.to_radians());
    let (b1, b2) = (0.0, -FRAC_PI_4);
    [(a1, b1), (a1, b2), (a2, b1), (a2, b2)]
}

/// Key-basis settings measured alongside the CHSH settings: H/V and D/A.
pub fn key_basis_angles() -> [(f64, f64); 2] {
    [(0.0, 0.0), (FRAC_PI_4, FRAC_PI_4)]
}

/// Measures each `(malta, sicily)` setting for `seconds_per_setting`,
/// `blocks` blocks per setting.
pub fn measure_settings(
    cfg: &LinkConfig,
    settings: &[(f64, f64)],
    seconds_per_setting: f64,
    blocks: usize,
    seed: u64,
    delay_ps: i64,
    window_ps: u64,
) -> Result<Vec<SlotCounts>, ExperimentError> {
    settings
        .iter()
        .enumerate()
        .map(|(i, &(a, b))| measure_setting(cfg, a, b, seconds_per_setting, derive_seed(seed, 1000 + i as u64), delay_ps, window_ps, blocks))
        .collect()
}

/// Expected `E` at one setting, including window losses and accidentals.
pub fn expected_correlation(cfg: &LinkConfig, malta_angle: f64, sicily_angle: f64, window_ps: u64) -> f64 {
    let r = expected_rates(cfg, malta_angle, sicily_angle, window_ps as f64);
    let same = r.coincidences(0, 0) + r.coincidences(1, 1);
    let opp = r.coincidences(0, 1) + r.coincidences(1, 0);
    (same - opp) / (same + opp)
}

/// Expected CHSH value for the four settings, ordered as in [`BellAnalysis`].
pub fn expected_s(cfg: &LinkConfig, settings: &[(f64, f64); 4], window_ps: u64) -> f64 {
    let e: Vec<f64> = settings.iter().map(|&(a, b)| expected_correlation(cfg, a, b, window_ps)).collect();
    e[0] + e[1] + e[2] - e[3]
}

/// `(E, sigma)` for every slot, in slot order.
pub fn correlations(slots: &[SlotCounts]) -> Result<Vec<(SettingCounts, (f64, f64))>, ExperimentError> {
    slots.iter().map(|s| Ok((s.counts, e_from_counts(&s.counts)?))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seeds_differ_and_repeat() {
        assert_eq!(derive_seed(42, 3), derive_seed(42, 3));
        assert_ne!(derive_seed(42, 3), derive_seed(42, 4));
        assert_ne!(derive_seed(42, 3), derive_seed(43, 3));
    }

    #[test]
    fn key_basis_detection() {
        let mk = |a: f64, b: f64| SettingCounts::new(a.to_radians(), b.to_radians(), [[1, 0], [0, 1]], 1.0).unwrap();
        assert!(is_key_basis(&mk(0.0, 0.0)));
        assert!(is_key_basis(&mk(45.0, 45.0)));
        assert!(is_key_basis(&mk(90.0, 0.0)));
        assert!(!is_key_basis(&mk(22.5, 0.0)));
        assert!(!is_key_basis(&mk(157.5, -45.0)));
    }

    #[test]
    fn bell_quadruple_is_reordered() {
        let angles = chsh_angles();
        let order = [3usize, 0, 2, 1];
        let slots: Vec<SlotCounts> = order
            .iter()
            .map(|&i| SlotCounts {
                counts: SettingCounts::new(angles[i].0, angles[i].1, [[10 + i as u64, 1], [1, 10]], 1.0).unwrap(),
                blocks: vec![[[5, 0], [0, 5]]; 3],
            })
            .collect();
        // first slot defines a1/b1, so the quadruple is relabelled from (a2,b2)
        let r = bell_from_slots(&slots).unwrap();
        assert!(same_angle(r.settings[0].malta_angle, angles[3].0));
        assert!(same_angle(r.settings[0].sicily_angle, angles[3].1));
        assert_eq!(r.block_s.len(), 3);
        assert!(r.chsh.warnings.is_empty());
    }
}
