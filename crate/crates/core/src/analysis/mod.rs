//! Coincidence statistics: correlations, CHSH, QBER, key rate, visibility
//! fits and block-wise uncertainty estimates.

mod fit;
mod report;

pub use fit::{fit_visibility, s_curve, s_curve_extremum, s_curve_extremum_err, VisibilityFit};
pub use report::{
    fig2_table, fig3_table, fig4_table, AnalysisReport, BasisVisibility, CorrelationValue, QberValue, ValueWithError, KEY_RATE_FORMULA,
};

use serde::Serialize;
use thiserror::Error;

use crate::correlation::Coincidences;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AnalysisError {
    #[error("no coincidences in setting ({malta_deg:.1} deg, {sicily_deg:.1} deg)")]
    ZeroCounts { malta_deg: f64, sicily_deg: f64 },
    #[error("duration must be positive, got {0}")]
    BadDuration(f64),
    #[error("visibility fit needs at least 6 points, got {0}")]
    TooFewPoints(usize),
    #[error("visibility fit needs angles spanning at least pi, got {0:.3} rad")]
    NarrowSpan(f64),
    #[error("negative or non-finite count {0}")]
    BadCount(f64),
    #[error("visibility fit did not converge after {iterations} iterations (last V = {:.6})", last.visibility)]
    NoConvergence { iterations: usize, last: Box<VisibilityFit> },
    #[error("QBER {0} outside [0, 0.5]")]
    QberOutOfRange(f64),
    #[error("error-correction inefficiency must be finite and >= 0, got {0}")]
    BadInefficiency(f64),
    #[error("coincidence rate must be finite and >= 0, got {0}")]
    BadRate(f64),
    #[error("block statistics need at least one value")]
    NoBlocks,
}

/// Coincidences for one analyzer setting, `counts[malta port][sicily port]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SettingCounts {
    pub malta_angle: f64,
    pub sicily_angle: f64,
    pub counts: [[u64; 2]; 2],
    pub duration_s: f64,
}

impl SettingCounts {
    pub fn new(malta_angle: f64, sicily_angle: f64, counts: [[u64; 2]; 2], duration_s: f64) -> Result<Self, AnalysisError> {
        if !(duration_s > 0.0 && duration_s.is_finite()) {
            return Err(AnalysisError::BadDuration(duration_s));
        }
        Ok(Self { malta_angle, sicily_angle, counts, duration_s })
    }

    pub fn from_coincidences(malta_angle: f64, sicily_angle: f64, c: &Coincidences, duration_s: f64) -> Result<Self, AnalysisError> {
        Self::new(malta_angle, sicily_angle, c.matrix2(), duration_s)
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn rate(&self) -> f64 {
        self.total() as f64 / self.duration_s
    }

    /// Same-port (`tt + rr`) and opposite-port (`tr + rt`) totals.
    pub fn same_opposite(&self) -> (u64, u64) {
        let c = &self.counts;
        (c[0][0] + c[1][1], c[0][1] + c[1][0])
    }

    /// Sum of two countings of the same setting.
    pub fn merged(&self, other: &SettingCounts) -> SettingCounts {
        let mut counts = self.counts;
        for i in 0..2 {
            for j in 0..2 {
                counts[i][j] += other.counts[i][j];
            }
        }
        SettingCounts { counts, duration_s: self.duration_s + other.duration_s, ..*self }
    }

    fn zero_error(&self) -> AnalysisError {
        AnalysisError::ZeroCounts { malta_deg: self.malta_angle.to_degrees(), sicily_deg: self.sicily_angle.to_degrees() }
    }
}

/// `E = (C_tt + C_rr - C_tr - C_rt) / total` with Poisson uncertainty
/// `sqrt((1 - E^2) / total)`.
pub fn e_from_counts(sc: &SettingCounts) -> Result<(f64, f64), AnalysisError> {
    let n = sc.total();
    if n == 0 {
        return Err(sc.zero_error());
    }
    let (same, opp) = sc.same_opposite();
    let e = (same as f64 - opp as f64) / n as f64;
    Ok((e, ((1.0 - e * e).max(0.0) / n as f64).sqrt()))
}

/// CHSH value from the four settings.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChshResult {
    pub s: f64,
    pub sigma: f64,
    /// `(E, sigma_E)` for `(a1,b1), (a1,b2), (a2,b1), (a2,b2)`.
    pub e: [(f64, f64); 4],
    /// Empty when the settings satisfy `a1 - a2 = ±45°`, `b1 - b2 = ±45°`.
    pub warnings: Vec<String>,
}

/// `S = E11 + E12 + E21 - E22` for settings ordered
/// `(a1,b1), (a1,b2), (a2,b1), (a2,b2)`.
pub fn s_from_counts(settings: &[SettingCounts; 4]) -> Result<ChshResult, AnalysisError> {
    let mut e = [(0.0, 0.0); 4];
    for (slot, sc) in e.iter_mut().zip(settings) {
        *slot = e_from_counts(sc)?;
    }
    let s = e[0].0 + e[1].0 + e[2].0 - e[3].0;
    let sigma = e.iter().map(|(_, s)| s * s).sum::<f64>().sqrt();
    Ok(ChshResult { s, sigma, e, warnings: chsh_angle_warnings(settings) })
}

fn chsh_angle_warnings(s: &[SettingCounts; 4]) -> Vec<String> {
    let mut w = Vec::new();
    let same = |x: f64, y: f64| angle_diff(x, y).abs() < 1e-6;
    if !same(s[0].malta_angle, s[1].malta_angle) || !same(s[2].malta_angle, s[3].malta_angle) {
        w.push("Malta angle differs between settings that should share a1 or a2".to_string());
    }
    if !same(s[0].sicily_angle, s[2].sicily_angle) || !same(s[1].sicily_angle, s[3].sicily_angle) {
        w.push("Sicily angle differs between settings that should share b1 or b2".to_string());
    }
    let quarter = |x: f64, y: f64| (angle_diff(x, y).abs() - std::f64::consts::FRAC_PI_4).abs() < 1e-6;
    if !quarter(s[0].malta_angle, s[2].malta_angle) {
        w.push(format!(
            "a1 - a2 = {:.3} deg, expected ±45 deg",
            angle_diff(s[0].malta_angle, s[2].malta_angle).to_degrees()
        ));
    }
    if !quarter(s[0].sicily_angle, s[1].sicily_angle) {
        w.push(format!(
            "b1 - b2 = {:.3} deg, expected ±45 deg",
            angle_diff(s[0].sicily_angle, s[1].sicily_angle).to_degrees()
        ));
    }
    w
}

/// `x - y` folded into `(-pi/2, pi/2]`; polariser angles repeat every pi.
fn angle_diff(x: f64, y: f64) -> f64 {
    use std::f64::consts::{FRAC_PI_2, PI};
    let d = (x - y).rem_euclid(PI);
    if d > FRAC_PI_2 {
        d - PI
    } else {
        d
    }
}

/// Which detector combinations count as agreeing bits in a key basis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum KeyConvention {
    /// Same ports agree: errors are `tr + rt`.
    Correlated,
    /// Opposite ports agree: errors are `tt + rr`.
    Anticorrelated,
}

impl KeyConvention {
    /// Convention for the source state `(|VV> - |HH>)/sqrt 2`, whose
    /// correlation is `cos 2(a + b)`.
    pub fn for_source(malta_angle: f64, sicily_angle: f64) -> Self {
        if (2.0 * (malta_angle + sicily_angle)).cos() >= 0.0 {
            KeyConvention::Correlated
        } else {
            KeyConvention::Anticorrelated
        }
    }
}

/// Fraction of error coincidences, with binomial uncertainty.
pub fn qber_from_counts(sc: &SettingCounts, convention: KeyConvention) -> Result<(f64, f64), AnalysisError> {
    let n = sc.total();
    if n == 0 {
        return Err(sc.zero_error());
    }
    let (same, opp) = sc.same_opposite();
    let errors = match convention {
        KeyConvention::Correlated => opp,
        KeyConvention::Anticorrelated => same,
    };
    let q = errors as f64 / n as f64;
    Ok((q, (q * (1.0 - q) / n as f64).sqrt()))
}

/// QBER over several key-basis settings, pooled by counts.
pub fn pooled_qber(settings: &[(SettingCounts, KeyConvention)]) -> Result<(f64, f64), AnalysisError> {
    let mut errors = 0u64;
    let mut total = 0u64;
    for (sc, conv) in settings {
        let (same, opp) = sc.same_opposite();
        errors += match conv {
            KeyConvention::Correlated => opp,
            KeyConvention::Anticorrelated => same,
        };
        total += sc.total();
    }
    if total == 0 {
        return Err(AnalysisError::ZeroCounts { malta_deg: f64::NAN, sicily_deg: f64::NAN });
    }
    let q = errors as f64 / total as f64;
    Ok((q, (q * (1.0 - q) / total as f64).sqrt()))
}

/// `H2(q) = -q log2 q - (1 - q) log2 (1 - q)`.
pub fn binary_entropy(q: f64) -> f64 {
    let h = |x: f64| if x <= 0.0 { 0.0 } else { -x * x.log2() };
    h(q) + h(1.0 - q)
}

/// Default error-correction inefficiency.
pub const DEFAULT_EC_INEFFICIENCY: f64 = 1.1;

/// Asymptotic key rate `R/2 * max(0, 1 - (1 + f) H2(Q))` in bits per second.
pub fn secure_key_rate(coincidence_rate_cps: f64, qber: f64, ec_inefficiency: f64) -> Result<f64, AnalysisError> {
    if !(0.0..=0.5).contains(&qber) {
        return Err(AnalysisError::QberOutOfRange(qber));
    }
    if !(ec_inefficiency >= 0.0 && ec_inefficiency.is_finite()) {
        return Err(AnalysisError::BadInefficiency(ec_inefficiency));
    }
    if !(coincidence_rate_cps >= 0.0 && coincidence_rate_cps.is_finite()) {
        return Err(AnalysisError::BadRate(coincidence_rate_cps));
    }
    Ok(coincidence_rate_cps * 0.5 * (1.0 - (1.0 + ec_inefficiency) * binary_entropy(qber)).max(0.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BlockStats {
    pub n_blocks: usize,
    pub mean: f64,
    /// Sample standard deviation over `sqrt(n)`; infinite for a single block.
    pub std_of_mean: f64,
}

pub fn block_stats(values: &[f64]) -> Result<BlockStats, AnalysisError> {
    let n = values.len();
    if n == 0 {
        return Err(AnalysisError::NoBlocks);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let std_of_mean = if n < 2 {
        f64::INFINITY
    } else {
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        (var / n as f64).sqrt()
    };
    Ok(BlockStats { n_blocks: n, mean, std_of_mean })
}

/// Splits coincidences into `n` equal stream-A time blocks over
/// `[start_ps, end_ps)`, returning the 2x2 counts of each block.
pub fn block_counts(c: &Coincidences, start_ps: u64, end_ps: u64, n: usize) -> Vec<[[u64; 2]; 2]> {
    let mut out = vec![[[0u64; 2]; 2]; n];
    if n == 0 || end_ps <= start_ps {
        return out;
    }
    let span = (end_ps - start_ps) as u128;
    for r in &c.records {
        if r.t_a < start_ps || r.t_a >= end_ps || r.channel_a > 1 || r.channel_b > 1 {
            continue;
        }
        let k = ((r.t_a - start_ps) as u128 * n as u128 / span) as usize;
        out[k][r.channel_a as usize][r.channel_b as usize] += 1;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_PI_8;

    fn sc(c: [[u64; 2]; 2]) -> SettingCounts {
        SettingCounts::new(0.0, 0.0, c, 1.0).unwrap()
    }

    #[test]
    fn e_examples() {
        assert_eq!(e_from_counts(&sc([[50, 0], [0, 50]])).unwrap(), (1.0, 0.0));
        assert_eq!(e_from_counts(&sc([[25, 25], [25, 25]])).unwrap().0, 0.0);
        let (e, _) = e_from_counts(&sc([[483, 17], [17, 483]])).unwrap();
        assert!((e - 0.932).abs() < 1e-12);
        assert!(matches!(e_from_counts(&sc([[0, 0], [0, 0]])), Err(AnalysisError::ZeroCounts { .. })));
        assert!(SettingCounts::new(0.0, 0.0, [[1, 1], [1, 1]], 0.0).is_err());
    }

    #[test]
    fn s_of_uniform_counts_is_zero() {
        let (a1, a2, b1, b2) = (0.0, std::f64::consts::FRAC_PI_4, -FRAC_PI_8, FRAC_PI_8);
        let mk = |a, b| SettingCounts::new(a, b, [[10, 10], [10, 10]], 1.0).unwrap();
        let r = s_from_counts(&[mk(a1, b1), mk(a1, b2), mk(a2, b1), mk(a2, b2)]).unwrap();
        assert_eq!(r.s, 0.0);
        assert!(r.warnings.is_empty(), "{:?}", r.warnings);
        let r = s_from_counts(&[mk(0.0, 0.0), mk(0.0, 0.3), mk(0.2, 0.0), mk(0.2, 0.3)]).unwrap();
        assert_eq!(r.warnings.len(), 2);
    }

    #[test]
    fn operating_angles_pass_the_check() {
        let (a1, a2, b1, b2) = (22.5f64.to_radians(), 157.5f64.to_radians(), 0.0, -45f64.to_radians());
        let mk = |a, b| SettingCounts::new(a, b, [[1, 0], [0, 1]], 1.0).unwrap();
        assert!(s_from_counts(&[mk(a1, b1), mk(a1, b2), mk(a2, b1), mk(a2, b2)]).unwrap().warnings.is_empty());
    }

    #[test]
    fn qber_examples() {
        let (q, _) = qber_from_counts(&sc([[95, 5], [5, 95]]), KeyConvention::Correlated).unwrap();
        assert!((q - 0.05).abs() < 1e-15);
        assert_eq!(qber_from_counts(&sc([[9, 0], [0, 9]]), KeyConvention::Correlated).unwrap().0, 0.0);
        assert_eq!(qber_from_counts(&sc([[9, 0], [0, 9]]), KeyConvention::Anticorrelated).unwrap().0, 1.0);
        assert_eq!(KeyConvention::for_source(0.0, 0.0), KeyConvention::Correlated);
        assert_eq!(KeyConvention::for_source(std::f64::consts::FRAC_PI_4, std::f64::consts::FRAC_PI_4), KeyConvention::Anticorrelated);
    }

    #[test]
    fn key_rate_examples() {
        assert!((binary_entropy(0.05) - 0.2864).abs() < 1e-4);
        let r = secure_key_rate(257.0, 0.05, 1.1).unwrap();
        assert!((r - 51.2).abs() < 0.1, "{r}");
        assert_eq!(secure_key_rate(300.0, 0.0, 1.0).unwrap(), 150.0);
        assert!(secure_key_rate(257.0, 0.11, 1.0).unwrap() > 0.0);
        assert_eq!(secure_key_rate(257.0, 0.12, 1.1).unwrap(), 0.0);
        assert!(matches!(secure_key_rate(257.0, 0.6, 1.1), Err(AnalysisError::QberOutOfRange(_))));
        assert!(secure_key_rate(257.0, -0.01, 1.1).is_err());
    }

    #[test]
    fn identical_blocks_have_zero_error() {
        let b = block_stats(&[2.5; 39]).unwrap();
        assert_eq!((b.n_blocks, b.mean, b.std_of_mean), (39, 2.5, 0.0));
        assert!(block_stats(&[]).is_err());
        assert!(block_stats(&[1.0]).unwrap().std_of_mean.is_infinite());
    }
}
