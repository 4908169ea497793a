//! Analytic link budget: detection probabilities per pair and the expected
//! singles, coincidence and accidental rates they imply.

use statrs::function::erf::erf;

use super::config::LinkConfig;
use super::sim::{ArmSurvival, FWHM_PER_SIGMA};
use crate::state::{joint_outcome_probs, TwoQubitState};

/// Per-pair probabilities of each click pattern for one analyzer setting.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectionProbabilities {
    /// Both stations click: `[malta port][sicily port]`.
    pub coincidence: [[f64; 2]; 2],
    pub malta_only: [f64; 2],
    pub sicily_only: [f64; 2],
}

impl DetectionProbabilities {
    /// Flattened in sampling order: 4 coincidence outcomes, 2 Malta-only, 2 Sicily-only.
    pub fn outcome_table(&self) -> [f64; 8] {
        let c = &self.coincidence;
        [c[0][0], c[0][1], c[1][0], c[1][1], self.malta_only[0], self.malta_only[1], self.sicily_only[0], self.sicily_only[1]]
    }

    pub fn any(&self) -> f64 {
        self.outcome_table().iter().sum()
    }

    pub fn coincidence_total(&self) -> f64 {
        self.coincidence.iter().flatten().sum()
    }

    /// Probability that Malta port `i` receives a detectable photon.
    pub fn malta_photon(&self, i: usize) -> f64 {
        self.coincidence[i][0] + self.coincidence[i][1] + self.malta_only[i]
    }

    pub fn sicily_photon(&self, j: usize) -> f64 {
        self.coincidence[0][j] + self.coincidence[1][j] + self.sicily_only[j]
    }
}

/// Born probabilities combined with independent arm survival.
pub fn setting_probabilities(state: &TwoQubitState, malta_angle: f64, sicily_angle: f64, survival: &ArmSurvival) -> DetectionProbabilities {
    let p = joint_outcome_probs(state, malta_angle, sicily_angle);
    let mut out = DetectionProbabilities { coincidence: [[0.0; 2]; 2], malta_only: [0.0; 2], sicily_only: [0.0; 2] };
    for i in 0..2 {
        for j in 0..2 {
            let pij = p[2 * i + j];
            let (sm, ss) = (survival.malta[i], survival.sicily[j]);
            out.coincidence[i][j] = pij * sm * ss;
            out.malta_only[i] += pij * sm * (1.0 - ss);
            out.sicily_only[j] += pij * (1.0 - sm) * ss;
        }
    }
    out
}

/// Expected count rates (per second) for one analyzer setting.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpectedRates {
    /// Registered singles after dead time.
    pub malta_singles: [f64; 2],
    pub sicily_singles: [f64; 2],
    /// Fraction of time each detector is live.
    pub malta_live: [f64; 2],
    pub sicily_live: [f64; 2],
    /// Genuine pairs landing inside the coincidence window, `[malta][sicily]`.
    pub true_coincidences: [[f64; 2]; 2],
    /// Uncorrelated clicks landing inside the window.
    pub accidentals: [[f64; 2]; 2],
    /// Fraction of the Gaussian timing peak inside the window.
    pub window_capture: [[f64; 2]; 2],
}

impl ExpectedRates {
    pub fn coincidences(&self, i: usize, j: usize) -> f64 {
        self.true_coincidences[i][j] + self.accidentals[i][j]
    }

    pub fn total_coincidences(&self) -> f64 {
        (0..2).flat_map(|i| (0..2).map(move |j| (i, j))).map(|(i, j)| self.coincidences(i, j)).sum()
    }

    pub fn total_true(&self) -> f64 {
        self.true_coincidences.iter().flatten().sum()
    }

    pub fn total_accidental(&self) -> f64 {
        self.accidentals.iter().flatten().sum()
    }
}

/// `pair_rate * eta_malta * 10^(-loss/10) * eta_sicily * p_outcome`, summed
/// over outcomes: coincidences per second before dead time and windowing.
pub fn raw_coincidence_rate(cfg: &LinkConfig, malta_angle: f64, sicily_angle: f64) -> f64 {
    let state = cfg.delivered_state().expect("validated config");
    let probs = setting_probabilities(&state, malta_angle, sicily_angle, &ArmSurvival::from_config(cfg));
    cfg.pair_rate * probs.coincidence_total()
}

/// Rates expected from the configured link at one analyzer setting, for a
/// coincidence window of `window_ps` centred on the true delay.
pub fn expected_rates(cfg: &LinkConfig, malta_angle: f64, sicily_angle: f64, window_ps: f64) -> ExpectedRates {
    let state = cfg.delivered_state().expect("validated config");
    let probs = setting_probabilities(&state, malta_angle, sicily_angle, &ArmSurvival::from_config(cfg));
    let r = cfg.pair_rate;
    let mut malta_in = [0.0; 2];
    let mut sicily_in = [0.0; 2];
    for k in 0..2 {
        malta_in[k] = r * probs.malta_photon(k) + cfg.malta.detectors[k].dark_rate;
        sicily_in[k] = r * probs.sicily_photon(k) + cfg.sicily.detectors[k].dark_rate;
    }
    let live = |rate: f64, dead_ps: u64| 1.0 / (1.0 + rate * dead_ps as f64 * 1e-12);
    let malta_live = [live(malta_in[0], cfg.malta.detectors[0].dead_time_ps), live(malta_in[1], cfg.malta.detectors[1].dead_time_ps)];
    let sicily_live = [live(sicily_in[0], cfg.sicily.detectors[0].dead_time_ps), live(sicily_in[1], cfg.sicily.detectors[1].dead_time_ps)];
    let malta_singles = [malta_in[0] * malta_live[0], malta_in[1] * malta_live[1]];
    let sicily_singles = [sicily_in[0] * sicily_live[0], sicily_in[1] * sicily_live[1]];
    let sigma = |fwhm: f64| fwhm / FWHM_PER_SIGMA;
    let mut true_coincidences = [[0.0; 2]; 2];
    let mut accidentals = [[0.0; 2]; 2];
    let mut window_capture = [[0.0; 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            let s = (sigma(cfg.malta.detectors[i].jitter_fwhm_ps).powi(2)
                + sigma(cfg.sicily.detectors[j].jitter_fwhm_ps).powi(2)
                + sigma(cfg.dispersion_fwhm_ps).powi(2))
            .sqrt();
            let capture = if s == 0.0 { 1.0 } else { erf(window_ps / 2.0 / (s * std::f64::consts::SQRT_2)) };
            window_capture[i][j] = capture;
            true_coincidences[i][j] = r * probs.coincidence[i][j] * malta_live[i] * sicily_live[j] * capture;
            accidentals[i][j] = malta_singles[i] * sicily_singles[j] * window_ps * 1e-12;
        }
    }
    ExpectedRates { malta_singles, sicily_singles, malta_live, sicily_live, true_coincidences, accidentals, window_capture }
}

/// Timing FWHM of the coincidence peak for a detector pair: quadrature sum
/// of both detectors' jitter and the fibre dispersion.
pub fn peak_fwhm_ps(cfg: &LinkConfig, malta_ch: usize, sicily_ch: usize) -> f64 {
    (cfg.malta.detectors[malta_ch].jitter_fwhm_ps.powi(2)
        + cfg.sicily.detectors[sicily_ch].jitter_fwhm_ps.powi(2)
        + cfg.dispersion_fwhm_ps.powi(2))
    .sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn probabilities_sum_to_one_with_misses() {
        let cfg = LinkConfig::preset("malta-sicily").unwrap();
        let state = cfg.delivered_state().unwrap();
        let sv = ArmSurvival::from_config(&cfg);
        let p = setting_probabilities(&state, 0.3, 1.2, &sv);
        let p_none: f64 = {
            let jp = joint_outcome_probs(&state, 0.3, 1.2);
            (0..4).map(|k| jp[k] * (1.0 - sv.malta[k / 2]) * (1.0 - sv.sicily[k % 2])).sum()
        };
        assert!((p.any() + p_none - 1.0).abs() < 1e-12);
    }

    #[test]
    fn preset_raw_rate_is_257() {
        let cfg = LinkConfig::preset("malta-sicily").unwrap();
        let raw = raw_coincidence_rate(&cfg, 0.0, 0.0);
        assert!((raw - 257.0).abs() < 0.1, "{raw}");
        assert!((peak_fwhm_ps(&cfg, 0, 0) - 707.1).abs() < 0.1);
        let r = expected_rates(&cfg, 0.0, 0.0, 1000.0);
        // ~90% of a 0.7 ns peak fits a 1 ns window
        assert!((r.window_capture[0][0] - 0.9).abs() < 0.01, "{:?}", r.window_capture);
    }
}
