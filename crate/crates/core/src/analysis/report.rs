//! Report structure and CSV tables for plotting.

use serde::Serialize;

use super::{BlockStats, KeyConvention, VisibilityFit};
use crate::correlation::Correlogram;

pub const KEY_RATE_FORMULA: &str = "R/2 * max(0, 1 - (1 + f) * H2(Q))";

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ValueWithError {
    pub value: f64,
    pub error: f64,
}

impl ValueWithError {
    pub fn new(value: f64, error: f64) -> Self {
        Self { value, error }
    }
}

impl From<(f64, f64)> for ValueWithError {
    fn from((value, error): (f64, f64)) -> Self {
        Self { value, error }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BasisVisibility {
    /// "hv" or "da".
    pub basis: String,
    pub sicily_deg: f64,
    pub visibility: ValueWithError,
    pub phase_deg: ValueWithError,
    pub amplitude: ValueWithError,
    pub residual_rms: f64,
    pub degenerate: bool,
}

impl BasisVisibility {
    pub fn from_fit(basis: &str, sicily_deg: f64, fit: &VisibilityFit) -> Self {
        Self {
            basis: basis.to_string(),
            sicily_deg,
            visibility: ValueWithError::new(fit.visibility, fit.visibility_err),
            phase_deg: ValueWithError::new(fit.phase_rad.to_degrees(), fit.phase_err.to_degrees()),
            amplitude: ValueWithError::new(fit.amplitude, fit.amplitude_err),
            residual_rms: fit.residual_rms,
            degenerate: fit.degenerate,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CorrelationValue {
    pub malta_deg: f64,
    pub sicily_deg: f64,
    pub counts: [[u64; 2]; 2],
    pub e: ValueWithError,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QberValue {
    pub malta_deg: f64,
    pub sicily_deg: f64,
    pub convention: KeyConvention,
    pub qber: ValueWithError,
}

/// Everything the analysis stage reports. Sections not produced by a
/// given run are omitted.
#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct AnalysisReport {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub window_ps: Option<u64>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub visibilities: Vec<BasisVisibility>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub correlations: Vec<CorrelationValue>,
    /// Peak `|S|` of the curve built from the two visibility fits.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub s_fit: Option<ValueWithError>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub s_fit_phi_deg: Option<f64>,
    /// From the four measured settings with Poisson errors.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub s_direct: Option<ValueWithError>,
    /// S computed per time block.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub s_blocks: Option<BlockStats>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub qber: Option<ValueWithError>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub qber_by_setting: Vec<QberValue>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub coincidence_rate_cps: Option<ValueWithError>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub secure_key_rate_bps: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub key_rate_formula: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ec_inefficiency: Option<f64>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

fn finish(w: csv::Writer<Vec<u8>>) -> String {
    String::from_utf8(w.into_inner().expect("in-memory writer")).expect("csv output is UTF-8")
}

/// `offset_ps,counts` per bin centre.
pub fn fig2_table(hist: &Correlogram) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["offset_ps", "counts"]).expect("in-memory writer");
    for (k, c) in hist.counts.iter().enumerate() {
        w.write_record([format!("{}", hist.bin_center_ps(k)), c.to_string()]).expect("in-memory writer");
    }
    finish(w)
}

/// One row per scan point: measured counts next to the fitted curve.
pub fn fig3_table(scans: &[(&str, &[(f64, f64)], &VisibilityFit)]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["basis", "malta_deg", "counts", "fit"]).expect("in-memory writer");
    for (basis, points, fit) in scans {
        for &(phi, c) in points.iter() {
            w.write_record([basis.to_string(), format!("{}", phi.to_degrees()), format!("{c}"), format!("{}", fit.eval(phi))])
                .expect("in-memory writer");
        }
    }
    finish(w)
}

/// `malta_deg,s` along the fitted curve.
pub fn fig4_table(curve: &[(f64, f64)]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["malta_deg", "s"]).expect("in-memory writer");
    for &(phi, s) in curve {
        w.write_record([format!("{}", phi.to_degrees()), format!("{s}")]).expect("in-memory writer");
    }
    finish(w)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tables_have_headers_and_rows() {
        let h = Correlogram { bin_width_ps: 10, start_offset_ps: -20, counts: vec![1, 5, 2, 0] };
        let t = fig2_table(&h);
        assert_eq!(t.lines().count(), 5);
        assert!(t.starts_with("offset_ps,counts\n-15,1\n"));
        let t = fig4_table(&[(0.0, 1.5), (std::f64::consts::FRAC_PI_2, -2.0)]);
        assert_eq!(t, "malta_deg,s\n0,1.5\n90,-2\n");
    }
}
