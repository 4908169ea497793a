//! Source, fibre, detector and clock models producing two tag streams.

pub mod budget;
pub mod config;
pub mod sim;

pub use budget::{expected_rates, peak_fwhm_ps, raw_coincidence_rate, setting_probabilities, DetectionProbabilities, ExpectedRates};
pub use config::{
    ChannelConfig, ClockConfig, Compensation, ConfigError, DetectorConfig, LinkConfig, Schedule, ScheduledSetting,
    StationConfig, PS_PER_S,
};
pub use sim::{
    add_jitter, apply_clock, apply_detector, detect_pair, emit_pairs, merge_sorted, simulate_run, simulate_run_per_pair,
    stage_rng, ArmSurvival, PairOutcome, PoissonArrivals, SimError, Stage, FWHM_PER_SIGMA,
};
