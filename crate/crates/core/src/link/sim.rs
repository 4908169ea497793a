//! Monte-Carlo generation of the two stations' tag streams.
//!
//! # Random streams
//!
//! Every stage draws from its own ChaCha8 generator, seeded with the run seed
//! and selected by a 64-bit stream id `(stage << 32) | index` (see
//! [`stage_rng`]). Stages never share a generator, so the output is the same
//! whether settings are generated serially or in parallel.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal};
use rayon::prelude::*;
use thiserror::Error;

use super::budget::{setting_probabilities, DetectionProbabilities};
use super::config::{ClockConfig, ConfigError, DetectorConfig, LinkConfig, StationConfig, PS_PER_S};
use crate::state::Port;
use crate::tags::{TagStream, TimeTag};

/// Gaussian FWHM / sigma.
pub const FWHM_PER_SIGMA: f64 = 2.354_820_045_030_949_3;

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("clock transform of tag {index} (t = {t_ps} ps) leaves the 64-bit range")]
    ClockOverflow { index: usize, t_ps: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stage {
    Emission = 1,
    MaltaDetector = 2,
    SicilyDetector = 3,
    Dispersion = 4,
}

/// Independent generator for one stage of a run.
pub fn stage_rng(seed: u64, stage: Stage, index: u32) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((stage as u64) << 32) | index as u64);
    rng
}

/// Homogeneous Poisson arrivals in picoseconds on `[0, duration)`.
pub struct PoissonArrivals<R: Rng> {
    rng: R,
    gap: Option<Exp<f64>>,
    t: f64,
    end: f64,
}

impl<R: Rng> PoissonArrivals<R> {
    pub fn new(rate_per_s: f64, duration_ps: u64, rng: R) -> Self {
        let gap = (rate_per_s > 0.0).then(|| Exp::new(rate_per_s / PS_PER_S).expect("positive rate"));
        Self { rng, gap, t: 0.0, end: duration_ps as f64 }
    }

    pub fn rng_mut(&mut self) -> &mut R {
        &mut self.rng
    }
}

impl<R: Rng> Iterator for PoissonArrivals<R> {
    type Item = u64;

    fn next(&mut self) -> Option<u64> {
        let gap = self.gap.as_ref()?;
        self.t += gap.sample(&mut self.rng);
        (self.t < self.end).then(|| self.t as u64)
    }
}

/// Pair emission times (ps) of a continuously pumped source.
pub fn emit_pairs(rate: f64, duration_s: f64, seed: u64) -> Vec<u64> {
    let duration_ps = (duration_s * PS_PER_S).round() as u64;
    PoissonArrivals::new(rate, duration_ps, stage_rng(seed, Stage::Emission, 0)).collect()
}

/// Probability that a photon reaching each analyzer port is registered,
/// before dead time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ArmSurvival {
    pub malta: [f64; 2],
    pub sicily: [f64; 2],
}

impl ArmSurvival {
    pub fn from_config(cfg: &LinkConfig) -> Self {
        let m = cfg.malta_arm_efficiency;
        let s = cfg.sicily_arm_efficiency * cfg.fibre_transmission();
        Self {
            malta: [m * cfg.malta.detectors[0].efficiency, m * cfg.malta.detectors[1].efficiency],
            sicily: [s * cfg.sicily.detectors[0].efficiency, s * cfg.sicily.detectors[1].efficiency],
        }
    }

    pub fn uniform(malta: f64, sicily: f64) -> Self {
        Self { malta: [malta; 2], sicily: [sicily; 2] }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PairOutcome {
    pub malta: Option<Port>,
    pub sicily: Option<Port>,
}

/// Samples the joint analyzer outcome of one pair, then thins each arm.
///
/// `probs` is `[p_tt, p_tr, p_rt, p_rr]` from
/// [`joint_outcome_probs`](crate::state::joint_outcome_probs).
pub fn detect_pair<R: Rng + ?Sized>(probs: &[f64; 4], survival: &ArmSurvival, rng: &mut R) -> PairOutcome {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut k = 3;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            k = i;
            break;
        }
    }
    let (mi, si) = (k / 2, k % 2);
    let malta = (rng.random::<f64>() < survival.malta[mi]).then(|| Port::from_index(mi).unwrap());
    let sicily = (rng.random::<f64>() < survival.sicily[si]).then(|| Port::from_index(si).unwrap());
    PairOutcome { malta, sicily }
}

/// Detector model for one channel: Gaussian jitter, Poissonian dark counts
/// uniform over `[0, duration)`, then non-paralyzable dead time.
pub fn apply_detector<R: Rng>(
    mut arrivals: Vec<u64>,
    channel: u8,
    cfg: &DetectorConfig,
    duration_ps: u64,
    rng: &mut R,
) -> Vec<TimeTag> {
    add_jitter(&mut arrivals, cfg.jitter_fwhm_ps, rng);
    let n_dark = poisson_count(cfg.dark_rate * duration_ps as f64 / PS_PER_S, rng);
    arrivals.reserve(n_dark as usize);
    for _ in 0..n_dark {
        arrivals.push(rng.random_range(0..duration_ps.max(1)));
    }
    arrivals.sort();
    let mut out = Vec::with_capacity(arrivals.len());
    let mut last: Option<u64> = None;
    for t in arrivals {
        if let Some(l) = last {
            if t - l < cfg.dead_time_ps {
                continue;
            }
        }
        last = Some(t);
        out.push(TimeTag { t_ps: t, channel });
    }
    out
}

/// Gaussian timing spread with the given FWHM; times saturate at zero.
pub fn add_jitter<R: Rng>(times: &mut [u64], fwhm_ps: f64, rng: &mut R) {
    if fwhm_ps <= 0.0 {
        return;
    }
    let normal = Normal::new(0.0, fwhm_ps / FWHM_PER_SIGMA).expect("finite sigma");
    for t in times.iter_mut() {
        let dt = normal.sample(rng).round() as i64;
        *t = t.saturating_add_signed(dt);
    }
}

fn poisson_count<R: Rng>(mean: f64, rng: &mut R) -> u64 {
    if mean <= 0.0 {
        return 0;
    }
    rand_distr::Poisson::new(mean).expect("positive mean").sample(rng) as u64
}

/// Local clock: `t -> round((t (1 + drift) + offset) / res) * res`.
pub fn apply_clock(mut tags: Vec<TimeTag>, cfg: &ClockConfig) -> Result<Vec<TimeTag>, SimError> {
    cfg.validate()?;
    let scale = 1.0 + cfg.drift_ppm * 1e-6;
    let res = cfg.resolution_ps as f64;
    let identity = cfg.drift_ppm == 0.0;
    for (index, tag) in tags.iter_mut().enumerate() {
        let t = tag.t_ps;
        let mapped = if identity && cfg.resolution_ps == 1 {
            (t as i128) + cfg.offset_ps as i128
        } else {
            let v = if identity { t as f64 } else { t as f64 * scale };
            let shifted = v + cfg.offset_ps as f64;
            ((shifted / res).round() * res) as i128
        };
        if mapped < 0 || mapped > u64::MAX as i128 {
            return Err(SimError::ClockOverflow { index, t_ps: t });
        }
        tag.t_ps = mapped as u64;
    }
    Ok(tags)
}

/// Photon arrival times at each detector before the detector model.
#[derive(Debug, Default)]
struct Arrivals {
    malta: [Vec<u64>; 2],
    sicily: [Vec<u64>; 2],
}

impl Arrivals {
    fn extend(&mut self, other: Arrivals) {
        for ch in 0..2 {
            self.malta[ch].extend(other.malta[ch].iter());
            self.sicily[ch].extend(other.sicily[ch].iter());
        }
    }
}

/// Runs the full source -> fibre -> detector -> clock chain.
///
/// Internally the pair process is thinned analytically: pairs that produce no
/// click anywhere are never generated. This has the same distribution as
/// emitting every pair and calling [`detect_pair`] on it (see
/// [`simulate_run_per_pair`]), at a fraction of the cost.
pub fn simulate_run(cfg: &LinkConfig, seed: u64) -> Result<(TagStream, TagStream), SimError> {
    cfg.validate()?;
    let state = cfg.delivered_state()?;
    let survival = ArmSurvival::from_config(cfg);
    let schedule = cfg.effective_schedule();
    let delay = cfg.fibre_delay_ps;
    let parts: Vec<Arrivals> = schedule
        .settings()
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let probs = setting_probabilities(&state, s.malta_angle, s.sicily_angle, &survival);
            thinned_setting(&probs, cfg.pair_rate, s.start_ps, s.duration_ps, delay, stage_rng(seed, Stage::Emission, i as u32))
        })
        .collect();
    finish(cfg, seed, parts)
}

/// Literal per-pair simulation: every emitted pair is sampled with
/// [`detect_pair`]. Slow at realistic rates; kept as the reference path.
pub fn simulate_run_per_pair(cfg: &LinkConfig, seed: u64) -> Result<(TagStream, TagStream), SimError> {
    cfg.validate()?;
    let state = cfg.delivered_state()?;
    let survival = ArmSurvival::from_config(cfg);
    let schedule = cfg.effective_schedule();
    let mut parts = Vec::new();
    for (i, s) in schedule.settings().iter().enumerate() {
        let probs = crate::state::joint_outcome_probs(&state, s.malta_angle, s.sicily_angle);
        let mut arrivals = Arrivals::default();
        let mut it = PoissonArrivals::new(cfg.pair_rate, s.duration_ps, stage_rng(seed, Stage::Emission, i as u32));
        while let Some(t) = it.next() {
            let t = t + s.start_ps;
            let out = detect_pair(&probs, &survival, it.rng_mut());
            if let Some(p) = out.malta {
                arrivals.malta[p.index()].push(t);
            }
            if let Some(p) = out.sicily {
                arrivals.sicily[p.index()].push(t + cfg.fibre_delay_ps);
            }
        }
        parts.push(arrivals);
    }
    finish(cfg, seed, parts)
}

fn thinned_setting(
    probs: &DetectionProbabilities,
    pair_rate: f64,
    start_ps: u64,
    duration_ps: u64,
    delay_ps: u64,
    rng: ChaCha8Rng,
) -> Arrivals {
    let table = probs.outcome_table();
    let total: f64 = table.iter().sum();
    let mut out = Arrivals::default();
    if total <= 0.0 {
        return out;
    }
    let mut cumulative = [0.0; 8];
    let mut acc = 0.0;
    for (c, p) in cumulative.iter_mut().zip(table) {
        acc += p;
        *c = acc;
    }
    let expected = pair_rate * total * duration_ps as f64 / PS_PER_S;
    for ch in 0..2 {
        let share = table[ch * 2] + table[ch * 2 + 1] + table[4 + ch];
        out.malta[ch].reserve((expected * share / total * 1.01) as usize + 16);
    }
    let mut it = PoissonArrivals::new(pair_rate * total, duration_ps, rng);
    while let Some(t) = it.next() {
        let t = t + start_ps;
        let u = it.rng_mut().random::<f64>() * total;
        let k = cumulative.iter().position(|&c| u < c).unwrap_or(7);
        match k {
            0..=3 => {
                out.malta[k / 2].push(t);
                out.sicily[k % 2].push(t + delay_ps);
            }
            4 | 5 => out.malta[k - 4].push(t),
            _ => out.sicily[k - 6].push(t + delay_ps),
        }
    }
    out
}

fn finish(cfg: &LinkConfig, seed: u64, parts: Vec<Arrivals>) -> Result<(TagStream, TagStream), SimError> {
    let mut parts = parts.into_iter();
    let mut arrivals = parts.next().unwrap_or_default();
    for p in parts {
        arrivals.extend(p);
    }
    let duration_ps = cfg.duration_ps();
    let Arrivals { malta, mut sicily } = arrivals;
    for (ch, times) in sicily.iter_mut().enumerate() {
        add_jitter(times, cfg.dispersion_fwhm_ps, &mut stage_rng(seed, Stage::Dispersion, ch as u32));
    }
    let malta_tags = station(malta, &cfg.malta, duration_ps, seed, Stage::MaltaDetector)?;
    let sicily_tags = station(sicily, &cfg.sicily, duration_ps, seed, Stage::SicilyDetector)?;
    let digest = cfg.digest();
    let mk = |name: &str, tags: Vec<TimeTag>, clock: &ClockConfig| {
        TagStream::from_sorted(name, tags, 2).with_resolution(clock.resolution_ps).with_digest(digest)
    };
    Ok((mk("Malta", malta_tags, &cfg.malta.clock), mk("Sicily", sicily_tags, &cfg.sicily.clock)))
}

fn station(
    arrivals: [Vec<u64>; 2],
    cfg: &StationConfig,
    duration_ps: u64,
    seed: u64,
    stage: Stage,
) -> Result<Vec<TimeTag>, SimError> {
    let [a0, a1] = arrivals;
    let mut per_channel = Vec::with_capacity(2);
    for (ch, times) in [(0u8, a0), (1u8, a1)] {
        let mut rng = stage_rng(seed, stage, ch as u32);
        per_channel.push(apply_detector(times, ch, &cfg.detectors[ch as usize], duration_ps, &mut rng));
    }
    let merged = merge_sorted(&per_channel[0], &per_channel[1]);
    drop(per_channel);
    apply_clock(merged, &cfg.clock)
}

/// Merges two timestamp-sorted tag lists; ties keep `a` first.
pub fn merge_sorted(a: &[TimeTag], b: &[TimeTag]) -> Vec<TimeTag> {
    let mut out = Vec::with_capacity(a.len() + b.len());
    let (mut i, mut j) = (0, 0);
    while i < a.len() && j < b.len() {
        if b[j].t_ps < a[i].t_ps {
            out.push(b[j]);
            j += 1;
        } else {
            out.push(a[i]);
            i += 1;
        }
    }
    out.extend_from_slice(&a[i..]);
    out.extend_from_slice(&b[j..]);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::state::{bell_phi_minus, joint_outcome_probs};

    #[test]
    fn zero_rate_emits_nothing() {
        assert!(emit_pairs(0.0, 10.0, 1).is_empty());
    }

    #[test]
    fn emission_count_within_five_sigma() {
        let n = emit_pairs(1000.0, 100.0, 42).len() as f64;
        assert!((n - 1e5).abs() <= 5.0 * 1e5f64.sqrt(), "{n}");
    }

    #[test]
    fn emission_is_deterministic_and_sorted() {
        let a = emit_pairs(5e4, 1.0, 9);
        assert_eq!(a, emit_pairs(5e4, 1.0, 9));
        assert_ne!(a, emit_pairs(5e4, 1.0, 10));
        assert!(a.windows(2).all(|w| w[0] <= w[1]));
        assert!(*a.last().unwrap() < 1_000_000_000_000);
    }

    #[test]
    fn zero_survival_never_detects() {
        let mut rng = stage_rng(1, Stage::Emission, 0);
        let probs = joint_outcome_probs(&bell_phi_minus(), 0.0, 0.0);
        for _ in 0..1000 {
            let o = detect_pair(&probs, &ArmSurvival::uniform(0.0, 0.0), &mut rng);
            assert_eq!(o, PairOutcome { malta: None, sicily: None });
        }
    }

    #[test]
    fn hv_outcomes_perfectly_correlated() {
        let mut rng = stage_rng(2, Stage::Emission, 0);
        let probs = joint_outcome_probs(&bell_phi_minus(), 0.0, 0.0);
        let n = 40_000;
        let mut tt = 0;
        for _ in 0..n {
            let o = detect_pair(&probs, &ArmSurvival::uniform(1.0, 1.0), &mut rng);
            match (o.malta, o.sicily) {
                (Some(Port::Transmit), Some(Port::Transmit)) => tt += 1,
                (Some(Port::Reflect), Some(Port::Reflect)) => {}
                other => panic!("anti-correlated outcome {other:?}"),
            }
        }
        let sigma = (n as f64 * 0.25).sqrt();
        assert!((tt as f64 - n as f64 / 2.0).abs() < 3.0 * sigma, "{tt}");
    }

    #[test]
    fn detector_passthrough_when_ideal() {
        let times = vec![5, 100, 100, 7000];
        let mut rng = stage_rng(0, Stage::MaltaDetector, 0);
        let tags = apply_detector(times.clone(), 1, &DetectorConfig::ideal(), 10_000, &mut rng);
        assert_eq!(tags.iter().map(|t| t.t_ps).collect::<Vec<_>>(), times);
        assert!(tags.iter().all(|t| t.channel == 1));
    }

    #[test]
    fn dead_time_drops_close_follower() {
        let cfg = DetectorConfig { dead_time_ps: 1_000_000, ..DetectorConfig::ideal() };
        let mut rng = stage_rng(0, Stage::MaltaDetector, 0);
        let tags = apply_detector(vec![1_000_000, 1_500_000, 2_000_000], 0, &cfg, 10_000_000, &mut rng);
        // 1.5 us is within the dead time of 1 us; 2.0 us is exactly at its end
        assert_eq!(tags.iter().map(|t| t.t_ps).collect::<Vec<_>>(), vec![1_000_000, 2_000_000]);
    }

    #[test]
    fn dark_counts_poisson() {
        let cfg = DetectorConfig { dark_rate: 550.0, ..DetectorConfig::ideal() };
        let mut rng = stage_rng(3, Stage::SicilyDetector, 0);
        let n = apply_detector(vec![], 0, &cfg, 60_000_000_000_000, &mut rng).len() as f64;
        assert!((n - 33000.0).abs() <= 5.0 * 33000f64.sqrt(), "{n}");
    }

    #[test]
    fn clock_examples() {
        let tags = vec![TimeTag::new(0, 1_000_000_000_000), TimeTag::new(1, 1_000_000_000_007)];
        let quant = apply_clock(tags.clone(), &ClockConfig { offset_ps: 0, drift_ppm: 0.0, resolution_ps: 4 }).unwrap();
        assert_eq!(quant[0].t_ps, 1_000_000_000_000);
        assert_eq!(quant[1].t_ps, 1_000_000_000_008);
        let shifted = apply_clock(tags.clone(), &ClockConfig { offset_ps: 5_000_000, ..ClockConfig::ideal() }).unwrap();
        assert_eq!(shifted[0].t_ps, 1_000_005_000_000);
        assert_eq!(shifted[1].t_ps, 1_000_005_000_007);
        let drift = apply_clock(tags, &ClockConfig { drift_ppm: 10.0, ..ClockConfig::ideal() }).unwrap();
        assert_eq!(drift[0].t_ps - 1_000_000_000_000, 10_000_000);
        assert!(drift[1].t_ps >= drift[0].t_ps);
    }

    #[test]
    fn clock_overflow_is_an_error() {
        let tags = vec![TimeTag::new(0, 10)];
        let err = apply_clock(tags, &ClockConfig { offset_ps: -11, ..ClockConfig::ideal() }).unwrap_err();
        assert!(matches!(err, SimError::ClockOverflow { index: 0, .. }));
        let tags = vec![TimeTag::new(0, u64::MAX - 5)];
        assert!(apply_clock(tags, &ClockConfig { offset_ps: 10, ..ClockConfig::ideal() }).is_err());
    }

    #[test]
    fn stage_streams_are_independent() {
        let a: u64 = stage_rng(1, Stage::MaltaDetector, 0).random();
        let b: u64 = stage_rng(1, Stage::MaltaDetector, 1).random();
        let c: u64 = stage_rng(1, Stage::SicilyDetector, 0).random();
        assert!(a != b && a != c && b != c);
        assert_eq!(a, stage_rng(1, Stage::MaltaDetector, 0).random::<u64>());
    }
}
