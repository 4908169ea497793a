//! `qlink` command line: simulate tag files, recover the link delay, count
//! coincidences and analyse scans and Bell runs.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 no correlation found.

use std::ffi::OsString;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::Value;

use crate::analysis::{
    fig2_table, fig3_table, fig4_table, fit_visibility, s_curve, s_curve_extremum, s_curve_extremum_err, secure_key_rate, AnalysisReport,
    BasisVisibility, CorrelationValue, SettingCounts, ValueWithError, VisibilityFit, DEFAULT_EC_INEFFICIENCY, KEY_RATE_FORMULA,
};
use crate::correlation::{
    coarse_to_fine_delay, match_coincidences, refine_delay, track_drift, CorrelationError, DelaySearch, DriftKnot, LevelSummary,
    DEFAULT_WINDOW_PS,
};
use crate::experiment::{
    bell_from_slots, chsh_angles, correlations, count_schedule, expected_s, find_delay, key_basis_angles, key_from_slots,
    measure_settings, ExperimentError, SlotCounts,
};
use crate::link::{expected_rates, simulate_run, LinkConfig, Schedule, PS_PER_S};
use crate::tags::{read_tags, read_tags_csv, to_json_string, write_tags, write_tags_csv, ColumnMap, TagError, TagStream};

const BELL_SCHEDULE: &str = include_str!("../presets/bell-schedule.cfg");
const SCAN_SCHEDULE: &str = include_str!("../presets/scan-schedule.cfg");

#[derive(Debug)]
enum CliError {
    Usage(String),
    Data(String),
    NoCorrelation(String),
}

impl CliError {
    fn code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::NoCorrelation(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::NoCorrelation(m) => m,
        }
    }
}

impl From<CorrelationError> for CliError {
    fn from(e: CorrelationError) -> Self {
        match e {
            CorrelationError::NoCorrelation { .. } => CliError::NoCorrelation(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<ExperimentError> for CliError {
    fn from(e: ExperimentError) -> Self {
        match e {
            ExperimentError::Correlation(c) => c.into(),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<TagError> for CliError {
    fn from(e: TagError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<crate::analysis::AnalysisError> for CliError {
    fn from(e: crate::analysis::AnalysisError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<crate::link::ConfigError> for CliError {
    fn from(e: crate::link::ConfigError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<crate::link::SimError> for CliError {
    fn from(e: crate::link::SimError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

#[derive(Parser, Debug)]
#[command(name = "qlink", version, about = "Entangled-photon link simulation and time-tag analysis")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate both stations and write their tag files.
    Simulate(SimulateArgs),
    /// Locate the link delay by coarse-to-fine cross-correlation.
    Correlate(CorrelateArgs),
    /// Count coincidences at a known or searched delay.
    Coincide(CoincideArgs),
    /// Fit visibility curves from an analyzer scan.
    Scan(ScanArgs),
    /// CHSH, QBER and key rate from a scheduled run.
    Bell(BellArgs),
    /// Simulate and analyse a full Bell run in memory.
    Report(ReportArgs),
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Print the JSON report instead of a table.
    #[arg(long)]
    json: bool,
    /// Omit the timestamp so identical runs give identical reports.
    #[arg(long)]
    deterministic: bool,
    /// Also write the JSON report to this file.
    #[arg(long, value_name = "PATH")]
    report: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
struct DelayArgs {
    /// Known delay `t_sicily - t_malta`; searched for when absent.
    #[arg(long, allow_hyphen_values = true)]
    delay_ps: Option<i64>,
    /// Half-width of the delay search.
    #[arg(long, default_value_t = 1e-3)]
    span_s: f64,
    /// Finest correlogram bin of the search.
    #[arg(long, default_value_t = 100)]
    fine_bin_ps: u64,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    /// Config file or preset name.
    #[arg(long, default_value = "malta-sicily")]
    config: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Malta tag file (.qtags or .csv).
    #[arg(long)]
    out_a: PathBuf,
    /// Sicily tag file (.qtags or .csv).
    #[arg(long)]
    out_b: PathBuf,
    /// Analyzer schedule file or preset name (bell, scan).
    #[arg(long)]
    schedule: Option<String>,
    /// Run length; defaults to the config, or the schedule end if later.
    #[arg(long)]
    duration_s: Option<f64>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct CorrelateArgs {
    #[arg(long)]
    a: PathBuf,
    #[arg(long)]
    b: PathBuf,
    /// Half-width of the delay search.
    #[arg(long, default_value_t = 1e-3)]
    span_s: f64,
    /// Finest correlogram bin.
    #[arg(long, default_value_t = 100)]
    fine_bin_ps: u64,
    /// Centre of the search window.
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    center_ps: f64,
    /// Track drift in blocks of this length after the delay search.
    #[arg(long)]
    drift_block_s: Option<f64>,
    /// CSV of the finest correlogram.
    #[arg(long, value_name = "PATH")]
    table: Option<PathBuf>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct CoincideArgs {
    #[arg(long)]
    a: PathBuf,
    #[arg(long)]
    b: PathBuf,
    #[command(flatten)]
    delay: DelayArgs,
    #[arg(long, default_value_t = DEFAULT_WINDOW_PS)]
    window_ps: u64,
    /// CSV of matched pairs.
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct ScanArgs {
    #[arg(long)]
    a: PathBuf,
    #[arg(long)]
    b: PathBuf,
    /// Schedule file or preset name the tags were taken with.
    #[arg(long)]
    schedule: String,
    #[command(flatten)]
    delay: DelayArgs,
    #[arg(long, default_value_t = DEFAULT_WINDOW_PS)]
    window_ps: u64,
    /// CSV of counts and fitted curves.
    #[arg(long, value_name = "PATH")]
    curves: Option<PathBuf>,
    /// CSV of the CHSH curve built from the fits.
    #[arg(long, value_name = "PATH")]
    s_curve: Option<PathBuf>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct BellArgs {
    #[arg(long)]
    a: PathBuf,
    #[arg(long)]
    b: PathBuf,
    #[arg(long)]
    schedule: String,
    /// Equal time blocks per setting for the block statistics.
    #[arg(long, default_value_t = 39)]
    blocks: usize,
    #[command(flatten)]
    delay: DelayArgs,
    #[arg(long, default_value_t = DEFAULT_WINDOW_PS)]
    window_ps: u64,
    /// Error-correction inefficiency f.
    #[arg(long, default_value_t = DEFAULT_EC_INEFFICIENCY)]
    ec_f: f64,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct ReportArgs {
    #[arg(long, default_value = "malta-sicily")]
    config: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 10.0)]
    seconds_per_setting: f64,
    #[arg(long, default_value_t = 39)]
    blocks: usize,
    /// Known delay; otherwise searched on a short run.
    #[arg(long, allow_hyphen_values = true)]
    delay_ps: Option<i64>,
    #[arg(long, default_value_t = DEFAULT_WINDOW_PS)]
    window_ps: u64,
    #[arg(long, default_value_t = DEFAULT_EC_INEFFICIENCY)]
    ec_f: f64,
    #[command(flatten)]
    common: Common,
}

/// Provenance block embedded in every JSON report.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunManifest {
    pub subcommand: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub config_path: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub tool_version: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub config_digest: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub timestamp_unix_s: Option<u64>,
}

impl RunManifest {
    fn new(subcommand: &str, common: &Common) -> Self {
        let timestamp_unix_s = (!common.deterministic).then(|| SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()));
        let mut outputs = Vec::new();
        if let Some(p) = &common.report {
            outputs.push(p.display().to_string());
        }
        Self {
            subcommand: subcommand.to_string(),
            config_path: None,
            seed: None,
            inputs: Vec::new(),
            outputs,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            config_digest: None,
            timestamp_unix_s,
        }
    }

    fn input(&mut self, p: &Path) {
        self.inputs.push(p.display().to_string());
    }

    fn output(&mut self, p: &Path) {
        self.outputs.push(p.display().to_string());
    }
}

#[derive(Serialize)]
struct Envelope<T: Serialize> {
    manifest: RunManifest,
    #[serde(flatten)]
    body: T,
}

/// Parses `argv` (program name first), runs the subcommand and returns the
/// process exit code. Reports go to stdout, diagnostics to stderr.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let stdout = std::io::stdout();
    let stderr = std::io::stderr();
    run(argv, &mut stdout.lock(), &mut stderr.lock())
}

/// [`dispatch`] with explicit output streams.
pub fn run<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let text = e.render().to_string();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(out, "{text}");
                    0
                }
                _ => {
                    let _ = write!(err, "{text}");
                    1
                }
            };
        }
    };
    let result = configure_threads().and_then(|()| execute(cli.command, out));
    match result {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "qlink: {}", e.message());
            e.code()
        }
    }
}

fn configure_threads() -> Result<(), CliError> {
    let Ok(v) = std::env::var("QLINK_THREADS") else {
        return Ok(());
    };
    let n: usize = v.trim().parse().ok().filter(|&n| n > 0).ok_or_else(|| CliError::Usage(format!("QLINK_THREADS must be a positive integer, got {v:?}")))?;
    // a second dispatch in the same process keeps the first pool
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

fn execute(command: Command, out: &mut dyn Write) -> Result<(), CliError> {
    match command {
        Command::Simulate(a) => simulate(a, out),
        Command::Correlate(a) => correlate(a, out),
        Command::Coincide(a) => coincide(a, out),
        Command::Scan(a) => scan(a, out),
        Command::Bell(a) => bell(a, out),
        Command::Report(a) => report(a, out),
    }
}

fn emit<T: Serialize>(manifest: RunManifest, body: T, common: &Common, out: &mut dyn Write) -> Result<(), CliError> {
    let json = to_json_string(&Envelope { manifest, body })?;
    if let Some(p) = &common.report {
        std::fs::write(p, &json)?;
    }
    if common.json {
        out.write_all(json.as_bytes())?;
    } else {
        let value: Value = serde_json::from_str(&json).map_err(|e| CliError::Data(e.to_string()))?;
        let mut rows = Vec::new();
        flatten("", &value, &mut rows);
        let width = rows.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
        for (k, v) in rows {
            writeln!(out, "{k:<width$}  {v}")?;
        }
    }
    Ok(())
}

fn flatten(prefix: &str, v: &Value, rows: &mut Vec<(String, String)>) {
    let key = |k: &str| if prefix.is_empty() { k.to_string() } else { format!("{prefix}.{k}") };
    match v {
        Value::Object(m) => {
            for (k, x) in m {
                flatten(&key(k), x, rows);
            }
        }
        Value::Array(xs) if xs.iter().any(|x| x.is_object() || x.is_array()) => {
            for (i, x) in xs.iter().enumerate() {
                flatten(&key(&i.to_string()), x, rows);
            }
        }
        Value::Array(xs) => rows.push((prefix.to_string(), xs.iter().map(short).collect::<Vec<_>>().join(" "))),
        other => rows.push((prefix.to_string(), short(other))),
    }
}

fn short(v: &Value) -> String {
    match v {
        Value::Number(n) if n.is_f64() => {
            let x = n.as_f64().unwrap_or(f64::NAN);
            format!("{}", (x * 1e6).round() / 1e6)
        }
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn is_csv(p: &Path) -> bool {
    p.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv"))
}

fn load_config(name: &str) -> Result<LinkConfig, CliError> {
    let path = Path::new(name);
    if path.exists() {
        return Ok(LinkConfig::load(path)?);
    }
    LinkConfig::preset(name).ok_or_else(|| CliError::Data(format!("no config file or preset named {name:?}")))
}

fn load_schedule(name: &str) -> Result<Schedule, CliError> {
    let path = Path::new(name);
    if path.exists() {
        return Ok(Schedule::load(path)?);
    }
    let text = match name {
        "bell" => BELL_SCHEDULE,
        "scan" => SCAN_SCHEDULE,
        _ => return Err(CliError::Data(format!("no schedule file or preset named {name:?}"))),
    };
    Ok(Schedule::parse(text)?)
}

fn read_stream(path: &Path, station: &str) -> Result<TagStream, CliError> {
    let file = File::open(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let reader = BufReader::new(file);
    let stream = if is_csv(path) { read_tags_csv(reader, &ColumnMap::default(), station)? } else { read_tags(reader)? };
    Ok(stream)
}

fn write_stream(path: &Path, stream: &TagStream) -> Result<(), CliError> {
    let file = File::create(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let mut w = BufWriter::new(file);
    if is_csv(path) {
        write_tags_csv(stream, &mut w)?;
    } else {
        write_tags(stream, &mut w)?;
    }
    w.flush()?;
    Ok(())
}

fn load_pair(a: &Path, b: &Path, manifest: &mut RunManifest) -> Result<(TagStream, TagStream), CliError> {
    let sa = read_stream(a, "malta")?;
    let sb = read_stream(b, "sicily")?;
    manifest.input(a);
    manifest.input(b);
    if sa.config_digest != [0; 32] {
        manifest.config_digest = Some(hex(&sa.config_digest));
    }
    Ok((sa, sb))
}

fn span_ps(span_s: f64) -> Result<u64, CliError> {
    if !(span_s > 0.0 && span_s.is_finite()) {
        return Err(CliError::Usage(format!("--span-s must be positive, got {span_s}")));
    }
    Ok((span_s * PS_PER_S).round() as u64)
}

fn resolve_delay(a: &TagStream, b: &TagStream, d: &DelayArgs) -> Result<(i64, Option<DelaySearch>), CliError> {
    match d.delay_ps {
        Some(delay) => Ok((delay, None)),
        None => {
            let r = coarse_to_fine_delay(a.tags(), b.tags(), span_ps(d.span_s)?, d.fine_bin_ps)?;
            Ok((r.delay_ps.round() as i64, Some(r)))
        }
    }
}

#[derive(Serialize)]
struct StationSummary {
    tags: usize,
    singles: [u64; 2],
    singles_rate_cps: [f64; 2],
}

impl StationSummary {
    fn of(s: &TagStream, duration_s: f64) -> Self {
        let singles = [s.singles(0), s.singles(1)];
        Self { tags: s.len(), singles, singles_rate_cps: singles.map(|n| n as f64 / duration_s) }
    }
}

#[derive(Serialize)]
struct SimulateReport {
    duration_s: f64,
    fibre_delay_ps: u64,
    settings: usize,
    malta: StationSummary,
    sicily: StationSummary,
    /// At the first setting, default window.
    expected_coincidence_rate_cps: f64,
}

fn simulate(args: SimulateArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let mut cfg = load_config(&args.config)?;
    if let Some(name) = &args.schedule {
        cfg.schedule = load_schedule(name)?;
    }
    match args.duration_s {
        Some(d) => cfg.duration_s = d,
        None => cfg.duration_s = cfg.duration_s.max(cfg.schedule.end_ps() as f64 / PS_PER_S),
    }
    cfg.validate()?;
    let (a, b) = simulate_run(&cfg, args.seed)?;
    write_stream(&args.out_a, &a)?;
    write_stream(&args.out_b, &b)?;
    let mut m = RunManifest::new("simulate", &args.common);
    m.config_path = Some(args.config.clone());
    m.seed = Some(args.seed);
    m.config_digest = Some(hex(&cfg.digest()));
    m.output(&args.out_a);
    m.output(&args.out_b);
    let sched = cfg.effective_schedule();
    let first = &sched.settings()[0];
    let body = SimulateReport {
        duration_s: cfg.duration_s,
        fibre_delay_ps: cfg.fibre_delay_ps,
        settings: sched.settings().len(),
        malta: StationSummary::of(&a, cfg.duration_s),
        sicily: StationSummary::of(&b, cfg.duration_s),
        expected_coincidence_rate_cps: expected_rates(&cfg, first.malta_angle, first.sicily_angle, DEFAULT_WINDOW_PS as f64).total_coincidences(),
    };
    emit(m, body, &args.common, out)
}

#[derive(Serialize)]
struct DriftSummary {
    slope_ppm: f64,
    knots: Vec<DriftKnot>,
}

#[derive(Serialize)]
struct CorrelateReport {
    delay_ps: f64,
    fwhm_ps: f64,
    significance: f64,
    peak_height: f64,
    background_mean: f64,
    bin_width_ps: u64,
    levels: Vec<LevelSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    drift: Option<DriftSummary>,
}

fn correlate(args: CorrelateArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let mut m = RunManifest::new("correlate", &args.common);
    let (a, b) = load_pair(&args.a, &args.b, &mut m)?;
    let span = span_ps(args.span_s)?;
    let r = if args.center_ps == 0.0 {
        coarse_to_fine_delay(a.tags(), b.tags(), span, args.fine_bin_ps)?
    } else {
        refine_delay(a.tags(), b.tags(), args.center_ps, span, args.fine_bin_ps)?
    };
    if let Some(p) = &args.table {
        std::fs::write(p, fig2_table(&r.correlogram))?;
        m.output(p);
    }
    let drift = match args.drift_block_s {
        Some(block) => {
            let peak_span = (20.0 * r.peak.fwhm_ps.max(args.fine_bin_ps as f64)) as u64;
            let model = track_drift(a.tags(), b.tags(), block, r.delay_ps, peak_span.max(1), args.fine_bin_ps)?;
            Some(DriftSummary { slope_ppm: model.slope_ppm(), knots: model.knots().to_vec() })
        }
        None => None,
    };
    let body = CorrelateReport {
        delay_ps: r.delay_ps,
        fwhm_ps: r.peak.fwhm_ps,
        significance: r.peak.significance,
        peak_height: r.peak.peak_height,
        background_mean: r.peak.background_mean,
        bin_width_ps: r.correlogram.bin_width_ps,
        levels: r.levels,
        drift,
    };
    emit(m, body, &args.common, out)
}

#[derive(Serialize)]
struct CoincideReport {
    delay_ps: i64,
    delay_searched: bool,
    window_ps: u64,
    coincidences: usize,
    counts: [[u64; 2]; 2],
    duration_s: f64,
    rate_cps: ValueWithError,
}

/// Span of stream A, the denominator for rates.
fn duration_of(a: &TagStream) -> f64 {
    (a.span_ps().max(1)) as f64 / PS_PER_S
}

fn coincide(args: CoincideArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let mut m = RunManifest::new("coincide", &args.common);
    let (a, b) = load_pair(&args.a, &args.b, &mut m)?;
    let (delay, searched) = resolve_delay(&a, &b, &args.delay)?;
    let c = match_coincidences(a.tags(), b.tags(), delay, args.window_ps);
    if let Some(p) = &args.out {
        let file = File::create(p).map_err(|e| CliError::Data(format!("{}: {e}", p.display())))?;
        let mut w = csv::Writer::from_writer(BufWriter::new(file));
        let csv_err = |e: csv::Error| CliError::Data(e.to_string());
        w.write_record(["t_a_ps", "t_b_ps", "channel_a", "channel_b"]).map_err(csv_err)?;
        for r in &c.records {
            w.write_record([r.t_a.to_string(), r.t_b.to_string(), r.channel_a.to_string(), r.channel_b.to_string()]).map_err(csv_err)?;
        }
        w.flush()?;
        m.output(p);
    }
    let duration_s = duration_of(&a);
    let n = c.len() as f64;
    let body = CoincideReport {
        delay_ps: delay,
        delay_searched: searched.is_some(),
        window_ps: args.window_ps,
        coincidences: c.len(),
        counts: c.matrix2(),
        duration_s,
        rate_cps: ValueWithError::new(n / duration_s, n.sqrt() / duration_s),
    };
    emit(m, body, &args.common, out)
}

fn basis_label(sicily_angle: f64) -> String {
    let deg = sicily_angle.to_degrees().rem_euclid(90.0);
    if deg.abs() < 1e-6 || (90.0 - deg).abs() < 1e-6 {
        "hv".into()
    } else if (deg - 45.0).abs() < 1e-6 {
        "da".into()
    } else {
        format!("sicily_{}", sicily_angle.to_degrees())
    }
}

/// Whether `b2 = b1 - 45°` modulo 180°.
fn is_chsh_pair(b1: f64, b2: f64) -> bool {
    let d = (b1 - b2 - std::f64::consts::FRAC_PI_4).rem_euclid(std::f64::consts::PI);
    d < 1e-9 || std::f64::consts::PI - d < 1e-9
}

#[derive(Serialize)]
struct DelayUsed {
    delay_ps: i64,
    delay_searched: bool,
}

#[derive(Serialize)]
struct WithDelay<T: Serialize> {
    #[serde(flatten)]
    delay: DelayUsed,
    #[serde(flatten)]
    analysis: T,
}

fn correlation_values(slots: &[SlotCounts]) -> Result<Vec<CorrelationValue>, CliError> {
    Ok(correlations(slots)?
        .into_iter()
        .map(|(c, e)| CorrelationValue { malta_deg: c.malta_angle.to_degrees(), sicily_deg: c.sicily_angle.to_degrees(), counts: c.counts, e: e.into() })
        .collect())
}

fn scan(args: ScanArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let mut m = RunManifest::new("scan", &args.common);
    let schedule = load_schedule(&args.schedule)?;
    m.config_path = Some(args.schedule.clone());
    let (a, b) = load_pair(&args.a, &args.b, &mut m)?;
    let (delay, searched) = resolve_delay(&a, &b, &args.delay)?;
    let slots = count_schedule(a.tags(), b.tags(), &schedule, delay, args.window_ps, 1)?;

    // one curve per Sicily angle, in schedule order
    let mut groups: Vec<(f64, Vec<SettingCounts>)> = Vec::new();
    for s in &slots {
        let c = s.counts;
        match groups.iter_mut().find(|(b, _)| (b - c.sicily_angle).abs() < 1e-9) {
            Some((_, v)) => v.push(c),
            None => groups.push((c.sicily_angle, vec![c])),
        }
    }
    let mut report = AnalysisReport { window_ps: Some(args.window_ps), ..Default::default() };
    let mut fits: Vec<(f64, String, Vec<(f64, f64)>, VisibilityFit)> = Vec::new();
    for (b_angle, counts) in &groups {
        let points: Vec<(f64, f64)> = counts.iter().map(|c| (c.malta_angle, c.counts[0][0] as f64)).collect();
        let fit = fit_visibility(&points)?;
        let label = basis_label(*b_angle);
        report.visibilities.push(BasisVisibility::from_fit(&label, b_angle.to_degrees(), &fit));
        fits.push((*b_angle, label, points, fit));
    }
    report.correlations = correlation_values(&slots)?;
    if let Some(p) = &args.curves {
        let rows: Vec<(&str, &[(f64, f64)], &VisibilityFit)> = fits.iter().map(|(_, l, p, f)| (l.as_str(), p.as_slice(), f)).collect();
        std::fs::write(p, fig3_table(&rows))?;
        m.output(p);
    }
    let pair = fits.iter().enumerate().find_map(|(i, f1)| fits.iter().skip(i + 1).chain(fits.iter().take(i)).find(|f2| is_chsh_pair(f1.0, f2.0)).map(|f2| (f1, f2)));
    match pair {
        Some((f1, f2)) => {
            let (phi, s) = s_curve_extremum(&f1.3, &f2.3);
            report.s_fit = Some(ValueWithError::new(s.abs(), s_curve_extremum_err(&f1.3, &f2.3)));
            report.s_fit_phi_deg = Some(phi.to_degrees());
            if let Some(p) = &args.s_curve {
                let grid: Vec<f64> = (0..=180).map(|k| (k as f64).to_radians()).collect();
                std::fs::write(p, fig4_table(&s_curve(&f1.3, &f2.3, &grid)))?;
                m.output(p);
            }
        }
        None => report.warnings.push("no pair of Sicily angles 45 degrees apart; CHSH curve not computed".into()),
    }
    let body = WithDelay { delay: DelayUsed { delay_ps: delay, delay_searched: searched.is_some() }, analysis: report };
    emit(m, body, &args.common, out)
}

/// CHSH, QBER and key-rate sections shared by `bell` and `report`.
fn bell_analysis(slots: &[SlotCounts], window_ps: u64, ec_f: f64) -> Result<AnalysisReport, CliError> {
    let mut report = AnalysisReport { window_ps: Some(window_ps), ..Default::default() };
    report.correlations = correlation_values(slots)?;
    let bell = bell_from_slots(slots)?;
    report.s_direct = Some(ValueWithError::new(bell.chsh.s, bell.chsh.sigma));
    report.s_blocks = Some(bell.blocks);
    report.warnings.extend(bell.chsh.warnings.iter().cloned());
    let n: u64 = slots.iter().map(|s| s.counts.total()).sum();
    let t: f64 = slots.iter().map(|s| s.counts.duration_s).sum();
    report.coincidence_rate_cps = Some(ValueWithError::new(n as f64 / t, (n as f64).sqrt() / t));
    match key_from_slots(slots)? {
        Some(key) => {
            report.qber = Some(key.qber.into());
            report.qber_by_setting = key.per_setting;
            report.secure_key_rate_bps = Some(secure_key_rate(key.rate_cps.0, key.qber.0.clamp(0.0, 0.5), ec_f)?);
            report.key_rate_formula = Some(KEY_RATE_FORMULA.to_string());
            report.ec_inefficiency = Some(ec_f);
        }
        None => report.warnings.push("no key-basis settings; QBER and key rate not computed".into()),
    }
    Ok(report)
}

fn bell(args: BellArgs, out: &mut dyn Write) -> Result<(), CliError> {
    if args.blocks == 0 {
        return Err(CliError::Usage("--blocks must be at least 1".into()));
    }
    let mut m = RunManifest::new("bell", &args.common);
    let schedule = load_schedule(&args.schedule)?;
    m.config_path = Some(args.schedule.clone());
    let (a, b) = load_pair(&args.a, &args.b, &mut m)?;
    let (delay, searched) = resolve_delay(&a, &b, &args.delay)?;
    let slots = count_schedule(a.tags(), b.tags(), &schedule, delay, args.window_ps, args.blocks)?;
    let report = bell_analysis(&slots, args.window_ps, args.ec_f)?;
    let body = WithDelay { delay: DelayUsed { delay_ps: delay, delay_searched: searched.is_some() }, analysis: report };
    emit(m, body, &args.common, out)
}

#[derive(Serialize)]
struct Theory {
    s_expected: f64,
    /// `sqrt(2) (V_HV + V_DA)` from the configured noise.
    s_visibility_bound: f64,
    coincidence_rate_cps: f64,
}

#[derive(Serialize)]
struct FullReport {
    #[serde(flatten)]
    delay: DelayUsed,
    seconds_per_setting: f64,
    #[serde(flatten)]
    analysis: AnalysisReport,
    theory: Theory,
}

fn report(args: ReportArgs, out: &mut dyn Write) -> Result<(), CliError> {
    if args.blocks == 0 {
        return Err(CliError::Usage("--blocks must be at least 1".into()));
    }
    if !(args.seconds_per_setting > 0.0 && args.seconds_per_setting.is_finite()) {
        return Err(CliError::Usage("--seconds-per-setting must be positive".into()));
    }
    let cfg = load_config(&args.config)?;
    cfg.validate()?;
    let mut m = RunManifest::new("report", &args.common);
    m.config_path = Some(args.config.clone());
    m.seed = Some(args.seed);
    m.config_digest = Some(hex(&cfg.digest()));
    let (delay, searched) = match args.delay_ps {
        Some(d) => (d, false),
        None => (find_delay(&cfg, args.seconds_per_setting.min(10.0), args.seed, 1_000_000_000, 100)?.delay_ps.round() as i64, true),
    };
    let chsh = chsh_angles();
    let settings: Vec<(f64, f64)> = chsh.iter().chain(key_basis_angles().iter()).copied().collect();
    let slots = measure_settings(&cfg, &settings, args.seconds_per_setting, args.blocks, args.seed, delay, args.window_ps)?;
    let analysis = bell_analysis(&slots, args.window_ps, args.ec_f)?;
    let v_da = cfg.v_werner;
    let v_hv = cfg.v_werner * (1.0 - cfg.hv_dephasing);
    let theory = Theory {
        s_expected: expected_s(&cfg, &chsh, args.window_ps),
        s_visibility_bound: std::f64::consts::SQRT_2 * (v_hv + v_da),
        coincidence_rate_cps: expected_rates(&cfg, 0.0, 0.0, args.window_ps as f64).total_coincidences(),
    };
    let body = FullReport {
        delay: DelayUsed { delay_ps: delay, delay_searched: searched },
        seconds_per_setting: args.seconds_per_setting,
        analysis,
        theory,
    };
    emit(m, body, &args.common, out)
}
