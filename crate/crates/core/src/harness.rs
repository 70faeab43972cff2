//! Scenario files, experiment sweeps and result files.
//!
//! Scenarios are TOML documents (see `docs/formats.md`). `load_scenario`
//! parses and validates them, filling documented defaults. `run_matrix`
//! executes every (strategy, seed) pair on a worker pool and returns rows in
//! (strategy, seed) order regardless of completion order.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::correlation::{CorrelationMethod, OverlayParams};
use crate::model::{DestinationId, DeviceId, Direction, SessionBudget, Slo, DEFAULT_WINDOW};
use crate::rank::RankParams;
use crate::simnet::{self, DeviceSpec, GroupModel, MetricsReport, PathModel, Scenario, ScenarioError};
use crate::strategies::StrategyKind;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("invalid scenario: {path}: {message}")]
    Validation { path: String, message: String },
    #[error("results file: {0}")]
    Csv(#[from] csv::Error),
    #[error("summary file: {0}")]
    Json(#[from] serde_json::Error),
}

fn invalid(path: impl Into<String>, message: impl Into<String>) -> ConfigError {
    ConfigError::Validation {
        path: path.into(),
        message: message.into(),
    }
}

impl From<ScenarioError> for ConfigError {
    fn from(e: ScenarioError) -> Self {
        match e {
            ScenarioError::Invalid { path, message } => ConfigError::Validation { path, message },
            ScenarioError::Model(m) => invalid("scenario", m.to_string()),
        }
    }
}

// ---------------------------------------------------------------------------
// File schema
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct SloFile {
    #[serde(default = "default_metric")]
    metric_id: String,
    threshold: f64,
    #[serde(default = "default_direction")]
    direction: Direction,
}

fn default_metric() -> String {
    "one_way_delay_ms".into()
}

fn default_direction() -> Direction {
    Direction::ViolatedAbove
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct RankFile {
    window: usize,
    discount: f64,
    proximity_weight: f64,
    staleness_weight: f64,
    spread_penalty: f64,
}

impl Default for RankFile {
    fn default() -> Self {
        let p = RankParams::default();
        Self {
            window: DEFAULT_WINDOW,
            discount: p.discount,
            proximity_weight: p.proximity_weight,
            staleness_weight: p.staleness_weight,
            spread_penalty: p.spread_penalty,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct OverlayFile {
    min_correlation: f64,
    max_peers: usize,
    min_shared_samples: usize,
    method: CorrelationMethod,
    topology_period: u64,
}

impl Default for OverlayFile {
    fn default() -> Self {
        let p = OverlayParams::default();
        Self {
            min_correlation: p.min_correlation,
            max_peers: p.max_peers,
            min_shared_samples: p.min_shared_samples,
            method: p.method,
            topology_period: p.topology_period,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct BudgetFile {
    local_max: usize,
    virtual_max: usize,
}

impl Default for BudgetFile {
    fn default() -> Self {
        Self {
            local_max: 1,
            virtual_max: 0,
        }
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct NetworkFile {
    message_drop: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct GroupFile {
    name: String,
    #[serde(default)]
    p_enter: f64,
    #[serde(default)]
    p_exit: f64,
    delta: f64,
    #[serde(default)]
    start_violating: bool,
    #[serde(default)]
    divergence: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct DeviceFile {
    id: u32,
    destinations: Vec<u32>,
    #[serde(default)]
    neighbors: Vec<u32>,
    group: String,
    base_latency: f64,
    #[serde(default)]
    noise_sd: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct PathFile {
    device: u32,
    destination: u32,
    group: Option<String>,
    base_latency: Option<f64>,
    noise_sd: Option<f64>,
}

fn default_rounds() -> u64 {
    100
}

fn default_strategies() -> Vec<StrategyKind> {
    vec![StrategyKind::Local]
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScenarioFile {
    #[serde(default = "default_rounds")]
    rounds: u64,
    #[serde(default = "default_strategies")]
    strategies: Vec<StrategyKind>,
    #[serde(default = "default_seeds")]
    seeds: Vec<u64>,
    slo: SloFile,
    #[serde(default)]
    rank: RankFile,
    #[serde(default)]
    overlay: OverlayFile,
    #[serde(default)]
    budget: BudgetFile,
    #[serde(default)]
    network: NetworkFile,
    groups: Vec<GroupFile>,
    devices: Vec<DeviceFile>,
    #[serde(default)]
    paths: Vec<PathFile>,
}

// ---------------------------------------------------------------------------
// Validated config
// ---------------------------------------------------------------------------

/// A validated scenario plus the sweep to run over it.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioConfig {
    pub scenario: Scenario,
    pub strategies: Vec<StrategyKind>,
    pub seeds: Vec<u64>,
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.strategies.is_empty() {
            return Err(invalid("strategies", "at least one strategy is required"));
        }
        if self.seeds.is_empty() {
            return Err(invalid("seeds", "at least one seed is required"));
        }
        self.scenario.validate()?;
        Ok(())
    }
}

fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let column = before.rfind('\n').map_or(before.len(), |i| before.len() - i - 1) + 1;
    (line, column)
}

/// Parses and validates scenario text.
pub fn parse_scenario(text: &str) -> Result<ScenarioConfig, ConfigError> {
    let file: ScenarioFile = toml::from_str(text).map_err(|e| {
        let (line, column) = e.span().map_or((0, 0), |s| line_col(text, s.start));
        ConfigError::Parse {
            line,
            column,
            message: e.message().to_string(),
        }
    })?;
    let config = build(file)?;
    config.validate()?;
    Ok(config)
}

/// Reads, parses and validates a scenario file.
pub fn load_scenario(path: impl AsRef<Path>) -> Result<ScenarioConfig, ConfigError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_scenario(&text)
}

fn build(f: ScenarioFile) -> Result<ScenarioConfig, ConfigError> {
    let slo = Slo::new(f.slo.metric_id, f.slo.threshold, f.slo.direction).map_err(|e| invalid("slo", e.to_string()))?;
    if f.budget.local_max == 0 {
        return Err(invalid("budget.local_max", "must be at least 1"));
    }
    let budget =
        SessionBudget::new(f.budget.local_max, f.budget.virtual_max).map_err(|e| invalid("budget", e.to_string()))?;

    let mut group_index = BTreeMap::new();
    let mut groups = Vec::new();
    for (i, g) in f.groups.into_iter().enumerate() {
        if group_index.insert(g.name.clone(), i).is_some() {
            return Err(invalid(
                format!("groups[{i}].name"),
                format!("duplicate group `{}`", g.name),
            ));
        }
        groups.push(GroupModel {
            name: g.name,
            p_enter: g.p_enter,
            p_exit: g.p_exit,
            delta: g.delta,
            start_violating: g.start_violating,
            divergence: g.divergence,
        });
    }
    let lookup = |name: &str, at: String| {
        group_index
            .get(name)
            .copied()
            .ok_or_else(|| invalid(at, format!("unknown group `{name}`")))
    };

    let mut devices = Vec::new();
    let mut paths = BTreeMap::new();
    for (i, d) in f.devices.iter().enumerate() {
        let group = lookup(&d.group, format!("devices[{i}].group"))?;
        let id = DeviceId(d.id);
        let dests: Vec<_> = d.destinations.iter().map(|&x| DestinationId(x)).collect();
        let unique: BTreeSet<_> = dests.iter().collect();
        if unique.len() != dests.len() {
            return Err(invalid(format!("devices[{i}].destinations"), "duplicate destination"));
        }
        for &dest in &dests {
            paths.insert(
                (id, dest),
                PathModel {
                    base_latency: d.base_latency,
                    group,
                    noise_sd: d.noise_sd,
                },
            );
        }
        devices.push(DeviceSpec {
            id,
            destinations: dests,
            neighbors: d.neighbors.iter().map(|&n| DeviceId(n)).collect(),
        });
    }
    for (i, p) in f.paths.iter().enumerate() {
        let key = (DeviceId(p.device), DestinationId(p.destination));
        let Some(path) = paths.get_mut(&key) else {
            return Err(invalid(
                format!("paths[{i}]"),
                format!("device {} has no destination {}", p.device, p.destination),
            ));
        };
        if let Some(g) = &p.group {
            path.group = lookup(g, format!("paths[{i}].group"))?;
        }
        if let Some(b) = p.base_latency {
            path.base_latency = b;
        }
        if let Some(n) = p.noise_sd {
            path.noise_sd = n;
        }
    }

    let scenario = Scenario {
        rounds: f.rounds,
        slo,
        rank: RankParams {
            discount: f.rank.discount,
            proximity_weight: f.rank.proximity_weight,
            staleness_weight: f.rank.staleness_weight,
            spread_penalty: f.rank.spread_penalty,
        },
        overlay: OverlayParams {
            min_correlation: f.overlay.min_correlation,
            max_peers: f.overlay.max_peers,
            min_shared_samples: f.overlay.min_shared_samples,
            method: f.overlay.method,
            topology_period: f.overlay.topology_period,
        },
        budget,
        window: f.rank.window,
        message_drop: f.network.message_drop,
        groups,
        devices,
        paths,
    };
    Ok(ScenarioConfig {
        scenario,
        strategies: f.strategies,
        seeds: f.seeds,
    })
}

// ---------------------------------------------------------------------------
// Sweeps
// ---------------------------------------------------------------------------

/// Mean and sample standard deviation across seeds for one strategy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub strategy: StrategyKind,
    pub runs: usize,
    pub detection_ratio_mean: f64,
    pub detection_ratio_sd: f64,
    pub mean_detection_lag_mean: Option<f64>,
    pub mean_detection_lag_sd: Option<f64>,
    pub false_virtual_detections_mean: f64,
    pub false_virtual_detections_sd: f64,
    pub real_sessions_per_device_per_round_mean: f64,
    pub real_sessions_per_device_per_round_sd: f64,
    pub distinct_destinations_covered_per_device_mean: f64,
    pub distinct_destinations_covered_per_device_sd: f64,
    pub messages_total_mean: f64,
    pub messages_total_sd: f64,
}

/// Flat per-run row as written to `results.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub strategy: StrategyKind,
    pub seed: u64,
    pub rounds: u64,
    pub devices: usize,
    pub violation_rounds: u64,
    pub true_detections: u64,
    pub missed_violations: u64,
    pub false_virtual_detections: u64,
    pub virtual_false_negatives: u64,
    pub detection_ratio: f64,
    pub violation_episodes: u64,
    pub detected_episodes: u64,
    pub mean_detection_lag: Option<f64>,
    pub real_sessions_per_device_per_round: f64,
    pub distinct_destinations_covered_per_device: f64,
    pub max_real_sessions: usize,
    pub max_virtual_sessions: usize,
    pub global_session_bound: usize,
    pub peak_global_sessions: usize,
    pub mean_peers: f64,
    pub messages_report: u64,
    pub messages_advertisement: u64,
    pub messages_coordination: u64,
    pub messages_dropped: u64,
}

impl ResultRow {
    pub fn messages_total(&self) -> u64 {
        self.messages_report + self.messages_advertisement + self.messages_coordination
    }
}

impl From<&MetricsReport> for ResultRow {
    fn from(r: &MetricsReport) -> Self {
        Self {
            strategy: r.strategy,
            seed: r.seed,
            rounds: r.rounds,
            devices: r.devices,
            violation_rounds: r.violation_rounds,
            true_detections: r.true_detections,
            missed_violations: r.missed_violations,
            false_virtual_detections: r.false_virtual_detections,
            virtual_false_negatives: r.virtual_false_negatives,
            detection_ratio: r.detection_ratio,
            violation_episodes: r.violation_episodes,
            detected_episodes: r.detected_episodes,
            mean_detection_lag: r.mean_detection_lag,
            real_sessions_per_device_per_round: r.real_sessions_per_device_per_round,
            distinct_destinations_covered_per_device: r.distinct_destinations_covered_per_device,
            max_real_sessions: r.max_real_sessions,
            max_virtual_sessions: r.max_virtual_sessions,
            global_session_bound: r.global_session_bound,
            peak_global_sessions: r.peak_global_sessions,
            mean_peers: r.mean_peers,
            messages_report: r.messages.report,
            messages_advertisement: r.messages.advertisement,
            messages_coordination: r.messages.coordination,
            messages_dropped: r.messages.dropped,
        }
    }
}

/// Column order of `results.csv`.
pub const RESULT_COLUMNS: &[&str] = &[
    "strategy",
    "seed",
    "rounds",
    "devices",
    "violation_rounds",
    "true_detections",
    "missed_violations",
    "false_virtual_detections",
    "virtual_false_negatives",
    "detection_ratio",
    "violation_episodes",
    "detected_episodes",
    "mean_detection_lag",
    "real_sessions_per_device_per_round",
    "distinct_destinations_covered_per_device",
    "max_real_sessions",
    "max_virtual_sessions",
    "global_session_bound",
    "peak_global_sessions",
    "mean_peers",
    "messages_report",
    "messages_advertisement",
    "messages_coordination",
    "messages_dropped",
];

fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let m = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (m, 0.0);
    }
    let var = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, var.sqrt())
}

/// Aggregates per-run rows by strategy, in order of first appearance.
pub fn aggregate(rows: &[ResultRow]) -> Vec<AggregateRow> {
    let mut order = Vec::new();
    let mut by: BTreeMap<StrategyKind, Vec<&ResultRow>> = BTreeMap::new();
    for r in rows {
        if !by.contains_key(&r.strategy) {
            order.push(r.strategy);
        }
        by.entry(r.strategy).or_default().push(r);
    }
    order
        .into_iter()
        .map(|k| {
            let rs = &by[&k];
            let col = |f: &dyn Fn(&ResultRow) -> f64| mean_sd(&rs.iter().map(|r| f(r)).collect::<Vec<_>>());
            let lags: Vec<f64> = rs.iter().filter_map(|r| r.mean_detection_lag).collect();
            let (lag_m, lag_sd) = mean_sd(&lags);
            let (dr_m, dr_sd) = col(&|r| r.detection_ratio);
            let (fv_m, fv_sd) = col(&|r| r.false_virtual_detections as f64);
            let (rs_m, rs_sd) = col(&|r| r.real_sessions_per_device_per_round);
            let (cv_m, cv_sd) = col(&|r| r.distinct_destinations_covered_per_device);
            let (mt_m, mt_sd) = col(&|r| r.messages_total() as f64);
            AggregateRow {
                strategy: k,
                runs: rs.len(),
                detection_ratio_mean: dr_m,
                detection_ratio_sd: dr_sd,
                mean_detection_lag_mean: (!lags.is_empty()).then_some(lag_m),
                mean_detection_lag_sd: (!lags.is_empty()).then_some(lag_sd),
                false_virtual_detections_mean: fv_m,
                false_virtual_detections_sd: fv_sd,
                real_sessions_per_device_per_round_mean: rs_m,
                real_sessions_per_device_per_round_sd: rs_sd,
                distinct_destinations_covered_per_device_mean: cv_m,
                distinct_destinations_covered_per_device_sd: cv_sd,
                messages_total_mean: mt_m,
                messages_total_sd: mt_sd,
            }
        })
        .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct MatrixResult {
    pub reports: Vec<MetricsReport>,
    pub aggregates: Vec<AggregateRow>,
    #[serde(skip)]
    pub traces: Vec<(StrategyKind, u64, String)>,
}

impl MatrixResult {
    pub fn rows(&self) -> Vec<ResultRow> {
        self.reports.iter().map(ResultRow::from).collect()
    }
}

/// Runs every (strategy, seed) pair of the config on `jobs` worker threads.
pub fn run_matrix(config: &ScenarioConfig, jobs: usize, trace: bool) -> Result<MatrixResult, ConfigError> {
    config.validate()?;
    let runs: Vec<(StrategyKind, u64)> = config
        .strategies
        .iter()
        .flat_map(|&k| config.seeds.iter().map(move |&s| (k, s)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .expect("thread pool");
    let outputs = pool.install(|| {
        runs.par_iter()
            .map(|&(k, s)| simnet::run(&config.scenario, k, s, trace))
            .collect::<Result<Vec<_>, _>>()
    })?;
    let mut reports = Vec::with_capacity(outputs.len());
    let mut traces = Vec::new();
    for ((k, s), out) in runs.into_iter().zip(outputs) {
        if let Some(t) = out.trace {
            traces.push((k, s, t));
        }
        reports.push(out.report);
    }
    let rows: Vec<_> = reports.iter().map(ResultRow::from).collect();
    Ok(MatrixResult {
        aggregates: aggregate(&rows),
        reports,
        traces,
    })
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> ConfigError + '_ {
    move |source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn write_results_csv<W: io::Write>(rows: &[ResultRow], out: W) -> Result<(), ConfigError> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    if rows.is_empty() {
        w.write_record(RESULT_COLUMNS)?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn write_aggregate_csv<W: io::Write>(rows: &[AggregateRow], out: W) -> Result<(), ConfigError> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn read_results_csv(path: &Path) -> Result<Vec<ResultRow>, ConfigError> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<Result<Vec<ResultRow>, _>>()?)
}

/// Writes `results.csv`, `aggregate.csv`, `summary.json` and, when traces
/// were recorded, `traces/<strategy>_<seed>.csv` under `dir`.
pub fn write_outputs(result: &MatrixResult, dir: &Path) -> Result<Vec<PathBuf>, ConfigError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut written = Vec::new();

    let p = dir.join("results.csv");
    write_results_csv(&result.rows(), fs::File::create(&p).map_err(io_err(&p))?)?;
    written.push(p);

    let p = dir.join("aggregate.csv");
    write_aggregate_csv(&result.aggregates, fs::File::create(&p).map_err(io_err(&p))?)?;
    written.push(p);

    let p = dir.join("summary.json");
    let mut json = serde_json::to_string_pretty(result)?;
    json.push('\n');
    fs::write(&p, json).map_err(io_err(&p))?;
    written.push(p);

    if !result.traces.is_empty() {
        let tdir = dir.join("traces");
        fs::create_dir_all(&tdir).map_err(io_err(&tdir))?;
        for (k, s, t) in &result.traces {
            let p = tdir.join(format!("{k}_{s}.csv"));
            fs::write(&p, t).map_err(io_err(&p))?;
            written.push(p);
        }
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
[slo]
threshold = 100.0

[[groups]]
name = "a"
delta = 80.0

[[devices]]
id = 0
destinations = [1, 2]
group = "a"
base_latency = 50.0
"#;

    #[test]
    fn minimal_file_gets_defaults() {
        let c = parse_scenario(MINIMAL).unwrap();
        let s = &c.scenario;
        assert_eq!(s.window, 20);
        assert_eq!(s.rank.discount, 0.95);
        assert_eq!((s.rank.proximity_weight, s.rank.staleness_weight), (1.0, 1.0));
        assert_eq!(s.overlay.min_correlation, 0.7);
        assert_eq!(s.overlay.max_peers, 4);
        assert_eq!(s.overlay.min_shared_samples, 5);
        assert_eq!(s.overlay.topology_period, 10);
        assert_eq!(
            s.budget,
            SessionBudget {
                local_max: 1,
                virtual_max: 0
            }
        );
        assert_eq!(s.rounds, 100);
        assert_eq!(c.strategies, vec![StrategyKind::Local]);
        assert_eq!(c.seeds, vec![0]);
        assert_eq!(s.slo.direction(), Direction::ViolatedAbove);
    }

    #[test]
    fn unknown_field_is_named() {
        let text = MINIMAL.replace("threshold = 100.0", "threshold = 100.0\nthreshhold = 3");
        let e = parse_scenario(&text).unwrap_err();
        let msg = e.to_string();
        assert!(msg.contains("threshhold"), "{msg}");
        assert!(matches!(e, ConfigError::Parse { line: 4, .. }), "{e:?}");
    }

    #[test]
    fn zero_local_budget_rejected() {
        let text = format!("{MINIMAL}\n[budget]\nlocal_max = 0\n");
        let e = parse_scenario(&text).unwrap_err();
        assert!(
            matches!(&e, ConfigError::Validation { path, .. } if path == "budget.local_max"),
            "{e}"
        );
    }

    #[test]
    fn empty_strategy_list_rejected() {
        let text = format!("strategies = []\n{MINIMAL}");
        let e = parse_scenario(&text).unwrap_err();
        assert!(
            matches!(&e, ConfigError::Validation { path, .. } if path == "strategies"),
            "{e}"
        );
    }

    #[test]
    fn unknown_references_rejected() {
        let text = MINIMAL.replace("group = \"a\"", "group = \"zz\"");
        let e = parse_scenario(&text).unwrap_err();
        assert!(
            matches!(&e, ConfigError::Validation { path, .. } if path == "devices[0].group"),
            "{e}"
        );

        let text = format!("{MINIMAL}\n[[paths]]\ndevice = 0\ndestination = 9\n");
        let e = parse_scenario(&text).unwrap_err();
        assert!(
            matches!(&e, ConfigError::Validation { path, .. } if path == "paths[0]"),
            "{e}"
        );

        let text = MINIMAL.replace("base_latency = 50.0", "base_latency = 50.0\nneighbors = [5]");
        let e = parse_scenario(&text).unwrap_err();
        assert!(e.to_string().contains("devices[0].neighbors[0]"), "{e}");
    }

    #[test]
    fn path_overrides_apply() {
        let text = format!(
            "{MINIMAL}\n[[groups]]\nname = \"b\"\ndelta = 90.0\n\n[[paths]]\ndevice = 0\ndestination = 2\ngroup = \"b\"\nnoise_sd = 4.0\n"
        );
        let c = parse_scenario(&text).unwrap();
        let p = &c.scenario.paths[&(DeviceId(0), DestinationId(2))];
        assert_eq!((p.group, p.noise_sd, p.base_latency), (1, 4.0, 50.0));
    }

    #[test]
    fn parse_error_has_line() {
        let e = parse_scenario("rounds = 10\n[slo\n").unwrap_err();
        assert!(matches!(e, ConfigError::Parse { line: 2, .. }), "{e:?}");
    }

    #[test]
    fn aggregate_counts_and_stats() {
        let text = format!("strategies = [\"local\", \"random\"]\nseeds = [1, 2, 3]\nrounds = 20\n{MINIMAL}");
        let c = parse_scenario(&text).unwrap();
        let m = run_matrix(&c, 2, false).unwrap();
        assert_eq!(m.reports.len(), 6);
        assert_eq!(m.aggregates.len(), 2);
        let order: Vec<_> = m.reports.iter().map(|r| (r.strategy, r.seed)).collect();
        assert_eq!(order[0], (StrategyKind::Local, 1));
        assert_eq!(order[5], (StrategyKind::RandomBaseline, 3));
        assert_eq!(mean_sd(&[1.0, 2.0, 3.0]), (2.0, 1.0));
    }
}
