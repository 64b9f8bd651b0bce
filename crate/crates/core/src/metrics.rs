//! Policy-evaluation metrics: success rate, SPL, sim-real correlation,
//! trajectory DTW, fluid containment and tiered generalization reports.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::{self, Write as _};
use std::io::Read;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Aabb, Vec3};
use crate::ply::read_ply;

/// Two-sided 95% normal quantile.
pub const Z_95: f64 = 1.959964;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("empty episode set")]
    Empty,
    #[error("episode {0} lacks a shortest or actual path length")]
    MissingPathLength(usize),
    #[error("episode {0} has a negative or non-finite path length")]
    InvalidPathLength(usize),
    #[error("need at least 3 pairs, got {0}")]
    TooFewPairs(usize),
    #[error("rate {0} outside [0, 1]")]
    RateOutOfRange(f64),
    #[error("zero variance in {0} coordinate")]
    ZeroVariance(&'static str),
    #[error("paired series differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("empty trajectory")]
    EmptyTrajectory,
    #[error("empty particle set")]
    EmptyParticles,
    #[error("threshold {0} outside (0, 1)")]
    InvalidThreshold(f64),
    #[error("line {line}: {message}")]
    Csv { line: u64, message: String },
    #[error("trajectory {path}: {message}")]
    Trajectory { path: PathBuf, message: String },
    #[error("no (method, tier) cell has both sim and real episodes")]
    NoSimRealPairs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Tier {
    Train,
    UnseenScene,
    UnseenObject,
    UnseenSceneObject,
}

impl Tier {
    pub const ALL: [Tier; 4] = [Tier::Train, Tier::UnseenScene, Tier::UnseenObject, Tier::UnseenSceneObject];

    pub fn name(self) -> &'static str {
        match self {
            Tier::Train => "Train",
            Tier::UnseenScene => "UnseenScene",
            Tier::UnseenObject => "UnseenObject",
            Tier::UnseenSceneObject => "UnseenSceneObject",
        }
    }
}

impl fmt::Display for Tier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Tier {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Tier::ALL
            .into_iter()
            .find(|t| t.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| format!("unknown tier {s:?}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Sim,
    Real,
}

impl FromStr for Domain {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "sim" => Ok(Domain::Sim),
            "real" => Ok(Domain::Real),
            _ => Err(format!("unknown domain {s:?}")),
        }
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Domain::Sim => "sim",
            Domain::Real => "real",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub task: String,
    pub tier: Tier,
    pub success: bool,
    pub shortest_len: Option<f64>,
    pub actual_len: Option<f64>,
    pub trajectory: Option<Vec<Vec3>>,
    /// Trajectory file as written in the episode log, if any.
    pub traj_file: Option<String>,
    pub method: Option<String>,
    pub domain: Option<Domain>,
}

impl EpisodeRecord {
    pub fn new(task: impl Into<String>, tier: Tier, success: bool) -> Self {
        Self {
            task: task.into(),
            tier,
            success,
            shortest_len: None,
            actual_len: None,
            trajectory: None,
            traj_file: None,
            method: None,
            domain: None,
        }
    }

    pub fn with_paths(mut self, shortest: f64, actual: f64) -> Self {
        self.shortest_len = Some(shortest);
        self.actual_len = Some(actual);
        self
    }
}

pub fn success_rate(episodes: &[EpisodeRecord]) -> Result<f64, MetricsError> {
    if episodes.is_empty() {
        return Err(MetricsError::Empty);
    }
    Ok(episodes.iter().filter(|e| e.success).count() as f64 / episodes.len() as f64)
}

/// Success weighted by path length, `(1/N) Σ Sᵢ lᵢ / max(pᵢ, lᵢ)`.
pub fn spl(episodes: &[EpisodeRecord]) -> Result<f64, MetricsError> {
    if episodes.is_empty() {
        return Err(MetricsError::Empty);
    }
    let mut total = 0.0;
    for (i, e) in episodes.iter().enumerate() {
        let (Some(l), Some(p)) = (e.shortest_len, e.actual_len) else {
            return Err(MetricsError::MissingPathLength(i));
        };
        if !(l >= 0.0 && p >= 0.0 && l.is_finite() && p.is_finite()) {
            return Err(MetricsError::InvalidPathLength(i));
        }
        let denom = p.max(l);
        if e.success {
            // A zero-length optimal path reached with zero travel is perfect.
            total += if denom > 0.0 { l / denom } else { 1.0 };
        }
    }
    Ok(total / episodes.len() as f64)
}

/// Validated paired success rates.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationInput(Vec<(f64, f64)>);

impl CorrelationInput {
    pub fn new(pairs: Vec<(f64, f64)>) -> Result<Self, MetricsError> {
        if pairs.len() < 3 {
            return Err(MetricsError::TooFewPairs(pairs.len()));
        }
        for &(x, y) in &pairs {
            for v in [x, y] {
                if !(0.0..=1.0).contains(&v) {
                    return Err(MetricsError::RateOutOfRange(v));
                }
            }
        }
        Ok(Self(pairs))
    }

    pub fn pairs(&self) -> &[(f64, f64)] {
        &self.0
    }
}

pub fn pearson(input: &CorrelationInput) -> Result<f64, MetricsError> {
    let (x, y): (Vec<f64>, Vec<f64>) = input.0.iter().copied().unzip();
    pearson_r(&x, &y)
}

/// Sample Pearson correlation of two equal-length series.
pub fn pearson_r(x: &[f64], y: &[f64]) -> Result<f64, MetricsError> {
    if x.len() != y.len() {
        return Err(MetricsError::LengthMismatch(x.len(), y.len()));
    }
    if x.len() < 3 {
        return Err(MetricsError::TooFewPairs(x.len()));
    }
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    // Spread below rounding of the mean counts as constant.
    let flat = |ss: f64, v: &[f64]| ss <= 1e-28 * v.iter().map(|a| a * a).sum::<f64>();
    if flat(sxx, x) {
        return Err(MetricsError::ZeroVariance("x"));
    }
    if flat(syy, y) {
        return Err(MetricsError::ZeroVariance("y"));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum DtwNormalization {
    /// Total cost along the optimal warping path.
    #[default]
    None,
    /// Total cost divided by `len(a) + len(b)`.
    PerStep,
}

/// Dynamic time warping with Euclidean point cost and steps
/// (1,0), (0,1), (1,1); unnormalized total cost.
pub fn dtw(a: &[Vec3], b: &[Vec3]) -> Result<f64, MetricsError> {
    dtw_with(a, b, DtwNormalization::None)
}

pub fn dtw_with(a: &[Vec3], b: &[Vec3], norm: DtwNormalization) -> Result<f64, MetricsError> {
    if a.is_empty() || b.is_empty() {
        return Err(MetricsError::EmptyTrajectory);
    }
    let m = b.len();
    let mut prev = vec![f64::INFINITY; m + 1];
    let mut cur = vec![f64::INFINITY; m + 1];
    prev[0] = 0.0;
    for pa in a {
        cur[0] = f64::INFINITY;
        for j in 1..=m {
            let cost = (pa - b[j - 1]).norm();
            cur[j] = cost + prev[j].min(cur[j - 1]).min(prev[j - 1]);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    let total = prev[m];
    Ok(match norm {
        DtwNormalization::None => total,
        DtwNormalization::PerStep => total / (a.len() + m) as f64,
    })
}

/// True iff strictly more than `threshold` of the particles lie in the
/// receptacle box (boundary counts as inside).
pub fn fluid_containment_success(particles: &[Vec3], receptacle: &Aabb, threshold: f64) -> Result<bool, MetricsError> {
    if particles.is_empty() {
        return Err(MetricsError::EmptyParticles);
    }
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(MetricsError::InvalidThreshold(threshold));
    }
    let inside = particles.iter().filter(|p| receptacle.contains(p)).count();
    Ok(inside as f64 / particles.len() as f64 > threshold)
}

/// Wilson score interval for `successes` out of `n` trials.
pub fn wilson_interval(successes: usize, n: usize, z: f64) -> (f64, f64) {
    if n == 0 {
        return (0.0, 1.0);
    }
    let n = n as f64;
    let p = successes as f64 / n;
    let z2 = z * z;
    let denom = 1.0 + z2 / n;
    let center = (p + z2 / (2.0 * n)) / denom;
    let half = z * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt() / denom;
    ((center - half).max(0.0), (center + half).min(1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ReportCell {
    pub successes: usize,
    pub trials: usize,
    pub success_rate: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

impl ReportCell {
    fn from_counts(successes: usize, trials: usize) -> Self {
        let (ci_low, ci_high) = wilson_interval(successes, trials, Z_95);
        Self {
            successes,
            trials,
            success_rate: successes as f64 / trials as f64,
            ci_low,
            ci_high,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub struct RowKey {
    pub task: String,
    pub method: Option<String>,
    pub domain: Option<Domain>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportRow {
    pub key: RowKey,
    /// Indexed in [`Tier::ALL`] order.
    pub cells: [Option<ReportCell>; 4],
}

/// Success rate per (task, tier), with method and domain splitting rows
/// when the records carry them.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GeneralizationReport {
    pub rows: Vec<ReportRow>,
    pub has_method: bool,
    pub has_domain: bool,
}

pub fn generalization_report(episodes: &[EpisodeRecord]) -> GeneralizationReport {
    let mut counts: BTreeMap<RowKey, [(usize, usize); 4]> = BTreeMap::new();
    for e in episodes {
        let key = RowKey {
            task: e.task.clone(),
            method: e.method.clone(),
            domain: e.domain,
        };
        let slot = &mut counts.entry(key).or_default()[e.tier as usize];
        slot.0 += e.success as usize;
        slot.1 += 1;
    }
    let rows = counts
        .into_iter()
        .map(|(key, c)| ReportRow {
            key,
            cells: c.map(|(s, n)| (n > 0).then(|| ReportCell::from_counts(s, n))),
        })
        .collect();
    GeneralizationReport {
        rows,
        has_method: episodes.iter().any(|e| e.method.is_some()),
        has_domain: episodes.iter().any(|e| e.domain.is_some()),
    }
}

impl GeneralizationReport {
    fn label_columns(&self) -> Vec<&'static str> {
        let mut cols = vec!["task"];
        if self.has_method {
            cols.push("method");
        }
        if self.has_domain {
            cols.push("domain");
        }
        cols
    }

    fn labels(&self, key: &RowKey) -> Vec<String> {
        let mut out = vec![key.task.clone()];
        if self.has_method {
            out.push(key.method.clone().unwrap_or_default());
        }
        if self.has_domain {
            out.push(key.domain.map(|d| d.to_string()).unwrap_or_default());
        }
        out
    }

    pub fn cell(&self, task: &str, tier: Tier) -> Option<ReportCell> {
        self.rows.iter().find(|r| r.key.task == task).and_then(|r| r.cells[tier as usize])
    }

    /// Wide CSV: label columns then one success-rate column per tier; cells
    /// without episodes are left empty.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header: Vec<String> = self.label_columns().iter().map(|s| s.to_string()).collect();
        header.extend(Tier::ALL.iter().map(|t| t.name().to_string()));
        w.write_record(&header).expect("in-memory write");
        for row in &self.rows {
            let mut rec = self.labels(&row.key);
            rec.extend(row.cells.iter().map(|c| c.map(|c| format!("{:.4}", c.success_rate)).unwrap_or_default()));
            w.write_record(&rec).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
    }

    /// Aligned plain-text table with Wilson 95% intervals.
    pub fn to_text(&self) -> String {
        let mut header: Vec<String> = self.label_columns().iter().map(|s| s.to_string()).collect();
        header.extend(Tier::ALL.iter().map(|t| t.name().to_string()));
        let mut table = vec![header];
        for row in &self.rows {
            let mut line = self.labels(&row.key);
            line.extend(row.cells.iter().map(|c| match c {
                Some(c) => format!("{:.2} [{:.2},{:.2}] n={}", c.success_rate, c.ci_low, c.ci_high, c.trials),
                None => "-".to_string(),
            }));
            table.push(line);
        }
        let widths: Vec<usize> = (0..table[0].len())
            .map(|k| table.iter().map(|r| r[k].chars().count()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for line in &table {
            let cells: Vec<String> = line.iter().zip(&widths).map(|(c, w)| format!("{c:<w$}")).collect();
            writeln!(out, "{}", cells.join("  ").trim_end()).expect("string write");
        }
        out
    }
}

/// One (method, tier) point of the sim-real scatter.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimRealPoint {
    pub method: String,
    pub tier: Tier,
    /// Task name, or `None` for the average over tasks.
    pub task: Option<String>,
    pub sim: f64,
    pub real: f64,
}

type CellKey = (String, Tier, String);

fn domain_rates(episodes: &[EpisodeRecord], domain: Domain) -> BTreeMap<CellKey, f64> {
    let mut counts: BTreeMap<CellKey, (usize, usize)> = BTreeMap::new();
    for e in episodes.iter().filter(|e| e.domain == Some(domain)) {
        let key = (e.method.clone().unwrap_or_default(), e.tier, e.task.clone());
        let c = counts.entry(key).or_default();
        c.0 += e.success as usize;
        c.1 += 1;
    }
    counts.into_iter().map(|(k, (s, n))| (k, s as f64 / n as f64)).collect()
}

/// Per (method, tier, task) sim and real success rates where both exist.
pub fn sim_real_points_per_task(episodes: &[EpisodeRecord]) -> Vec<SimRealPoint> {
    let sim = domain_rates(episodes, Domain::Sim);
    let real = domain_rates(episodes, Domain::Real);
    sim.iter()
        .filter_map(|(k, &s)| {
            real.get(k).map(|&r| SimRealPoint {
                method: k.0.clone(),
                tier: k.1,
                task: Some(k.2.clone()),
                sim: s,
                real: r,
            })
        })
        .collect()
}

/// Task-averaged sim and real success rates per (method, tier).
pub fn sim_real_points(episodes: &[EpisodeRecord]) -> Vec<SimRealPoint> {
    let mut groups: BTreeMap<(String, Tier), Vec<(f64, f64)>> = BTreeMap::new();
    for p in sim_real_points_per_task(episodes) {
        groups.entry((p.method, p.tier)).or_default().push((p.sim, p.real));
    }
    groups
        .into_iter()
        .map(|((method, tier), v)| {
            let n = v.len() as f64;
            SimRealPoint {
                method,
                tier,
                task: None,
                sim: v.iter().map(|p| p.0).sum::<f64>() / n,
                real: v.iter().map(|p| p.1).sum::<f64>() / n,
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CorrelationSummary {
    /// Pearson r over task-averaged (method, tier) points.
    pub r_task_averaged: f64,
    pub points_task_averaged: usize,
    /// Pearson r over every (method, tier, task) point.
    pub r_per_task: Option<f64>,
    pub points_per_task: usize,
    pub points: Vec<SimRealPoint>,
}

pub fn sim_real_correlation(episodes: &[EpisodeRecord]) -> Result<CorrelationSummary, MetricsError> {
    let points = sim_real_points(episodes);
    if points.is_empty() {
        return Err(MetricsError::NoSimRealPairs);
    }
    let averaged = CorrelationInput::new(points.iter().map(|p| (p.sim, p.real)).collect())?;
    let per_task = sim_real_points_per_task(episodes);
    let r_per_task = CorrelationInput::new(per_task.iter().map(|p| (p.sim, p.real)).collect())
        .and_then(|c| pearson(&c))
        .ok();
    Ok(CorrelationSummary {
        r_task_averaged: pearson(&averaged)?,
        points_task_averaged: points.len(),
        r_per_task,
        points_per_task: per_task.len(),
        points,
    })
}

#[derive(Debug, Deserialize)]
struct EpisodeRow {
    task: String,
    tier: String,
    success: String,
    #[serde(default)]
    shortest_len: Option<String>,
    #[serde(default)]
    actual_len: Option<String>,
    #[serde(default)]
    traj_file: Option<String>,
    #[serde(default)]
    method: Option<String>,
    #[serde(default)]
    domain: Option<String>,
}

fn nonempty(s: Option<String>) -> Option<String> {
    s.map(|v| v.trim().to_string()).filter(|v| !v.is_empty())
}

fn parse_bool(s: &str) -> Result<bool, String> {
    match s.trim().to_ascii_lowercase().as_str() {
        "1" | "true" | "yes" => Ok(true),
        "0" | "false" | "no" => Ok(false),
        other => Err(format!("invalid success flag {other:?}")),
    }
}

fn parse_len(s: Option<String>, field: &str) -> Result<Option<f64>, String> {
    match nonempty(s) {
        None => Ok(None),
        Some(v) => {
            let x: f64 = v.parse().map_err(|_| format!("invalid {field} {v:?}"))?;
            if !(x >= 0.0 && x.is_finite()) {
                return Err(format!("{field} must be a non-negative number, got {v}"));
            }
            Ok(Some(x))
        }
    }
}

/// Parses an episode log (`task,tier,success,shortest_len,actual_len,traj_file`
/// plus optional `method` and `domain`). Errors carry the 1-based line.
pub fn parse_episodes_csv<R: Read>(reader: R) -> Result<Vec<EpisodeRecord>, MetricsError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| MetricsError::Csv {
            line: 1,
            message: e.to_string(),
        })?
        .clone();
    for required in ["task", "tier", "success"] {
        if !headers.iter().any(|h| h == required) {
            return Err(MetricsError::Csv {
                line: 1,
                message: format!("missing column {required:?}"),
            });
        }
    }
    let mut out = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(|e| MetricsError::Csv {
            line: e.position().map_or(0, |p| p.line()),
            message: e.to_string(),
        })?;
        let line = record.position().map_or(0, |p| p.line());
        let fail = |message: String| MetricsError::Csv { line, message };
        let row: EpisodeRow = record.deserialize(Some(&headers)).map_err(|e| fail(e.to_string()))?;
        let tier: Tier = row.tier.parse().map_err(fail)?;
        let success = parse_bool(&row.success).map_err(fail)?;
        let domain = nonempty(row.domain).map(|d| d.parse::<Domain>()).transpose().map_err(fail)?;
        if row.task.is_empty() {
            return Err(fail("empty task".into()));
        }
        out.push(EpisodeRecord {
            task: row.task,
            tier,
            success,
            shortest_len: parse_len(row.shortest_len, "shortest_len").map_err(fail)?,
            actual_len: parse_len(row.actual_len, "actual_len").map_err(fail)?,
            trajectory: None,
            traj_file: nonempty(row.traj_file),
            method: nonempty(row.method),
            domain,
        });
    }
    Ok(out)
}

pub fn episodes_to_csv(episodes: &[EpisodeRecord]) -> String {
    let has_method = episodes.iter().any(|e| e.method.is_some());
    let has_domain = episodes.iter().any(|e| e.domain.is_some());
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["task", "tier", "success", "shortest_len", "actual_len", "traj_file"];
    if has_method {
        header.push("method");
    }
    if has_domain {
        header.push("domain");
    }
    w.write_record(&header).expect("in-memory write");
    let num = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for e in episodes {
        let mut rec = vec![
            e.task.clone(),
            e.tier.to_string(),
            (e.success as u8).to_string(),
            num(e.shortest_len),
            num(e.actual_len),
            e.traj_file.clone().unwrap_or_default(),
        ];
        if has_method {
            rec.push(e.method.clone().unwrap_or_default());
        }
        if has_domain {
            rec.push(e.domain.map(|d| d.to_string()).unwrap_or_default());
        }
        w.write_record(&rec).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
}

/// Reads a trajectory stored as a JSON array of `[x, y, z]` or as PLY vertices.
pub fn read_trajectory(path: &Path) -> Result<Vec<Vec3>, MetricsError> {
    let fail = |message: String| MetricsError::Trajectory {
        path: path.to_path_buf(),
        message,
    };
    let is_ply = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("ply"));
    if is_ply {
        return read_ply(path).map(|p| p.cloud.points).map_err(|e| fail(e.to_string()));
    }
    let text = std::fs::read_to_string(path).map_err(|e| fail(e.to_string()))?;
    let raw: Vec<[f64; 3]> = serde_json::from_str(&text).map_err(|e| fail(e.to_string()))?;
    Ok(raw.into_iter().map(Vec3::from).collect())
}

/// Loads `traj_file` trajectories relative to `base_dir`.
pub fn load_trajectories(episodes: &mut [EpisodeRecord], base_dir: &Path) -> Result<(), MetricsError> {
    for e in episodes.iter_mut() {
        if let Some(f) = &e.traj_file {
            e.trajectory = Some(read_trajectory(&base_dir.join(f))?);
        }
    }
    Ok(())
}

/// Distinct task names, sorted.
pub fn tasks(episodes: &[EpisodeRecord]) -> BTreeSet<String> {
    episodes.iter().map(|e| e.task.clone()).collect()
}
