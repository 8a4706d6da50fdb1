//! Seeded experiment harness.
//!
//! Every kind produces a [`Report`]: one row per trial and measured arm,
//! grouped means with normal-approximation 95% intervals, the assumption
//! verdicts of every model used, and named pass/fail checks. Reports carry no
//! timestamps or paths, so rerunning a config gives byte-identical files.

mod checks;
mod sweeps;

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::assumptions::Verdict;
use crate::downstream::Splits;
use crate::io::Model;
use crate::linalg::RANK_TOL;
use crate::par::Exec;
use crate::rng::{derive_seed, tags};
use crate::tuning::TrainConfig;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ExperimentKind {
    /// Message passing against brute-force enumeration.
    #[serde(rename = "oracle-test")]
    OracleTest,
    /// Constructed linear head on the masked-first feature.
    #[serde(rename = "theorem-1")]
    Theorem1,
    /// Constructed prompt and head on a model with rank-deficient emissions.
    #[serde(rename = "theorem-2")]
    Theorem2,
    /// Constructed attention head on a memory-augmented model.
    #[serde(rename = "theorem-3")]
    Theorem3,
    /// Constructed prompt plus attention head on a memory-augmented model.
    #[serde(rename = "theorem-4")]
    Theorem4,
    /// Prompt-fed oracle against the fake-token model.
    #[serde(rename = "fake-token")]
    FakeToken,
    /// Posterior time-shift proportionality.
    #[serde(rename = "time-shift")]
    TimeShift,
    /// Analytic prompt gradient against central differences.
    #[serde(rename = "grad-check")]
    GradCheck,
    #[serde(rename = "sweep-head-vs-prompt")]
    SweepHeadVsPrompt,
    #[serde(rename = "sweep-memory")]
    SweepMemory,
}

impl ExperimentKind {
    pub const ALL: [ExperimentKind; 10] = [
        Self::OracleTest,
        Self::Theorem1,
        Self::Theorem2,
        Self::Theorem3,
        Self::Theorem4,
        Self::FakeToken,
        Self::TimeShift,
        Self::GradCheck,
        Self::SweepHeadVsPrompt,
        Self::SweepMemory,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::OracleTest => "oracle-test",
            Self::Theorem1 => "theorem-1",
            Self::Theorem2 => "theorem-2",
            Self::Theorem3 => "theorem-3",
            Self::Theorem4 => "theorem-4",
            Self::FakeToken => "fake-token",
            Self::TimeShift => "time-shift",
            Self::GradCheck => "grad-check",
            Self::SweepHeadVsPrompt => "sweep-head-vs-prompt",
            Self::SweepMemory => "sweep-memory",
        }
    }
}

impl fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ExperimentKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown experiment kind {s:?}")))
    }
}

/// Shape of a memory-augmented model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MemCase {
    pub n_cells: usize,
    pub mem_size: usize,
    pub syntax_size: usize,
}

impl MemCase {
    pub const fn new(n_cells: usize, mem_size: usize, syntax_size: usize) -> Self {
        Self { n_cells, mem_size, syntax_size }
    }

    pub fn n_hidden(&self) -> usize {
        self.n_cells * self.syntax_size
    }

    fn label(&self) -> String {
        format!("N{}_M{}_S{}", self.n_cells, self.mem_size, self.syntax_size)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Thresholds {
    /// Largest allowed absolute difference for exact equivalences.
    pub max_abs_error: f64,
    /// Largest allowed `|1 - cosine|` for proportionality checks.
    pub cosine_tol: f64,
    pub grad_rel_tol: f64,
    /// Denominator floor of the gradient relative error.
    pub grad_rel_floor: f64,
    pub fd_step: f64,
    /// Sequences with `|q . p| <= margin` are excluded from agreement counts.
    pub margin: f64,
    pub rank_tol: f64,
    /// Smallest mean attention accuracy in the memory sweep.
    pub min_accuracy: f64,
    /// Smallest prompt minus head gap at `gap_size`.
    pub min_gap: f64,
    /// Sizes at which the prompt mean must be at least the head mean.
    pub trend_sizes: Vec<usize>,
    pub gap_size: usize,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            max_abs_error: 1e-10,
            cosine_tol: 1e-10,
            grad_rel_tol: 1e-4,
            grad_rel_floor: 1e-6,
            fd_step: 1e-5,
            margin: 1e-9,
            rank_tol: RANK_TOL,
            min_accuracy: 0.95,
            min_gap: 0.03,
            trend_sizes: vec![15, 25, 30],
            gap_size: 30,
        }
    }
}

/// JSON experiment configuration. Unset fields take per-kind defaults; see
/// [`ExperimentConfig::resolve`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    #[serde(default)]
    pub seed: u64,
    /// Models per size for theorem kinds, instances for checks, trials per size for sweeps.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trials: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hidden_sizes: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mem_cases: Option<Vec<MemCase>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_vocab: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub h_star_size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seq_len: Option<usize>,
    /// Sequences per model (prompts per instance for `fake-token`).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sequences: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub splits: Option<Splits>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<TrainConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub thresholds: Option<Thresholds>,
    /// Report directory; not part of the report itself.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
}

/// Fully resolved settings, embedded in every report.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Settings {
    pub kind: ExperimentKind,
    pub seed: u64,
    pub trials: usize,
    pub hidden_sizes: Vec<usize>,
    pub mem_cases: Vec<MemCase>,
    pub n_vocab: usize,
    pub h_star_size: usize,
    pub seq_len: usize,
    pub sequences: usize,
    pub splits: Splits,
    pub train: TrainConfig,
    pub thresholds: Thresholds,
}

struct KindDefaults {
    trials: usize,
    hidden_sizes: &'static [usize],
    mem_cases: &'static [MemCase],
    n_vocab: usize,
    seq_len: usize,
    sequences: usize,
}

const THM3_CASES: [MemCase; 2] = [MemCase::new(1, 2, 4), MemCase::new(1, 3, 4)];
const THM4_CASES: [MemCase; 3] = [MemCase::new(1, 2, 4), MemCase::new(1, 3, 4), MemCase::new(2, 2, 2)];
const SWEEP_CASES: [MemCase; 4] = [MemCase::new(1, 2, 4), MemCase::new(1, 3, 4), MemCase::new(1, 5, 4), MemCase::new(1, 7, 4)];

fn kind_defaults(kind: ExperimentKind) -> KindDefaults {
    use ExperimentKind::*;
    let d = |trials, hidden_sizes, mem_cases, n_vocab, seq_len, sequences| KindDefaults { trials, hidden_sizes, mem_cases, n_vocab, seq_len, sequences };
    match kind {
        // sizes, vocabulary and length are upper bounds for random instances
        OracleTest => d(60, &[6], &[], 6, 6, 0),
        Theorem1 => d(20, &[4], &[], 10, 20, 1000),
        Theorem2 => d(5, &[15, 25], &[], 10, 20, 1000),
        Theorem3 => d(5, &[], &THM3_CASES, 10, 20, 1000),
        Theorem4 => d(5, &[], &THM4_CASES, 10, 20, 1000),
        FakeToken => d(10, &[5], &[], 5, 4, 20),
        TimeShift => d(5, &[4], &[], 10, 20, 100),
        GradCheck => d(5, &[6], &[], 10, 10, 16),
        SweepHeadVsPrompt => d(20, &[4, 8, 10, 15, 25, 30], &[], 10, Splits::PAPER.t_len, 0),
        SweepMemory => d(5, &[], &SWEEP_CASES, 10, Splits::PAPER.t_len, 0),
    }
}

impl ExperimentConfig {
    pub fn new(kind: ExperimentKind) -> Self {
        Self {
            kind,
            seed: 0,
            trials: None,
            hidden_sizes: None,
            mem_cases: None,
            n_vocab: None,
            h_star_size: None,
            seq_len: None,
            sequences: None,
            splits: None,
            train: None,
            thresholds: None,
            out_dir: None,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn resolve(&self) -> Result<Settings> {
        let d = kind_defaults(self.kind);
        let seq_len = self.seq_len.unwrap_or(d.seq_len);
        let splits = self.splits.unwrap_or(Splits { t_len: seq_len, ..Splits::PAPER });
        let s = Settings {
            kind: self.kind,
            seed: self.seed,
            trials: self.trials.unwrap_or(d.trials),
            hidden_sizes: self.hidden_sizes.clone().unwrap_or_else(|| d.hidden_sizes.to_vec()),
            mem_cases: self.mem_cases.clone().unwrap_or_else(|| d.mem_cases.to_vec()),
            n_vocab: self.n_vocab.unwrap_or(d.n_vocab),
            h_star_size: self.h_star_size.unwrap_or(6),
            seq_len,
            sequences: self.sequences.unwrap_or(d.sequences),
            splits,
            train: self.train.clone().unwrap_or_default(),
            thresholds: self.thresholds.clone().unwrap_or_default(),
        };
        s.validate()?;
        Ok(s)
    }
}

impl Settings {
    fn validate(&self) -> Result<()> {
        use ExperimentKind::*;
        let positive = |v: usize, what: &str| if v == 0 { Err(Error::invalid(format!("{what} must be positive"))) } else { Ok(()) };
        positive(self.trials, "trials")?;
        positive(self.n_vocab, "n_vocab")?;
        positive(self.seq_len, "seq_len")?;
        positive(self.h_star_size, "h_star_size")?;
        for &h in &self.hidden_sizes {
            positive(h, "hidden size")?;
        }
        for c in &self.mem_cases {
            positive(c.n_cells, "n_cells")?;
            positive(c.mem_size, "mem_size")?;
            positive(c.syntax_size, "syntax_size")?;
        }
        match self.kind {
            Theorem3 | Theorem4 | SweepMemory => {
                if self.mem_cases.is_empty() {
                    return Err(Error::invalid(format!("{} needs at least one memory case", self.kind)));
                }
            }
            _ => {
                if self.hidden_sizes.is_empty() {
                    return Err(Error::invalid(format!("{} needs at least one hidden size", self.kind)));
                }
            }
        }
        if matches!(self.kind, Theorem1 | Theorem2 | Theorem3 | Theorem4 | FakeToken | TimeShift | GradCheck) {
            positive(self.sequences, "sequences")?;
        }
        if matches!(self.kind, SweepHeadVsPrompt | SweepMemory) {
            let sp = &self.splits;
            if sp.n_train == 0 || sp.n_val == 0 || sp.n_test == 0 || sp.t_len == 0 {
                return Err(Error::invalid("split sizes and sequence length must be positive"));
            }
        }
        self.train.validate()
    }

    fn seed_for(&self, group: usize, trial: usize) -> u64 {
        derive_seed(derive_seed(derive_seed(self.seed, tags::TRIAL), group as u64), trial as u64)
    }
}

/// One measured quantity of one trial.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrialRow {
    pub group: String,
    pub trial: usize,
    pub arm: String,
    pub value: f64,
    /// Items behind `value` (sequences, coordinates, conditionals).
    pub count: usize,
}

impl TrialRow {
    fn new(group: &str, trial: usize, arm: &str, value: f64, count: usize) -> Self {
        Self { group: group.into(), trial, arm: arm.into(), value, count }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupSummary {
    pub group: String,
    pub arm: String,
    pub n: usize,
    pub mean: f64,
    /// `mean -+ 1.96 * sd / sqrt(n)` with the sample standard deviation.
    pub ci_low: f64,
    pub ci_high: f64,
    pub min: f64,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModelRecord {
    pub group: String,
    pub trial: usize,
    pub seed: u64,
    /// SHA-256 of the model's JSON document.
    pub digest: String,
    pub verdicts: Vec<Verdict>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

impl Check {
    fn new(name: impl Into<String>, pass: bool, detail: impl Into<String>) -> Self {
        Self { name: name.into(), pass, detail: detail.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Report {
    pub kind: ExperimentKind,
    pub pass: bool,
    pub checks: Vec<Check>,
    pub groups: Vec<GroupSummary>,
    pub models: Vec<ModelRecord>,
    pub settings: Settings,
    #[serde(skip)]
    pub rows: Vec<TrialRow>,
}

#[derive(Default)]
struct Outcome {
    rows: Vec<TrialRow>,
    models: Vec<ModelRecord>,
    checks: Vec<Check>,
}

impl Outcome {
    fn absorb(&mut self, other: Outcome) {
        self.rows.extend(other.rows);
        self.models.extend(other.models);
        self.checks.extend(other.checks);
    }

    fn values(&self, group: &str, arm: &str) -> Vec<f64> {
        self.rows.iter().filter(|r| r.group == group && r.arm == arm).map(|r| r.value).collect()
    }
}

fn digest(model: Model) -> Result<String> {
    model.digest()
}

/// Mean and normal-approximation 95% interval.
pub fn mean_ci(values: &[f64]) -> (f64, f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, mean, mean);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let half = 1.96 * (var / n as f64).sqrt();
    (mean, mean - half, mean + half)
}

fn summarise(rows: &[TrialRow]) -> Vec<GroupSummary> {
    let mut keys: Vec<(&str, &str)> = Vec::new();
    for r in rows {
        if !keys.contains(&(r.group.as_str(), r.arm.as_str())) {
            keys.push((&r.group, &r.arm));
        }
    }
    keys.into_iter()
        .map(|(g, a)| {
            let vals: Vec<f64> = rows.iter().filter(|r| r.group == g && r.arm == a).map(|r| r.value).collect();
            let (mean, ci_low, ci_high) = mean_ci(&vals);
            GroupSummary {
                group: g.into(),
                arm: a.into(),
                n: vals.len(),
                mean,
                ci_low,
                ci_high,
                min: vals.iter().copied().fold(f64::INFINITY, f64::min),
                max: vals.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            }
        })
        .collect()
}

pub fn run_experiment(config: &ExperimentConfig, exec: Exec) -> Result<Report> {
    let s = config.resolve()?;
    use ExperimentKind::*;
    let out = match s.kind {
        OracleTest => checks::oracle_test(&s, exec)?,
        Theorem1 => checks::theorem1(&s, exec)?,
        Theorem2 => checks::theorem2(&s, exec)?,
        Theorem3 => checks::theorem3(&s, exec)?,
        Theorem4 => checks::theorem4(&s, exec)?,
        FakeToken => checks::fake_token(&s, exec)?,
        TimeShift => checks::time_shift(&s, exec)?,
        GradCheck => checks::grad_check(&s, exec)?,
        SweepHeadVsPrompt => sweeps::head_vs_prompt(&s, exec)?,
        SweepMemory => sweeps::memory(&s, exec)?,
    };
    let pass = !out.checks.is_empty() && out.checks.iter().all(|c| c.pass);
    Ok(Report { kind: s.kind, pass, checks: out.checks, groups: summarise(&out.rows), models: out.models, settings: s, rows: out.rows })
}

impl Report {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("group,trial,arm,value,count\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{},{:e},{}\n", r.group, r.trial, r.arm, r.value, r.count));
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    /// One `PASS`/`FAIL` line per check.
    pub fn lines(&self) -> Vec<String> {
        self.checks.iter().map(|c| format!("{} {}: {}", if c.pass { "PASS" } else { "FAIL" }, c.name, c.detail)).collect()
    }
}

pub const TRIALS_FILE: &str = "trials.csv";
pub const SUMMARY_FILE: &str = "summary.json";

/// Writes `trials.csv` and `summary.json` into `dir`, creating it if needed.
pub fn write_report(report: &Report, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(TRIALS_FILE), report.to_csv())?;
    fs::write(dir.join(SUMMARY_FILE), report.to_json()?)?;
    Ok(())
}
