use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baselines::SoftmaxRegressionConfig;
use crate::error::{Error, Result};
use crate::trainer::LabelMode;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    SweepNm,
    SweepC,
    MinimizerGap,
    Mismatch,
    BaselineCompare,
    RateFit,
    MomentSuite,
}

impl ExperimentKind {
    pub const ALL: [ExperimentKind; 7] = [
        ExperimentKind::SweepNm,
        ExperimentKind::SweepC,
        ExperimentKind::MinimizerGap,
        ExperimentKind::Mismatch,
        ExperimentKind::BaselineCompare,
        ExperimentKind::RateFit,
        ExperimentKind::MomentSuite,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ExperimentKind::SweepNm => "sweep_nm",
            ExperimentKind::SweepC => "sweep_c",
            ExperimentKind::MinimizerGap => "minimizer_gap",
            ExperimentKind::Mismatch => "mismatch",
            ExperimentKind::BaselineCompare => "baseline_compare",
            ExperimentKind::RateFit => "rate_fit",
            ExperimentKind::MomentSuite => "moment_suite",
        }
    }

    fn default_d(self) -> usize {
        match self {
            ExperimentKind::MinimizerGap | ExperimentKind::RateFit => 2,
            _ => 5,
        }
    }

    fn default_n_grid(self) -> Vec<usize> {
        match self {
            ExperimentKind::SweepNm => vec![25, 100, 400, 1600],
            ExperimentKind::SweepC => vec![400],
            ExperimentKind::MinimizerGap => vec![25, 50, 100, 200, 400],
            ExperimentKind::Mismatch => vec![400],
            ExperimentKind::BaselineCompare => vec![100],
            ExperimentKind::RateFit => vec![20],
            ExperimentKind::MomentSuite => vec![],
        }
    }

    fn default_m_grid(self) -> Vec<usize> {
        match self {
            ExperimentKind::SweepNm => vec![25, 100, 400, 1600],
            ExperimentKind::SweepC => vec![400],
            ExperimentKind::Mismatch => vec![100, 1000, 10_000],
            ExperimentKind::BaselineCompare => vec![20, 50, 100, 200, 500],
            ExperimentKind::MomentSuite => vec![50, 200],
            ExperimentKind::MinimizerGap | ExperimentKind::RateFit => vec![],
        }
    }

    fn default_c_grid(self) -> Vec<usize> {
        match self {
            ExperimentKind::SweepNm => vec![3],
            ExperimentKind::SweepC => vec![2, 3, 4, 5, 6],
            ExperimentKind::MinimizerGap | ExperimentKind::RateFit => vec![2, 3],
            ExperimentKind::Mismatch => vec![2],
            ExperimentKind::BaselineCompare => vec![3],
            ExperimentKind::MomentSuite => vec![2, 4, 6],
        }
    }

    /// Whether the kind reads the `M` grid / the `N` grid.
    fn uses_m(self) -> bool {
        !matches!(self, ExperimentKind::MinimizerGap | ExperimentKind::RateFit)
    }

    fn uses_n(self) -> bool {
        self != ExperimentKind::MomentSuite
    }
}

impl std::fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovarianceSpec {
    /// Diagonal with entries `|N(3, 1)|`, drawn once from the seed.
    Sampled,
    Identity,
    Diagonal(Vec<f64>),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputFormat {
    Csv,
    Jsonl,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProtocolSettings {
    pub tasks: usize,
    pub prompts_per_task: usize,
}

impl Default for ProtocolSettings {
    fn default() -> Self {
        Self {
            tasks: 20,
            prompts_per_task: 100,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingSettings {
    /// Training prompts drawn per trained model.
    pub budget: usize,
    pub burn_in_fraction: f64,
    pub burn_in_batch: usize,
    pub batch: usize,
    pub label_mode: LabelMode,
    pub smoothness_samples: usize,
    /// Fixed learning rates to try instead of `1 / l̂`; the one with the
    /// lowest held-out inference error is kept.
    pub lr_grid: Option<Vec<f64>>,
    /// Largest accepted relative replicate spread for `minimizer_gap`.
    pub spread_tolerance: f64,
}

impl Default for TrainingSettings {
    fn default() -> Self {
        Self {
            budget: 1_000_000,
            burn_in_fraction: 0.2,
            burn_in_batch: 10,
            batch: 50,
            label_mode: LabelMode::Bayes,
            smoothness_samples: 20_000,
            lr_grid: None,
            spread_tolerance: 0.05,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MismatchKind {
    NormShift,
    CovarianceShift,
    PriorShift,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MismatchSettings {
    pub kinds: Vec<MismatchKind>,
    /// Offsets `k` for the shared mean shift `μ ~ N(k·1, I)`.
    pub offsets: Vec<i32>,
    /// Class priors for the prior shift; defaults to `(0.9, 0.1, …)` style
    /// weights putting 0.9 on class 0.
    pub priors: Option<Vec<f64>>,
    /// Diagonals of the alternate covariances; defaults to the training
    /// diagonal reversed and doubled.
    pub alternates: Option<Vec<Vec<f64>>>,
    /// Prompt length and prompt count of the limit check.
    pub limit_m: usize,
    pub limit_prompts: usize,
}

impl Default for MismatchSettings {
    fn default() -> Self {
        Self {
            kinds: vec![MismatchKind::NormShift, MismatchKind::CovarianceShift, MismatchKind::PriorShift],
            offsets: (0..10).collect(),
            priors: None,
            alternates: None,
            limit_m: 100_000,
            limit_prompts: 100,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineSettings {
    pub softmax: SoftmaxRegressionConfig,
    pub prompts_per_task: usize,
}

impl Default for BaselineSettings {
    fn default() -> Self {
        Self {
            softmax: SoftmaxRegressionConfig {
                ridge: 1e-4,
                max_iter: 500,
                tolerance: 1e-5,
            },
            prompts_per_task: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RateSettings {
    pub batch: usize,
    pub steps: usize,
    /// The reference minimizer runs this many times longer.
    pub ref_factor: usize,
}

impl Default for RateSettings {
    fn default() -> Self {
        Self {
            batch: 256,
            steps: 300,
            ref_factor: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MomentSettings {
    pub samples: usize,
}

impl Default for MomentSettings {
    fn default() -> Self {
        Self { samples: 100_000 }
    }
}

/// Everything that determines an experiment's results. Empty grids and an
/// unset `d` fall back to per-kind defaults in [`ExperimentConfig::resolve`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    pub seed: u64,
    pub d: Option<usize>,
    pub n_grid: Vec<usize>,
    pub m_grid: Vec<usize>,
    pub c_grid: Vec<usize>,
    pub covariance: CovarianceSpec,
    /// Independent repetitions: minimizer replicates, rate-fit batches.
    pub replicates: usize,
    /// Replace the trained model by the Bayes posterior (plumbing check).
    pub oracle_model: bool,
    pub protocol: ProtocolSettings,
    pub training: TrainingSettings,
    pub mismatch: MismatchSettings,
    pub baselines: BaselineSettings,
    pub rate: RateSettings,
    pub moments: MomentSettings,
    /// RFC 3339 stamp, `now`, or unset for `SOURCE_DATE_EPOCH` / the epoch.
    pub timestamp: Option<String>,
    pub output: Option<PathBuf>,
    pub format: OutputFormat,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            kind: ExperimentKind::SweepNm,
            seed: 0,
            d: None,
            n_grid: Vec::new(),
            m_grid: Vec::new(),
            c_grid: Vec::new(),
            covariance: CovarianceSpec::Sampled,
            replicates: 5,
            oracle_model: false,
            protocol: ProtocolSettings::default(),
            training: TrainingSettings::default(),
            mismatch: MismatchSettings::default(),
            baselines: BaselineSettings::default(),
            rate: RateSettings::default(),
            moments: MomentSettings::default(),
            timestamp: None,
            output: None,
            format: OutputFormat::Csv,
        }
    }
}

impl ExperimentConfig {
    pub fn for_kind(kind: ExperimentKind) -> Self {
        Self {
            kind,
            ..Default::default()
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    /// Fills per-kind defaults and validates.
    pub fn resolve(mut self) -> Result<Self> {
        let kind = self.kind;
        if self.d.is_none() {
            self.d = Some(kind.default_d());
        }
        if self.n_grid.is_empty() {
            self.n_grid = kind.default_n_grid();
        }
        if self.m_grid.is_empty() {
            self.m_grid = kind.default_m_grid();
        }
        if self.c_grid.is_empty() {
            self.c_grid = kind.default_c_grid();
        }
        self.validate()?;
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.d.unwrap_or_else(|| self.kind.default_d())
    }

    fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.dim() < 1 {
            return bad("d must be >= 1".into());
        }
        if self.kind.uses_n() && (self.n_grid.is_empty() || self.n_grid.contains(&0)) {
            return bad("N grid must be non-empty with entries >= 1".into());
        }
        if self.kind.uses_m() && (self.m_grid.is_empty() || self.m_grid.contains(&0)) {
            return bad("M grid must be non-empty with entries >= 1".into());
        }
        if self.c_grid.is_empty() || self.c_grid.iter().any(|c| *c < 2) {
            return bad("c grid must be non-empty with entries >= 2".into());
        }
        if self.replicates < 1 {
            return bad("replicate count must be >= 1".into());
        }
        if self.kind == ExperimentKind::MinimizerGap && self.replicates < 2 {
            return bad("minimizer_gap needs at least 2 replicates".into());
        }
        if self.protocol.tasks < 1 || self.protocol.prompts_per_task < 1 {
            return bad("protocol J and K must be >= 1".into());
        }
        if let CovarianceSpec::Diagonal(diag) = &self.covariance {
            if diag.len() != self.dim() {
                return bad(format!("covariance diagonal has {} entries, d = {}", diag.len(), self.dim()));
            }
            if diag.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
                return bad("covariance diagonal entries must be positive".into());
            }
        }
        if let Some(grid) = &self.training.lr_grid {
            if grid.is_empty() || grid.iter().any(|v| v.is_nan() || *v <= 0.0) {
                return bad("lr_grid entries must be positive".into());
            }
        }
        let t = &self.training;
        if t.budget < 1 || t.batch < 1 || t.burn_in_batch < 1 {
            return bad("training budget and batch sizes must be >= 1".into());
        }
        if !(0.0..1.0).contains(&t.burn_in_fraction) {
            return bad("burn_in_fraction must be in [0, 1)".into());
        }
        if self.kind == ExperimentKind::MomentSuite && self.moments.samples < 10_000 {
            return bad("moment_suite needs >= 10^4 samples".into());
        }
        if self.kind == ExperimentKind::RateFit && (self.rate.steps < 3 || self.rate.batch < 1) {
            return bad("rate_fit needs >= 3 steps and a non-empty batch".into());
        }
        Ok(())
    }

    /// First 16 hex digits of SHA-256 over the canonical JSON of the
    /// result-determining fields (output location, format and timestamp are
    /// excluded).
    pub fn hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.output = None;
        canonical.format = OutputFormat::Csv;
        canonical.timestamp = None;
        let json = serde_json::to_string(&canonical).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    /// Stamp written into every row: the configured value, `now`, else
    /// `SOURCE_DATE_EPOCH`, else the Unix epoch. Reruns are byte-identical
    /// unless `now` is requested.
    pub fn resolve_timestamp(&self) -> Result<String> {
        use chrono::{DateTime, SecondsFormat, Utc};
        let fmt = |t: DateTime<Utc>| t.to_rfc3339_opts(SecondsFormat::Secs, true);
        match self.timestamp.as_deref() {
            Some("now") => {
                let secs = std::time::SystemTime::now()
                    .duration_since(std::time::UNIX_EPOCH)
                    .map_or(0, |d| d.as_secs() as i64);
                DateTime::from_timestamp(secs, 0)
                    .map(fmt)
                    .ok_or_else(|| Error::Config("system clock out of range".into()))
            }
            Some(s) => DateTime::parse_from_rfc3339(s)
                .map(|t| fmt(t.with_timezone(&Utc)))
                .map_err(|e| Error::Config(format!("bad timestamp {s:?}: {e}"))),
            None => {
                let secs = match std::env::var("SOURCE_DATE_EPOCH") {
                    Ok(v) => v
                        .trim()
                        .parse::<i64>()
                        .map_err(|e| Error::Config(format!("bad SOURCE_DATE_EPOCH {v:?}: {e}")))?,
                    Err(_) => 0,
                };
                DateTime::from_timestamp(secs, 0)
                    .map(fmt)
                    .ok_or_else(|| Error::Config(format!("SOURCE_DATE_EPOCH {secs} out of range")))
            }
        }
    }
}
