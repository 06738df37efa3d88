//! Error metrics, the inference-error protocol and fitting helpers.

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{bayes_posterior, lda_predict, softmax_regression, LdaOptions, SoftmaxRegressionConfig};
use crate::error::{check_dim, Error, Result};
use crate::loss::Objective;
use crate::model::{AttentionParams, OutputDistribution};
use crate::numerics::RngStream;
use crate::task::{
    sample_counts, sample_prompt_for_query, sample_query, sample_stats_for_query, MixtureTask, Prompt,
    PromptStats, TaskSource,
};

/// `max_k |p_k − q_k|`.
pub fn tv_distance(p: &OutputDistribution, q: &OutputDistribution) -> Result<f64> {
    check_dim("distribution", p.class_count(), q.class_count())?;
    Ok(p.probs()
        .iter()
        .zip(q.probs())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max))
}

/// What a predictor sees for one evaluation.
pub struct PromptData<'a> {
    pub task: &'a MixtureTask,
    pub stats: &'a PromptStats,
    /// Present when any evaluated predictor asked for the full prompt.
    pub prompt: Option<&'a Prompt>,
}

pub trait Predictor: Sync {
    fn name(&self) -> &str;

    /// Whether [`Predictor::predict`] needs the individual examples rather
    /// than the class sums.
    fn needs_full_prompt(&self) -> bool {
        false
    }

    fn predict(&self, data: &PromptData<'_>) -> Result<OutputDistribution>;
}

fn full_prompt<'a>(data: &'a PromptData<'_>) -> Result<&'a Prompt> {
    data.prompt
        .ok_or_else(|| Error::InvalidArgument("predictor needs the full prompt".into()))
}

/// The sparse linear-attention model.
pub struct Transformer {
    pub params: AttentionParams,
    pub objective: Objective,
}

impl Transformer {
    pub fn new(params: AttentionParams, class_count: usize) -> Self {
        Self {
            params,
            objective: Objective::for_classes(class_count),
        }
    }
}

impl Predictor for Transformer {
    fn name(&self) -> &str {
        "transformer"
    }

    fn predict(&self, data: &PromptData<'_>) -> Result<OutputDistribution> {
        self.objective.predict(&self.params, data.stats)
    }
}

/// Reads the true task: the error floor.
pub struct BayesOracle;

impl Predictor for BayesOracle {
    fn name(&self) -> &str {
        "bayes"
    }

    fn predict(&self, data: &PromptData<'_>) -> Result<OutputDistribution> {
        bayes_posterior(data.task, data.stats.query())
    }
}

pub struct Uniform;

impl Predictor for Uniform {
    fn name(&self) -> &str {
        "uniform"
    }

    fn predict(&self, data: &PromptData<'_>) -> Result<OutputDistribution> {
        let c = data.stats.class_count();
        OutputDistribution::new(vec![1.0 / c as f64; c])
    }
}

pub struct Lda(pub LdaOptions);

impl Predictor for Lda {
    fn name(&self) -> &str {
        "lda"
    }

    fn needs_full_prompt(&self) -> bool {
        self.0.known_covariance.is_none()
    }

    fn predict(&self, data: &PromptData<'_>) -> Result<OutputDistribution> {
        match data.prompt {
            Some(p) => lda_predict(p, &self.0),
            None => lda_from_stats(data.stats, &self.0),
        }
    }
}

/// Known-covariance LDA needs only class sums and counts.
fn lda_from_stats(stats: &PromptStats, options: &LdaOptions) -> Result<OutputDistribution> {
    let cov = options
        .known_covariance
        .as_deref()
        .ok_or_else(|| Error::InvalidArgument("pooled LDA needs the full prompt".into()))?;
    let total = stats.len() as f64;
    let mut scores = Vec::with_capacity(stats.class_count());
    for (k, &n) in stats.counts().iter().enumerate() {
        if n == 0 {
            return Err(Error::ClassMissing { class: k });
        }
        let m = stats.class_sums().column(k) / n as f64;
        let mut s = cov.inv_inner(&m, stats.query()) + (n as f64 / total).ln();
        if !options.assume_equal_norms {
            s -= 0.5 * cov.inv_inner(&m, &m);
        }
        scores.push(s);
    }
    Ok(OutputDistribution::from_logits(&scores))
}

pub struct SoftmaxRegression(pub SoftmaxRegressionConfig);

impl Predictor for SoftmaxRegression {
    fn name(&self) -> &str {
        "softmax"
    }

    fn needs_full_prompt(&self) -> bool {
        true
    }

    fn predict(&self, data: &PromptData<'_>) -> Result<OutputDistribution> {
        Ok(softmax_regression(full_prompt(data)?, &self.0)?.prediction)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProtocolConfig {
    /// Number of (task, query) pairs `J`.
    pub tasks: usize,
    /// Prompts per pair `K`.
    pub prompts_per_task: usize,
    /// Test prompt length `M`.
    pub prompt_len: usize,
}

impl ProtocolConfig {
    pub fn new(prompt_len: usize) -> Self {
        Self {
            tasks: 20,
            prompts_per_task: 100,
            prompt_len,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorRecord {
    pub predictor: String,
    /// Training prompt length, when known.
    pub n: Option<usize>,
    pub m: usize,
    pub c: usize,
    pub d: usize,
    pub mean: f64,
    pub stderr: f64,
    pub count: usize,
    pub seed: u64,
}

/// Mean and standard error of a sample.
pub fn mean_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Scores every predictor on the same draws: `J` (task, query) pairs from
/// `source`, `K` prompts of length `M` per pair, TV against the Bayes
/// posterior. Pair `j` uses stream `("task", j)` and prompt `(j, k)` uses
/// `("prompt", j K + k)`, so cells with different `M` or different models
/// share their tasks and queries.
pub fn evaluate_predictors(
    predictors: &[&dyn Predictor],
    source: &dyn TaskSource,
    config: &ProtocolConfig,
    rng: &RngStream,
) -> Result<Vec<ErrorRecord>> {
    if config.tasks < 1 || config.prompts_per_task < 1 || config.prompt_len < 1 {
        return Err(Error::InvalidArgument("J, K and M must all be >= 1".into()));
    }
    let full = predictors.iter().any(|p| p.needs_full_prompt());
    let pairs: Vec<(MixtureTask, DVector<f64>, OutputDistribution)> = (0..config.tasks)
        .into_par_iter()
        .map(|j| {
            let mut r = rng.substream("task", j as u64);
            let task = source.sample_task(&mut r)?;
            let (q, _) = sample_query(&task, &mut r)?;
            let bayes = bayes_posterior(&task, &q)?;
            Ok((task, q, bayes))
        })
        .collect::<Result<_>>()?;
    let k_per = config.prompts_per_task;
    let scores: Vec<Vec<f64>> = (0..config.tasks * k_per)
        .into_par_iter()
        .map(|idx| {
            let (task, q, bayes) = &pairs[idx / k_per];
            let mut r = rng.substream("prompt", idx as u64);
            let (prompt, stats) = if full {
                let p = sample_prompt_for_query(task, config.prompt_len, q, &mut r)?;
                let s = p.stats();
                (Some(p), s)
            } else {
                (None, sample_stats_for_query(task, config.prompt_len, q, &mut r)?)
            };
            let data = PromptData {
                task,
                stats: &stats,
                prompt: prompt.as_ref(),
            };
            predictors
                .iter()
                .map(|p| tv_distance(&p.predict(&data)?, bayes))
                .collect()
        })
        .collect::<Result<_>>()?;
    Ok(predictors
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let xs: Vec<f64> = scores.iter().map(|row| row[i]).collect();
            let (mean, stderr) = mean_stderr(&xs);
            ErrorRecord {
                predictor: p.name().to_string(),
                n: None,
                m: config.prompt_len,
                c: source.class_count(),
                d: source.dim(),
                mean,
                stderr,
                count: xs.len(),
                seed: rng.seed(),
            }
        })
        .collect())
}

pub fn inference_error_protocol(
    predictor: &dyn Predictor,
    source: &dyn TaskSource,
    config: &ProtocolConfig,
    rng: &RngStream,
) -> Result<ErrorRecord> {
    Ok(evaluate_predictors(&[predictor], source, config, rng)?.remove(0))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
}

/// Ordinary least squares of `ys` on `xs`.
pub fn linear_fit(xs: &[f64], ys: &[f64]) -> Result<LinearFit> {
    check_dim("fit inputs", xs.len(), ys.len())?;
    if xs.len() < 2 {
        return Err(Error::InvalidArgument("fit needs at least 2 points".into()));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::InvalidArgument("fit needs distinct x values".into()));
    }
    let slope = sxy / sxx;
    let r2 = if syy == 0.0 { 0.0 } else { sxy * sxy / (sxx * syy) };
    Ok(LinearFit {
        slope,
        intercept: my - slope * mx,
        r2,
    })
}

/// Least squares on `(log x, log y)`.
pub fn loglog_slope(xs: &[f64], ys: &[f64]) -> Result<LinearFit> {
    check_dim("fit inputs", xs.len(), ys.len())?;
    if xs.len() < 3 {
        return Err(Error::InvalidArgument("log-log fit needs at least 3 points".into()));
    }
    if xs.iter().chain(ys).any(|v| v.is_nan() || *v <= 0.0) {
        return Err(Error::NonPositiveInput);
    }
    let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
    linear_fit(&lx, &ly)
}

/// Ranks starting at 1, ties averaged.
fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|a, b| xs[*a].total_cmp(&xs[*b]));
    let mut out = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &t in &idx[i..=j] {
            out[t] = r;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<f64> {
    check_dim("correlation inputs", xs.len(), ys.len())?;
    if xs.len() < 2 {
        return Err(Error::InvalidArgument("correlation needs at least 2 points".into()));
    }
    let (rx, ry) = (ranks(xs), ranks(ys));
    let n = xs.len() as f64;
    let m = (n + 1.0) / 2.0;
    let sxy: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - m) * (b - m)).sum();
    let sxx: f64 = rx.iter().map(|a| (a - m).powi(2)).sum();
    let syy: f64 = ry.iter().map(|b| (b - m).powi(2)).sum();
    if sxx == 0.0 || syy == 0.0 {
        return Ok(0.0);
    }
    Ok(sxy / (sxx * syy).sqrt())
}

/// Per-class counts of a prompt and their deviations `h_k = N_k/M − 1/c`.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassCounts {
    pub counts: Vec<usize>,
    pub deviations: Vec<f64>,
}

impl ClassCounts {
    pub fn new(counts: Vec<usize>) -> Result<Self> {
        let m: usize = counts.iter().sum();
        if m == 0 || counts.len() < 2 {
            return Err(Error::InvalidArgument("need >= 2 classes and >= 1 example".into()));
        }
        let c = counts.len() as f64;
        let deviations = counts.iter().map(|n| *n as f64 / m as f64 - 1.0 / c).collect();
        Ok(Self { counts, deviations })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MomentStat {
    pub name: String,
    pub empirical: f64,
    pub expected: f64,
    pub stderr: f64,
}

impl MomentStat {
    pub fn z_score(&self) -> f64 {
        if self.stderr == 0.0 {
            if self.empirical == self.expected {
                0.0
            } else {
                f64::INFINITY
            }
        } else {
            (self.empirical - self.expected) / self.stderr
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MomentReport {
    pub passes: bool,
    pub statistics: Vec<MomentStat>,
}

/// Compares empirical moments of uniform multinomial count deviations with
/// `E[h_k] = 0`, `E[h_k²] = (1/c − 1/c²)/M` and `E[h_i h_j] = −1/(M c²)`, each
/// at 5 standard errors.
pub fn count_moment_check(m: usize, c: usize, samples: usize, rng: &mut RngStream) -> Result<MomentReport> {
    if samples < 10_000 {
        return Err(Error::InvalidArgument("count_moment_check needs >= 10^4 samples".into()));
    }
    if c < 2 || m < 1 {
        return Err(Error::InvalidArgument("need c >= 2 and M >= 1".into()));
    }
    let priors = vec![1.0 / c as f64; c];
    let pairs: Vec<(usize, usize)> = (0..c).flat_map(|i| ((i + 1)..c).map(move |j| (i, j))).collect();
    // accumulate first and second moments of every tracked quantity
    let tracked = 2 * c + pairs.len();
    let mut sum = vec![0.0; tracked];
    let mut sum_sq = vec![0.0; tracked];
    for _ in 0..samples {
        let counts = ClassCounts::new(sample_counts(m, &priors, rng))?;
        let h = &counts.deviations;
        let total: f64 = h.iter().sum();
        if total.abs() > 1e-12 {
            return Err(Error::InvalidArgument(format!("deviations sum to {total}")));
        }
        let values = h
            .iter()
            .copied()
            .chain(h.iter().map(|v| v * v))
            .chain(pairs.iter().map(|(i, j)| h[*i] * h[*j]));
        for (t, v) in values.enumerate() {
            sum[t] += v;
            sum_sq[t] += v * v;
        }
    }
    let n = samples as f64;
    let (mf, cf) = (m as f64, c as f64);
    let mut statistics = Vec::with_capacity(tracked);
    for t in 0..tracked {
        let mean = sum[t] / n;
        let var = (sum_sq[t] / n - mean * mean).max(0.0) * n / (n - 1.0);
        let (name, expected) = if t < c {
            (format!("E[h_{t}]"), 0.0)
        } else if t < 2 * c {
            (format!("E[h_{}^2]", t - c), (1.0 / cf - 1.0 / (cf * cf)) / mf)
        } else {
            let (i, j) = pairs[t - 2 * c];
            (format!("E[h_{i} h_{j}]"), -1.0 / (mf * cf * cf))
        };
        statistics.push(MomentStat {
            name,
            empirical: mean,
            expected,
            stderr: (var / n).sqrt(),
        });
    }
    let passes = statistics.iter().all(|s| s.z_score().abs() <= 5.0);
    Ok(MomentReport { passes, statistics })
}
