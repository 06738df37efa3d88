//! Gaussian-mixture tasks, prompts and their samplers.
//!
//! Labels are stored as 0-based class indices. For binary tasks class 0 is the
//! `y = -1` component and class 1 is `y = +1`.

use std::io::{BufRead, Write};
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand_distr::{Binomial, Distribution};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::numerics::{haar_orthogonal, sample_gaussian, RngStream, SpdMatrix};

/// Relative tolerance for the equal weighted-norm property of class means.
pub const NORM_MATCH_TOL: f64 = 1e-8;

#[derive(Clone, Debug)]
pub struct MixtureTask {
    means: DMatrix<f64>,
    covariance: Arc<SpdMatrix>,
    priors: Vec<f64>,
    norm_matched: bool,
}

impl MixtureTask {
    /// `means` is `d x c` with column `k` the mean of class `k`. `priors`
    /// defaults to uniform.
    pub fn new(
        means: DMatrix<f64>,
        covariance: Arc<SpdMatrix>,
        priors: Option<Vec<f64>>,
    ) -> Result<Self> {
        let c = means.ncols();
        if c < 2 {
            return Err(Error::InvalidArgument(format!("need at least 2 classes, got {c}")));
        }
        check_dim("class means", covariance.dim(), means.nrows())?;
        let priors = priors.unwrap_or_else(|| vec![1.0 / c as f64; c]);
        validate_priors(&priors, c)?;
        let mut task = Self {
            means,
            covariance,
            priors,
            norm_matched: false,
        };
        let norms = task.weighted_norms();
        let max = norms.iter().cloned().fold(0.0, f64::max);
        let min = norms.iter().cloned().fold(f64::INFINITY, f64::min);
        task.norm_matched = max - min <= NORM_MATCH_TOL * max;
        Ok(task)
    }

    pub fn dim(&self) -> usize {
        self.means.nrows()
    }

    pub fn class_count(&self) -> usize {
        self.means.ncols()
    }

    pub fn means(&self) -> &DMatrix<f64> {
        &self.means
    }

    pub fn mean(&self, class: usize) -> DVector<f64> {
        self.means.column(class).into_owned()
    }

    pub fn covariance(&self) -> &SpdMatrix {
        &self.covariance
    }

    pub fn shared_covariance(&self) -> Arc<SpdMatrix> {
        Arc::clone(&self.covariance)
    }

    pub fn priors(&self) -> &[f64] {
        &self.priors
    }

    pub fn norm_matched(&self) -> bool {
        self.norm_matched
    }

    /// `μ_kᵀ Λ⁻¹ μ_k` for every class.
    pub fn weighted_norms(&self) -> Vec<f64> {
        (0..self.class_count())
            .map(|k| {
                let m = self.mean(k);
                self.covariance.inv_inner(&m, &m)
            })
            .collect()
    }

    pub fn with_priors(mut self, priors: Vec<f64>) -> Result<Self> {
        validate_priors(&priors, self.class_count())?;
        self.priors = priors;
        Ok(self)
    }
}

fn validate_priors(priors: &[f64], c: usize) -> Result<()> {
    check_dim("class priors", c, priors.len())?;
    if priors.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
        return Err(Error::InvalidArgument("priors must be finite and non-negative".into()));
    }
    let s: f64 = priors.iter().sum();
    if (s - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!("priors sum to {s}, expected 1")));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledPoint {
    pub x: DVector<f64>,
    pub label: usize,
}

/// `N` labeled in-context examples followed by one unlabeled query.
#[derive(Clone, Debug, PartialEq)]
pub struct Prompt {
    examples: Vec<LabeledPoint>,
    query: DVector<f64>,
    class_count: usize,
}

impl Prompt {
    pub fn new(examples: Vec<LabeledPoint>, query: DVector<f64>, class_count: usize) -> Result<Self> {
        if examples.is_empty() {
            return Err(Error::InvalidArgument("prompt needs at least one example".into()));
        }
        if class_count < 2 {
            return Err(Error::InvalidArgument("prompt needs at least 2 classes".into()));
        }
        let d = query.len();
        for ex in &examples {
            check_dim("in-context example", d, ex.x.len())?;
            if ex.label >= class_count {
                return Err(Error::InvalidArgument(format!(
                    "label {} out of range for {class_count} classes",
                    ex.label
                )));
            }
        }
        Ok(Self {
            examples,
            query,
            class_count,
        })
    }

    pub fn examples(&self) -> &[LabeledPoint] {
        &self.examples
    }

    pub fn query(&self) -> &DVector<f64> {
        &self.query
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.query.len()
    }

    /// Binary rendering `y ∈ {-1, +1}`.
    pub fn signed_labels(&self) -> Result<Vec<f64>> {
        if self.class_count != 2 {
            return Err(Error::WrongClassCount {
                expected: 2,
                found: self.class_count,
            });
        }
        Ok(self
            .examples
            .iter()
            .map(|e| if e.label == 1 { 1.0 } else { -1.0 })
            .collect())
    }

    pub fn one_hot(&self, index: usize) -> DVector<f64> {
        let mut v = DVector::zeros(self.class_count);
        v[self.examples[index].label] = 1.0;
        v
    }

    pub fn stats(&self) -> PromptStats {
        let d = self.dim();
        let c = self.class_count;
        let mut sums = DMatrix::zeros(d, c);
        let mut counts = vec![0usize; c];
        for ex in &self.examples {
            let mut col = sums.column_mut(ex.label);
            col += &ex.x;
            counts[ex.label] += 1;
        }
        PromptStats {
            class_sums: sums,
            counts,
            query: self.query.clone(),
        }
    }
}

/// Per-class sums and counts of a prompt plus its query. Every forward pass
/// of the sparse model depends on a prompt only through these.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptStats {
    class_sums: DMatrix<f64>,
    counts: Vec<usize>,
    query: DVector<f64>,
}

impl PromptStats {
    pub fn new(class_sums: DMatrix<f64>, counts: Vec<usize>, query: DVector<f64>) -> Result<Self> {
        check_dim("class sums", query.len(), class_sums.nrows())?;
        check_dim("class counts", class_sums.ncols(), counts.len())?;
        if counts.iter().sum::<usize>() == 0 {
            return Err(Error::InvalidArgument("prompt needs at least one example".into()));
        }
        Ok(Self {
            class_sums,
            counts,
            query,
        })
    }

    pub fn class_sums(&self) -> &DMatrix<f64> {
        &self.class_sums
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn query(&self) -> &DVector<f64> {
        &self.query
    }

    pub fn len(&self) -> usize {
        self.counts.iter().sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.query.len()
    }

    pub fn class_count(&self) -> usize {
        self.counts.len()
    }

    /// `p = (2/N) Σ y_i x_i` with `y ∈ {-1, +1}`.
    pub fn binary_statistic(&self) -> Result<DVector<f64>> {
        if self.class_count() != 2 {
            return Err(Error::WrongClassCount {
                expected: 2,
                found: self.class_count(),
            });
        }
        let n = self.len() as f64;
        Ok((self.class_sums.column(1) - self.class_sums.column(0)) * (2.0 / n))
    }

    /// `P = (p_1, …, p_c)` with `p_k = (c/N) Σ_{i: y_i = k} x_i`.
    pub fn class_statistics(&self) -> DMatrix<f64> {
        let c = self.class_count() as f64;
        &self.class_sums * (c / self.len() as f64)
    }

    pub fn with_query(&self, query: DVector<f64>) -> Result<Self> {
        check_dim("query", self.dim(), query.len())?;
        Ok(Self {
            class_sums: self.class_sums.clone(),
            counts: self.counts.clone(),
            query,
        })
    }
}

/// `λ_i = |z_i|` from given normal draws; a zero draw is rejected.
pub fn covariance_from_draws(draws: &[f64]) -> Result<SpdMatrix> {
    if draws.contains(&0.0) {
        return Err(Error::InvalidArgument("zero variance draw".into()));
    }
    let diag: Vec<f64> = draws.iter().map(|z| z.abs()).collect();
    SpdMatrix::from_diagonal(&diag)
}

/// Diagonal covariance with `λ_i = |N(3, 1)|`; zero draws are re-drawn.
pub fn sample_covariance_diag(dim: usize, rng: &mut RngStream) -> Result<SpdMatrix> {
    if dim < 1 {
        return Err(Error::InvalidArgument("dimension must be >= 1".into()));
    }
    let draws: Vec<f64> = (0..dim)
        .map(|_| loop {
            let z = 3.0 + rng.standard_normal();
            if z != 0.0 {
                break z;
            }
        })
        .collect();
    covariance_from_draws(&draws)
}

/// Builds `μ_k = L U_k L⁻¹ μ_1` for the given rotations (one per class after
/// the first). `L` is the Cholesky factor of `Λ`; conjugating a Haar rotation
/// by it has the same law as conjugating by the symmetric square root.
pub fn train_task_from_parts(
    first_mean: &DVector<f64>,
    rotations: &[DMatrix<f64>],
    covariance: Arc<SpdMatrix>,
) -> Result<MixtureTask> {
    let d = covariance.dim();
    check_dim("first class mean", d, first_mean.len())?;
    let c = rotations.len() + 1;
    let whitened = covariance.solve_factor(first_mean);
    let mut means = DMatrix::zeros(d, c);
    means.set_column(0, first_mean);
    for (k, u) in rotations.iter().enumerate() {
        if u.nrows() != d || u.ncols() != d {
            return Err(Error::DimensionMismatch {
                what: "rotation",
                expected: d,
                found: u.nrows(),
            });
        }
        means.set_column(k + 1, &covariance.apply_factor(&(u * &whitened)));
    }
    MixtureTask::new(means, covariance, None)
}

/// Training task: `μ_1 ~ N(0, I_d)`, remaining means are Haar rotations of
/// `μ_1` in the `Λ⁻¹` geometry.
pub fn sample_train_task(
    dim: usize,
    class_count: usize,
    covariance: &Arc<SpdMatrix>,
    rng: &mut RngStream,
) -> Result<MixtureTask> {
    if class_count < 2 {
        return Err(Error::InvalidArgument("need at least 2 classes".into()));
    }
    check_dim("covariance", dim, covariance.dim())?;
    let mu1 = rng.standard_normal_vector(dim);
    let rotations = (1..class_count)
        .map(|_| haar_orthogonal(dim, rng))
        .collect::<Result<Vec<_>>>()?;
    train_task_from_parts(&mu1, &rotations, Arc::clone(covariance))
}

pub fn draw_label(priors: &[f64], rng: &mut RngStream) -> usize {
    let u = rng.uniform();
    let mut acc = 0.0;
    for (k, p) in priors.iter().enumerate() {
        acc += p;
        if u < acc {
            return k;
        }
    }
    // u landed in the rounding gap above the cumulative sum
    priors.iter().rposition(|p| *p > 0.0).unwrap_or(priors.len() - 1)
}

/// Multinomial class counts via sequential conditional binomials.
pub fn sample_counts(total: usize, priors: &[f64], rng: &mut RngStream) -> Vec<usize> {
    let mut counts = vec![0usize; priors.len()];
    let mut remaining = total as u64;
    let mut mass = 1.0;
    for (k, p) in priors.iter().enumerate() {
        if remaining == 0 {
            break;
        }
        if k + 1 == priors.len() || mass <= 0.0 {
            counts[k] = remaining as usize;
            break;
        }
        let prob = (p / mass).clamp(0.0, 1.0);
        let n = Binomial::new(remaining, prob)
            .expect("probability in [0, 1]")
            .sample(rng);
        counts[k] = n as usize;
        remaining -= n;
        mass -= p;
    }
    counts
}

pub fn sample_query(task: &MixtureTask, rng: &mut RngStream) -> Result<(DVector<f64>, usize)> {
    let label = draw_label(task.priors(), rng);
    let q = sample_gaussian(&task.mean(label), task.covariance(), rng)?;
    Ok((q, label))
}

/// Draws `N` labeled examples and a query i.i.d. from the task. Returns the
/// prompt and the query's label.
pub fn sample_prompt(task: &MixtureTask, len: usize, rng: &mut RngStream) -> Result<(Prompt, usize)> {
    if len < 1 {
        return Err(Error::InvalidArgument("prompt length must be >= 1".into()));
    }
    let mut examples = Vec::with_capacity(len);
    for _ in 0..len {
        let label = draw_label(task.priors(), rng);
        let x = sample_gaussian(&task.mean(label), task.covariance(), rng)?;
        examples.push(LabeledPoint { x, label });
    }
    let (query, label) = sample_query(task, rng)?;
    Ok((Prompt::new(examples, query, task.class_count())?, label))
}

/// In-context examples for a fixed query.
pub fn sample_prompt_for_query(
    task: &MixtureTask,
    len: usize,
    query: &DVector<f64>,
    rng: &mut RngStream,
) -> Result<Prompt> {
    if len < 1 {
        return Err(Error::InvalidArgument("prompt length must be >= 1".into()));
    }
    let mut examples = Vec::with_capacity(len);
    for _ in 0..len {
        let label = draw_label(task.priors(), rng);
        let x = sample_gaussian(&task.mean(label), task.covariance(), rng)?;
        examples.push(LabeledPoint { x, label });
    }
    Prompt::new(examples, query.clone(), task.class_count())
}

/// Samples the per-class sums directly: `N_k ~ Multinomial(N, priors)` and
/// `S_k = N_k μ_k + sqrt(N_k) L z_k`. Same law as `sample_prompt(..).stats()`
/// at `O(c d)` cost regardless of `N`.
pub fn sample_stats_for_query(
    task: &MixtureTask,
    len: usize,
    query: &DVector<f64>,
    rng: &mut RngStream,
) -> Result<PromptStats> {
    if len < 1 {
        return Err(Error::InvalidArgument("prompt length must be >= 1".into()));
    }
    check_dim("query", task.dim(), query.len())?;
    let counts = sample_counts(len, task.priors(), rng);
    let d = task.dim();
    let mut sums = DMatrix::zeros(d, task.class_count());
    for (k, &n) in counts.iter().enumerate() {
        if n == 0 {
            continue;
        }
        let z = rng.standard_normal_vector(d);
        let col = task.mean(k) * n as f64 + task.covariance().apply_factor(&z) * (n as f64).sqrt();
        sums.set_column(k, &col);
    }
    PromptStats::new(sums, counts, query.clone())
}

pub fn sample_prompt_stats(
    task: &MixtureTask,
    len: usize,
    rng: &mut RngStream,
) -> Result<(PromptStats, usize)> {
    let (query, label) = sample_query(task, rng)?;
    let stats = sample_stats_for_query(task, len, &query, rng)?;
    Ok((stats, label))
}

/// Ways a task can violate the training assumptions.
#[derive(Clone, Debug)]
pub enum MismatchSpec {
    /// All class means share one offset `k` drawn uniformly from `offsets`:
    /// `μ_k ~ N(k·1, I_d)`.
    NormShift { offsets: Vec<i32> },
    /// Task covariance drawn uniformly from the base list followed by these.
    CovarianceShift { alternates: Vec<Arc<SpdMatrix>> },
    /// Matched means with the given class priors.
    PriorShift { priors: Vec<f64> },
}

impl MismatchSpec {
    pub fn norm_shift_default() -> Self {
        MismatchSpec::NormShift {
            offsets: (0..10).collect(),
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            MismatchSpec::NormShift { .. } => "norm_shift",
            MismatchSpec::CovarianceShift { .. } => "covariance_shift",
            MismatchSpec::PriorShift { .. } => "prior_shift",
        }
    }
}

pub fn norm_shift_task_from_parts(
    offset: f64,
    noise: &DMatrix<f64>,
    covariance: Arc<SpdMatrix>,
) -> Result<MixtureTask> {
    MixtureTask::new(noise.map(|z| z + offset), covariance, None)
}

pub fn make_mismatch_task(
    spec: &MismatchSpec,
    base: &[Arc<SpdMatrix>],
    class_count: usize,
    rng: &mut RngStream,
) -> Result<MixtureTask> {
    let first = base
        .first()
        .ok_or_else(|| Error::InvalidSpec("base covariance list is empty".into()))?;
    let d = first.dim();
    if base.iter().any(|b| b.dim() != d) {
        return Err(Error::InvalidSpec("base covariances differ in dimension".into()));
    }
    match spec {
        MismatchSpec::NormShift { offsets } => {
            if offsets.is_empty() {
                return Err(Error::InvalidSpec("norm shift needs at least one offset".into()));
            }
            if class_count < 2 {
                return Err(Error::InvalidSpec("need at least 2 classes".into()));
            }
            let idx = (rng.uniform() * offsets.len() as f64) as usize;
            let k = offsets[idx.min(offsets.len() - 1)];
            let noise = rng.standard_normal_matrix(d, class_count);
            norm_shift_task_from_parts(f64::from(k), &noise, Arc::clone(first))
        }
        MismatchSpec::CovarianceShift { alternates } => {
            if alternates.iter().any(|a| a.dim() != d) {
                return Err(Error::InvalidSpec("alternate covariance dimension differs".into()));
            }
            let pool: Vec<&Arc<SpdMatrix>> = base.iter().chain(alternates.iter()).collect();
            let idx = ((rng.uniform() * pool.len() as f64) as usize).min(pool.len() - 1);
            sample_train_task(d, class_count, pool[idx], rng)
        }
        MismatchSpec::PriorShift { priors } => {
            if priors.len() != class_count {
                return Err(Error::InvalidSpec(format!(
                    "prior vector has {} entries for {class_count} classes",
                    priors.len()
                )));
            }
            validate_priors(priors, class_count).map_err(|e| Error::InvalidSpec(e.to_string()))?;
            sample_train_task(d, class_count, first, rng)?.with_priors(priors.clone())
        }
    }
}

/// A distribution over tasks.
pub trait TaskSource: Sync {
    fn dim(&self) -> usize;
    fn class_count(&self) -> usize;
    fn sample_task(&self, rng: &mut RngStream) -> Result<MixtureTask>;
}

/// Tasks that satisfy the training assumptions for one shared covariance.
#[derive(Clone, Debug)]
pub struct MatchedTasks {
    pub covariance: Arc<SpdMatrix>,
    pub class_count: usize,
}

impl MatchedTasks {
    pub fn new(covariance: Arc<SpdMatrix>, class_count: usize) -> Self {
        Self {
            covariance,
            class_count,
        }
    }
}

impl TaskSource for MatchedTasks {
    fn dim(&self) -> usize {
        self.covariance.dim()
    }

    fn class_count(&self) -> usize {
        self.class_count
    }

    fn sample_task(&self, rng: &mut RngStream) -> Result<MixtureTask> {
        sample_train_task(self.dim(), self.class_count, &self.covariance, rng)
    }
}

#[derive(Clone, Debug)]
pub struct MismatchTasks {
    pub spec: MismatchSpec,
    pub base: Vec<Arc<SpdMatrix>>,
    pub class_count: usize,
}

impl TaskSource for MismatchTasks {
    fn dim(&self) -> usize {
        self.base.first().map_or(0, |b| b.dim())
    }

    fn class_count(&self) -> usize {
        self.class_count
    }

    fn sample_task(&self, rng: &mut RngStream) -> Result<MixtureTask> {
        make_mismatch_task(&self.spec, &self.base, self.class_count, rng)
    }
}

/// One line of the fixture format: a task, one prompt drawn from it and the
/// query's label.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptRecord {
    /// Class means, one vector per class.
    pub means: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub covariance_diag: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub covariance_rows: Option<Vec<Vec<f64>>>,
    pub priors: Vec<f64>,
    pub examples: Vec<ExampleRecord>,
    pub query: Vec<f64>,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExampleRecord {
    pub x: Vec<f64>,
    pub label: usize,
}

impl PromptRecord {
    pub fn from_parts(task: &MixtureTask, prompt: &Prompt, label: usize) -> Self {
        let cov = task.covariance();
        let (covariance_diag, covariance_rows) = if cov.is_diagonal() {
            (Some(cov.diagonal()), None)
        } else {
            let rows = (0..cov.dim())
                .map(|i| cov.entries().row(i).iter().copied().collect())
                .collect();
            (None, Some(rows))
        };
        Self {
            means: (0..task.class_count())
                .map(|k| task.means().column(k).iter().copied().collect())
                .collect(),
            covariance_diag,
            covariance_rows,
            priors: task.priors().to_vec(),
            examples: prompt
                .examples()
                .iter()
                .map(|e| ExampleRecord {
                    x: e.x.iter().copied().collect(),
                    label: e.label,
                })
                .collect(),
            query: prompt.query().iter().copied().collect(),
            label,
        }
    }

    pub fn into_parts(self) -> Result<(MixtureTask, Prompt, usize)> {
        let c = self.means.len();
        let d = self.query.len();
        let cov = match (self.covariance_diag, self.covariance_rows) {
            (Some(diag), None) => SpdMatrix::from_diagonal(&diag)?,
            (None, Some(rows)) => {
                let flat: Vec<f64> = rows.iter().flatten().copied().collect();
                check_dim("covariance rows", d * d, flat.len())?;
                SpdMatrix::factorize(DMatrix::from_row_slice(d, d, &flat))?
            }
            _ => {
                return Err(Error::InvalidArgument(
                    "record needs exactly one of covariance_diag / covariance_rows".into(),
                ))
            }
        };
        let mut means = DMatrix::zeros(d, c);
        for (k, m) in self.means.iter().enumerate() {
            check_dim("record mean", d, m.len())?;
            means.set_column(k, &DVector::from_column_slice(m));
        }
        let task = MixtureTask::new(means, Arc::new(cov), Some(self.priors))?;
        let examples = self
            .examples
            .into_iter()
            .map(|e| LabeledPoint {
                x: DVector::from_vec(e.x),
                label: e.label,
            })
            .collect();
        let prompt = Prompt::new(examples, DVector::from_vec(self.query), c)?;
        Ok((task, prompt, self.label))
    }
}

pub fn write_records<W: Write>(mut out: W, records: &[PromptRecord]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_records<R: BufRead>(input: R) -> Result<Vec<PromptRecord>> {
    let mut records = Vec::new();
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(serde_json::from_str(&line)?);
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn forced_covariance_draws() {
        let s = covariance_from_draws(&[3.0, 3.0]).unwrap();
        assert_eq!(s.entries(), &DMatrix::from_diagonal_element(2, 2, 3.0));
        let s = covariance_from_draws(&[-2.0, 1.5]).unwrap();
        assert_eq!(s.diagonal(), vec![2.0, 1.5]);
        assert!(covariance_from_draws(&[0.0]).is_err());
    }

    #[test]
    fn covariance_diag_d20() {
        let mut rng = RngStream::new(2, 0);
        let s = sample_covariance_diag(20, &mut rng).unwrap();
        assert!(s.is_diagonal());
        let m: f64 = s.diagonal().iter().sum::<f64>() / 20.0;
        assert!((2.0..4.0).contains(&m), "mean {m}");
    }

    #[test]
    fn folded_normal_mean() {
        // E|N(3,1)| = 3(1 - 2Φ(-3)) + 2φ(3), evaluated by Simpson's rule
        let pdf = |x: f64| (-0.5 * (x - 3.0).powi(2)).exp() / (2.0 * std::f64::consts::PI).sqrt();
        let (a, b, n) = (-12.0_f64, 18.0_f64, 20_000);
        let h = (b - a) / n as f64;
        let mut s = 0.0;
        for i in 0..=n {
            let x = a + i as f64 * h;
            let w = if i == 0 || i == n {
                1.0
            } else if i % 2 == 1 {
                4.0
            } else {
                2.0
            };
            s += w * x.abs() * pdf(x);
        }
        let oracle = s * h / 3.0;
        assert!((oracle - 3.000764).abs() < 1e-5, "oracle {oracle}");

        let mut rng = RngStream::new(4, 4);
        let n = 100_000;
        let mut acc = 0.0;
        for _ in 0..n {
            acc += sample_covariance_diag(1, &mut rng).unwrap().diagonal()[0];
        }
        let m = acc / n as f64;
        assert!((2.99..=3.03).contains(&m), "mean {m}");
    }

    #[test]
    fn identity_covariance_preserves_norms() {
        let cov = Arc::new(SpdMatrix::identity(4));
        let mut rng = RngStream::new(1, 0);
        for _ in 0..50 {
            let t = sample_train_task(4, 5, &cov, &mut rng).unwrap();
            let n0 = t.mean(0).norm();
            for k in 1..5 {
                assert!((t.mean(k).norm() - n0).abs() < 1e-8);
            }
            assert!(t.norm_matched());
        }
    }

    #[test]
    fn weighted_norms_match_under_anisotropic_covariance() {
        let cov = Arc::new(SpdMatrix::from_diagonal(&[4.0, 1.0]).unwrap());
        let mut rng = RngStream::new(8, 0);
        for _ in 0..200 {
            let t = sample_train_task(2, 3, &cov, &mut rng).unwrap();
            // direct evaluation with the explicit diagonal inverse
            let w: Vec<f64> = (0..3)
                .map(|k| {
                    let m = t.mean(k);
                    m[0] * m[0] / 4.0 + m[1] * m[1]
                })
                .collect();
            let max = w.iter().cloned().fold(0.0, f64::max);
            for k in 1..3 {
                assert!((w[k] - w[0]).abs() < 1e-8 * max.max(1.0));
            }
            assert!(t.norm_matched());
            assert_eq!(t.priors(), &[1.0 / 3.0; 3]);
        }
    }

    #[test]
    fn identity_rotation_copies_first_mean() {
        let cov = Arc::new(SpdMatrix::from_diagonal(&[2.0, 5.0]).unwrap());
        let mu = DVector::from_vec(vec![0.3, -1.2]);
        let t = train_task_from_parts(&mu, &[DMatrix::identity(2, 2)], cov).unwrap();
        assert!((t.mean(1) - &mu).amax() < 1e-15);
    }

    #[test]
    fn balanced_labels() {
        let cov = Arc::new(SpdMatrix::identity(2));
        let mut rng = RngStream::new(3, 3);
        let t = sample_train_task(2, 2, &cov, &mut rng).unwrap();
        let (p, _) = sample_prompt(&t, 100_000, &mut rng).unwrap();
        let ones = p.examples().iter().filter(|e| e.label == 1).count();
        let f = ones as f64 / 1e5;
        assert!((0.495..=0.505).contains(&f), "freq {f}");
    }

    #[test]
    fn tiny_noise_hugs_means() {
        let cov = Arc::new(SpdMatrix::from_diagonal(&[1e-12, 1e-12]).unwrap());
        let mut rng = RngStream::new(3, 5);
        let t = sample_train_task(2, 3, &cov, &mut rng).unwrap();
        let (p, _) = sample_prompt(&t, 200, &mut rng).unwrap();
        for e in p.examples() {
            assert!((&e.x - t.mean(e.label)).amax() < 1e-5);
        }
    }

    #[test]
    fn prompt_sampling_is_deterministic() {
        let cov = Arc::new(SpdMatrix::identity(3));
        let draw = || {
            let mut rng = RngStream::new(99, 7);
            let t = sample_train_task(3, 3, &cov, &mut rng).unwrap();
            sample_prompt(&t, 100, &mut rng).unwrap()
        };
        assert_eq!(draw(), draw());
    }

    #[test]
    fn prior_shift_frequencies() {
        let base = vec![Arc::new(SpdMatrix::identity(2))];
        let spec = MismatchSpec::PriorShift {
            priors: vec![0.9, 0.1],
        };
        let mut rng = RngStream::new(6, 6);
        let t = make_mismatch_task(&spec, &base, 2, &mut rng).unwrap();
        let (p, _) = sample_prompt(&t, 100_000, &mut rng).unwrap();
        let f0 = p.examples().iter().filter(|e| e.label == 0).count() as f64 / 1e5;
        assert!((0.895..=0.905).contains(&f0), "freq {f0}");
    }

    #[test]
    fn zero_offset_norm_shift_matches_standard_normal_means() {
        let base = vec![Arc::new(SpdMatrix::identity(3))];
        let spec = MismatchSpec::NormShift { offsets: vec![0] };
        let mut rng = RngStream::new(6, 7);
        let n = 20_000;
        let (mut s1, mut s2) = (0.0, 0.0);
        for _ in 0..n {
            let t = make_mismatch_task(&spec, &base, 2, &mut rng).unwrap();
            let x = t.mean(0)[0];
            s1 += x;
            s2 += x * x;
        }
        let m = s1 / n as f64;
        let v = s2 / n as f64 - m * m;
        assert!(m.abs() < 5.0 / (n as f64).sqrt());
        assert!((v - 1.0).abs() < 0.05);
    }

    #[test]
    fn norm_shift_uses_shared_offset() {
        let base = vec![Arc::new(SpdMatrix::identity(2))];
        let noise = DMatrix::zeros(2, 3);
        let t = norm_shift_task_from_parts(7.0, &noise, Arc::clone(&base[0])).unwrap();
        assert!(t.means().iter().all(|v| *v == 7.0));
    }

    #[test]
    fn singleton_covariance_shift() {
        let lam0 = Arc::new(SpdMatrix::from_diagonal(&[2.0, 3.0]).unwrap());
        let spec = MismatchSpec::CovarianceShift { alternates: vec![] };
        let mut rng = RngStream::new(1, 2);
        let t = make_mismatch_task(&spec, &[Arc::clone(&lam0)], 3, &mut rng).unwrap();
        assert_eq!(t.covariance().entries(), lam0.entries());
    }

    #[test]
    fn invalid_mismatch_specs() {
        let base = vec![Arc::new(SpdMatrix::identity(2))];
        let mut rng = RngStream::new(1, 2);
        let bad = MismatchSpec::PriorShift {
            priors: vec![0.5, 0.2],
        };
        assert!(matches!(
            make_mismatch_task(&bad, &base, 2, &mut rng),
            Err(Error::InvalidSpec(_))
        ));
        let bad = MismatchSpec::PriorShift {
            priors: vec![0.5, 0.2, 0.3],
        };
        assert!(matches!(
            make_mismatch_task(&bad, &base, 2, &mut rng),
            Err(Error::InvalidSpec(_))
        ));
        let bad = MismatchSpec::NormShift { offsets: vec![] };
        assert!(make_mismatch_task(&bad, &base, 2, &mut rng).is_err());
        assert!(make_mismatch_task(&MismatchSpec::norm_shift_default(), &[], 2, &mut rng).is_err());
    }

    #[test]
    fn class_conditional_covariance_converges() {
        let cov = Arc::new(
            SpdMatrix::factorize(DMatrix::from_row_slice(
                3,
                3,
                &[2.0, 0.3, 0.0, 0.3, 1.0, -0.2, 0.0, -0.2, 0.5],
            ))
            .unwrap(),
        );
        let mut rng = RngStream::new(12, 0);
        let t = sample_train_task(3, 2, &cov, &mut rng).unwrap();
        let (p, _) = sample_prompt(&t, 200_000, &mut rng).unwrap();
        let mut scatter = DMatrix::<f64>::zeros(3, 3);
        let mut n = 0.0;
        for e in p.examples().iter().filter(|e| e.label == 0) {
            let r = &e.x - t.mean(0);
            scatter += &r * r.transpose();
            n += 1.0;
        }
        let err = (scatter / n - cov.entries()).norm() / cov.entries().norm();
        assert!(err < 0.05, "relative error {err}");
    }

    #[test]
    fn stats_sampler_matches_full_sampler_moments() {
        let cov = Arc::new(SpdMatrix::from_diagonal(&[1.0, 2.0]).unwrap());
        let mut rng = RngStream::new(21, 0);
        let t = sample_train_task(2, 3, &cov, &mut rng).unwrap();
        let q = DVector::from_vec(vec![0.5, -0.5]);
        let reps = 20_000;
        let n = 12;
        let collect = |full: bool, rng: &mut RngStream| {
            let (mut m, mut s) = (DMatrix::<f64>::zeros(2, 3), DMatrix::<f64>::zeros(2, 3));
            for _ in 0..reps {
                let st = if full {
                    sample_prompt_for_query(&t, n, &q, rng).unwrap().stats()
                } else {
                    sample_stats_for_query(&t, n, &q, rng).unwrap()
                };
                let p = st.class_statistics();
                m += &p;
                s += p.component_mul(&p);
            }
            let m = m / reps as f64;
            let v = s / reps as f64 - m.component_mul(&m);
            (m, v)
        };
        let (m_full, v_full) = collect(true, &mut rng);
        let (m_fast, v_fast) = collect(false, &mut rng);
        // exact mean of p_k is μ_k
        for k in 0..3 {
            for i in 0..2 {
                let se = (v_full[(i, k)] / reps as f64).sqrt();
                assert!((m_full[(i, k)] - t.means()[(i, k)]).abs() < 5.0 * se);
                assert!((m_fast[(i, k)] - t.means()[(i, k)]).abs() < 5.0 * se);
                assert!((v_full[(i, k)] / v_fast[(i, k)] - 1.0).abs() < 0.06);
            }
        }
    }

    #[test]
    fn stats_of_prompt() {
        let ex = vec![
            LabeledPoint {
                x: DVector::from_vec(vec![1.0, 0.0]),
                label: 1,
            },
            LabeledPoint {
                x: DVector::from_vec(vec![0.0, 2.0]),
                label: 0,
            },
            LabeledPoint {
                x: DVector::from_vec(vec![3.0, 1.0]),
                label: 1,
            },
        ];
        let p = Prompt::new(ex, DVector::from_vec(vec![1.0, 1.0]), 2).unwrap();
        let s = p.stats();
        assert_eq!(s.counts(), &[1, 2]);
        let b = s.binary_statistic().unwrap();
        // (2/3)(x1 - x2 + x3)
        assert!((b[0] - 8.0 / 3.0).abs() < 1e-15);
        assert!((b[1] - -2.0 / 3.0).abs() < 1e-15);
        assert_eq!(p.signed_labels().unwrap(), vec![1.0, -1.0, 1.0]);
    }

    #[test]
    fn prompt_validation() {
        let q = DVector::zeros(2);
        assert!(Prompt::new(vec![], q.clone(), 2).is_err());
        let bad_label = vec![LabeledPoint {
            x: DVector::zeros(2),
            label: 2,
        }];
        assert!(Prompt::new(bad_label, q.clone(), 2).is_err());
        let bad_dim = vec![LabeledPoint {
            x: DVector::zeros(3),
            label: 0,
        }];
        assert!(Prompt::new(bad_dim, q, 2).is_err());
    }

    #[test]
    fn record_round_trip() {
        let cov = Arc::new(
            SpdMatrix::factorize(DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0])).unwrap(),
        );
        let diag = Arc::new(SpdMatrix::from_diagonal(&[2.0, 0.5]).unwrap());
        let mut rng = RngStream::new(31, 0);
        let mut records = Vec::new();
        for c in [&cov, &diag] {
            let t = sample_train_task(2, 3, c, &mut rng).unwrap();
            let (p, y) = sample_prompt(&t, 5, &mut rng).unwrap();
            records.push(PromptRecord::from_parts(&t, &p, y));
        }
        assert!(records[0].covariance_rows.is_some());
        assert!(records[1].covariance_diag.is_some());
        let mut buf = Vec::new();
        write_records(&mut buf, &records).unwrap();
        assert_eq!(String::from_utf8_lossy(&buf).lines().count(), 2);
        let back = read_records(buf.as_slice()).unwrap();
        assert_eq!(back, records);
        let (task, prompt, label) = back[0].clone().into_parts().unwrap();
        assert_eq!(task.class_count(), 3);
        assert_eq!(prompt.len(), 5);
        assert_eq!(label, records[0].label);
    }
}
