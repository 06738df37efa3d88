//! Gradient-descent training, population-minimizer estimation and rate fits.

use std::io::Write;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::bayes_posterior;
use crate::error::{Error, Result};
use crate::loss::{loss, loss_and_grad, smoothness_bound, smoothness_term, Batch, BatchItem, Objective, Target};
use crate::metrics::{linear_fit, mean_stderr};
use crate::model::AttentionParams;
use crate::numerics::{RngStream, SpdMatrix};
use crate::task::{sample_prompt_stats, TaskSource};

/// Training stops with [`Error::DivergenceDetected`] once the loss exceeds
/// this multiple of its initial value.
pub const DIVERGENCE_FACTOR: f64 = 1e3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LearningRate {
    Fixed(f64),
    /// `1 / l̂` from the smoothness bound.
    Auto,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    FixedBatch,
    Streaming { batch_size: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    Constant,
    /// Constant for the first half, then `η / sqrt(t − T/2 + 1)`.
    HalfThenInvSqrt,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Averaging {
    None,
    /// Mean of the last `ceil(window · T)` iterates.
    Tail { window: f64 },
}

/// How the query label of a streamed training prompt enters the loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelMode {
    /// The sampled class.
    Sampled,
    /// The Bayes posterior of the query under its task. Same expected
    /// gradient as `Sampled`, lower variance.
    Bayes,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub learning_rate: LearningRate,
    pub mode: TrainMode,
    pub schedule: Schedule,
    pub averaging: Averaging,
    /// Training prompt length `N`.
    pub prompt_len: usize,
    pub label_mode: LabelMode,
    /// Draws used for `l̂` when streaming with an automatic learning rate.
    pub smoothness_samples: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            learning_rate: LearningRate::Auto,
            mode: TrainMode::FixedBatch,
            schedule: Schedule::Constant,
            averaging: Averaging::None,
            prompt_len: 100,
            label_mode: LabelMode::Sampled,
            smoothness_samples: 20_000,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if self.steps < 1 {
            return Err(Error::InvalidArgument("steps must be >= 1".into()));
        }
        if let LearningRate::Fixed(eta) = self.learning_rate {
            if !(eta.is_finite() && eta >= 0.0) {
                return Err(Error::InvalidArgument(format!("learning rate {eta} must be >= 0")));
            }
        }
        if let Averaging::Tail { window } = self.averaging {
            if !(window > 0.0 && window <= 1.0) {
                return Err(Error::InvalidArgument(format!("averaging window {window} not in (0, 1]")));
            }
        }
        if let TrainMode::Streaming { batch_size } = self.mode {
            if batch_size < 1 {
                return Err(Error::InvalidArgument("batch size must be >= 1".into()));
            }
        }
        if self.prompt_len < 1 {
            return Err(Error::InvalidArgument("prompt length must be >= 1".into()));
        }
        Ok(())
    }

    fn step_size(&self, eta: f64, t: usize) -> f64 {
        match self.schedule {
            Schedule::Constant => eta,
            Schedule::HalfThenInvSqrt => {
                let half = self.steps / 2;
                if t < half {
                    eta
                } else {
                    eta / ((t - half + 1) as f64).sqrt()
                }
            }
        }
    }

    fn tail_len(&self) -> usize {
        match self.averaging {
            Averaging::None => 0,
            Averaging::Tail { window } => ((window * self.steps as f64).ceil() as usize).clamp(1, self.steps),
        }
    }
}

/// Per-step diagnostics, all evaluated at `W^t` before step `t`.
#[derive(Clone, Debug)]
pub struct TrainTrace {
    pub loss: Vec<f64>,
    pub grad_norm: Vec<f64>,
    /// `‖W^t − W_ref‖²_F` when a reference was supplied.
    pub dist_sq: Option<Vec<f64>>,
    pub final_w: AttentionParams,
    pub learning_rate: f64,
}

impl TrainTrace {
    pub fn len(&self) -> usize {
        self.loss.len()
    }

    pub fn is_empty(&self) -> bool {
        self.loss.is_empty()
    }

    /// Columns `step,loss,grad_norm,dist_sq`; `dist_sq` is empty without a
    /// reference.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["step", "loss", "grad_norm", "dist_sq"])?;
        for t in 0..self.len() {
            let dist = self
                .dist_sq
                .as_ref()
                .map(|d| format!("{:.16e}", d[t]))
                .unwrap_or_default();
            w.write_record([
                t.to_string(),
                format!("{:.16e}", self.loss[t]),
                format!("{:.16e}", self.grad_norm[t]),
                dist,
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

struct Recorder<'a> {
    trace_loss: Vec<f64>,
    grad_norm: Vec<f64>,
    dist_sq: Option<Vec<f64>>,
    reference: Option<&'a DMatrix<f64>>,
    initial: Option<f64>,
}

impl<'a> Recorder<'a> {
    fn new(steps: usize, reference: Option<&'a DMatrix<f64>>) -> Self {
        Self {
            trace_loss: Vec::with_capacity(steps),
            grad_norm: Vec::with_capacity(steps),
            dist_sq: reference.map(|_| Vec::with_capacity(steps)),
            reference,
            initial: None,
        }
    }

    fn record(&mut self, step: usize, w: &DMatrix<f64>, l: f64, g: &DMatrix<f64>) -> Result<()> {
        let initial = *self.initial.get_or_insert(l);
        if !l.is_finite() || (initial > 0.0 && l > DIVERGENCE_FACTOR * initial) {
            return Err(Error::DivergenceDetected { step, loss: l });
        }
        self.trace_loss.push(l);
        self.grad_norm.push(g.norm());
        if let (Some(d), Some(r)) = (self.dist_sq.as_mut(), self.reference) {
            d.push((w - r).norm_squared());
        }
        Ok(())
    }

    fn finish(self, final_w: AttentionParams, learning_rate: f64) -> TrainTrace {
        TrainTrace {
            loss: self.trace_loss,
            grad_norm: self.grad_norm,
            dist_sq: self.dist_sq,
            final_w,
            learning_rate,
        }
    }
}

/// Exact gradient descent on a fixed batch. With an automatic learning rate
/// the step is `1 / l̂` for `l̂` the batch's smoothness bound, which makes
/// the loss non-increasing.
pub fn train_full_batch(
    w0: &AttentionParams,
    batch: &Batch,
    config: &TrainConfig,
    reference: Option<&DMatrix<f64>>,
) -> Result<TrainTrace> {
    config.validate()?;
    let objective = Objective::for_classes(batch.class_count());
    let eta = match config.learning_rate {
        LearningRate::Fixed(eta) => eta,
        LearningRate::Auto => {
            let l = smoothness_bound(objective, batch)?;
            if l <= 0.0 {
                return Err(Error::ZeroSmoothness);
            }
            1.0 / l
        }
    };
    let mut w = w0.matrix().clone();
    let mut rec = Recorder::new(config.steps, reference);
    let tail = config.tail_len();
    let mut acc = DMatrix::zeros(w.nrows(), w.ncols());
    for t in 0..config.steps {
        let params = AttentionParams::new(w.clone())?;
        let (l, g) = loss_and_grad(objective, &params, batch)?;
        rec.record(t, &w, l, &g)?;
        w -= g * config.step_size(eta, t);
        if t + tail >= config.steps {
            acc += &w;
        }
    }
    let out = if tail > 0 { acc / tail as f64 } else { w };
    Ok(rec.finish(AttentionParams::new(out)?, eta))
}

/// One training item: a fresh task, prompt statistics and query target.
pub fn draw_item(
    source: &dyn TaskSource,
    prompt_len: usize,
    label_mode: LabelMode,
    rng: &mut RngStream,
) -> Result<BatchItem> {
    let task = source.sample_task(rng)?;
    let (stats, label) = sample_prompt_stats(&task, prompt_len, rng)?;
    let target = match label_mode {
        LabelMode::Sampled => Target::Class(label),
        LabelMode::Bayes => Target::Soft(bayes_posterior(&task, stats.query())?.probs().to_vec()),
    };
    Ok(BatchItem { stats, target })
}

const PARALLEL_MIN: usize = 64;

/// Items `offset .. offset + size`, item `i` drawn from stream `("item", i)`.
pub fn sample_batch(
    source: &dyn TaskSource,
    prompt_len: usize,
    size: usize,
    label_mode: LabelMode,
    rng: &RngStream,
    offset: u64,
) -> Result<Batch> {
    let draw = |i: usize| draw_item(source, prompt_len, label_mode, &mut rng.substream("item", offset + i as u64));
    let items: Vec<BatchItem> = if size >= PARALLEL_MIN {
        (0..size).into_par_iter().map(draw).collect::<Result<_>>()?
    } else {
        (0..size).map(draw).collect::<Result<_>>()?
    };
    Batch::new(items)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SmoothnessEstimate {
    pub value: f64,
    pub stderr: f64,
    pub samples: usize,
}

/// Monte Carlo estimate of the curvature bound `l̂` over the task
/// distribution at prompt length `N`.
pub fn estimate_smoothness(
    source: &dyn TaskSource,
    prompt_len: usize,
    samples: usize,
    rng: &RngStream,
) -> Result<SmoothnessEstimate> {
    if samples < 100 {
        return Err(Error::InvalidArgument("smoothness estimate needs >= 100 samples".into()));
    }
    let objective = Objective::for_classes(source.class_count());
    let terms: Vec<f64> = (0..samples)
        .into_par_iter()
        .map(|i| {
            let mut r = rng.substream("smoothness", i as u64);
            let task = source.sample_task(&mut r)?;
            let (stats, _) = sample_prompt_stats(&task, prompt_len, &mut r)?;
            smoothness_term(objective, &stats)
        })
        .collect::<Result<_>>()?;
    let (value, stderr) = mean_stderr(&terms);
    Ok(SmoothnessEstimate {
        value,
        stderr,
        samples,
    })
}

fn auto_rate(source: &dyn TaskSource, config: &TrainConfig, rng: &RngStream) -> Result<f64> {
    match config.learning_rate {
        LearningRate::Fixed(eta) => Ok(eta),
        LearningRate::Auto => {
            let est = estimate_smoothness(source, config.prompt_len, config.smoothness_samples, rng)?;
            if est.value <= 0.0 {
                return Err(Error::ZeroSmoothness);
            }
            Ok(1.0 / est.value)
        }
    }
}

fn stream_from(
    w0: &DMatrix<f64>,
    source: &dyn TaskSource,
    config: &TrainConfig,
    eta: f64,
    rng: &RngStream,
    reference: Option<&DMatrix<f64>>,
) -> Result<TrainTrace> {
    let TrainMode::Streaming { batch_size } = config.mode else {
        return Err(Error::InvalidArgument("streaming training needs streaming mode".into()));
    };
    let objective = Objective::for_classes(source.class_count());
    let mut w = w0.clone();
    let mut rec = Recorder::new(config.steps, reference);
    let tail = config.tail_len();
    let mut acc = DMatrix::zeros(w.nrows(), w.ncols());
    for t in 0..config.steps {
        let batch = sample_batch(
            source,
            config.prompt_len,
            batch_size,
            config.label_mode,
            rng,
            (t * batch_size) as u64,
        )?;
        let params = AttentionParams::new(w.clone())?;
        let (l, g) = loss_and_grad(objective, &params, &batch)?;
        rec.record(t, &w, l, &g)?;
        w -= g * config.step_size(eta, t);
        if t + tail >= config.steps {
            acc += &w;
        }
    }
    let out = if tail > 0 { acc / tail as f64 } else { w };
    Ok(rec.finish(AttentionParams::new(out)?, eta))
}

/// Stochastic gradient descent on fresh batches, approximating the
/// population loss. Returns the (tail-averaged) iterate and the trace of
/// minibatch losses.
pub fn train_streaming(
    w0: &AttentionParams,
    source: &dyn TaskSource,
    config: &TrainConfig,
    rng: &RngStream,
    reference: Option<&DMatrix<f64>>,
) -> Result<(AttentionParams, TrainTrace)> {
    config.validate()?;
    if w0.dim() != source.dim() {
        return Err(Error::DimensionMismatch {
            what: "initial weights",
            expected: source.dim(),
            found: w0.dim(),
        });
    }
    let eta = auto_rate(source, config, &rng.substream("rate", 0))?;
    let trace = stream_from(w0.matrix(), source, config, eta, &rng.substream("steps", 0), reference)?;
    Ok((trace.final_w.clone(), trace))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MinimizerConfig {
    /// Total number of training prompts drawn.
    pub budget: usize,
    pub burn_in_fraction: f64,
    pub burn_in_batch: usize,
    pub replicates: usize,
    pub replicate_batch: usize,
    pub smoothness_samples: usize,
    pub label_mode: LabelMode,
    /// Largest accepted `max SE / max |W|` across replicates.
    pub spread_tolerance: f64,
}

impl Default for MinimizerConfig {
    fn default() -> Self {
        Self {
            budget: 1_000_000,
            burn_in_fraction: 0.2,
            burn_in_batch: 10,
            replicates: 5,
            replicate_batch: 50,
            smoothness_samples: 20_000,
            label_mode: LabelMode::Bayes,
            spread_tolerance: 0.05,
        }
    }
}

#[derive(Clone, Debug)]
pub struct MinimizerEstimate {
    pub w: AttentionParams,
    /// Entrywise standard error of the replicate mean.
    pub stderr: DMatrix<f64>,
    pub replicates: Vec<DMatrix<f64>>,
    pub learning_rate: f64,
}

/// Estimates the population minimizer `W*` at prompt length `N` from `R`
/// independent replicates, each spending its share of the budget on a
/// constant-step burn-in from zero followed by a constant-then-`1/sqrt(t)`
/// phase averaged over its second half.
pub fn estimate_population_minimizer(
    source: &dyn TaskSource,
    prompt_len: usize,
    config: &MinimizerConfig,
    rng: &RngStream,
) -> Result<MinimizerEstimate> {
    if config.replicates < 2 {
        return Err(Error::InvalidArgument("need at least 2 replicates".into()));
    }
    if !(0.0..1.0).contains(&config.burn_in_fraction) {
        return Err(Error::InvalidArgument("burn-in fraction must be in [0, 1)".into()));
    }
    let share = config.budget / config.replicates;
    let burn_in = (share as f64 * config.burn_in_fraction) as usize;
    let burn_steps = burn_in / config.burn_in_batch.max(1);
    let rep_steps = (share - burn_in) / config.replicate_batch.max(1);
    if rep_steps < 2 {
        return Err(Error::BudgetTooSmall {
            spread: f64::INFINITY,
            tolerance: config.spread_tolerance,
        });
    }
    let est = estimate_smoothness(source, prompt_len, config.smoothness_samples, &rng.substream("rate", 0))?;
    if est.value <= 0.0 {
        return Err(Error::ZeroSmoothness);
    }
    let eta = 1.0 / est.value;
    let d = source.dim();
    let burn_cfg = TrainConfig {
        steps: burn_steps.max(1),
        learning_rate: LearningRate::Fixed(eta),
        mode: TrainMode::Streaming {
            batch_size: config.burn_in_batch.max(1),
        },
        schedule: Schedule::Constant,
        averaging: Averaging::None,
        prompt_len,
        label_mode: config.label_mode,
        smoothness_samples: config.smoothness_samples,
    };
    let rep_cfg = TrainConfig {
        steps: rep_steps,
        mode: TrainMode::Streaming {
            batch_size: config.replicate_batch,
        },
        schedule: Schedule::HalfThenInvSqrt,
        averaging: Averaging::Tail { window: 0.5 },
        ..burn_cfg.clone()
    };
    let replicates: Vec<DMatrix<f64>> = (0..config.replicates)
        .into_par_iter()
        .map(|r| {
            let stream = rng.substream("replicate", r as u64);
            let mut w = DMatrix::zeros(d, d);
            if burn_steps > 0 {
                w = stream_from(&w, source, &burn_cfg, eta, &stream.substream("burn_in", 0), None)?
                    .final_w
                    .into_matrix();
            }
            stream_from(&w, source, &rep_cfg, eta, &stream.substream("main", 0), None)
                .map(|t| t.final_w.into_matrix())
        })
        .collect::<Result<_>>()?;
    let r = replicates.len() as f64;
    let mean = replicates.iter().fold(DMatrix::zeros(d, d), |a, b| a + b) / r;
    let var = replicates
        .iter()
        .fold(DMatrix::zeros(d, d), |a, b| a + (b - &mean).map(|v| v * v))
        / (r - 1.0);
    let stderr = var.map(|v| (v / r).sqrt());
    let spread = stderr.amax() / mean.amax().max(f64::MIN_POSITIVE);
    if spread > config.spread_tolerance {
        return Err(Error::BudgetTooSmall {
            spread,
            tolerance: config.spread_tolerance,
        });
    }
    Ok(MinimizerEstimate {
        w: AttentionParams::new(mean)?,
        stderr,
        replicates,
        learning_rate: eta,
    })
}

/// `‖W / c − Λ⁻¹‖_max`.
pub fn minimizer_gap(w: &DMatrix<f64>, class_count: usize, covariance: &SpdMatrix) -> f64 {
    (w / class_count as f64 - covariance.inverse()).amax()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateFit {
    /// Slope of `log ‖W^t − W_ref‖²` per step.
    pub rate: f64,
    pub r2: f64,
    /// The fitted window was constant.
    pub flat: bool,
}

/// Least-squares slope of `log dist_sq` against `t` over the middle 80% of
/// the trace.
pub fn convergence_rate_fit(dist_sq: &[f64]) -> Result<RateFit> {
    let n = dist_sq.len();
    if n < 3 {
        return Err(Error::InvalidArgument("rate fit needs at least 3 steps".into()));
    }
    let lo = n / 10;
    let hi = (n - n / 10).max(lo + 2);
    let mut ts = Vec::with_capacity(hi - lo);
    let mut ys = Vec::with_capacity(hi - lo);
    for (t, v) in dist_sq.iter().enumerate().take(hi).skip(lo) {
        if v.is_nan() || *v <= 0.0 {
            return Err(Error::NonPositiveDistance { step: t });
        }
        ts.push(t as f64);
        ys.push(v.ln());
    }
    let flat = ys.iter().all(|y| *y == ys[0]);
    if flat {
        return Ok(RateFit {
            rate: 0.0,
            r2: 0.0,
            flat: true,
        });
    }
    let fit = linear_fit(&ts, &ys)?;
    Ok(RateFit {
        rate: fit.slope,
        r2: fit.r2,
        flat: false,
    })
}

/// Convenience for fixed-batch rate checks: `W_ref` from a run `ref_factor`
/// times longer, then the traced run and its fit.
pub fn fixed_batch_rate(
    batch: &Batch,
    config: &TrainConfig,
    ref_factor: usize,
) -> Result<(TrainTrace, RateFit)> {
    let w0 = AttentionParams::zeros(batch.dim());
    let long = TrainConfig {
        steps: config.steps * ref_factor,
        averaging: Averaging::None,
        ..config.clone()
    };
    let reference = train_full_batch(&w0, batch, &long, None)?.final_w.into_matrix();
    let trace = train_full_batch(&w0, batch, config, Some(&reference))?;
    let fit = convergence_rate_fit(trace.dist_sq.as_deref().unwrap_or_default())?;
    Ok((trace, fit))
}

/// Empirical loss of `W` on `batch` under the natural objective.
pub fn batch_loss(params: &AttentionParams, batch: &Batch) -> Result<f64> {
    loss(Objective::for_classes(batch.class_count()), params, batch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::loss::grad;
    use crate::task::{MatchedTasks, MixtureTask};
    use std::sync::Arc;

    fn source(diag: &[f64], c: usize) -> MatchedTasks {
        MatchedTasks::new(Arc::new(SpdMatrix::from_diagonal(diag).unwrap()), c)
    }

    fn fixed(steps: usize) -> TrainConfig {
        TrainConfig {
            steps,
            ..Default::default()
        }
    }

    #[test]
    fn zero_rate_keeps_weights() {
        let src = source(&[1.0, 2.0], 2);
        let b = sample_batch(&src, 20, 16, LabelMode::Sampled, &RngStream::new(1, 0), 0).unwrap();
        let mut rng = RngStream::new(1, 1);
        let w0 = AttentionParams::new(rng.standard_normal_matrix(2, 2)).unwrap();
        let cfg = TrainConfig {
            learning_rate: LearningRate::Fixed(0.0),
            ..fixed(20)
        };
        let tr = train_full_batch(&w0, &b, &cfg, None).unwrap();
        assert_eq!(tr.final_w, w0);
        assert!(tr.loss.iter().all(|l| *l == tr.loss[0]));
        assert_eq!(tr.len(), 20);
    }

    #[test]
    fn single_step_identity() {
        let src = source(&[1.0, 2.0, 0.5], 3);
        let b = sample_batch(&src, 10, 8, LabelMode::Sampled, &RngStream::new(2, 0), 0).unwrap();
        let w0 = AttentionParams::zeros(3);
        let cfg = TrainConfig {
            learning_rate: LearningRate::Fixed(0.3),
            ..fixed(1)
        };
        let tr = train_full_batch(&w0, &b, &cfg, None).unwrap();
        let expect = w0.matrix() - grad(Objective::Multi, &w0, &b).unwrap() * 0.3;
        assert_eq!(tr.final_w.matrix(), &expect);
    }

    #[test]
    fn auto_rate_descends_and_converges() {
        let src = source(&[1.0, 2.0], 2);
        let b = sample_batch(&src, 20, 32, LabelMode::Bayes, &RngStream::new(3, 0), 0).unwrap();
        let tr = train_full_batch(&AttentionParams::zeros(2), &b, &fixed(2000), None).unwrap();
        for w in tr.loss.windows(2) {
            assert!(w[1] <= w[0] + 1e-10);
        }
        let last = *tr.grad_norm.last().unwrap();
        assert!(last < 1e-6, "grad norm {last}");
    }

    #[test]
    fn divergence_is_detected() {
        // Both items are fitted almost perfectly at W0, but their gradient
        // directions conflict: one huge step on the first flips the second.
        use crate::task::PromptStats;
        use nalgebra::DVector;
        let item = |v: [f64; 2], q: [f64; 2]| BatchItem {
            stats: PromptStats::new(
                DMatrix::from_column_slice(2, 2, &[0.0, 0.0, v[0], v[1]]),
                vec![0, 1],
                DVector::from_column_slice(&q),
            )
            .unwrap(),
            target: Target::Class(1),
        };
        let b = Batch::new(vec![item([1.0, 0.0], [1.0, 0.0]), item([-1.0, 10.0], [1.0, 1.0])]).unwrap();
        let w0 = AttentionParams::new(DMatrix::from_row_slice(2, 2, &[20.0, 0.0, 0.0, 10.0])).unwrap();
        let cfg = TrainConfig {
            learning_rate: LearningRate::Fixed(1e12),
            ..fixed(5)
        };
        assert!(matches!(
            train_full_batch(&w0, &b, &cfg, None),
            Err(Error::DivergenceDetected { step: 1, .. })
        ));
    }

    #[test]
    fn zero_statistic_rejects_auto_rate() {
        struct Degenerate;
        impl TaskSource for Degenerate {
            fn dim(&self) -> usize {
                2
            }
            fn class_count(&self) -> usize {
                2
            }
            fn sample_task(&self, _: &mut RngStream) -> Result<MixtureTask> {
                let cov = SpdMatrix::from_diagonal(&[1e-300, 1e-300])?;
                MixtureTask::new(DMatrix::zeros(2, 2), Arc::new(cov), None)
            }
        }
        let b = sample_batch(&Degenerate, 4, 8, LabelMode::Sampled, &RngStream::new(5, 0), 0).unwrap();
        assert!(matches!(
            train_full_batch(&AttentionParams::zeros(2), &b, &fixed(3), None),
            Err(Error::ZeroSmoothness)
        ));
        let est = estimate_smoothness(&Degenerate, 4, 100, &RngStream::new(5, 1)).unwrap();
        assert_eq!(est.value, 0.0);
    }

    #[test]
    fn smoothness_matches_numeric_integration() {
        // d = 1, μ_0 = −μ_1 = −1 fixed, Λ = 1, N = 4. With labels ±1,
        // p = 2 m where m = (1/N) Σ y_i x_i = 1 + ε/√N... exactly
        // m ~ N(1, 1/N) since y_i x_i = 1 + y_i z_i. So ‖p‖² = 4 m², and
        // E[q²] = 2 (mixture of N(±1, 1)), independent of p: l = E[m²] E[q²].
        struct Fixed;
        impl TaskSource for Fixed {
            fn dim(&self) -> usize {
                1
            }
            fn class_count(&self) -> usize {
                2
            }
            fn sample_task(&self, _: &mut RngStream) -> Result<MixtureTask> {
                MixtureTask::new(
                    DMatrix::from_column_slice(1, 2, &[-1.0, 1.0]),
                    Arc::new(SpdMatrix::identity(1)),
                    None,
                )
            }
        }
        let n = 4.0;
        // E[m²] by Simpson's rule over the N(1, 1/N) density
        let sd = 1.0 / f64::sqrt(n);
        let pdf = |x: f64| (-0.5 * ((x - 1.0) / sd).powi(2)).exp() / (sd * (2.0 * std::f64::consts::PI).sqrt());
        let (a, b, k) = (1.0 - 12.0 * sd, 1.0 + 12.0 * sd, 20_000);
        let h = (b - a) / k as f64;
        let mut s = 0.0;
        for i in 0..=k {
            let x = a + i as f64 * h;
            let w = if i == 0 || i == k { 1.0 } else if i % 2 == 1 { 4.0 } else { 2.0 };
            s += w * x * x * pdf(x);
        }
        let em2 = s * h / 3.0;
        let oracle = em2 * 2.0;
        assert!((oracle - 2.5).abs() < 1e-9);
        let est = estimate_smoothness(&Fixed, 4, 1_000_000, &RngStream::new(6, 0)).unwrap();
        assert!(((est.value - oracle) / oracle).abs() < 0.02, "{} vs {oracle}", est.value);
    }

    #[test]
    fn smoothness_stderr_shrinks() {
        let src = source(&[1.0, 2.0], 2);
        let a = estimate_smoothness(&src, 20, 20_000, &RngStream::new(7, 0)).unwrap();
        let b = estimate_smoothness(&src, 20, 40_000, &RngStream::new(7, 1)).unwrap();
        let ratio = b.stderr / a.stderr;
        assert!((0.6..0.85).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn streaming_is_deterministic_and_averages_tail() {
        let src = source(&[1.0, 2.0], 2);
        let cfg = TrainConfig {
            steps: 40,
            mode: TrainMode::Streaming { batch_size: 16 },
            averaging: Averaging::Tail { window: 0.5 },
            prompt_len: 20,
            smoothness_samples: 1000,
            ..Default::default()
        };
        let rng = RngStream::new(8, 0);
        let (a, _) = train_streaming(&AttentionParams::zeros(2), &src, &cfg, &rng, None).unwrap();
        let (b, _) = train_streaming(&AttentionParams::zeros(2), &src, &cfg, &rng, None).unwrap();
        assert_eq!(a, b);

        // recompute the average from the iterates of an unaveraged run
        let plain = TrainConfig {
            averaging: Averaging::None,
            ..cfg.clone()
        };
        let mut iterates = Vec::new();
        for steps in 1..=40 {
            let c = TrainConfig { steps, ..plain.clone() };
            // step sizes and batches are a prefix of the longer run
            let (w, _) = train_streaming(&AttentionParams::zeros(2), &src, &c, &rng, None).unwrap();
            iterates.push(w.into_matrix());
        }
        let mean = iterates[20..].iter().fold(DMatrix::zeros(2, 2), |s, w| s + w) / 20.0;
        assert!((a.matrix() - mean).amax() < 1e-12);
    }

    #[test]
    fn large_batch_direction_matches_control() {
        let src = source(&[1.0, 2.0], 2);
        let w = AttentionParams::new(DMatrix::from_row_slice(2, 2, &[0.5, 0.1, -0.2, 0.3])).unwrap();
        let small = sample_batch(&src, 20, 1 << 14, LabelMode::Sampled, &RngStream::new(9, 0), 0).unwrap();
        let big = sample_batch(&src, 20, 10 << 14, LabelMode::Sampled, &RngStream::new(9, 1), 0).unwrap();
        let g1 = grad(Objective::Binary, &w, &small).unwrap();
        let g2 = grad(Objective::Binary, &w, &big).unwrap();
        let cos = g1.dot(&g2) / (g1.norm() * g2.norm());
        assert!(cos.acos().to_degrees() < 5.0, "angle {}", cos.acos().to_degrees());
    }

    #[test]
    fn rate_fit_on_exact_exponential() {
        let d: Vec<f64> = (0..200).map(|t| (-(t as f64) / 10.0).exp()).collect();
        let f = convergence_rate_fit(&d).unwrap();
        assert!((f.rate + 0.1).abs() < 1e-9);
        assert!(f.r2 > 0.999_999);
        let f = convergence_rate_fit(&[2.0; 50]).unwrap();
        assert!(f.flat && f.rate == 0.0 && f.r2 == 0.0);
        assert!(matches!(
            convergence_rate_fit(&[1.0, 1.0, 0.0, 1.0, 1.0]),
            Err(Error::NonPositiveDistance { step: 2 })
        ));
    }

    #[test]
    fn full_batch_converges_linearly() {
        let src = source(&[1.0, 2.0], 2);
        let b = sample_batch(&src, 20, 256, LabelMode::Sampled, &RngStream::new(10, 0), 0).unwrap();
        let (trace, fit) = fixed_batch_rate(&b, &fixed(300), 10).unwrap();
        assert!(fit.rate < 0.0 && fit.r2 > 0.98, "{fit:?}");
        let mut out = Vec::new();
        trace.write_csv(&mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert!(text.starts_with("step,loss,grad_norm,dist_sq\n"));
        assert_eq!(text.lines().count(), 301);
    }

    #[test]
    fn minimizer_replicates_agree_across_seeds() {
        let src = source(&[1.0, 2.0], 2);
        let cfg = MinimizerConfig {
            budget: 100_000,
            smoothness_samples: 5_000,
            spread_tolerance: 1.0,
            ..Default::default()
        };
        let a = estimate_population_minimizer(&src, 50, &cfg, &RngStream::new(11, 0)).unwrap();
        let b = estimate_population_minimizer(&src, 50, &cfg, &RngStream::new(12, 0)).unwrap();
        let pooled = (a.stderr.map(|v| v * v) + b.stderr.map(|v| v * v)).map(f64::sqrt);
        for i in 0..4 {
            assert!((a.w.matrix()[i] - b.w.matrix()[i]).abs() < 3.0 * pooled[i] + 1e-12);
        }
        assert_eq!(a.replicates.len(), 5);
    }

    #[test]
    fn tiny_budget_is_rejected() {
        let src = source(&[1.0, 2.0], 2);
        let cfg = MinimizerConfig {
            budget: 100,
            smoothness_samples: 100,
            ..Default::default()
        };
        assert!(matches!(
            estimate_population_minimizer(&src, 20, &cfg, &RngStream::new(13, 0)),
            Err(Error::BudgetTooSmall { .. })
        ));
    }

    #[test]
    fn invalid_configs() {
        let src = source(&[1.0], 2);
        let b = sample_batch(&src, 5, 4, LabelMode::Sampled, &RngStream::new(14, 0), 0).unwrap();
        let w0 = AttentionParams::zeros(1);
        for cfg in [
            fixed(0),
            TrainConfig {
                averaging: Averaging::Tail { window: 0.0 },
                ..fixed(5)
            },
            TrainConfig {
                learning_rate: LearningRate::Fixed(-1.0),
                ..fixed(5)
            },
        ] {
            assert!(matches!(train_full_batch(&w0, &b, &cfg, None), Err(Error::InvalidArgument(_))));
        }
        assert!(train_streaming(&w0, &src, &fixed(5), &RngStream::new(0, 0), None).is_err());
    }
}
