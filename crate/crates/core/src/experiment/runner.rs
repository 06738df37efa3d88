use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use nalgebra::DMatrix;
use rayon::prelude::*;

use super::config::{CovarianceSpec, ExperimentConfig, ExperimentKind, MismatchKind, TrainingSettings};
use super::output::{sort_rows, ResultRow};
use crate::baselines::{mismatch_limit_prediction, LdaOptions};
use crate::error::{Error, Result};
use crate::loss::Objective;
use crate::metrics::{
    count_moment_check, evaluate_predictors, loglog_slope, mean_stderr, tv_distance, BayesOracle, Lda, Predictor,
    PromptData, ProtocolConfig, SoftmaxRegression, Transformer,
};
use crate::model::{AttentionParams, OutputDistribution};
use crate::numerics::{RngStream, SpdMatrix};
use crate::task::{
    sample_covariance_diag, sample_query, sample_stats_for_query, MatchedTasks, MismatchSpec, MismatchTasks,
    TaskSource,
};
use crate::trainer::{
    estimate_population_minimizer, estimate_smoothness, fixed_batch_rate, minimizer_gap, sample_batch,
    train_streaming, Averaging, LabelMode, LearningRate, MinimizerConfig, Schedule, TrainConfig, TrainMode,
};

/// Rows produced before the first failing cell, and that failure.
#[derive(Debug)]
pub struct RunOutput {
    pub rows: Vec<ResultRow>,
    pub error: Option<Error>,
}

/// Runs an experiment to completion; any failing cell fails the run.
pub fn run_experiment(config: &ExperimentConfig) -> Result<Vec<ResultRow>> {
    let out = run_experiment_partial(config)?;
    match out.error {
        Some(e) => Err(e),
        None => Ok(out.rows),
    }
}

/// Runs every cell; successful cells' rows are kept even if others fail.
/// Only configuration errors are returned as `Err`.
pub fn run_experiment_partial(config: &ExperimentConfig) -> Result<RunOutput> {
    let ctx = Context::new(config.clone().resolve()?)?;
    let (mut rows, error) = match ctx.cfg.kind {
        ExperimentKind::SweepNm | ExperimentKind::SweepC => error_surface(&ctx),
        ExperimentKind::MinimizerGap => gap_scaling(&ctx),
        ExperimentKind::Mismatch => mismatch(&ctx),
        ExperimentKind::BaselineCompare => baseline_compare(&ctx),
        ExperimentKind::RateFit => rate_fit(&ctx),
        ExperimentKind::MomentSuite => moment_suite(&ctx),
    };
    sort_rows(&mut rows);
    Ok(RunOutput { rows, error })
}

struct Context {
    cfg: ExperimentConfig,
    hash: String,
    timestamp: String,
    root: RngStream,
    covariance: Arc<SpdMatrix>,
}

impl Context {
    fn new(cfg: ExperimentConfig) -> Result<Self> {
        let hash = cfg.hash();
        let timestamp = cfg.resolve_timestamp()?;
        let root = RngStream::new(cfg.seed, 0);
        let d = cfg.dim();
        let covariance = Arc::new(match &cfg.covariance {
            CovarianceSpec::Sampled => sample_covariance_diag(d, &mut root.substream("covariance", 0))?,
            CovarianceSpec::Identity => SpdMatrix::identity(d),
            CovarianceSpec::Diagonal(diag) => SpdMatrix::from_diagonal(diag)?,
        });
        Ok(Self {
            cfg,
            hash,
            timestamp,
            root,
            covariance,
        })
    }

    fn row(
        &self,
        n: Option<usize>,
        m: Option<usize>,
        c: usize,
        metric: impl Into<String>,
        value: f64,
        stderr: Option<f64>,
    ) -> Result<ResultRow> {
        let metric = metric.into();
        if !value.is_finite() {
            return Err(Error::InvalidArgument(format!("{metric} is not finite ({value})")));
        }
        Ok(ResultRow {
            kind: self.cfg.kind.as_str().to_string(),
            n,
            m,
            c,
            d: self.cfg.dim(),
            metric,
            value,
            stderr,
            config_hash: self.hash.clone(),
            timestamp: self.timestamp.clone(),
        })
    }

    fn matched(&self, c: usize) -> MatchedTasks {
        MatchedTasks::new(Arc::clone(&self.covariance), c)
    }

    fn protocol(&self, m: usize, prompts_per_task: usize) -> ProtocolConfig {
        ProtocolConfig {
            tasks: self.cfg.protocol.tasks,
            prompts_per_task,
            prompt_len: m,
        }
    }

    /// Shared by every cell with the same `c`, so errors at different `N`
    /// and `M` are measured on the same tasks and queries.
    fn eval_stream(&self, c: usize) -> RngStream {
        self.root.substream("eval", c as u64)
    }

    fn cells_nc(&self) -> Vec<(usize, usize)> {
        let cfg = &self.cfg;
        cfg.c_grid.iter().flat_map(|&c| cfg.n_grid.iter().map(move |&n| (c, n))).collect()
    }
}

/// Runs the cells in parallel. Results keep the cell order; the first failure
/// (in cell order) is reported.
fn run_cells<T: Sync, R: Send>(cells: &[T], f: impl Fn(&T) -> Result<R> + Sync) -> (Vec<R>, Option<Error>) {
    let results: Vec<Result<R>> = cells.par_iter().map(&f).collect();
    let mut ok = Vec::with_capacity(results.len());
    let mut error = None;
    for r in results {
        match r {
            Ok(v) => ok.push(v),
            Err(e) if error.is_none() => error = Some(e),
            Err(_) => {}
        }
    }
    (ok, error)
}

fn flatten(parts: (Vec<Vec<ResultRow>>, Option<Error>)) -> (Vec<ResultRow>, Option<Error>) {
    (parts.0.into_iter().flatten().collect(), parts.1)
}

/// Streaming SGD from zero at a fixed rate: a constant-step burn-in on small
/// batches, then a constant-then-decaying phase averaged over its second half.
fn train_at_rate(
    source: &dyn TaskSource,
    n: usize,
    eta: f64,
    t: &TrainingSettings,
    rng: &RngStream,
) -> Result<AttentionParams> {
    let burn = (t.budget as f64 * t.burn_in_fraction) as usize;
    let burn_steps = burn / t.burn_in_batch;
    let base = TrainConfig {
        steps: burn_steps.max(1),
        learning_rate: LearningRate::Fixed(eta),
        mode: TrainMode::Streaming {
            batch_size: t.burn_in_batch,
        },
        schedule: Schedule::Constant,
        averaging: Averaging::None,
        prompt_len: n,
        label_mode: t.label_mode,
        smoothness_samples: t.smoothness_samples,
    };
    let mut w = AttentionParams::zeros(source.dim());
    if burn_steps > 0 {
        w = train_streaming(&w, source, &base, &rng.substream("burn_in", 0), None)?.0;
    }
    let main = TrainConfig {
        steps: ((t.budget - burn) / t.batch).max(1),
        mode: TrainMode::Streaming { batch_size: t.batch },
        schedule: Schedule::HalfThenInvSqrt,
        averaging: Averaging::Tail { window: 0.5 },
        ..base
    };
    Ok(train_streaming(&w, source, &main, &rng.substream("main", 0), None)?.0)
}

struct Trained {
    params: AttentionParams,
    learning_rate: f64,
    /// Held-out error of the selected rate, when a grid was searched.
    selection_error: Option<(f64, f64)>,
}

/// Trains at `1 / l̂`, or at each rate of the configured grid keeping the one
/// with the lowest held-out inference error at `M = N`. All candidates see
/// the same training draws.
fn train_model(ctx: &Context, c: usize, n: usize) -> Result<Trained> {
    let t = &ctx.cfg.training;
    let source = ctx.matched(c);
    let rng = ctx.root.substream(&format!("train/c{c}"), n as u64);
    let Some(grid) = &t.lr_grid else {
        let est = estimate_smoothness(&source, n, t.smoothness_samples, &rng.substream("rate", 0))?;
        if est.value <= 0.0 {
            return Err(Error::ZeroSmoothness);
        }
        let eta = 1.0 / est.value;
        return Ok(Trained {
            params: train_at_rate(&source, n, eta, t, &rng)?,
            learning_rate: eta,
            selection_error: None,
        });
    };
    let held_out = ctx.root.substream("select", c as u64);
    let mut best: Option<Trained> = None;
    for &eta in grid {
        let params = train_at_rate(&source, n, eta, t, &rng)?;
        let model = Transformer::new(params.clone(), c);
        let rec = evaluate_predictors(
            &[&model],
            &source,
            &ctx.protocol(n, ctx.cfg.protocol.prompts_per_task),
            &held_out,
        )?
        .remove(0);
        if best.as_ref().is_none_or(|b| rec.mean < b.selection_error.map_or(f64::INFINITY, |e| e.0)) {
            best = Some(Trained {
                params,
                learning_rate: eta,
                selection_error: Some((rec.mean, rec.stderr)),
            });
        }
    }
    best.ok_or_else(|| Error::Config("empty learning-rate grid".into()))
}

fn training_rows(ctx: &Context, c: usize, n: usize, trained: &Trained) -> Result<Vec<ResultRow>> {
    let mut rows = vec![ctx.row(Some(n), None, c, "learning_rate", trained.learning_rate, None)?];
    if let Some((mean, se)) = trained.selection_error {
        rows.push(ctx.row(Some(n), Some(n), c, "selection_tv_error", mean, Some(se))?);
    }
    Ok(rows)
}

/// The trained model, or the Bayes oracle when `oracle_model` is set.
fn model_for(ctx: &Context, c: usize, n: usize, rows: &mut Vec<ResultRow>) -> Result<Box<dyn Predictor>> {
    if ctx.cfg.oracle_model {
        return Ok(Box::new(BayesOracle));
    }
    let trained = train_model(ctx, c, n)?;
    rows.extend(training_rows(ctx, c, n, &trained)?);
    Ok(Box::new(Transformer::new(trained.params, c)))
}

fn error_surface(ctx: &Context) -> (Vec<ResultRow>, Option<Error>) {
    let cells = ctx.cells_nc();
    flatten(run_cells(&cells, |&(c, n)| {
        let mut rows = Vec::new();
        let model = model_for(ctx, c, n, &mut rows)?;
        let source = ctx.matched(c);
        for &m in &ctx.cfg.m_grid {
            let rec = evaluate_predictors(
                &[model.as_ref()],
                &source,
                &ctx.protocol(m, ctx.cfg.protocol.prompts_per_task),
                &ctx.eval_stream(c),
            )?
            .remove(0);
            rows.push(ctx.row(Some(n), Some(m), c, format!("tv_error/{}", rec.predictor), rec.mean, Some(rec.stderr))?);
        }
        Ok(rows)
    }))
}

fn gap_scaling(ctx: &Context) -> (Vec<ResultRow>, Option<Error>) {
    let t = &ctx.cfg.training;
    let mcfg = MinimizerConfig {
        budget: t.budget,
        burn_in_fraction: t.burn_in_fraction,
        burn_in_batch: t.burn_in_batch,
        replicates: ctx.cfg.replicates,
        replicate_batch: t.batch,
        smoothness_samples: t.smoothness_samples,
        label_mode: t.label_mode,
        spread_tolerance: t.spread_tolerance,
    };
    let cells = ctx.cells_nc();
    let (gaps, error) = run_cells(&cells, |&(c, n)| {
        let rng = ctx.root.substream(&format!("minimizer/c{c}"), n as u64);
        let est = estimate_population_minimizer(&ctx.matched(c), n, &mcfg, &rng)?;
        let w = est.w.matrix();
        let gap = minimizer_gap(w, c, &ctx.covariance);
        // standard error of the entry attaining the max
        let diff: DMatrix<f64> = w / c as f64 - ctx.covariance.inverse();
        let idx = diff.iamax_full();
        let se = est.stderr[idx] / c as f64;
        Ok((c, n, gap, se, est.learning_rate))
    });
    let mut rows = Vec::new();
    let mut by_c: BTreeMap<usize, Vec<(f64, f64)>> = BTreeMap::new();
    let mut push = |r: Result<ResultRow>| match r {
        Ok(row) => {
            rows.push(row);
            None
        }
        Err(e) => Some(e),
    };
    let mut late_error = None;
    for &(c, n, gap, se, eta) in &gaps {
        by_c.entry(c).or_default().push((n as f64, gap));
        late_error = late_error
            .or(push(ctx.row(Some(n), None, c, "gap", gap, Some(se))))
            .or(push(ctx.row(Some(n), None, c, "learning_rate", eta, None)));
    }
    if error.is_none() {
        for (c, pts) in by_c {
            if pts.len() < 3 {
                continue;
            }
            let (ns, gs): (Vec<f64>, Vec<f64>) = pts.into_iter().unzip();
            match loglog_slope(&ns, &gs) {
                Ok(fit) => {
                    late_error = late_error
                        .or(push(ctx.row(None, None, c, "gap_loglog_slope", fit.slope, None)))
                        .or(push(ctx.row(None, None, c, "gap_loglog_r2", fit.r2, None)));
                }
                Err(e) => late_error = late_error.or(Some(e)),
            }
        }
    }
    (rows, error.or(late_error))
}

fn default_priors(c: usize) -> Vec<f64> {
    let mut p = vec![0.1 / (c - 1) as f64; c];
    p[0] = 0.9;
    p
}

fn mismatch_spec(ctx: &Context, kind: MismatchKind, c: usize) -> Result<MismatchSpec> {
    let s = &ctx.cfg.mismatch;
    Ok(match kind {
        MismatchKind::NormShift => MismatchSpec::NormShift {
            offsets: s.offsets.clone(),
        },
        MismatchKind::PriorShift => MismatchSpec::PriorShift {
            priors: s.priors.clone().unwrap_or_else(|| default_priors(c)),
        },
        MismatchKind::CovarianceShift => {
            let alternates = match &s.alternates {
                Some(list) => list
                    .iter()
                    .map(|diag| SpdMatrix::from_diagonal(diag).map(Arc::new))
                    .collect::<Result<Vec<_>>>()?,
                None => {
                    let diag: Vec<f64> = ctx.covariance.diagonal().iter().rev().map(|v| 2.0 * v).collect();
                    vec![Arc::new(SpdMatrix::from_diagonal(&diag)?)]
                }
            };
            MismatchSpec::CovarianceShift { alternates }
        }
    })
}

fn mismatch_source(ctx: &Context, kind: MismatchKind, c: usize) -> Result<MismatchTasks> {
    Ok(MismatchTasks {
        spec: mismatch_spec(ctx, kind, c)?,
        base: vec![Arc::clone(&ctx.covariance)],
        class_count: c,
    })
}

fn kind_name(kind: MismatchKind) -> &'static str {
    match kind {
        MismatchKind::NormShift => "norm_shift",
        MismatchKind::CovarianceShift => "covariance_shift",
        MismatchKind::PriorShift => "prior_shift",
    }
}

/// Mean TV between the model `W = cΛ⁻¹` at prompt length `limit_m` and the
/// predicted large-`N, M` limit, over `limit_prompts` mismatched prompts.
pub fn limit_tv(
    source: &dyn TaskSource,
    training: &SpdMatrix,
    prompt_len: usize,
    prompts: usize,
    rng: &RngStream,
) -> Result<(f64, f64)> {
    let c = source.class_count();
    let params = AttentionParams::new(training.inverse() * c as f64)?;
    let objective = Objective::for_classes(c);
    let tvs: Vec<f64> = (0..prompts)
        .into_par_iter()
        .map(|i| {
            let mut r = rng.substream("prompt", i as u64);
            let task = source.sample_task(&mut r)?;
            let (q, _) = sample_query(&task, &mut r)?;
            let stats = sample_stats_for_query(&task, prompt_len, &q, &mut r)?;
            tv_distance(
                &objective.predict(&params, &stats)?,
                &mismatch_limit_prediction(&task, training, &q)?,
            )
        })
        .collect::<Result<_>>()?;
    Ok(mean_stderr(&tvs))
}

fn mismatch(ctx: &Context) -> (Vec<ResultRow>, Option<Error>) {
    let s = &ctx.cfg.mismatch;
    let cells = ctx.cells_nc();
    let (mut rows, error) = flatten(run_cells(&cells, |&(c, n)| {
        let mut rows = Vec::new();
        let model = model_for(ctx, c, n, &mut rows)?;
        for &kind in &s.kinds {
            let source = mismatch_source(ctx, kind, c)?;
            for &m in &ctx.cfg.m_grid {
                let rec = evaluate_predictors(
                    &[model.as_ref()],
                    &source,
                    &ctx.protocol(m, ctx.cfg.protocol.prompts_per_task),
                    &ctx.root.substream(&format!("eval/{}", kind_name(kind)), c as u64),
                )?
                .remove(0);
                rows.push(ctx.row(
                    Some(n),
                    Some(m),
                    c,
                    format!("tv_error/{}/{}", rec.predictor, kind_name(kind)),
                    rec.mean,
                    Some(rec.stderr),
                )?);
            }
        }
        Ok(rows)
    }));
    let limit_cells: Vec<(usize, MismatchKind)> = ctx
        .cfg
        .c_grid
        .iter()
        .flat_map(|&c| s.kinds.iter().map(move |&k| (c, k)))
        .collect();
    let (limit_rows, limit_error) = flatten(run_cells(&limit_cells, |&(c, kind)| {
        let source = mismatch_source(ctx, kind, c)?;
        let rng = ctx.root.substream(&format!("limit/{}", kind_name(kind)), c as u64);
        let (mean, se) = limit_tv(&source, &ctx.covariance, s.limit_m, s.limit_prompts, &rng)?;
        Ok(vec![ctx.row(
            None,
            Some(s.limit_m),
            c,
            format!("tv_to_limit/{}", kind_name(kind)),
            mean,
            Some(se),
        )?])
    }));
    rows.extend(limit_rows);
    (rows, error.or(limit_error))
}

/// Scores a baseline as uniform on prompts where it cannot be fitted (a class
/// absent from the context, a singular pooled covariance) and counts those.
struct Fallback<P> {
    inner: P,
    failures: AtomicUsize,
}

impl<P: Predictor> Fallback<P> {
    fn new(inner: P) -> Self {
        Self {
            inner,
            failures: AtomicUsize::new(0),
        }
    }
}

impl<P: Predictor> Predictor for Fallback<P> {
    fn name(&self) -> &str {
        self.inner.name()
    }

    fn needs_full_prompt(&self) -> bool {
        self.inner.needs_full_prompt()
    }

    fn predict(&self, data: &PromptData<'_>) -> Result<OutputDistribution> {
        match self.inner.predict(data) {
            Err(Error::ClassMissing { .. } | Error::SingularCovariance) => {
                self.failures.fetch_add(1, Ordering::Relaxed);
                let c = data.stats.class_count();
                OutputDistribution::new(vec![1.0 / c as f64; c])
            }
            other => other,
        }
    }
}

fn baseline_compare(ctx: &Context) -> (Vec<ResultRow>, Option<Error>) {
    let b = &ctx.cfg.baselines;
    let cells = ctx.cells_nc();
    flatten(run_cells(&cells, |&(c, n)| {
        let mut rows = Vec::new();
        let model = model_for(ctx, c, n, &mut rows)?;
        let source = ctx.matched(c);
        for &m in &ctx.cfg.m_grid {
            let lda = Fallback::new(Lda(LdaOptions::default()));
            let softmax = Fallback::new(SoftmaxRegression(b.softmax.clone()));
            let predictors: [&dyn Predictor; 4] = [model.as_ref(), &lda, &softmax, &BayesOracle];
            let protocol = ctx.protocol(m, b.prompts_per_task);
            let total = (protocol.tasks * protocol.prompts_per_task) as f64;
            for rec in evaluate_predictors(&predictors, &source, &protocol, &ctx.eval_stream(c))? {
                rows.push(ctx.row(Some(n), Some(m), c, format!("tv_error/{}", rec.predictor), rec.mean, Some(rec.stderr))?);
            }
            for (name, f) in [("lda", &lda.failures), ("softmax", &softmax.failures)] {
                let rate = f.load(Ordering::Relaxed) as f64 / total;
                rows.push(ctx.row(Some(n), Some(m), c, format!("fallback_rate/{name}"), rate, None)?);
            }
        }
        Ok(rows)
    }))
}

fn rate_fit(ctx: &Context) -> (Vec<ResultRow>, Option<Error>) {
    let r = &ctx.cfg.rate;
    let cells: Vec<(usize, usize, usize)> = ctx
        .cells_nc()
        .into_iter()
        .flat_map(|(c, n)| (0..ctx.cfg.replicates).map(move |rep| (c, n, rep)))
        .collect();
    let (fits, error) = run_cells(&cells, |&(c, n, rep)| {
        let rng = ctx.root.substream(&format!("rate/c{c}/N{n}"), rep as u64);
        let batch = sample_batch(&ctx.matched(c), n, r.batch, LabelMode::Sampled, &rng, 0)?;
        let cfg = TrainConfig {
            steps: r.steps,
            learning_rate: LearningRate::Auto,
            mode: TrainMode::FixedBatch,
            schedule: Schedule::Constant,
            averaging: Averaging::None,
            prompt_len: n,
            label_mode: LabelMode::Sampled,
            smoothness_samples: ctx.cfg.training.smoothness_samples,
        };
        let (_, fit) = fixed_batch_rate(&batch, &cfg, r.ref_factor)?;
        Ok((c, n, fit.rate, fit.r2))
    });
    let mut groups: BTreeMap<(usize, usize), Vec<(f64, f64)>> = BTreeMap::new();
    for (c, n, rate, r2) in fits {
        groups.entry((c, n)).or_default().push((rate, r2));
    }
    let mut rows = Vec::new();
    let mut late_error = None;
    for ((c, n), fits) in groups {
        let rates: Vec<f64> = fits.iter().map(|f| f.0).collect();
        let r2s: Vec<f64> = fits.iter().map(|f| f.1).collect();
        let (rate, rate_se) = mean_stderr(&rates);
        let (r2, r2_se) = mean_stderr(&r2s);
        let max_rate = rates.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let min_r2 = r2s.iter().copied().fold(f64::INFINITY, f64::min);
        for row in [
            ctx.row(Some(n), None, c, "rate", rate, Some(rate_se)),
            ctx.row(Some(n), None, c, "rate_max", max_rate, None),
            ctx.row(Some(n), None, c, "r2", r2, Some(r2_se)),
            ctx.row(Some(n), None, c, "r2_min", min_r2, None),
        ] {
            match row {
                Ok(row) => rows.push(row),
                Err(e) => late_error = late_error.or(Some(e)),
            }
        }
    }
    (rows, error.or(late_error))
}

fn moment_suite(ctx: &Context) -> (Vec<ResultRow>, Option<Error>) {
    let cfg = &ctx.cfg;
    let cells: Vec<(usize, usize)> = cfg.c_grid.iter().flat_map(|&c| cfg.m_grid.iter().map(move |&m| (c, m))).collect();
    flatten(run_cells(&cells, |&(c, m)| {
        let mut rng = ctx.root.substream(&format!("moments/c{c}"), m as u64);
        let report = count_moment_check(m, c, cfg.moments.samples, &mut rng)?;
        let max_z = report
            .statistics
            .iter()
            .map(|s| s.z_score().abs())
            .fold(0.0, f64::max);
        Ok(vec![
            ctx.row(None, Some(m), c, "max_abs_z", max_z, None)?,
            ctx.row(None, Some(m), c, "passes", if report.passes { 1.0 } else { 0.0 }, None)?,
        ])
    }))
}
