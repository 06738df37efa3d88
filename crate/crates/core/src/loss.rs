//! Cross-entropy losses, analytic gradients and curvature probes.
//!
//! All batch reductions split the items into fixed-size chunks, evaluate the
//! chunks in parallel and add the partial sums in chunk order, so results do
//! not depend on the thread count.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{check_dim, Error, Result};
use crate::model::{binary_logit, multi_logits, sigmoid, AttentionParams, OutputDistribution};
use crate::task::{Prompt, PromptStats};

/// Probabilities are clamped to `[EPS, 1 - EPS]` before taking logs.
pub const EPS: f64 = 1e-12;

const CHUNK: usize = 64;

/// Label of a training item: an observed class or a distribution over classes.
#[derive(Clone, Debug, PartialEq)]
pub enum Target {
    Class(usize),
    Soft(Vec<f64>),
}

impl Target {
    fn weight(&self, k: usize) -> f64 {
        match self {
            Target::Class(y) => f64::from(u8::from(*y == k)),
            Target::Soft(p) => p[k],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchItem {
    pub stats: PromptStats,
    pub target: Target,
}

#[derive(Clone, Debug)]
pub struct Batch {
    items: Vec<BatchItem>,
    dim: usize,
    class_count: usize,
}

impl Batch {
    pub fn new(items: Vec<BatchItem>) -> Result<Self> {
        let first = items.first().ok_or(Error::EmptyBatch)?;
        let dim = first.stats.dim();
        let class_count = first.stats.class_count();
        for it in &items {
            check_dim("batch item dimension", dim, it.stats.dim())?;
            if it.stats.class_count() != class_count {
                return Err(Error::WrongClassCount {
                    expected: class_count,
                    found: it.stats.class_count(),
                });
            }
            match &it.target {
                Target::Class(y) if *y >= class_count => {
                    return Err(Error::InvalidArgument(format!("label {y} out of range")));
                }
                Target::Soft(p) => check_dim("soft target", class_count, p.len())?,
                _ => {}
            }
        }
        Ok(Self {
            items,
            dim,
            class_count,
        })
    }

    pub fn from_prompts(prompts: &[(Prompt, usize)]) -> Result<Self> {
        Self::new(
            prompts
                .iter()
                .map(|(p, y)| BatchItem {
                    stats: p.stats(),
                    target: Target::Class(*y),
                })
                .collect(),
        )
    }

    pub fn items(&self) -> &[BatchItem] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }
}

/// Binary (sigmoid, `±1` labels) or multi-class (softmax) read-out.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Objective {
    Binary,
    Multi,
}

impl Objective {
    pub fn for_classes(c: usize) -> Self {
        if c == 2 {
            Objective::Binary
        } else {
            Objective::Multi
        }
    }

    pub fn predict(self, params: &AttentionParams, stats: &PromptStats) -> Result<OutputDistribution> {
        match self {
            Objective::Binary => Ok(OutputDistribution::binary(binary_logit(params, stats)?)),
            Objective::Multi => Ok(OutputDistribution::from_logits(
                multi_logits(params, stats)?.as_slice(),
            )),
        }
    }
}

/// Parallel map over fixed chunks, sequential fold of the partials.
pub(crate) fn chunked_sum<T, F, G>(items: &[BatchItem], zero: T, f: F, add: G) -> Result<T>
where
    T: Send + Sync + Clone,
    F: Fn(&BatchItem) -> Result<T> + Sync,
    G: Fn(T, T) -> T + Sync,
{
    let partials: Vec<Result<T>> = items
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut acc = zero.clone();
            for it in chunk {
                acc = add(acc, f(it)?);
            }
            Ok(acc)
        })
        .collect();
    let mut total = zero;
    for p in partials {
        total = add(total, p?);
    }
    Ok(total)
}

fn check_batch(params: &AttentionParams, batch: &Batch) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    check_dim("batch dimension", params.dim(), batch.dim())
}

fn clamp(p: f64) -> f64 {
    p.clamp(EPS, 1.0 - EPS)
}

fn item_loss(objective: Objective, params: &AttentionParams, it: &BatchItem) -> Result<f64> {
    let dist = objective.predict(params, &it.stats)?;
    Ok(dist
        .probs()
        .iter()
        .enumerate()
        .map(|(k, p)| {
            let t = it.target.weight(k);
            if t == 0.0 {
                0.0
            } else {
                -t * clamp(*p).ln()
            }
        })
        .sum())
}

/// Mean cross-entropy over the batch.
pub fn loss(objective: Objective, params: &AttentionParams, batch: &Batch) -> Result<f64> {
    check_batch(params, batch)?;
    if objective == Objective::Binary && batch.class_count() != 2 {
        return Err(Error::WrongClassCount {
            expected: 2,
            found: batch.class_count(),
        });
    }
    let s = chunked_sum(batch.items(), 0.0, |it| item_loss(objective, params, it), |a, b| a + b)?;
    Ok(s / batch.len() as f64)
}

pub fn loss_binary(params: &AttentionParams, batch: &Batch) -> Result<f64> {
    loss(Objective::Binary, params, batch)
}

pub fn loss_multi(params: &AttentionParams, batch: &Batch) -> Result<f64> {
    loss(Objective::Multi, params, batch)
}

/// Residual-weighted statistic `v` such that the item's gradient is `v qᵀ`.
fn item_direction(objective: Objective, params: &AttentionParams, it: &BatchItem) -> Result<DVector<f64>> {
    let s = &it.stats;
    let n = s.len() as f64;
    match objective {
        Objective::Binary => {
            let y = sigmoid(binary_logit(params, s)?);
            let r = y - it.target.weight(1);
            let sums = s.class_sums();
            Ok((sums.column(1) - sums.column(0)) * (r / n))
        }
        Objective::Multi => {
            let dist = OutputDistribution::from_logits(multi_logits(params, s)?.as_slice());
            let resid = DVector::from_iterator(
                s.class_count(),
                dist.probs().iter().enumerate().map(|(k, p)| p - it.target.weight(k)),
            );
            Ok(s.class_sums() * resid / n)
        }
    }
}

/// Exact gradient of [`loss`] (ignoring the clamp).
pub fn grad(objective: Objective, params: &AttentionParams, batch: &Batch) -> Result<DMatrix<f64>> {
    check_batch(params, batch)?;
    let d = batch.dim();
    let g = chunked_sum(
        batch.items(),
        DMatrix::zeros(d, d),
        |it| {
            let v = item_direction(objective, params, it)?;
            Ok(v * it.stats.query().transpose())
        },
        |a, b| a + b,
    )?;
    Ok(g / batch.len() as f64)
}

pub fn grad_binary(params: &AttentionParams, batch: &Batch) -> Result<DMatrix<f64>> {
    if batch.class_count() != 2 {
        return Err(Error::WrongClassCount {
            expected: 2,
            found: batch.class_count(),
        });
    }
    grad(Objective::Binary, params, batch)
}

pub fn grad_multi(params: &AttentionParams, batch: &Batch) -> Result<DMatrix<f64>> {
    grad(Objective::Multi, params, batch)
}

/// Loss and gradient in one pass.
pub fn loss_and_grad(
    objective: Objective,
    params: &AttentionParams,
    batch: &Batch,
) -> Result<(f64, DMatrix<f64>)> {
    check_batch(params, batch)?;
    let d = batch.dim();
    let (l, g) = chunked_sum(
        batch.items(),
        (0.0, DMatrix::zeros(d, d)),
        |it| {
            let l = item_loss(objective, params, it)?;
            let v = item_direction(objective, params, it)?;
            Ok((l, v * it.stats.query().transpose()))
        },
        |a, b| (a.0 + b.0, a.1 + b.1),
    )?;
    let b = batch.len() as f64;
    Ok((l / b, g / b))
}

/// Central differences `(L(W + h E_ij) - L(W - h E_ij)) / 2h`.
pub fn finite_diff_grad<F>(f: F, w: &DMatrix<f64>, step: f64) -> DMatrix<f64>
where
    F: Fn(&DMatrix<f64>) -> f64,
{
    let mut g = DMatrix::zeros(w.nrows(), w.ncols());
    let mut probe = w.clone();
    for i in 0..w.nrows() {
        for j in 0..w.ncols() {
            let orig = probe[(i, j)];
            probe[(i, j)] = orig + step;
            let up = f(&probe);
            probe[(i, j)] = orig - step;
            let down = f(&probe);
            probe[(i, j)] = orig;
            g[(i, j)] = (up - down) / (2.0 * step);
        }
    }
    g
}

/// `zᵀ ∇²L z` for a unit-Frobenius direction `Z`.
pub fn directional_curvature(
    objective: Objective,
    params: &AttentionParams,
    batch: &Batch,
    direction: &DMatrix<f64>,
) -> Result<f64> {
    check_batch(params, batch)?;
    let norm = direction.norm();
    if (norm - 1.0).abs() > 1e-9 {
        return Err(Error::NotUnitDirection { norm });
    }
    check_dim("direction", batch.dim(), direction.nrows())?;
    check_dim("direction", batch.dim(), direction.ncols())?;
    let s = chunked_sum(
        batch.items(),
        0.0,
        |it| {
            let st = &it.stats;
            let n = st.len() as f64;
            let zq = direction * st.query();
            match objective {
                Objective::Binary => {
                    let y = sigmoid(binary_logit(params, st)?);
                    // derivative of the logit along Z
                    let dz = (st.class_sums().column(1) - st.class_sums().column(0)).dot(&zq) / n;
                    Ok(y * (1.0 - y) * dz * dz)
                }
                Objective::Multi => {
                    let dist = OutputDistribution::from_logits(multi_logits(params, st)?.as_slice());
                    let v = st.class_sums().tr_mul(&zq) / n;
                    let p = dist.probs();
                    let mut acc = 0.0;
                    for k in 0..p.len() {
                        for l in 0..k {
                            let dv = v[k] - v[l];
                            acc += p[k] * p[l] * dv * dv;
                        }
                    }
                    Ok(acc)
                }
            }
        },
        |a, b| a + b,
    )?;
    Ok(s / batch.len() as f64)
}

/// Per-item curvature bound: `‖p‖²‖q‖²/4` (binary) or
/// `Σ_{k>l} ‖p_k - p_l‖²‖q‖²/c²` (multi).
pub fn smoothness_term(objective: Objective, stats: &PromptStats) -> Result<f64> {
    let q2 = stats.query().norm_squared();
    match objective {
        Objective::Binary => Ok(stats.binary_statistic()?.norm_squared() * q2 / 4.0),
        Objective::Multi => {
            let p = stats.class_statistics();
            let c = p.ncols();
            let mut acc = 0.0;
            for k in 0..c {
                for l in 0..k {
                    acc += (p.column(k) - p.column(l)).norm_squared();
                }
            }
            Ok(acc * q2 / (c * c) as f64)
        }
    }
}

/// Batch average of [`smoothness_term`]; `1 / bound` guarantees descent for
/// full-batch gradient steps on this batch.
pub fn smoothness_bound(objective: Objective, batch: &Batch) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let s = chunked_sum(batch.items(), 0.0, |it| smoothness_term(objective, &it.stats), |a, b| a + b)?;
    Ok(s / batch.len() as f64)
}
