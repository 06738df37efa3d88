//! Bayes-optimal predictors and classical in-context baselines.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::model::{sigmoid, OutputDistribution};
use crate::numerics::SpdMatrix;
use crate::task::{MixtureTask, Prompt};

/// Exact posterior `P[y = k | q]` under the task's mixture, with scores
/// `μ_kᵀΛ⁻¹q − μ_kᵀΛ⁻¹μ_k/2 + log p_k`.
pub fn bayes_posterior(task: &MixtureTask, query: &DVector<f64>) -> Result<OutputDistribution> {
    check_dim("query", task.dim(), query.len())?;
    let cov = task.covariance();
    let scores: Vec<f64> = (0..task.class_count())
        .map(|k| {
            let m = task.mean(k);
            cov.inv_inner(&m, query) - 0.5 * cov.inv_inner(&m, &m) + task.priors()[k].ln()
        })
        .collect();
    Ok(OutputDistribution::from_logits(&scores))
}

/// Limit of the trained model's prediction as `N, M → ∞` when it was trained
/// under covariance `training` and is evaluated on `task`:
/// `softmax(c (p_k μ_k)ᵀ Λ_train⁻¹ q)`. For `c = 2` this is
/// `σ(2 (p_1 μ_1 − p_0 μ_0)ᵀ Λ_train⁻¹ q)`.
pub fn mismatch_limit_prediction(
    task: &MixtureTask,
    training: &SpdMatrix,
    query: &DVector<f64>,
) -> Result<OutputDistribution> {
    check_dim("query", task.dim(), query.len())?;
    check_dim("training covariance", task.dim(), training.dim())?;
    let c = task.class_count() as f64;
    let scores: Vec<f64> = (0..task.class_count())
        .map(|k| c * task.priors()[k] * training.inv_inner(&task.mean(k), query))
        .collect();
    Ok(OutputDistribution::from_logits(&scores))
}

/// A task together with the covariance the model was trained under.
#[derive(Clone, Debug)]
pub struct BayesSpec {
    pub task: MixtureTask,
    pub training_covariance: Option<Arc<SpdMatrix>>,
}

impl BayesSpec {
    pub fn new(task: MixtureTask, training_covariance: Option<Arc<SpdMatrix>>) -> Result<Self> {
        if let Some(t) = &training_covariance {
            check_dim("training covariance", task.dim(), t.dim())?;
        }
        Ok(Self {
            task,
            training_covariance,
        })
    }

    pub fn posterior(&self, query: &DVector<f64>) -> Result<OutputDistribution> {
        bayes_posterior(&self.task, query)
    }

    /// Limit prediction; uses the task covariance when no training
    /// covariance was given.
    pub fn limit(&self, query: &DVector<f64>) -> Result<OutputDistribution> {
        let training = self
            .training_covariance
            .as_deref()
            .unwrap_or_else(|| self.task.covariance());
        mismatch_limit_prediction(&self.task, training, query)
    }
}

#[derive(Clone, Debug, Default)]
pub struct LdaOptions {
    /// Use this covariance instead of the pooled within-class estimate.
    pub known_covariance: Option<Arc<SpdMatrix>>,
    /// Drop the `−μ̂_kᵀΣ⁻¹μ̂_k/2` term, i.e. treat the estimated means as having
    /// equal weighted norms.
    pub assume_equal_norms: bool,
}

/// Linear discriminant analysis fitted on the in-context examples and applied
/// to the query. Priors are the in-context frequencies `n_k / M`.
pub fn lda_predict(prompt: &Prompt, options: &LdaOptions) -> Result<OutputDistribution> {
    let d = prompt.dim();
    let c = prompt.class_count();
    let stats = prompt.stats();
    let min_count = if options.known_covariance.is_some() { 1 } else { 2 };
    for (k, &n) in stats.counts().iter().enumerate() {
        if n < min_count {
            return Err(Error::ClassMissing { class: k });
        }
    }
    let mut means = stats.class_sums().clone();
    for (k, &n) in stats.counts().iter().enumerate() {
        means.column_mut(k).unscale_mut(n as f64);
    }
    let pooled;
    let cov: &SpdMatrix = match &options.known_covariance {
        Some(s) => {
            check_dim("known covariance", d, s.dim())?;
            s
        }
        None => {
            let m = prompt.len();
            if m <= c {
                return Err(Error::SingularCovariance);
            }
            let mut scatter = DMatrix::zeros(d, d);
            for ex in prompt.examples() {
                let r = &ex.x - means.column(ex.label);
                scatter.ger(1.0, &r, &r, 1.0);
            }
            scatter /= (m - c) as f64;
            pooled = SpdMatrix::factorize(scatter).map_err(|_| Error::SingularCovariance)?;
            &pooled
        }
    };
    let total = prompt.len() as f64;
    let scores: Vec<f64> = (0..c)
        .map(|k| {
            let mk = means.column(k).into_owned();
            let mut s = cov.inv_inner(&mk, prompt.query()) + (stats.counts()[k] as f64 / total).ln();
            if !options.assume_equal_norms {
                s -= 0.5 * cov.inv_inner(&mk, &mk);
            }
            s
        })
        .collect();
    Ok(OutputDistribution::from_logits(&scores))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SoftmaxRegressionConfig {
    /// Penalty `(ridge/2) ‖V‖²_F` on the weights; the bias is not penalized.
    pub ridge: f64,
    pub max_iter: usize,
    /// Stop once the gradient's Frobenius norm falls below this.
    pub tolerance: f64,
}

impl Default for SoftmaxRegressionConfig {
    fn default() -> Self {
        Self {
            ridge: 1e-4,
            max_iter: 5000,
            tolerance: 1e-6,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SoftmaxFit {
    /// `c x d`.
    pub weights: DMatrix<f64>,
    pub bias: DVector<f64>,
    pub prediction: OutputDistribution,
    pub train_loss: f64,
    pub iterations: usize,
    pub converged: bool,
}

impl SoftmaxFit {
    pub fn predict(&self, x: &DVector<f64>) -> OutputDistribution {
        let z = &self.weights * x + &self.bias;
        OutputDistribution::from_logits(z.as_slice())
    }
}

/// Objective and gradient with the parameters packed as `θ = [V | b]`.
fn softmax_objective(
    theta: &DMatrix<f64>,
    x_aug: &DMatrix<f64>,
    labels: &[usize],
    ridge: f64,
) -> (f64, DMatrix<f64>) {
    let n = labels.len() as f64;
    let d = x_aug.nrows() - 1;
    let logits = theta * x_aug;
    let mut resid = DMatrix::zeros(theta.nrows(), labels.len());
    let mut loss = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let col = logits.column(i);
        let max = col.max();
        let lse = max + col.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
        loss += lse - col[y];
        for k in 0..theta.nrows() {
            resid[(k, i)] = (col[k] - lse).exp();
        }
        resid[(y, i)] -= 1.0;
    }
    let mut grad = resid * x_aug.transpose() / n;
    let w = theta.columns(0, d);
    loss = loss / n + 0.5 * ridge * w.norm_squared();
    let mut gw = grad.columns_mut(0, d);
    gw += w * ridge;
    (loss, grad)
}

fn augmented_inputs(prompt: &Prompt) -> DMatrix<f64> {
    let d = prompt.dim();
    let mut x = DMatrix::from_element(d + 1, prompt.len(), 1.0);
    for (i, ex) in prompt.examples().iter().enumerate() {
        x.view_mut((0, i), (d, 1)).copy_from(&ex.x);
    }
    x
}

/// Multinomial logistic regression on the in-context examples, fitted by
/// accelerated gradient descent with adaptive restart at step `1/L`,
/// `L = mean ‖[x; 1]‖² / 2 + ridge`. Returns the best iterate with
/// `converged = false` if the iteration cap is reached.
pub fn softmax_regression(prompt: &Prompt, config: &SoftmaxRegressionConfig) -> Result<SoftmaxFit> {
    let c = prompt.class_count();
    if prompt.len() < c {
        return Err(Error::InvalidArgument(format!(
            "softmax regression needs at least {c} examples, got {}",
            prompt.len()
        )));
    }
    if !(config.ridge >= 0.0 && config.tolerance > 0.0) {
        return Err(Error::InvalidArgument("ridge must be >= 0 and tolerance > 0".into()));
    }
    let d = prompt.dim();
    let x = augmented_inputs(prompt);
    let labels: Vec<usize> = prompt.examples().iter().map(|e| e.label).collect();
    let lip = 0.5 * x.column_iter().map(|col| col.norm_squared()).sum::<f64>() / prompt.len() as f64
        + config.ridge;
    let step = 1.0 / lip;

    let mut theta = DMatrix::zeros(c, d + 1);
    let mut momentum_point = theta.clone();
    let mut t_k = 1.0_f64;
    let (mut best_loss, mut best) = (f64::INFINITY, theta.clone());
    let mut converged = false;
    let mut iterations = 0;
    while iterations < config.max_iter {
        let (_, g) = softmax_objective(&momentum_point, &x, &labels, config.ridge);
        let next = &momentum_point - &g * step;
        let (loss_next, g_next) = softmax_objective(&next, &x, &labels, config.ridge);
        iterations += 1;
        if loss_next < best_loss {
            best_loss = loss_next;
            best = next.clone();
        }
        if g_next.norm() < config.tolerance {
            converged = true;
            theta = next;
            break;
        }
        // restart the momentum whenever it points uphill
        let uphill = (&next - &theta).dot(&g) > 0.0;
        if uphill {
            t_k = 1.0;
            momentum_point = theta.clone();
            continue;
        }
        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t_k * t_k).sqrt());
        momentum_point = &next + (&next - &theta) * ((t_k - 1.0) / t_next);
        theta = next;
        t_k = t_next;
    }
    let theta = if converged { theta } else { best };
    let (train_loss, _) = softmax_objective(&theta, &x, &labels, config.ridge);
    let weights = theta.columns(0, d).into_owned();
    let bias = theta.column(d).into_owned();
    let prediction = OutputDistribution::from_logits((&weights * prompt.query() + &bias).as_slice());
    Ok(SoftmaxFit {
        weights,
        bias,
        prediction,
        train_loss,
        iterations,
        converged,
    })
}

#[derive(Clone, Debug)]
pub struct LogisticFit {
    pub weights: DVector<f64>,
    pub bias: f64,
    pub prediction: OutputDistribution,
    pub iterations: usize,
}

/// Two-class logistic regression by damped Newton steps, minimizing the mean
/// cross-entropy plus `(ridge/2) ‖w‖²`.
pub fn logistic_fit(prompt: &Prompt, ridge: f64, max_iter: usize) -> Result<LogisticFit> {
    if prompt.class_count() != 2 {
        return Err(Error::WrongClassCount {
            expected: 2,
            found: prompt.class_count(),
        });
    }
    let d = prompt.dim();
    let x = augmented_inputs(prompt);
    let y: Vec<f64> = prompt.examples().iter().map(|e| e.label as f64).collect();
    let n = y.len() as f64;
    let objective = |theta: &DVector<f64>| -> f64 {
        let z = x.tr_mul(theta);
        let mut l = 0.0;
        for (zi, yi) in z.iter().zip(&y) {
            // log(1 + e^z) - y z, evaluated stably
            l += zi.max(0.0) + (-zi.abs()).exp().ln_1p() - yi * zi;
        }
        l / n + 0.5 * ridge * theta.rows(0, d).norm_squared()
    };
    let mut theta = DVector::zeros(d + 1);
    let mut iterations = 0;
    for _ in 0..max_iter {
        iterations += 1;
        let z = x.tr_mul(&theta);
        let mut grad = DVector::zeros(d + 1);
        let mut hess = DMatrix::zeros(d + 1, d + 1);
        for (i, (zi, yi)) in z.iter().zip(&y).enumerate() {
            let s = sigmoid(*zi);
            let xi = x.column(i);
            grad += xi * (s - yi);
            hess.ger(s * (1.0 - s), &xi, &xi, 1.0);
        }
        grad /= n;
        hess /= n;
        for j in 0..d {
            grad[j] += ridge * theta[j];
            hess[(j, j)] += ridge;
        }
        let dir = match hess.clone().cholesky() {
            Some(ch) => ch.solve(&grad),
            None => return Err(Error::SingularCovariance),
        };
        let f0 = objective(&theta);
        let slope = grad.dot(&dir);
        let mut t = 1.0;
        let mut next = &theta - &dir;
        while objective(&next) > f0 - 1e-4 * t * slope && t > 1e-10 {
            t *= 0.5;
            next = &theta - &dir * t;
        }
        let moved = (&next - &theta).amax();
        theta = next;
        if moved < 1e-14 * (1.0 + theta.amax()) || slope < 1e-30 {
            break;
        }
    }
    let weights = theta.rows(0, d).into_owned();
    let bias = theta[d];
    let prediction = OutputDistribution::binary(weights.dot(prompt.query()) + bias);
    Ok(LogisticFit {
        weights,
        bias,
        prediction,
        iterations,
    })
}
