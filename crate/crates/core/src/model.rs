//! Single-layer linear-attention classifier.
//!
//! The sparse path works directly on [`PromptStats`]: with `S_k` the sum of
//! class-`k` examples, the binary logit is `(S_1 - S_0)ᵀ W q / N` and the
//! multi-class logits are `S_kᵀ W q / N`.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::numerics::RngStream;
use crate::task::{Prompt, PromptStats};

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams {
    w: DMatrix<f64>,
}

impl AttentionParams {
    pub fn new(w: DMatrix<f64>) -> Result<Self> {
        if w.nrows() != w.ncols() {
            return Err(Error::DimensionMismatch {
                what: "attention weight columns",
                expected: w.nrows(),
                found: w.ncols(),
            });
        }
        if w.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("attention weights must be finite".into()));
        }
        Ok(Self { w })
    }

    pub fn zeros(dim: usize) -> Self {
        Self {
            w: DMatrix::zeros(dim, dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.w.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.w
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.w
    }

    pub fn scaled(&self, alpha: f64) -> Self {
        Self { w: &self.w * alpha }
    }
}

/// Dense value and key-query matrices acting on the `(d + e) x (N + 1)`
/// embedding, where `e = 1` (signed binary labels) or `e = c` (one-hot).
#[derive(Clone, Debug, PartialEq)]
pub struct FullAttentionParams {
    pub w_v: DMatrix<f64>,
    pub w_kq: DMatrix<f64>,
}

impl FullAttentionParams {
    pub fn new(w_v: DMatrix<f64>, w_kq: DMatrix<f64>) -> Result<Self> {
        let n = w_v.nrows();
        for (what, m) in [("value matrix", &w_v), ("key-query matrix", &w_kq)] {
            check_dim(what, n, m.nrows())?;
            check_dim(what, n, m.ncols())?;
            if m.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidArgument("attention weights must be finite".into()));
            }
        }
        Ok(Self { w_v, w_kq })
    }

    /// Embeds a sparse `W`: `W_kq` carries `W` in its top-left block and
    /// `W_v` the identity on the label block.
    pub fn from_sparse(params: &AttentionParams, class_count: usize) -> Self {
        let d = params.dim();
        let label_dim = label_dim(class_count);
        let n = d + label_dim;
        let mut w_v = DMatrix::zeros(n, n);
        for i in d..n {
            w_v[(i, i)] = 1.0;
        }
        let mut w_kq = DMatrix::zeros(n, n);
        w_kq.view_mut((0, 0), (d, d)).copy_from(params.matrix());
        Self { w_v, w_kq }
    }

    pub fn size(&self) -> usize {
        self.w_v.nrows()
    }
}

fn label_dim(class_count: usize) -> usize {
    if class_count == 2 {
        1
    } else {
        class_count
    }
}

/// Class probabilities. Binary outputs are ordered `(P[class 0], P[class 1])`.
#[derive(Clone, Debug, PartialEq)]
pub struct OutputDistribution {
    probs: Vec<f64>,
}

impl OutputDistribution {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.len() < 2 {
            return Err(Error::InvalidArgument("distribution needs at least 2 classes".into()));
        }
        if probs.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
            return Err(Error::InvalidArgument("probabilities must be finite and >= 0".into()));
        }
        let s: f64 = probs.iter().sum();
        if (s - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!("probabilities sum to {s}")));
        }
        Ok(Self { probs })
    }

    /// Numerically stable softmax.
    pub fn from_logits(logits: &[f64]) -> Self {
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        Self {
            probs: exps.into_iter().map(|e| e / total).collect(),
        }
    }

    /// Sigmoid of `logit` as the class-1 probability.
    pub fn binary(logit: f64) -> Self {
        Self {
            probs: vec![sigmoid(-logit), sigmoid(logit)],
        }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn class_count(&self) -> usize {
        self.probs.len()
    }

    /// Lowest index among ties.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (k, p) in self.probs.iter().enumerate() {
            if *p > self.probs[best] {
                best = k;
            }
        }
        best
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `pᵀ W q / 2` with `p = (2/N) Σ y_i x_i`.
pub fn binary_logit(params: &AttentionParams, stats: &PromptStats) -> Result<f64> {
    check_dim("prompt", params.dim(), stats.dim())?;
    if stats.class_count() != 2 {
        return Err(Error::WrongClassCount {
            expected: 2,
            found: stats.class_count(),
        });
    }
    let wq = params.matrix() * stats.query();
    let s = stats.class_sums();
    let diff = s.column(1) - s.column(0);
    Ok(diff.dot(&wq) / stats.len() as f64)
}

/// `Pᵀ W q / c` with `p_k = (c/N) S_k`.
pub fn multi_logits(params: &AttentionParams, stats: &PromptStats) -> Result<DVector<f64>> {
    check_dim("prompt", params.dim(), stats.dim())?;
    let wq = params.matrix() * stats.query();
    Ok(stats.class_sums().tr_mul(&wq) / stats.len() as f64)
}

pub fn forward_binary_stats(params: &AttentionParams, stats: &PromptStats) -> Result<OutputDistribution> {
    Ok(OutputDistribution::binary(binary_logit(params, stats)?))
}

pub fn forward_multi_stats(params: &AttentionParams, stats: &PromptStats) -> Result<OutputDistribution> {
    Ok(OutputDistribution::from_logits(multi_logits(params, stats)?.as_slice()))
}

pub fn forward_binary(params: &AttentionParams, prompt: &Prompt) -> Result<OutputDistribution> {
    check_dim("prompt", params.dim(), prompt.dim())?;
    forward_binary_stats(params, &prompt.stats())
}

pub fn forward_multi(params: &AttentionParams, prompt: &Prompt) -> Result<OutputDistribution> {
    check_dim("prompt", params.dim(), prompt.dim())?;
    forward_multi_stats(params, &prompt.stats())
}

/// `E(P)`: column `i` is `[x_i; label_i]`, the last column `[q; 0]`. Labels
/// are `±1` when the label block has one row and one-hot otherwise.
pub fn embedding_matrix(prompt: &Prompt, label_rows: usize) -> Result<DMatrix<f64>> {
    let c = prompt.class_count();
    if label_rows != 1 && label_rows != c {
        return Err(Error::DimensionMismatch {
            what: "label block",
            expected: c,
            found: label_rows,
        });
    }
    if label_rows == 1 && c != 2 {
        return Err(Error::WrongClassCount { expected: 2, found: c });
    }
    let d = prompt.dim();
    let n = prompt.len();
    let mut e = DMatrix::zeros(d + label_rows, n + 1);
    for (i, ex) in prompt.examples().iter().enumerate() {
        e.view_mut((0, i), (d, 1)).copy_from(&ex.x);
        if label_rows == 1 {
            e[(d, i)] = if ex.label == 1 { 1.0 } else { -1.0 };
        } else {
            e[(d + ex.label, i)] = 1.0;
        }
    }
    e.view_mut((0, n), (d, 1)).copy_from(prompt.query());
    Ok(e)
}

/// `F(E) = E + W_v E (Eᵀ W_kq E) / N`, read out at the query column's label
/// block. Only that column is formed.
pub fn forward_full(params: &FullAttentionParams, prompt: &Prompt) -> Result<OutputDistribution> {
    let d = prompt.dim();
    let c = prompt.class_count();
    let size = params.size();
    if size <= d {
        return Err(Error::DimensionMismatch {
            what: "full attention parameters",
            expected: d + c,
            found: size,
        });
    }
    let label_rows = size - d;
    let e = embedding_matrix(prompt, label_rows)?;
    let n = prompt.len();
    let query_col = e.column(n);
    let a = &params.w_kq * query_col;
    let scores = e.tr_mul(&a);
    let mixed = &e * scores;
    let out = query_col + (&params.w_v * mixed) / n as f64;
    let readout = out.rows(d, label_rows);
    if label_rows == 1 {
        Ok(OutputDistribution::binary(readout[0]))
    } else {
        Ok(OutputDistribution::from_logits(readout.as_slice()))
    }
}

/// Class whose cumulative bracket `[Σ_{j<k} p_j, Σ_{j≤k} p_j)` contains `u`.
pub fn prediction_from_uniform(dist: &OutputDistribution, u: f64) -> usize {
    let mut acc = 0.0;
    for (k, p) in dist.probs().iter().enumerate() {
        acc += p;
        if u < acc {
            return k;
        }
    }
    dist.probs().iter().rposition(|p| *p > 0.0).unwrap_or(0)
}

pub fn sample_prediction(dist: &OutputDistribution, rng: &mut RngStream) -> usize {
    prediction_from_uniform(dist, rng.uniform())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Sparse,
    Full,
}

/// On-disk parameters: header plus row-major arrays.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamsFile {
    pub d: usize,
    pub c: usize,
    pub variant: Variant,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub w: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub w_v: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub w_kq: Vec<f64>,
}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    m.transpose().as_slice().to_vec()
}

fn from_row_major(n: usize, data: &[f64]) -> Result<DMatrix<f64>> {
    check_dim("parameter array", n * n, data.len())?;
    Ok(DMatrix::from_row_slice(n, n, data))
}

impl ParamsFile {
    pub fn sparse(params: &AttentionParams, class_count: usize) -> Self {
        Self {
            d: params.dim(),
            c: class_count,
            variant: Variant::Sparse,
            w: row_major(params.matrix()),
            w_v: Vec::new(),
            w_kq: Vec::new(),
        }
    }

    pub fn full(params: &FullAttentionParams, d: usize, class_count: usize) -> Self {
        Self {
            d,
            c: class_count,
            variant: Variant::Full,
            w: Vec::new(),
            w_v: row_major(&params.w_v),
            w_kq: row_major(&params.w_kq),
        }
    }

    pub fn to_sparse(&self) -> Result<AttentionParams> {
        if self.variant != Variant::Sparse {
            return Err(Error::InvalidArgument("parameter file holds full parameters".into()));
        }
        AttentionParams::new(from_row_major(self.d, &self.w)?)
    }

    pub fn to_full(&self) -> Result<FullAttentionParams> {
        if self.variant != Variant::Full {
            return Err(Error::InvalidArgument("parameter file holds sparse parameters".into()));
        }
        let n = self.d + label_dim(self.c);
        FullAttentionParams::new(from_row_major(n, &self.w_v)?, from_row_major(n, &self.w_kq)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::task::LabeledPoint;
    use proptest::prelude::*;

    fn point(x: &[f64], label: usize) -> LabeledPoint {
        LabeledPoint {
            x: DVector::from_column_slice(x),
            label,
        }
    }

    fn random_prompt(rng: &mut RngStream, d: usize, c: usize, n: usize) -> Prompt {
        let ex = (0..n)
            .map(|i| LabeledPoint {
                x: rng.standard_normal_vector(d),
                label: i % c,
            })
            .collect();
        Prompt::new(ex, rng.standard_normal_vector(d), c).unwrap()
    }

    #[test]
    fn zero_weights_give_uniform() {
        let mut rng = RngStream::new(1, 0);
        let p = random_prompt(&mut rng, 3, 2, 5);
        let out = forward_binary(&AttentionParams::zeros(3), &p).unwrap();
        assert_eq!(out.probs(), &[0.5, 0.5]);
        let p = random_prompt(&mut rng, 3, 4, 9);
        let out = forward_multi(&AttentionParams::zeros(3), &p).unwrap();
        assert!(out.probs().iter().all(|v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn binary_scalar_case() {
        let p = Prompt::new(vec![point(&[1.0, 0.0], 1)], DVector::from_vec(vec![1.0, 0.0]), 2).unwrap();
        let w = AttentionParams::new(DMatrix::identity(2, 2)).unwrap();
        let out = forward_binary(&w, &p).unwrap();
        assert!((out.probs()[1] - 0.731_058_578_630_004_9).abs() < 1e-12);
    }

    #[test]
    fn label_flip_complements() {
        let mut rng = RngStream::new(2, 0);
        let p = random_prompt(&mut rng, 3, 2, 7);
        let flipped = Prompt::new(
            p.examples()
                .iter()
                .map(|e| point(e.x.as_slice(), 1 - e.label))
                .collect(),
            p.query().clone(),
            2,
        )
        .unwrap();
        let w = AttentionParams::new(rng.standard_normal_matrix(3, 3)).unwrap();
        let a = forward_binary(&w, &p).unwrap().probs()[1];
        let b = forward_binary(&w, &flipped).unwrap().probs()[1];
        assert!((a - (1.0 - b)).abs() < 1e-15);
    }

    #[test]
    fn multi_basis_case() {
        let ex = vec![point(&[1.0, 0.0, 0.0], 0), point(&[0.0, 1.0, 0.0], 1), point(&[0.0, 0.0, 1.0], 2)];
        let p = Prompt::new(ex, DVector::from_vec(vec![1.0, 0.0, 0.0]), 3).unwrap();
        let w = AttentionParams::new(DMatrix::identity(3, 3)).unwrap();
        let out = forward_multi(&w, &p).unwrap();
        let e = (1.0_f64 / 3.0).exp();
        let z = e + 2.0;
        let expect = [e / z, 1.0 / z, 1.0 / z];
        for k in 0..3 {
            assert!((out.probs()[k] - expect[k]).abs() < 1e-15);
        }
    }

    #[test]
    fn two_class_multi_agrees_with_binary() {
        // the logit gap of the softmax form equals the sigmoid argument
        let mut rng = RngStream::new(3, 0);
        for _ in 0..20 {
            let p = random_prompt(&mut rng, 4, 2, 6);
            let w = AttentionParams::new(rng.standard_normal_matrix(4, 4)).unwrap();
            let a = forward_binary(&w, &p).unwrap();
            let b = forward_multi(&w, &p).unwrap();
            assert!((a.probs()[1] - b.probs()[1]).abs() < 1e-14);
        }
    }

    #[test]
    fn multi_matches_one_hot_sum_form() {
        // softmax((1/N) Σ y_i x_iᵀ W q)
        let mut rng = RngStream::new(4, 0);
        let p = random_prompt(&mut rng, 3, 4, 11);
        let w = AttentionParams::new(rng.standard_normal_matrix(3, 3)).unwrap();
        let wq = w.matrix() * p.query();
        let mut z = DVector::zeros(4);
        for i in 0..p.len() {
            z += p.one_hot(i) * p.examples()[i].x.dot(&wq);
        }
        z /= p.len() as f64;
        let expect = OutputDistribution::from_logits(z.as_slice());
        let got = forward_multi(&w, &p).unwrap();
        for k in 0..4 {
            assert!((expect.probs()[k] - got.probs()[k]).abs() < 1e-14);
        }
    }

    #[test]
    fn binary_matches_embedding_entry() {
        let mut rng = RngStream::new(5, 0);
        let p = random_prompt(&mut rng, 3, 2, 6);
        let w = AttentionParams::new(rng.standard_normal_matrix(3, 3)).unwrap();
        let full = FullAttentionParams::from_sparse(&w, 2);
        let e = embedding_matrix(&p, 1).unwrap();
        let f = &e + &full.w_v * &e * (e.transpose() * &full.w_kq * &e) / p.len() as f64;
        let z = f[(3, p.len())];
        let got = forward_binary(&w, &p).unwrap();
        assert!((sigmoid(z) - got.probs()[1]).abs() < 1e-14);
    }

    #[test]
    fn full_with_sparse_pattern_matches_sparse() {
        let mut rng = RngStream::new(6, 0);
        for c in [2usize, 3, 5] {
            let p = random_prompt(&mut rng, 4, c, 13);
            let w = AttentionParams::new(rng.standard_normal_matrix(4, 4)).unwrap();
            let full = FullAttentionParams::from_sparse(&w, c);
            let a = forward_full(&full, &p).unwrap();
            let b = forward_multi(&w, &p).unwrap();
            for k in 0..c {
                assert!((a.probs()[k] - b.probs()[k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn full_zero_key_query_is_uniform() {
        let mut rng = RngStream::new(7, 0);
        let p = random_prompt(&mut rng, 3, 3, 5);
        let full = FullAttentionParams::new(rng.standard_normal_matrix(6, 6), DMatrix::zeros(6, 6)).unwrap();
        let out = forward_full(&full, &p).unwrap();
        assert!(out.probs().iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn full_matches_dense_oracle() {
        let mut rng = RngStream::new(8, 0);
        for label_rows in [1usize, 2] {
            let p = random_prompt(&mut rng, 3, 2, 4);
            let n = 3 + label_rows;
            let full = FullAttentionParams::new(
                rng.standard_normal_matrix(n, n),
                rng.standard_normal_matrix(n, n),
            )
            .unwrap();
            // dense F = E + W_v E (Eᵀ W_kq E) / N written with explicit loops
            let e = embedding_matrix(&p, label_rows).unwrap();
            let cols = e.ncols();
            let mut gram = DMatrix::<f64>::zeros(cols, cols);
            for i in 0..cols {
                for j in 0..cols {
                    let mut s = 0.0;
                    for a in 0..n {
                        for b in 0..n {
                            s += e[(a, i)] * full.w_kq[(a, b)] * e[(b, j)];
                        }
                    }
                    gram[(i, j)] = s;
                }
            }
            let mut f = e.clone();
            for r in 0..n {
                for j in 0..cols {
                    let mut s = 0.0;
                    for a in 0..n {
                        for i in 0..cols {
                            s += full.w_v[(r, a)] * e[(a, i)] * gram[(i, j)];
                        }
                    }
                    f[(r, j)] += s / 4.0;
                }
            }
            let out = forward_full(&full, &p).unwrap();
            let expect = if label_rows == 1 {
                OutputDistribution::binary(f[(3, 4)])
            } else {
                OutputDistribution::from_logits(&[f[(3, 4)], f[(4, 4)]])
            };
            for k in 0..2 {
                assert!((out.probs()[k] - expect.probs()[k]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn full_rejects_bad_shape() {
        let mut rng = RngStream::new(9, 0);
        let p = random_prompt(&mut rng, 3, 3, 5);
        let full = FullAttentionParams::new(DMatrix::zeros(4, 4), DMatrix::zeros(4, 4)).unwrap();
        assert!(forward_full(&full, &p).is_err());
    }

    #[test]
    fn dimension_and_class_errors() {
        let mut rng = RngStream::new(10, 0);
        let p = random_prompt(&mut rng, 3, 3, 5);
        assert!(matches!(
            forward_binary(&AttentionParams::zeros(3), &p),
            Err(Error::WrongClassCount { .. })
        ));
        assert!(matches!(
            forward_multi(&AttentionParams::zeros(2), &p),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(AttentionParams::new(DMatrix::from_element(2, 2, f64::NAN)).is_err());
    }

    #[test]
    fn degenerate_and_boundary_predictions() {
        let d = OutputDistribution::new(vec![1.0, 0.0]).unwrap();
        let mut rng = RngStream::new(11, 0);
        for _ in 0..1000 {
            assert_eq!(sample_prediction(&d, &mut rng), 0);
        }
        let d = OutputDistribution::new(vec![0.3, 0.7]).unwrap();
        assert_eq!(prediction_from_uniform(&d, 0.0), 0);
        let d = OutputDistribution::new(vec![0.0, 1.0]).unwrap();
        assert_eq!(prediction_from_uniform(&d, 0.0), 1);
    }

    #[test]
    fn prediction_frequency() {
        let d = OutputDistribution::new(vec![0.25, 0.75]).unwrap();
        let mut rng = RngStream::new(12, 0);
        let hits = (0..100_000).filter(|_| sample_prediction(&d, &mut rng) == 1).count();
        let f = hits as f64 / 1e5;
        assert!((0.745..=0.755).contains(&f), "freq {f}");
    }

    #[test]
    fn params_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = RngStream::new(13, 0);
        let w = AttentionParams::new(rng.standard_normal_matrix(3, 3)).unwrap();
        let path = dir.path().join("w.json");
        ParamsFile::sparse(&w, 4).save(&path).unwrap();
        let back = ParamsFile::load(&path).unwrap();
        assert_eq!((back.d, back.c, back.variant), (3, 4, Variant::Sparse));
        assert_eq!(back.to_sparse().unwrap(), w);
        assert!(back.to_full().is_err());

        let full = FullAttentionParams::from_sparse(&w, 4);
        ParamsFile::full(&full, 3, 4).save(&path).unwrap();
        assert_eq!(ParamsFile::load(&path).unwrap().to_full().unwrap(), full);
    }

    proptest! {
        #[test]
        fn argmax_is_scale_invariant(seed in 0u64..10_000, alpha in 0.01f64..100.0) {
            let mut rng = RngStream::new(seed, 1);
            let p = random_prompt(&mut rng, 3, 4, 8);
            let w = AttentionParams::new(rng.standard_normal_matrix(3, 3)).unwrap();
            let z = multi_logits(&w, &p.stats()).unwrap();
            // skip near-ties where rounding could reorder
            let mut sorted: Vec<f64> = z.iter().copied().collect();
            sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
            prop_assume!(sorted[0] - sorted[1] > 1e-9);
            let a = forward_multi(&w, &p).unwrap().argmax();
            let b = forward_multi(&w.scaled(alpha), &p).unwrap().argmax();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn binary_output_in_open_interval(seed in 0u64..10_000, scale in 0.0f64..3.0) {
            let mut rng = RngStream::new(seed, 2);
            let p = random_prompt(&mut rng, 3, 2, 5);
            let w = AttentionParams::new(rng.standard_normal_matrix(3, 3) * scale).unwrap();
            let out = forward_binary(&w, &p).unwrap();
            prop_assert!(out.probs()[1] > 0.0 && out.probs()[1] < 1.0);
            prop_assert!((out.probs().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn class_permutation_permutes_output(seed in 0u64..10_000) {
            let mut rng = RngStream::new(seed, 3);
            let p = random_prompt(&mut rng, 3, 3, 7);
            let perm = [2usize, 0, 1];
            let permuted = Prompt::new(
                p.examples().iter().map(|e| point(e.x.as_slice(), perm[e.label])).collect(),
                p.query().clone(),
                3,
            ).unwrap();
            let w = AttentionParams::new(rng.standard_normal_matrix(3, 3)).unwrap();
            let a = forward_multi(&w, &p).unwrap();
            let b = forward_multi(&w, &permuted).unwrap();
            for k in 0..3 {
                prop_assert!((a.probs()[k] - b.probs()[perm[k]]).abs() < 1e-14);
            }
        }
    }
}
