//! Seeded random streams and the SPD linear algebra shared by every other
//! module.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{check_dim, Error, Result};

/// Relative tolerance on `|a_ij - a_ji|`, scaled by the largest entry.
pub const SYMMETRY_TOL: f64 = 1e-12;

/// A symmetric positive definite matrix together with its Cholesky factor and
/// inverse.
#[derive(Clone, Debug)]
pub struct SpdMatrix {
    entries: DMatrix<f64>,
    factor: DMatrix<f64>,
    inverse: DMatrix<f64>,
    diagonal: bool,
}

impl SpdMatrix {
    pub fn factorize(entries: DMatrix<f64>) -> Result<Self> {
        if !entries.is_square() || entries.nrows() == 0 {
            return Err(Error::InvalidArgument(format!(
                "SPD matrix must be square and non-empty, got {}x{}",
                entries.nrows(),
                entries.ncols()
            )));
        }
        if entries.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("SPD matrix has non-finite entries".into()));
        }
        let scale = entries.amax();
        let asymmetry = (&entries - entries.transpose()).amax();
        if asymmetry > SYMMETRY_TOL * scale {
            return Err(Error::NotSymmetric { asymmetry });
        }
        let sym = (&entries + entries.transpose()) * 0.5;
        let chol: Cholesky<f64, Dyn> =
            Cholesky::new(sym.clone()).ok_or(Error::NotPositiveDefinite)?;
        let factor = chol.l();
        if factor.diagonal().iter().any(|&v| v.is_nan() || v <= 0.0) {
            return Err(Error::NotPositiveDefinite);
        }
        let inverse = chol.inverse();
        let n = sym.nrows();
        let diagonal = (0..n).all(|i| (0..n).all(|j| i == j || sym[(i, j)] == 0.0));
        Ok(Self {
            entries: sym,
            factor,
            inverse,
            diagonal,
        })
    }

    pub fn from_diagonal(diag: &[f64]) -> Result<Self> {
        Self::factorize(DMatrix::from_diagonal(&DVector::from_column_slice(diag)))
    }

    pub fn identity(dim: usize) -> Self {
        Self::factorize(DMatrix::identity(dim, dim)).expect("identity is SPD")
    }

    pub fn dim(&self) -> usize {
        self.entries.nrows()
    }

    pub fn entries(&self) -> &DMatrix<f64> {
        &self.entries
    }

    /// Lower-triangular `L` with `L Lᵀ = Λ`.
    pub fn factor(&self) -> &DMatrix<f64> {
        &self.factor
    }

    pub fn inverse(&self) -> &DMatrix<f64> {
        &self.inverse
    }

    pub fn is_diagonal(&self) -> bool {
        self.diagonal
    }

    pub fn diagonal(&self) -> Vec<f64> {
        self.entries.diagonal().iter().copied().collect()
    }

    /// `xᵀ Λ⁻¹ y`.
    pub fn inv_inner(&self, x: &DVector<f64>, y: &DVector<f64>) -> f64 {
        x.dot(&(&self.inverse * y))
    }

    /// `L z`.
    pub fn apply_factor(&self, z: &DVector<f64>) -> DVector<f64> {
        &self.factor * z
    }

    /// `L⁻¹ x` by forward substitution.
    pub fn solve_factor(&self, x: &DVector<f64>) -> DVector<f64> {
        self.factor
            .solve_lower_triangular(x)
            .expect("Cholesky factor has a positive diagonal")
    }
}

/// A reproducible random stream identified by `(seed, stream id)`.
///
/// Backed by ChaCha20 with the stream id in the cipher's nonce, so distinct
/// ids never overlap and any stream can be recreated without replaying others.
#[derive(Clone, Debug)]
pub struct RngStream {
    seed: u64,
    stream: u64,
    rng: ChaCha20Rng,
}

impl RngStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Self { seed, stream, rng }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    /// A child stream whose id depends only on this stream's id, the label and
    /// the index; independent of how many draws have been taken here.
    pub fn substream(&self, label: &str, index: u64) -> RngStream {
        RngStream::new(self.seed, derive_stream_id(self.stream, label, index))
    }

    pub fn uniform(&mut self) -> f64 {
        use rand::Rng;
        self.rng.random::<f64>()
    }

    pub fn standard_normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.rng)
    }

    pub fn standard_normal_vector(&mut self, dim: usize) -> DVector<f64> {
        DVector::from_fn(dim, |_, _| self.standard_normal())
    }

    pub fn standard_normal_matrix(&mut self, rows: usize, cols: usize) -> DMatrix<f64> {
        // column-major fill order, fixed for reproducibility
        DMatrix::from_fn(rows, cols, |_, _| self.standard_normal())
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.rng.fill_bytes(dst)
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

fn derive_stream_id(parent: u64, label: &str, index: u64) -> u64 {
    // FNV-1a over the label, then mixed with parent and index
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    splitmix64(splitmix64(parent ^ h).wrapping_add(splitmix64(index.wrapping_add(h))))
}

/// `mean + L z` for a given standard-normal vector `z`.
pub fn gaussian_from_standard(
    mean: &DVector<f64>,
    cov: &SpdMatrix,
    z: &DVector<f64>,
) -> Result<DVector<f64>> {
    check_dim("mean", cov.dim(), mean.len())?;
    check_dim("standard normal draw", cov.dim(), z.len())?;
    Ok(mean + cov.apply_factor(z))
}

pub fn sample_gaussian(
    mean: &DVector<f64>,
    cov: &SpdMatrix,
    rng: &mut RngStream,
) -> Result<DVector<f64>> {
    check_dim("mean", cov.dim(), mean.len())?;
    let z = rng.standard_normal_vector(cov.dim());
    gaussian_from_standard(mean, cov, &z)
}

/// Orthogonalizes a square Gaussian matrix, fixing column signs so that the
/// triangular factor has a positive diagonal. With i.i.d. N(0,1) input the
/// result is Haar-distributed on O(d).
pub fn haar_from_gaussian(gaussian: DMatrix<f64>) -> DMatrix<f64> {
    let d = gaussian.nrows();
    let qr = gaussian.qr();
    let r = qr.r();
    let mut q = qr.q();
    for j in 0..d {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

pub fn haar_orthogonal(dim: usize, rng: &mut RngStream) -> Result<DMatrix<f64>> {
    if dim < 1 {
        return Err(Error::InvalidArgument("orthogonal dimension must be >= 1".into()));
    }
    Ok(haar_from_gaussian(rng.standard_normal_matrix(dim, dim)))
}
