//! Spectral decomposition of adjacent-token similarity under a projection.
//!
//! For a projection `y = x W` the cosine between consecutive projected tokens
//! is a bilinear form in the induced metric `W W^T = sum_i lambda_i u_i u_i^T`
//! (`lambda_i = sigma_i^2`, `u_i` the left singular vectors of `W`). Writing
//! `p_{t,i} = x_t . u_i` splits it exactly into per-mode contributions
//!
//! ```text
//! c_i = lambda_i p_{t,i} p_{t+1,i} / ( sqrt(sum_j lambda_j p_{t,j}^2) sqrt(sum_j lambda_j p_{t+1,j}^2) )
//! ```
//!
//! whose sum is the cosine. A steeply decaying spectrum means the leading
//! modes carry almost all of it.

use crate::numerics::{cosine, svd, Matrix, Vector, DEGENERACY_EPS};
use crate::{Error, Result, Scalar};

/// Default `k` for the top-k energy fraction.
pub const DEFAULT_TOP_K: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct SpectralProfile<T> {
    /// `sigma_i^2`, descending.
    pub eigenvalues: Vector<T>,
    /// Columns are the left singular vectors `u_i`, orthonormal.
    pub left_vectors: Matrix<T>,
    /// `(rows, cols)` of the analysed weight.
    pub source_dims: (usize, usize),
}

impl<T: Scalar> SpectralProfile<T> {
    pub fn modes(&self) -> usize {
        self.eigenvalues.len()
    }

    /// `U diag(lambda) U^T`
    pub fn induced_metric(&self) -> Matrix<T> {
        let u = &self.left_vectors;
        let d = u.rows();
        Matrix::from_fn(d, d, |a, b| {
            (0..self.modes()).fold(T::zero(), |acc, i| {
                acc + self.eigenvalues[i] * u[(a, i)] * u[(b, i)]
            })
        })
    }

    /// Modal coordinates `p_i = x . u_i`.
    pub fn modal_coordinates(&self, x: &Vector<T>) -> Result<Vector<T>> {
        self.left_vectors.vecmat(x)
    }

    /// Same profile with modes reordered by `perm` (mode `i` of the result is mode `perm[i]`).
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        if perm.len() != self.modes() {
            return Err(Error::DimensionMismatch {
                expected: self.modes(),
                found: perm.len(),
            });
        }
        let u = &self.left_vectors;
        Ok(Self {
            eigenvalues: Vector::from_fn(perm.len(), |i| self.eigenvalues[perm[i]]),
            left_vectors: Matrix::from_fn(u.rows(), perm.len(), |a, i| u[(a, perm[i])]),
            source_dims: self.source_dims,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModeContributions<T> {
    pub contributions: Vector<T>,
    pub total: T,
}

pub fn spectral_profile<T: Scalar>(w: &Matrix<T>) -> Result<SpectralProfile<T>> {
    let f = svd(w)?;
    Ok(SpectralProfile {
        eigenvalues: Vector::from_fn(f.sigma.len(), |i| f.sigma[i] * f.sigma[i]),
        left_vectors: f.u,
        source_dims: w.shape(),
    })
}

pub fn mode_contributions<T: Scalar>(
    x_t: &Vector<T>,
    x_next: &Vector<T>,
    p: &SpectralProfile<T>,
) -> Result<ModeContributions<T>> {
    let pt = p.modal_coordinates(x_t)?;
    let pn = p.modal_coordinates(x_next)?;
    let lam = &p.eigenvalues;
    let energy = |c: &Vector<T>| {
        (0..lam.len())
            .fold(T::zero(), |acc, i| acc + lam[i] * c[i] * c[i])
            .sqrt()
    };
    let (nt, nn) = (energy(&pt), energy(&pn));
    let eps = T::lit(DEGENERACY_EPS);
    if nt <= eps || nn <= eps {
        return Err(Error::DegenerateDirection);
    }
    let denom = nt * nn;
    let contributions = Vector::from_fn(lam.len(), |i| lam[i] * pt[i] * pn[i] / denom);
    let total = contributions.sum();
    Ok(ModeContributions {
        contributions,
        total,
    })
}

/// `cos(x_t W, x_{t+1} W)` for every consecutive pair, computed directly in output space.
pub fn adjacent_similarity<T: Scalar>(xs: &[Vector<T>], w: &Matrix<T>) -> Result<Vec<T>> {
    if xs.len() < 2 {
        return Err(Error::InsufficientLength {
            len: xs.len(),
            required: 2,
        });
    }
    let ys = xs.iter().map(|x| w.vecmat(x)).collect::<Result<Vec<_>>>()?;
    ys.windows(2).map(|p| cosine(&p[0], &p[1])).collect()
}

/// Mean per-mode contribution over all consecutive pairs of `xs`.
pub fn mean_mode_contributions<T: Scalar>(
    xs: &[Vector<T>],
    p: &SpectralProfile<T>,
) -> Result<Vector<T>> {
    if xs.len() < 2 {
        return Err(Error::InsufficientLength {
            len: xs.len(),
            required: 2,
        });
    }
    let mut acc = Vector::zeros(p.modes());
    for pair in xs.windows(2) {
        let c = mode_contributions(&pair[0], &pair[1], p)?;
        acc = &acc + &c.contributions;
    }
    Ok(acc.scale(T::one() / T::lit((xs.len() - 1) as f64)))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConcentrationStats<T> {
    /// `(sum lambda)^2 / sum lambda^2`, in `[1, modes]`.
    pub participation_ratio: T,
    /// Fraction of `sum lambda` in the leading `k` modes.
    pub topk_energy: T,
}

pub fn concentration_stats<T: Scalar>(p: &SpectralProfile<T>, k: usize) -> Result<ConcentrationStats<T>> {
    concentration_of(&p.eigenvalues, k)
}

pub fn concentration_of<T: Scalar>(lambda: &Vector<T>, k: usize) -> Result<ConcentrationStats<T>> {
    let total = lambda.sum();
    if !(total > T::zero()) {
        return Err(Error::DegenerateDirection);
    }
    let sq: T = lambda.iter().map(|&l| l * l).sum();
    let top: T = lambda.iter().take(k).copied().sum();
    Ok(ConcentrationStats {
        participation_ratio: total * total / sq,
        topk_energy: top / total,
    })
}

/// Running energy fraction `sum_{j<=i} lambda_j / sum lambda`.
pub fn cumulative_energy<T: Scalar>(lambda: &Vector<T>) -> Vec<T> {
    let total = lambda.sum();
    let mut run = T::zero();
    lambda
        .iter()
        .map(|&l| {
            run += l;
            if total > T::zero() {
                run / total
            } else {
                T::zero()
            }
        })
        .collect()
}
