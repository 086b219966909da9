//! Brute-force verifiers for the analytic derivatives and merge solutions.
//!
//! Nothing here shares code with the closed forms it checks beyond the forward
//! pass: gradients and Hessians come from central differences of
//! `L(K) = E.o(K)`, and the merge system is solved through a dense SVD
//! pseudoinverse.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::attention::{attend, attention_forward, hessian_block, key_gradient, AttentionSnapshot};
use crate::merge::{sensitivity_vectors, SensitivityTriple};
use crate::numerics::{cosine, svd, Matrix, Vector};
use crate::{Error, Result, Scalar};

/// Step for first differences.
pub const GRADIENT_STEP: f64 = 1e-5;
/// Step for second differences.
pub const HESSIAN_STEP: f64 = 1e-4;
/// Relative singular-value cutoff of the dense pseudoinverse.
pub const PINV_CUTOFF: f64 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum FdScheme {
    #[default]
    Central,
}

/// What [`fd_hessian_block`] differentiates.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub enum InnerGradient {
    /// [`fd_key_gradient`] with this step: fully derivative-free, but the
    /// round-off is about `eps / (step * inner_step)`.
    FiniteDifference(f64),
    /// The analytic key gradient, itself checked against finite differences.
    #[default]
    Analytic,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FdConfig {
    pub step: f64,
    pub scheme: FdScheme,
    /// Only used for second differences.
    pub inner: InnerGradient,
}

impl FdConfig {
    pub fn gradient() -> Self {
        Self {
            step: GRADIENT_STEP,
            scheme: FdScheme::Central,
            inner: InnerGradient::Analytic,
        }
    }

    pub fn hessian() -> Self {
        Self {
            step: HESSIAN_STEP,
            scheme: FdScheme::Central,
            inner: InnerGradient::Analytic,
        }
    }

    /// Second differences of the finite-difference gradient.
    pub fn hessian_nested() -> Self {
        Self {
            inner: InnerGradient::FiniteDifference(GRADIENT_STEP),
            ..Self::hessian()
        }
    }

    fn checked_step<T: Scalar>(&self) -> Result<T> {
        if !(self.step > 0.0 && self.step.is_finite()) {
            return Err(Error::InvalidConfig("finite-difference step must be positive".into()));
        }
        Ok(T::lit(self.step))
    }
}

impl Default for FdConfig {
    fn default() -> Self {
        Self::gradient()
    }
}

fn loss<T: Scalar>(q: &Vector<T>, keys: &[Vector<T>], values: &[Vector<T>], e: &Vector<T>) -> Result<T> {
    let (_, _, o) = attend(q, keys, values, None)?;
    e.checked_dot(&o)
}

/// Central differences of `L = E.o` in the coordinates of `k_i`.
pub fn fd_key_gradient<T: Scalar>(
    q: &Vector<T>,
    keys: &[Vector<T>],
    values: &[Vector<T>],
    grad_output: &Vector<T>,
    i: usize,
    cfg: &FdConfig,
) -> Result<Vector<T>> {
    let h = cfg.checked_step::<T>()?;
    if i >= keys.len() {
        return Err(Error::IndexOutOfRange { index: i, len: keys.len() });
    }
    let mut k = keys.to_vec();
    let mut g = Vec::with_capacity(q.len());
    for d in 0..keys[i].len() {
        let base = keys[i][d];
        k[i][d] = base + h;
        let plus = loss(q, &k, values, grad_output)?;
        k[i][d] = base - h;
        let minus = loss(q, &k, values, grad_output)?;
        k[i][d] = base;
        g.push((plus - minus) / (h + h));
    }
    Vector::new(g)
}

/// Central differences of the `k_i` gradient in the coordinates of `k_j`.
/// Row `a`, column `b` is `d^2 L / dk_i[a] dk_j[b]`; `cfg.inner` picks the
/// gradient being differenced.
pub fn fd_hessian_block<T: Scalar>(
    q: &Vector<T>,
    keys: &[Vector<T>],
    values: &[Vector<T>],
    grad_output: &Vector<T>,
    i: usize,
    j: usize,
    cfg: &FdConfig,
) -> Result<Matrix<T>> {
    let h = cfg.checked_step::<T>()?;
    if i.max(j) >= keys.len() {
        return Err(Error::IndexOutOfRange { index: i.max(j), len: keys.len() });
    }
    let grad = |k: &[Vector<T>]| -> Result<Vector<T>> {
        match cfg.inner {
            InnerGradient::FiniteDifference(step) => {
                let inner = FdConfig { step, ..FdConfig::gradient() };
                fd_key_gradient(q, k, values, grad_output, i, &inner)
            }
            InnerGradient::Analytic => key_gradient(&attention_forward(q, k, values)?, grad_output, i),
        }
    };
    let dk = q.len();
    let mut k = keys.to_vec();
    let mut out = Matrix::zeros(dk, dk);
    for b in 0..dk {
        let base = keys[j][b];
        k[j][b] = base + h;
        let plus = grad(&k)?;
        k[j][b] = base - h;
        let minus = grad(&k)?;
        k[j][b] = base;
        for a in 0..dk {
            out[(a, b)] = (plus[a] - minus[a]) / (h + h);
        }
    }
    Ok(out)
}

/// `M = h11 + 2 h12 + h22` and `N = h11 k_m + h12 (k_m + k_{m+1}) + h22 k_{m+1}`,
/// both dense.
pub fn dense_merge_system<T: Scalar>(
    s: &AttentionSnapshot<T>,
    grad_output: &Vector<T>,
    m: usize,
) -> Result<(Matrix<T>, Vector<T>)> {
    if m + 1 >= s.len() {
        return Err(Error::IndexOutOfRange { index: m + 1, len: s.len() });
    }
    let h11 = hessian_block(s, grad_output, m, m)?.materialize();
    let h12 = hessian_block(s, grad_output, m, m + 1)?.materialize();
    let h22 = hessian_block(s, grad_output, m + 1, m + 1)?.materialize();
    let big_m = h11.checked_add(&h12.scale(T::lit(2.0)))?.checked_add(&h22)?;
    let (km, kn) = (&s.keys[m], &s.keys[m + 1]);
    let n = &(&h11.matvec(km)? + &h12.matvec(&(km + kn))?) + &h22.matvec(kn)?;
    Ok((big_m, n))
}

/// Singular values retained by the pseudoinverse plus the solution `M^+ N`.
#[derive(Clone, Debug)]
pub struct DenseSolution<T> {
    pub solution: Vector<T>,
    pub retained: usize,
    pub sigma: Vector<T>,
}

/// `M^+ N` via SVD with cutoff `1e-10 * sigma_max`.
pub fn dense_merge_solve<T: Scalar>(
    s: &AttentionSnapshot<T>,
    grad_output: &Vector<T>,
    m: usize,
) -> Result<DenseSolution<T>> {
    let (big_m, n) = dense_merge_system(s, grad_output, m)?;
    let dec = svd(&big_m)?;
    let smax = dec.sigma[0];
    if !(smax > T::min_positive_value()) {
        return Err(Error::DegenerateSystem);
    }
    let cutoff = T::lit(PINV_CUTOFF) * smax;
    // M^+ N = V diag(1/sigma) U^T N over retained modes
    let mut x = Vector::zeros(big_m.cols());
    let mut retained = 0;
    for r in 0..dec.sigma.len() {
        let sr = dec.sigma[r];
        if sr <= cutoff {
            continue;
        }
        retained += 1;
        let coef = dec.u.column(r).dot(&n) / sr;
        x = x.axpy(coef, &dec.vt.row(r));
    }
    Ok(DenseSolution {
        solution: x,
        retained,
        sigma: dec.sigma,
    })
}

pub fn dense_merge_oracle<T: Scalar>(
    s: &AttentionSnapshot<T>,
    grad_output: &Vector<T>,
    m: usize,
) -> Result<Vector<T>> {
    Ok(dense_merge_solve(s, grad_output, m)?.solution)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AlignmentReport<T> {
    pub cos_e_c11: T,
    pub cos_e_c22: T,
    pub cos_e_c12: T,
    /// `max(|cos11 - cos22|, |cos11 + cos12|)`
    pub max_deviation: T,
}

/// Cosines between `E` and the three sensitivity vectors.
///
/// Each `c` is a signed multiple of a residual direction, so the cosines are
/// taken against `r_m`, `r_{m+1}` and `r_m + r_{m+1}` and the sign applied
/// afterwards. Equal residuals then give `max_deviation == 0` exactly.
pub fn alignment_report<T: Scalar>(
    s: &AttentionSnapshot<T>,
    grad_output: &Vector<T>,
    m: usize,
) -> Result<AlignmentReport<T>> {
    alignment_from_triple(&sensitivity_vectors(s, m)?, grad_output)
}

/// [`alignment_report`] for an already computed triple.
pub fn alignment_from_triple<T: Scalar>(t: &SensitivityTriple<T>, grad_output: &Vector<T>) -> Result<AlignmentReport<T>> {
    if t.self_m == T::zero() || t.self_next == T::zero() || t.coupling == T::zero() {
        return Err(Error::DegenerateDirection);
    }
    let sign = |x: T| if x > T::zero() { T::one() } else { -T::one() };
    let cos11 = sign(t.self_m) * cosine(grad_output, &t.residual_m)?;
    let cos22 = sign(t.self_next) * cosine(grad_output, &t.residual_next)?;
    let sum = &t.residual_m + &t.residual_next;
    let cos12 = -sign(t.coupling) * cosine(grad_output, &sum)?;
    Ok(AlignmentReport {
        cos_e_c11: cos11,
        cos_e_c22: cos22,
        cos_e_c12: cos12,
        max_deviation: (cos11 - cos22).abs().max((cos11 + cos12).abs()),
    })
}

fn pair_blocks<T: Scalar>(
    s: &AttentionSnapshot<T>,
    grad_output: &Vector<T>,
    m: usize,
) -> Result<[Matrix<T>; 3]> {
    if m + 1 >= s.len() {
        return Err(Error::IndexOutOfRange { index: m + 1, len: s.len() });
    }
    Ok([
        hessian_block(s, grad_output, m, m)?.materialize(),
        hessian_block(s, grad_output, m, m + 1)?.materialize(),
        hessian_block(s, grad_output, m + 1, m + 1)?.materialize(),
    ])
}

/// Second-order term `0.5 D^T H D` of the loss change when both `k_m` and
/// `k_{m+1}` are replaced by `candidate`, with `D = (candidate - k_m, candidate - k_{m+1})`.
///
/// This curvature-only model is the one whose stationary points solve
/// `M k = N`; see [`quadratic_linear_term`] for the first-order part.
pub fn quadratic_objective_value<T: Scalar>(
    s: &AttentionSnapshot<T>,
    grad_output: &Vector<T>,
    m: usize,
    candidate: &Vector<T>,
) -> Result<T> {
    let [h11, h12, h22] = pair_blocks(s, grad_output, m)?;
    let dm = candidate.checked_sub(&s.keys[m])?;
    let dn = candidate.checked_sub(&s.keys[m + 1])?;
    let two = T::lit(2.0);
    let quad = dm.dot(&h11.matvec(&dm)?) + two * dm.dot(&h12.matvec(&dn)?) + dn.dot(&h22.matvec(&dn)?);
    Ok(quad / two)
}

/// Gradient of [`quadratic_objective_value`] in `candidate`, i.e. `M k - N`.
pub fn quadratic_objective_gradient<T: Scalar>(
    s: &AttentionSnapshot<T>,
    grad_output: &Vector<T>,
    m: usize,
    candidate: &Vector<T>,
) -> Result<Vector<T>> {
    let (big_m, n) = dense_merge_system(s, grad_output, m)?;
    big_m.matvec(candidate)?.checked_sub(&n)
}

/// First-order term `g_m.D_m + g_{m+1}.D_{m+1}`.
pub fn quadratic_linear_term<T: Scalar>(
    s: &AttentionSnapshot<T>,
    grad_output: &Vector<T>,
    m: usize,
    candidate: &Vector<T>,
) -> Result<T> {
    let gm = key_gradient(s, grad_output, m)?;
    let gn = key_gradient(s, grad_output, m + 1)?;
    Ok(gm.dot(&candidate.checked_sub(&s.keys[m])?) + gn.dot(&candidate.checked_sub(&s.keys[m + 1])?))
}

/// A random attention instance with standard-normal entries.
#[derive(Clone, Debug)]
pub struct Instance {
    pub query: Vector<f64>,
    pub keys: Vec<Vector<f64>>,
    pub values: Vec<Vector<f64>>,
    pub grad_output: Vector<f64>,
}

impl Instance {
    pub fn random<R: Rng + ?Sized>(rng: &mut R, n: usize, d_k: usize, d_v: usize) -> Self {
        let mut gauss = |d: usize| Vector::from_fn(d, |_| rng.sample::<f64, _>(StandardNormal));
        let query = gauss(d_k);
        let keys = (0..n).map(|_| gauss(d_k)).collect();
        let values = (0..n).map(|_| gauss(d_v)).collect();
        let grad_output = gauss(d_v);
        Self { query, keys, values, grad_output }
    }

    pub fn snapshot(&self) -> Result<AttentionSnapshot<f64>> {
        attention_forward(&self.query, &self.keys, &self.values)
    }
}

/// Rebuilds the values of `m` and `m+1` so that, after the forward pass,
/// `v_m - o = r_m` and `v_{m+1} - o = r_next` (up to rounding).
///
/// Attention scores do not depend on values, so solving
/// `o (1 - a_m - a_{m+1}) = sum_{j != m, m+1} a_j v_j + a_m r_m + a_{m+1} r_next`
/// fixes `o`, and the two values follow.
pub fn with_residuals(
    q: &Vector<f64>,
    keys: &[Vector<f64>],
    values: &[Vector<f64>],
    m: usize,
    r_m: &Vector<f64>,
    r_next: &Vector<f64>,
) -> Result<AttentionSnapshot<f64>> {
    let base = attention_forward(q, keys, values)?;
    if m + 1 >= base.len() {
        return Err(Error::IndexOutOfRange { index: m + 1, len: base.len() });
    }
    let (am, an) = (base.scores[m], base.scores[m + 1]);
    let rest = 1.0 - am - an;
    if rest <= 1e-12 {
        return Err(Error::DegenerateSystem);
    }
    let mut acc = r_m.scale(am).axpy(an, r_next);
    for (j, v) in values.iter().enumerate() {
        if j != m && j != m + 1 {
            acc = acc.axpy(base.scores[j], v);
        }
    }
    let o = acc.scale(1.0 / rest);
    let mut vals = values.to_vec();
    vals[m] = &o + r_m;
    vals[m + 1] = if r_m == r_next { vals[m].clone() } else { &o + r_next };
    attention_forward(q, keys, &vals)
}

/// Index `m` whose pair has the smallest `max(a_m, a_{m+1})`.
pub fn lightest_pair(s: &AttentionSnapshot<f64>) -> usize {
    (0..s.len() - 1)
        .min_by(|&a, &b| {
            let x = s.scores[a].max(s.scores[a + 1]);
            let y = s.scores[b].max(s.scores[b + 1]);
            x.total_cmp(&y)
        })
        .unwrap_or(0)
}

/// Unit vectors `(u, w)` in `R^d` at angle `theta` (radians); needs `d >= 2`.
pub fn unit_pair_at_angle<R: Rng + ?Sized>(rng: &mut R, d: usize, theta: f64) -> Result<(Vector<f64>, Vector<f64>)> {
    if d < 2 {
        return Err(Error::InvalidConfig("need at least two dimensions".into()));
    }
    let mut gauss = || Vector::from_fn(d, |_| rng.sample::<f64, _>(StandardNormal));
    let u = gauss();
    let u = u.scale(1.0 / u.norm());
    let p = gauss();
    let perp = p.axpy(-p.dot(&u), &u);
    let perp = perp.scale(1.0 / perp.norm());
    let w = u.scale(theta.cos()).axpy(theta.sin(), &perp);
    Ok((u, w))
}

/// Relative error `|a - b| / max(|a|, |b|, floor)` in the Euclidean norm.
pub fn relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(floor)
}
