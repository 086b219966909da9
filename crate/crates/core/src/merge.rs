//! Key and value merge rules for an adjacent pair `(m, m+1)`.
//!
//! Every key-key Hessian block is `(g_ij / d_k) q q^T` with scalar sensitivity
//! `g_ij = E.c_ij`, where the value-space vectors
//!
//! ```text
//! c11 =  a_m     (1 - 2 a_m)    (v_m     - o)
//! c22 =  a_{m+1} (1 - 2 a_{m+1})(v_{m+1} - o)
//! c12 = -a_m a_{m+1} (v_m + v_{m+1} - 2 o)
//! ```
//!
//! need only the forward pass. The Newton system `M k = N` is then rank one
//! and its minimum-norm solution is `P_q b / gamma` with
//! `gamma = g11 + 2 g12 + g22` and `b = (g11 + g12) k_m + (g12 + g22) k_{m+1}`.
//! Expressed in the span of the two keys this is the weight form
//! `w_m = (g11 + g12) / gamma`, `w_{m+1} = (g12 + g22) / gamma`.
//!
//! When `cos(E, c11) = cos(E, c22) = -cos(E, c12)` the gradient factors cancel
//! and the weights depend on the norms alone:
//! `w_m = (|c11| - |c12|) / (|c11| - 2|c12| + |c22|)`. That is the
//! gradient-free rule used by the cache.

use crate::attention::AttentionSnapshot;
use crate::numerics::{project_onto, Vector};
use crate::{Error, Result, Scalar};

/// Default threshold on the weight denominators below which a merge falls back.
pub const DEFAULT_MERGE_EPS: f64 = 1e-10;

/// Additive regularizer in the diagonal-Fisher baseline.
pub const FISHER_EPS: f64 = 1e-12;

/// Gradient-free weights outside `[WEIGHT_GUARD_LO, WEIGHT_GUARD_HI]` fall back to the mean.
pub const WEIGHT_GUARD_LO: f64 = -1.0;
pub const WEIGHT_GUARD_HI: f64 = 2.0;

/// Forward-pass sensitivity vectors for one adjacent pair.
#[derive(Clone, Debug, PartialEq)]
pub struct SensitivityTriple<T> {
    pub c11: Vector<T>,
    pub c22: Vector<T>,
    pub c12: Vector<T>,
    pub n11: T,
    pub n22: T,
    pub n12: T,
    /// `a_m (1 - 2 a_m)`
    pub self_m: T,
    /// `a_{m+1} (1 - 2 a_{m+1})`
    pub self_next: T,
    /// `a_m a_{m+1}`; `c12 = -coupling (r_m + r_{m+1})`
    pub coupling: T,
    /// `v_m - o`
    pub residual_m: Vector<T>,
    /// `v_{m+1} - o`
    pub residual_next: Vector<T>,
}

/// Affine merge weights; `w_m + w_next = 1`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MergeWeights<T> {
    pub w_m: T,
    pub w_next: T,
    pub fallback_used: bool,
}

impl<T: Scalar> MergeWeights<T> {
    pub fn mean() -> Self {
        let h = T::lit(0.5);
        Self {
            w_m: h,
            w_next: h,
            fallback_used: false,
        }
    }

    fn fallback() -> Self {
        Self {
            fallback_used: true,
            ..Self::mean()
        }
    }

    pub fn swapped(self) -> Self {
        Self {
            w_m: self.w_next,
            w_next: self.w_m,
            fallback_used: self.fallback_used,
        }
    }
}

fn check_pair<T: Scalar>(s: &AttentionSnapshot<T>, m: usize) -> Result<()> {
    if m + 1 >= s.len() {
        return Err(Error::IndexOutOfRange {
            index: m + 1,
            len: s.len(),
        });
    }
    Ok(())
}

fn check_same_len<T: Scalar>(a: &Vector<T>, b: &Vector<T>) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            found: b.len(),
        });
    }
    Ok(())
}

pub fn sensitivity_vectors<T: Scalar>(
    s: &AttentionSnapshot<T>,
    m: usize,
) -> Result<SensitivityTriple<T>> {
    check_pair(s, m)?;
    let two = T::lit(2.0);
    let (am, an) = (s.scores[m], s.scores[m + 1]);
    let residual_m = s.residual(m)?;
    let residual_next = s.residual(m + 1)?;
    let self_m = am * (T::one() - two * am);
    let self_next = an * (T::one() - two * an);
    let coupling = am * an;

    let c11 = residual_m.scale(self_m);
    let c22 = residual_next.scale(self_next);
    let c12 = (&s.values[m] + &s.values[m + 1])
        .axpy(-two, &s.output)
        .scale(-coupling);
    Ok(SensitivityTriple {
        n11: c11.norm(),
        n22: c22.norm(),
        n12: c12.norm(),
        c11,
        c22,
        c12,
        self_m,
        self_next,
        coupling,
        residual_m,
        residual_next,
    })
}

/// Gradient-free weights from the sensitivity norms.
///
/// Falls back to `(0.5, 0.5)` when `|n11 - 2 n12 + n22| <= eps` or when either
/// weight leaves `[-1, 2]`.
pub fn merge_weights_gradient_free<T: Scalar>(t: &SensitivityTriple<T>, eps: T) -> MergeWeights<T> {
    weights_from_norms(t.n11, t.n12, t.n22, eps)
}

pub fn weights_from_norms<T: Scalar>(n11: T, n12: T, n22: T, eps: T) -> MergeWeights<T> {
    // (n11 + n22) is commutative, so swapping the pair swaps the weights bit-exactly.
    let denom = (n11 + n22) - T::lit(2.0) * n12;
    if !(denom.abs() > eps) {
        return MergeWeights::fallback();
    }
    let w_m = (n11 - n12) / denom;
    let w_next = (n22 - n12) / denom;
    let (lo, hi) = (T::lit(WEIGHT_GUARD_LO), T::lit(WEIGHT_GUARD_HI));
    if !(lo..=hi).contains(&w_m) || !(lo..=hi).contains(&w_next) {
        return MergeWeights::fallback();
    }
    MergeWeights {
        w_m,
        w_next,
        fallback_used: false,
    }
}

/// `k* = w_m k_m + w_next k_next`
pub fn merge_key_closed_form<T: Scalar>(
    k_m: &Vector<T>,
    k_next: &Vector<T>,
    w: &MergeWeights<T>,
) -> Result<Vector<T>> {
    check_same_len(k_m, k_next)?;
    Ok(Vector::from_fn(k_m.len(), |d| w.w_m * k_m[d] + w.w_next * k_next[d]))
}

/// Scalar sensitivities `(g11, g12, g22)` for an explicit output gradient.
pub fn scalar_sensitivities<T: Scalar>(
    s: &AttentionSnapshot<T>,
    grad_output: &Vector<T>,
    m: usize,
) -> Result<(T, T, T)> {
    let t = sensitivity_vectors(s, m)?;
    check_same_len(&t.c11, grad_output)?;
    Ok((
        grad_output.dot(&t.c11),
        grad_output.dot(&t.c12),
        grad_output.dot(&t.c22),
    ))
}

fn curvature<T: Scalar>(g11: T, g12: T, g22: T) -> T {
    (g11 + g22) + T::lit(2.0) * g12
}

/// Exact weights `((g11 + g12)/gamma, (g12 + g22)/gamma)`.
pub fn exact_merge_weights<T: Scalar>(
    s: &AttentionSnapshot<T>,
    grad_output: &Vector<T>,
    m: usize,
    eps: T,
) -> Result<MergeWeights<T>> {
    let (g11, g12, g22) = scalar_sensitivities(s, grad_output, m)?;
    weights_from_sensitivities(g11, g12, g22, eps)
}

pub fn weights_from_sensitivities<T: Scalar>(g11: T, g12: T, g22: T, eps: T) -> Result<MergeWeights<T>> {
    let gamma = curvature(g11, g12, g22);
    if !(gamma.abs() > eps) {
        return Err(Error::DegenerateSystem);
    }
    Ok(MergeWeights {
        w_m: (g11 + g12) / gamma,
        w_next: (g12 + g22) / gamma,
        fallback_used: false,
    })
}

/// Minimum-norm solution `P_q b / gamma` of the rank-one Newton system.
pub fn merge_key_exact<T: Scalar>(
    s: &AttentionSnapshot<T>,
    grad_output: &Vector<T>,
    m: usize,
    eps: T,
) -> Result<Vector<T>> {
    let (g11, g12, g22) = scalar_sensitivities(s, grad_output, m)?;
    let gamma = curvature(g11, g12, g22);
    if !(gamma.abs() > eps) {
        return Err(Error::DegenerateSystem);
    }
    let b = s.keys[m]
        .scale(g11 + g12)
        .axpy(g12 + g22, &s.keys[m + 1]);
    Ok(project_onto(&s.query, &b)?.scale(T::one() / gamma))
}

/// The exact solution re-expressed in `span{k_m, k_{m+1}}`.
pub fn merge_key_weight_form_exact<T: Scalar>(
    s: &AttentionSnapshot<T>,
    grad_output: &Vector<T>,
    m: usize,
    eps: T,
) -> Result<Vector<T>> {
    let w = exact_merge_weights(s, grad_output, m, eps)?;
    merge_key_closed_form(&s.keys[m], &s.keys[m + 1], &w)
}

/// Diagonal-Fisher baseline: per coordinate,
/// `(g_m^2 k_m + g_next^2 k_next) / (g_m^2 + g_next^2 + eps)`.
pub fn merge_key_asymkv<T: Scalar>(
    k_m: &Vector<T>,
    k_next: &Vector<T>,
    grad_m: &Vector<T>,
    grad_next: &Vector<T>,
    eps: T,
) -> Result<Vector<T>> {
    check_same_len(k_m, k_next)?;
    check_same_len(k_m, grad_m)?;
    check_same_len(k_m, grad_next)?;
    Ok(Vector::from_fn(k_m.len(), |d| {
        let (fm, fn_) = (grad_m[d] * grad_m[d], grad_next[d] * grad_next[d]);
        (fm * k_m[d] + fn_ * k_next[d]) / (fm + fn_ + eps)
    }))
}

/// `v* = v_m + v_next`
pub fn merge_value<T: Scalar>(v_m: &Vector<T>, v_next: &Vector<T>) -> Result<Vector<T>> {
    v_m.checked_add(v_next)
}

pub fn merge_key_mean<T: Scalar>(k_m: &Vector<T>, k_next: &Vector<T>) -> Result<Vector<T>> {
    merge_key_closed_form(k_m, k_next, &MergeWeights::mean())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::attention_forward;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn v(x: &[f64]) -> Vector<f64> {
        Vector::from_f64(x).unwrap()
    }

    fn random_snapshot(rng: &mut ChaCha8Rng, n: usize, d: usize) -> AttentionSnapshot<f64> {
        let mut rv = |d| Vector::from_fn(d, |_| rng.gen_range(-1.0..1.0));
        let q = rv(d);
        let keys: Vec<_> = (0..n).map(|_| rv(d)).collect();
        let values: Vec<_> = (0..n).map(|_| rv(d)).collect();
        attention_forward(&q, &keys, &values).unwrap()
    }

    #[test]
    fn sensitivities_vanish_when_values_equal_output() {
        let keys = vec![v(&[1.0, 0.0]), v(&[0.0, 1.0]), v(&[1.0, 1.0])];
        let values = vec![v(&[2.0, -1.0]); 3];
        let s = attention_forward(&v(&[0.2, 0.5]), &keys, &values).unwrap();
        let t = sensitivity_vectors(&s, 0).unwrap();
        for c in [&t.c11, &t.c22, &t.c12] {
            assert!(c.iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn uniform_pair_has_only_coupling() {
        let keys = vec![v(&[1.0, 1.0]), v(&[1.0, 1.0])];
        let values = vec![v(&[1.0, 3.0]), v(&[-2.0, 0.5])];
        let s = attention_forward(&v(&[0.4, -0.1]), &keys, &values).unwrap();
        let t = sensitivity_vectors(&s, 0).unwrap();
        assert_eq!(t.n11, 0.0);
        assert_eq!(t.n22, 0.0);
        let expect = (&values[0] + &values[1]).axpy(-2.0, &s.output).scale(-0.25);
        assert_eq!(t.c12, expect);
    }

    #[test]
    fn sensitivities_recompute_from_raw_fields() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = random_snapshot(&mut rng, 7, 5);
        let t = sensitivity_vectors(&s, 3).unwrap();
        let (a, b) = (s.scores[3], s.scores[4]);
        for d in 0..5 {
            let (vm, vn, o) = (s.values[3][d], s.values[4][d], s.output[d]);
            assert!((t.c11[d] - a * (1.0 - 2.0 * a) * (vm - o)).abs() < 1e-12);
            assert!((t.c22[d] - b * (1.0 - 2.0 * b) * (vn - o)).abs() < 1e-12);
            assert!((t.c12[d] + a * b * (vm + vn - 2.0 * o)).abs() < 1e-12);
        }
        assert!((t.n11 - t.c11.norm()).abs() < 1e-12);
        assert_eq!(
            sensitivity_vectors(&s, 6).unwrap_err(),
            Error::IndexOutOfRange { index: 7, len: 7 }
        );
    }

    #[test]
    fn gradient_free_weight_examples() {
        let w = weights_from_norms(3.0, 1.0, 3.0, 1e-10);
        assert_eq!((w.w_m, w.w_next, w.fallback_used), (0.5, 0.5, false));
        for n12 in [0.0, 0.3, 1.4] {
            let w = weights_from_norms(2.0, n12, 2.0, 1e-10);
            assert_eq!((w.w_m, w.w_next), (0.5, 0.5));
        }
        // homogeneous regime: n11 = n22 = a(1-2a)|r|, n12 = 2a^2|r|
        let (a, r) = (0.2, 1.7);
        let w = weights_from_norms(a * (1.0 - 2.0 * a) * r, 2.0 * a * a * r, a * (1.0 - 2.0 * a) * r, 1e-10);
        assert_eq!((w.w_m, w.w_next), (0.5, 0.5));
    }

    #[test]
    fn gradient_free_fallbacks() {
        // vanishing denominator
        let w = weights_from_norms(1.0, 1.0, 1.0, 1e-10);
        assert!(w.fallback_used);
        assert_eq!((w.w_m, w.w_next), (0.5, 0.5));
        // guard band: (5 - 2) / (5 - 4 + 0.4) > 2
        let w = weights_from_norms(5.0, 2.0, 0.4, 1e-10);
        assert!(w.fallback_used);
        // in-band asymmetric weights
        let w = weights_from_norms(2.0f64, 0.5, 1.0, 1e-10);
        assert!(!w.fallback_used);
        assert!((w.w_m - 0.75).abs() < 1e-15);
        assert!((w.w_m + w.w_next - 1.0).abs() < 1e-15);
    }

    #[test]
    fn closed_form_examples() {
        let (a, b) = (v(&[1.0, 2.0]), v(&[3.0, -2.0]));
        let mid = merge_key_closed_form(&a, &b, &MergeWeights::mean()).unwrap();
        assert_eq!(mid.as_slice(), &[2.0, 0.0]);
        let w = MergeWeights { w_m: 1.0, w_next: 0.0, fallback_used: false };
        assert_eq!(merge_key_closed_form(&a, &b, &w).unwrap(), a);
        assert!(merge_key_closed_form(&a, &v(&[1.0]), &w).is_err());
    }

    #[test]
    fn mean_and_value_merge_examples() {
        assert_eq!(merge_key_mean(&v(&[0.0, 0.0]), &v(&[2.0, 4.0])).unwrap().as_slice(), &[1.0, 2.0]);
        let k = v(&[1.5, -2.5]);
        assert_eq!(merge_key_mean(&k, &k).unwrap(), k);
        assert_eq!(merge_value(&v(&[1.0, 2.0]), &v(&[3.0, 4.0])).unwrap().as_slice(), &[4.0, 6.0]);
        assert_eq!(merge_value(&k, &v(&[0.0, 0.0])).unwrap(), k);
        assert!(merge_value(&k, &(-&k)).unwrap().iter().all(|&x| x == 0.0));
        assert!(merge_value(&k, &v(&[1.0])).is_err());
    }

    #[test]
    fn asymkv_examples() {
        let (a, b) = (v(&[1.0, -3.0, 2.0]), v(&[5.0, 1.0, 2.0]));
        let g = v(&[0.3, -2.0, 1.0]);
        let k = merge_key_asymkv(&a, &b, &g, &g, 1e-12).unwrap();
        assert!(k.max_abs_diff(&merge_key_mean(&a, &b).unwrap()) < 1e-10);

        let k = merge_key_asymkv(&a, &b, &g, &Vector::zeros(3), 1e-12).unwrap();
        for d in 0..3 {
            assert!((k[d] - a[d]).abs() <= 1e-12 / (g[d] * g[d]) * a[d].abs() + 1e-15);
        }
        assert!(merge_key_asymkv(&a, &b, &g, &v(&[1.0]), 1e-12).is_err());
    }

    #[test]
    fn exact_merge_degenerate_on_zero_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = random_snapshot(&mut rng, 4, 3);
        let z = Vector::zeros(3);
        assert_eq!(merge_key_exact(&s, &z, 0, 1e-10).unwrap_err(), Error::DegenerateSystem);
        assert_eq!(
            merge_key_weight_form_exact(&s, &z, 0, 1e-10).unwrap_err(),
            Error::DegenerateSystem
        );
    }

    #[test]
    fn exact_merge_lies_on_query_line() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let s = random_snapshot(&mut rng, 6, 4);
        let e = Vector::from_fn(4, |_| rng.gen_range(-1.0..1.0));
        let k = merge_key_exact(&s, &e, 2, 1e-10).unwrap();
        let p = project_onto(&s.query, &k).unwrap();
        assert!(p.max_abs_diff(&k) < 1e-12);
    }

    #[test]
    fn exact_merge_when_b_parallel_to_q() {
        // keys on the query line make b parallel to q, so the projection is the identity
        let q = v(&[1.0, 2.0]);
        let keys = vec![q.scale(0.5), q.scale(-1.0), q.scale(0.2)];
        let values = vec![v(&[1.0, 0.0]), v(&[0.0, 1.0]), v(&[1.0, 1.0])];
        let s = attention_forward(&q, &keys, &values).unwrap();
        let e = v(&[0.7, -0.4]);
        let (g11, g12, g22) = scalar_sensitivities(&s, &e, 0).unwrap();
        let gamma = g11 + 2.0 * g12 + g22;
        let b = keys[0].scale(g11 + g12).axpy(g12 + g22, &keys[1]);
        let k = merge_key_exact(&s, &e, 0, 1e-12).unwrap();
        assert!(k.max_abs_diff(&b.scale(1.0 / gamma)) < 1e-12);
    }

    #[test]
    fn weight_form_examples() {
        let w = weights_from_sensitivities(0.7, 0.0, 0.7, 1e-12).unwrap();
        assert_eq!((w.w_m, w.w_next), (0.5, 0.5));
        let w = weights_from_sensitivities(0.25, 0.5, 0.125, 1e-12).unwrap();
        assert_eq!(w.w_m + w.w_next, 1.0);
        assert_eq!(weights_from_sensitivities(1.0, -1.0, 1.0, 1e-10), Err(Error::DegenerateSystem));
    }

    #[test]
    fn scaling_gradient_leaves_exact_merge_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..20 {
            let s = random_snapshot(&mut rng, 5, 4);
            let e = Vector::from_fn(4, |_| rng.gen_range(-1.0..1.0));
            let Ok(a) = merge_key_exact(&s, &e, 1, 1e-10) else { continue };
            let sc = rng.gen_range(0.1..10.0);
            let b = merge_key_exact(&s, &e.scale(sc), 1, 1e-10).unwrap();
            let rel = a.max_abs_diff(&b) / a.norm().max(1e-300);
            assert!(rel < 1e-10, "rel {rel}");
        }
    }

    #[test]
    fn swapping_the_pair_swaps_weights_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..50 {
            let mut rv = |d| Vector::<f64>::from_fn(d, |_| rng.gen_range(-1.0..1.0));
            let q = rv(4);
            let (k0, k1, v0, v1) = (rv(4), rv(4), rv(4), rv(4));
            let e = rv(4);
            let s = attention_forward(&q, &[k0.clone(), k1.clone()], &[v0.clone(), v1.clone()]).unwrap();
            let r = attention_forward(&q, &[k1, k0], &[v1, v0]).unwrap();
            let (ts, tr) = (sensitivity_vectors(&s, 0).unwrap(), sensitivity_vectors(&r, 0).unwrap());
            assert_eq!(
                merge_weights_gradient_free(&ts, 1e-10),
                merge_weights_gradient_free(&tr, 1e-10).swapped()
            );
            if let (Ok(a), Ok(b)) = (
                exact_merge_weights(&s, &e, 0, 1e-10),
                exact_merge_weights(&r, &e, 0, 1e-10),
            ) {
                assert_eq!(a, b.swapped());
            }
        }
    }

    proptest! {
        #[test]
        fn gradient_free_weights_sum_to_one(
            n11 in 0.0f64..5.0, n12 in 0.0f64..5.0, n22 in 0.0f64..5.0,
        ) {
            let w = weights_from_norms(n11, n12, n22, 1e-10);
            prop_assert!((w.w_m + w.w_next - 1.0).abs() < 1e-10);
            let sw = weights_from_norms(n22, n12, n11, 1e-10);
            prop_assert_eq!(w, sw.swapped());
        }

        #[test]
        fn asymkv_stays_within_coordinate_bounds(
            a in prop::collection::vec(-10.0f64..10.0, 5),
            b in prop::collection::vec(-10.0f64..10.0, 5),
            ga in prop::collection::vec(-3.0f64..3.0, 5),
            gb in prop::collection::vec(-3.0f64..3.0, 5),
        ) {
            let (a, b) = (Vector::new(a).unwrap(), Vector::new(b).unwrap());
            let k = merge_key_asymkv(&a, &b, &Vector::new(ga).unwrap(), &Vector::new(gb).unwrap(), 1e-12).unwrap();
            for d in 0..5 {
                let (lo, hi) = (a[d].min(b[d]).min(0.0), a[d].max(b[d]).max(0.0));
                // the eps term pulls toward zero, never beyond the pair's hull
                prop_assert!(k[d] >= lo - 1e-12 && k[d] <= hi + 1e-12);
                if a[d].signum() == b[d].signum() {
                    prop_assert!(k[d].abs() <= a[d].abs().max(b[d].abs()) + 1e-12);
                }
            }
        }

        #[test]
        fn closed_form_is_affine(
            a in prop::collection::vec(-10.0f64..10.0, 4),
            b in prop::collection::vec(-10.0f64..10.0, 4),
            w in -1.0f64..2.0,
        ) {
            let (a, b) = (Vector::new(a).unwrap(), Vector::new(b).unwrap());
            let mw = MergeWeights { w_m: w, w_next: 1.0 - w, fallback_used: false };
            let k = merge_key_closed_form(&a, &b, &mw).unwrap();
            let lhs = &k - &b;
            let rhs = (&a - &b).scale(w);
            prop_assert!(lhs.max_abs_diff(&rhs) < 1e-12 * (1.0 + a.norm() + b.norm()) * 10.0);
        }
    }
}
