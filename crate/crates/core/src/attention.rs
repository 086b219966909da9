//! Single-head scaled dot-product attention and its exact key derivatives.
//!
//! For a query `q`, keys `k_i` and values `v_i`:
//!
//! ```text
//! e_i = q.k_i / sqrt(d_k) + bias_i     alpha = softmax(e)     o = sum_i alpha_i v_i
//! ```
//!
//! With a fixed output gradient `E = dL/do` the key gradient is
//! `g_i = alpha_i * E.(v_i - o) * q / sqrt(d_k)` and every key-key Hessian
//! block is a scalar multiple of `q q^T`. The optional per-entry logit bias is
//! constant in the keys, so it changes `alpha` but none of the derivative
//! formulas; the cache uses it to carry `ln(merged_count)`.

use crate::numerics::{softmax, Matrix, Vector};
use crate::{Error, Result, Scalar};

/// One head's forward state for a single query.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionSnapshot<T> {
    pub query: Vector<T>,
    pub keys: Vec<Vector<T>>,
    pub values: Vec<Vector<T>>,
    /// Additive logit offsets, if any.
    pub bias: Option<Vector<T>>,
    pub logits: Vector<T>,
    pub scores: Vector<T>,
    pub output: Vector<T>,
    /// `1 / sqrt(d_k)`
    pub scale: T,
}

impl<T: Scalar> AttentionSnapshot<T> {
    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn key_dim(&self) -> usize {
        self.query.len()
    }

    pub fn value_dim(&self) -> usize {
        self.output.len()
    }

    /// Value residual `v_i - o`.
    pub fn residual(&self, i: usize) -> Result<Vector<T>> {
        self.check_index(i)?;
        Ok(&self.values[i] - &self.output)
    }

    pub(crate) fn check_index(&self, i: usize) -> Result<()> {
        if i >= self.len() {
            return Err(Error::IndexOutOfRange {
                index: i,
                len: self.len(),
            });
        }
        Ok(())
    }

    fn check_grad(&self, grad_output: &Vector<T>) -> Result<()> {
        if grad_output.len() != self.value_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.value_dim(),
                found: grad_output.len(),
            });
        }
        Ok(())
    }
}

pub fn attention_forward<T: Scalar>(
    query: &Vector<T>,
    keys: &[Vector<T>],
    values: &[Vector<T>],
) -> Result<AttentionSnapshot<T>> {
    attention_forward_biased(query, keys, values, None)
}

/// Forward pass with optional additive logit offsets (one per key).
pub fn attention_forward_biased<T: Scalar>(
    query: &Vector<T>,
    keys: &[Vector<T>],
    values: &[Vector<T>],
    bias: Option<&Vector<T>>,
) -> Result<AttentionSnapshot<T>> {
    let (logits, scores, output) = attend(query, keys, values, bias)?;
    Ok(AttentionSnapshot {
        query: query.clone(),
        keys: keys.to_vec(),
        values: values.to_vec(),
        bias: bias.cloned(),
        logits,
        scores,
        output,
        scale: inv_sqrt_dim(query.len()),
    })
}

/// Attention output only, `(logits, scores, output)`; shared by the snapshot
/// constructor and the simulator so both paths are bit-identical.
pub fn attend<T: Scalar>(
    query: &Vector<T>,
    keys: &[Vector<T>],
    values: &[Vector<T>],
    bias: Option<&Vector<T>>,
) -> Result<(Vector<T>, Vector<T>, Vector<T>)> {
    let n = keys.len();
    if n == 0 {
        return Err(Error::EmptySequence);
    }
    if values.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            found: values.len(),
        });
    }
    if let Some(b) = bias {
        if b.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                found: b.len(),
            });
        }
    }
    let d_k = query.len();
    let d_v = values[0].len();
    for k in keys {
        if k.len() != d_k {
            return Err(Error::DimensionMismatch {
                expected: d_k,
                found: k.len(),
            });
        }
    }
    for v in values {
        if v.len() != d_v {
            return Err(Error::DimensionMismatch {
                expected: d_v,
                found: v.len(),
            });
        }
    }

    let scale = inv_sqrt_dim::<T>(d_k);
    let logits = Vector::from_fn(n, |i| {
        let e = query.dot(&keys[i]) * scale;
        match bias {
            Some(b) => e + b[i],
            None => e,
        }
    });
    let scores = softmax(&logits);
    let mut out = vec![T::zero(); d_v];
    for (a, v) in scores.iter().zip(values) {
        for (o, &x) in out.iter_mut().zip(v.iter()) {
            *o += *a * x;
        }
    }
    Ok((logits, scores, Vector::from_vec_unchecked(out)))
}

fn inv_sqrt_dim<T: Scalar>(d: usize) -> T {
    T::one() / T::lit(d as f64).sqrt()
}

/// `dL/dk_i = (1/sqrt(d_k)) alpha_i [E.(v_i - o)] q`
pub fn key_gradient<T: Scalar>(
    s: &AttentionSnapshot<T>,
    grad_output: &Vector<T>,
    i: usize,
) -> Result<Vector<T>> {
    s.check_index(i)?;
    s.check_grad(grad_output)?;
    let proj = grad_output.dot(&s.residual(i)?);
    Ok(s.query.scale(s.scale * s.scores[i] * proj))
}

/// A key-key Hessian block in factored form `coefficient * q q^T`.
#[derive(Clone, Debug, PartialEq)]
pub struct HessianBlock<T> {
    /// Includes the `1/d_k` factor.
    pub coefficient: T,
    pub direction: Vector<T>,
}

impl<T: Scalar> HessianBlock<T> {
    pub fn materialize(&self) -> Matrix<T> {
        let q = &self.direction;
        // q_a q_b first keeps the materialized block exactly symmetric
        Matrix::from_fn(q.len(), q.len(), |a, b| self.coefficient * (q[a] * q[b]))
    }

    /// `coefficient * q (q . x)`
    pub fn apply(&self, x: &Vector<T>) -> Vector<T> {
        self.direction
            .scale(self.coefficient * self.direction.dot(x))
    }
}

/// Exact block `d g_i / d k_j^T`.
///
/// Diagonal: `(1/d_k) E.[alpha_i (1 - 2 alpha_i)(v_i - o)]`.
/// Off-diagonal: `-(1/d_k) E.[alpha_i alpha_j (v_i + v_j - 2 o)]`, symmetric in `(i, j)`.
pub fn hessian_block<T: Scalar>(
    s: &AttentionSnapshot<T>,
    grad_output: &Vector<T>,
    i: usize,
    j: usize,
) -> Result<HessianBlock<T>> {
    s.check_index(i)?;
    s.check_index(j)?;
    s.check_grad(grad_output)?;
    let inv_dk = s.scale * s.scale;
    let sensitivity = if i == j {
        let a = s.scores[i];
        s.residual(i)?.scale(a * (T::one() - T::lit(2.0) * a))
    } else {
        let (ai, aj) = (s.scores[i], s.scores[j]);
        let pair = &s.values[i] + &s.values[j];
        pair.axpy(-T::lit(2.0), &s.output).scale(-(ai * aj))
    };
    Ok(HessianBlock {
        coefficient: inv_dk * grad_output.dot(&sensitivity),
        direction: s.query.clone(),
    })
}
