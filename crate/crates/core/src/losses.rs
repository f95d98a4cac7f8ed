//! Supervision strategies between embedding batches, each returning its value
//! together with analytic gradients for every argument that is not detached.
//!
//! Argument order follows the loss subscripts: for the two-argument losses
//! slot 0 is `a` and slot 1 is `b`; for the similarity-based losses slots
//! 0 and 1 are the prediction pair and slots 2 and 3 the target pair.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{dot, l2_normalize_rows, log_row_softmax, matmul, matmul_t, row_softmax, t_matmul, Matrix};
use crate::scalar::Scalar;

/// Unit-norm tolerance accepted for batch rows at 64-bit precision.
pub const UNIT_NORM_TOL: f64 = 1e-9;

/// Unit-norm tolerance for scalar type `T`: [`UNIT_NORM_TOL`], widened to a
/// few ulps for lower precisions.
pub fn unit_norm_tol<T: Scalar>() -> f64 {
    UNIT_NORM_TOL.max(64.0 * T::epsilon().widen())
}

/// Temperature used when none is configured.
pub const DEFAULT_TAU: f64 = 0.07;

/// Row-normalized `N × d` embeddings with a stop-gradient flag.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingBatch<T> {
    matrix: Matrix<T>,
    detached: bool,
}

impl<T: Scalar> EmbeddingBatch<T> {
    /// Wraps rows that are already unit-norm.
    pub fn new(matrix: Matrix<T>) -> Result<Self> {
        if matrix.rows() == 0 || matrix.cols() == 0 {
            return Err(Error::shape("EmbeddingBatch", "N >= 1 and d >= 1", format!("{:?}", matrix.shape())));
        }
        for (row, norm) in matrix.row_norms().into_iter().enumerate() {
            let norm = norm.widen();
            if !((norm - 1.0).abs() <= unit_norm_tol::<T>()) {
                return Err(Error::NotNormalized { row, norm });
            }
        }
        Ok(Self { matrix, detached: false })
    }

    /// Normalizes the rows of `raw` and wraps the result.
    pub fn normalized(raw: &Matrix<T>) -> Result<Self> {
        Self::new(l2_normalize_rows(raw)?)
    }

    pub fn detach(mut self) -> Self {
        self.detached = true;
        self
    }

    pub fn with_detached(mut self, detached: bool) -> Self {
        self.detached = detached;
        self
    }

    pub fn matrix(&self) -> &Matrix<T> {
        &self.matrix
    }

    pub fn into_matrix(self) -> Matrix<T> {
        self.matrix
    }

    pub fn is_detached(&self) -> bool {
        self.detached
    }

    pub fn batch_size(&self) -> usize {
        self.matrix.rows()
    }

    pub fn dim(&self) -> usize {
        self.matrix.cols()
    }
}

/// Scalar loss plus gradients indexed by argument slot.
#[derive(Clone, Debug)]
pub struct LossValue<T> {
    pub value: T,
    grads: Vec<Option<Matrix<T>>>,
}

impl<T: Scalar> LossValue<T> {
    pub fn new(value: T, grads: Vec<Option<Matrix<T>>>) -> Self {
        Self { value, grads }
    }

    /// Gradient for argument `slot`, or `None` when that argument was detached.
    pub fn grad(&self, slot: usize) -> Option<&Matrix<T>> {
        self.grads.get(slot).and_then(Option::as_ref)
    }

    pub fn take_grad(&mut self, slot: usize) -> Option<Matrix<T>> {
        self.grads.get_mut(slot).and_then(Option::take)
    }

    pub fn num_slots(&self) -> usize {
        self.grads.len()
    }
}

/// In-batch softmax over similarities `a_i · b_j / tau`.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityDistribution<T> {
    pub probs: Matrix<T>,
    pub tau: T,
}

impl<T: Scalar> SimilarityDistribution<T> {
    pub fn new(a: &EmbeddingBatch<T>, b: &EmbeddingBatch<T>, tau: T) -> Result<Self> {
        let sims = matmul_t(a.matrix(), b.matrix())?;
        Ok(Self {
            probs: row_softmax(&sims, tau)?,
            tau,
        })
    }
}

/// Which way the KL divergence between the two in-batch distributions runs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlDirection {
    /// `Σ p_pred · log(p_pred / p_tgt)`.
    #[default]
    Forward,
    /// `Σ p_tgt · log(p_tgt / p_pred)`.
    Reverse,
}

fn same_shape<T: Scalar>(context: &'static str, a: &EmbeddingBatch<T>, b: &EmbeddingBatch<T>) -> Result<()> {
    if a.matrix().shape() != b.matrix().shape() {
        return Err(Error::shape(
            context,
            format!("{:?}", a.matrix().shape()),
            format!("{:?}", b.matrix().shape()),
        ));
    }
    Ok(())
}

fn check_quad<T: Scalar>(
    context: &'static str,
    pa: &EmbeddingBatch<T>,
    pb: &EmbeddingBatch<T>,
    ta: &EmbeddingBatch<T>,
    tb: &EmbeddingBatch<T>,
) -> Result<()> {
    same_shape(context, pa, pb)?;
    same_shape(context, ta, tb)?;
    if pa.batch_size() != ta.batch_size() {
        return Err(Error::shape(context, pa.batch_size(), ta.batch_size()));
    }
    Ok(())
}

fn check_tau<T: Scalar>(tau: T) -> Result<()> {
    if !(tau > T::zero()) || !tau.is_finite() {
        return Err(Error::BadTemperature(tau.widen()));
    }
    Ok(())
}

/// Given `dL/dS` for `S = a · bᵀ`, returns `(dL/da, dL/db)` for the
/// non-detached sides.
fn sim_backward<T: Scalar>(
    d_sim: &Matrix<T>,
    a: &EmbeddingBatch<T>,
    b: &EmbeddingBatch<T>,
) -> Result<(Option<Matrix<T>>, Option<Matrix<T>>)> {
    let ga = if a.is_detached() {
        None
    } else {
        Some(matmul(d_sim, b.matrix())?)
    };
    let gb = if b.is_detached() {
        None
    } else {
        Some(t_matmul(d_sim, a.matrix())?)
    };
    Ok((ga, gb))
}

/// Contrastive loss `-(1/N) Σ_i log p_ii(a, b)`.
pub fn infonce<T: Scalar>(a: &EmbeddingBatch<T>, b: &EmbeddingBatch<T>, tau: T) -> Result<LossValue<T>> {
    same_shape("infonce", a, b)?;
    check_tau(tau)?;
    let n = a.batch_size();
    let inv_n = T::one() / T::of_usize(n);
    let sims = matmul_t(a.matrix(), b.matrix())?;
    let log_p = log_row_softmax(&sims, tau)?;
    let value = -(0..n).fold(T::zero(), |acc, i| acc + log_p[(i, i)]) * inv_n;

    // dL/dS = (P - I) / (N tau)
    let mut d_sim = log_p.map(|v| v.exp());
    for i in 0..n {
        d_sim[(i, i)] = d_sim[(i, i)] - T::one();
    }
    let d_sim = d_sim.scale(inv_n / tau);
    let (ga, gb) = sim_backward(&d_sim, a, b)?;
    Ok(LossValue::new(value, vec![ga, gb]))
}

/// Feature-wise distance `(1/2)(1/(N d)) Σ (a - b)²`.
pub fn feature_distance<T: Scalar>(a: &EmbeddingBatch<T>, b: &EmbeddingBatch<T>) -> Result<LossValue<T>> {
    same_shape("feature_distance", a, b)?;
    let scale = T::one() / T::of_usize(a.batch_size() * a.dim());
    let diff = a.matrix().zip_map(b.matrix(), |x, y| x - y)?;
    let value = T::of(0.5) * scale * dot(diff.as_slice(), diff.as_slice());
    let ga = (!a.is_detached()).then(|| diff.scale(scale));
    let gb = (!b.is_detached()).then(|| diff.scale(-scale));
    Ok(LossValue::new(value, vec![ga, gb]))
}

/// Similarity-wise distance `(1/2)(1/N²) Σ (pa_i·pb_j - ta_i·tb_j)²`.
///
/// The prediction pair and the target pair may have different widths.
pub fn similarity_distance<T: Scalar>(
    pred_a: &EmbeddingBatch<T>,
    pred_b: &EmbeddingBatch<T>,
    tgt_a: &EmbeddingBatch<T>,
    tgt_b: &EmbeddingBatch<T>,
) -> Result<LossValue<T>> {
    check_quad("similarity_distance", pred_a, pred_b, tgt_a, tgt_b)?;
    let n = pred_a.batch_size();
    let scale = T::one() / T::of_usize(n * n);
    let pred = matmul_t(pred_a.matrix(), pred_b.matrix())?;
    let tgt = matmul_t(tgt_a.matrix(), tgt_b.matrix())?;
    let diff = pred.zip_map(&tgt, |p, t| p - t)?;
    let value = T::of(0.5) * scale * dot(diff.as_slice(), diff.as_slice());
    let d_pred = diff.scale(scale);
    let d_tgt = diff.scale(-scale);
    let (g0, g1) = sim_backward(&d_pred, pred_a, pred_b)?;
    let (g2, g3) = sim_backward(&d_tgt, tgt_a, tgt_b)?;
    Ok(LossValue::new(value, vec![g0, g1, g2, g3]))
}

/// KL divergence `(1/N) Σ_ij p_ij(pred) log(p_ij(pred) / p_ij(tgt))` between
/// the in-batch similarity distributions.
pub fn kl_div<T: Scalar>(
    pred_a: &EmbeddingBatch<T>,
    pred_b: &EmbeddingBatch<T>,
    tgt_a: &EmbeddingBatch<T>,
    tgt_b: &EmbeddingBatch<T>,
    tau: T,
) -> Result<LossValue<T>> {
    kl_div_directed(pred_a, pred_b, tgt_a, tgt_b, tau, KlDirection::Forward)
}

pub fn kl_div_directed<T: Scalar>(
    pred_a: &EmbeddingBatch<T>,
    pred_b: &EmbeddingBatch<T>,
    tgt_a: &EmbeddingBatch<T>,
    tgt_b: &EmbeddingBatch<T>,
    tau: T,
    direction: KlDirection,
) -> Result<LossValue<T>> {
    check_quad("kl_div", pred_a, pred_b, tgt_a, tgt_b)?;
    check_tau(tau)?;
    match direction {
        KlDirection::Forward => kl_forward(pred_a, pred_b, tgt_a, tgt_b, tau),
        KlDirection::Reverse => {
            let mut swapped = kl_forward(tgt_a, tgt_b, pred_a, pred_b, tau)?;
            let grads = vec![
                swapped.take_grad(2),
                swapped.take_grad(3),
                swapped.take_grad(0),
                swapped.take_grad(1),
            ];
            Ok(LossValue::new(swapped.value, grads))
        }
    }
}

fn kl_forward<T: Scalar>(
    pa: &EmbeddingBatch<T>,
    pb: &EmbeddingBatch<T>,
    ta: &EmbeddingBatch<T>,
    tb: &EmbeddingBatch<T>,
    tau: T,
) -> Result<LossValue<T>> {
    let n = pa.batch_size();
    let inv_n = T::one() / T::of_usize(n);
    let log_p = log_row_softmax(&matmul_t(pa.matrix(), pb.matrix())?, tau)?;
    let log_q = log_row_softmax(&matmul_t(ta.matrix(), tb.matrix())?, tau)?;

    let mut total = T::zero();
    // dL/dS_pred = P ⊙ (log P - log Q - row_kl) / N, dL/dS_tgt = (Q - P) / N; both over tau.
    let mut d_pred = Matrix::zeros(n, n);
    let mut d_tgt = Matrix::zeros(n, n);
    for i in 0..n {
        let lp = log_p.row(i);
        let lq = log_q.row(i);
        let row_kl = lp
            .iter()
            .zip(lq)
            .fold(T::zero(), |acc, (&x, &y)| acc + x.exp() * (x - y));
        total = total + row_kl;
        for j in 0..n {
            let p = lp[j].exp();
            let q = lq[j].exp();
            d_pred[(i, j)] = p * (lp[j] - lq[j] - row_kl) * inv_n / tau;
            d_tgt[(i, j)] = (q - p) * inv_n / tau;
        }
    }
    let (g0, g1) = sim_backward(&d_pred, pa, pb)?;
    let (g2, g3) = sim_backward(&d_tgt, ta, tb)?;
    Ok(LossValue::new(total * inv_n, vec![g0, g1, g2, g3]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{compare_grads, finite_diff_grad};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn batch(n: usize, d: usize, rng: &mut ChaCha8Rng) -> EmbeddingBatch<f64> {
        EmbeddingBatch::normalized(&Matrix::random_normal(n, d, rng)).unwrap()
    }

    fn unit(v: &[f64]) -> EmbeddingBatch<f64> {
        EmbeddingBatch::normalized(&Matrix::from_f64_rows(&[v])).unwrap()
    }

    #[test]
    fn batch_rejects_unnormalized_and_empty() {
        let m = Matrix::<f64>::from_f64_rows(&[&[1.0, 1.0]]);
        assert!(matches!(EmbeddingBatch::new(m), Err(Error::NotNormalized { row: 0, .. })));
        assert!(EmbeddingBatch::new(Matrix::<f64>::zeros(0, 3)).is_err());
    }

    #[test]
    fn infonce_identity_rows() {
        let i2 = EmbeddingBatch::new(Matrix::<f64>::identity(2)).unwrap();
        let l = infonce(&i2, &i2, 1.0).unwrap();
        let expected = (1.0 + (-1.0f64).exp()).ln();
        assert!((l.value - expected).abs() < 1e-15);
        assert!((l.value - 0.31326).abs() < 1e-5);
    }

    #[test]
    fn infonce_single_pair_is_zero() {
        let a = unit(&[0.3, -0.2, 0.9]);
        let b = unit(&[-1.0, 0.5, 0.1]);
        let l = infonce(&a, &b, 0.07).unwrap();
        assert_eq!(l.value, 0.0);
        assert!(l.grad(0).unwrap().as_slice().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn infonce_errors() {
        let mut r = ChaCha8Rng::seed_from_u64(0);
        let a = batch(3, 4, &mut r);
        let b = batch(2, 4, &mut r);
        assert!(matches!(infonce(&a, &b, 0.07), Err(Error::ShapeMismatch { .. })));
        assert!(matches!(infonce(&a, &a, 0.0), Err(Error::BadTemperature(_))));
    }

    #[test]
    fn feature_distance_examples() {
        let a = unit(&[1.0, 0.0]);
        let b = unit(&[0.0, 1.0]);
        assert_eq!(feature_distance(&a, &b).unwrap().value, 0.5);
        assert_eq!(feature_distance(&a, &a).unwrap().value, 0.0);
    }

    #[test]
    fn similarity_distance_examples() {
        let p = unit(&[0.6, 0.8]);
        let t = unit(&[1.0, 0.0, 0.0]);
        let neg_t = unit(&[-1.0, 0.0, 0.0]);
        let l = similarity_distance(&p, &p, &t, &neg_t).unwrap();
        assert!((l.value - 2.0).abs() < 1e-15);
        assert_eq!(similarity_distance(&p, &p, &p, &p).unwrap().value, 0.0);
    }

    #[test]
    fn similarity_distance_shape_errors() {
        let mut r = ChaCha8Rng::seed_from_u64(2);
        let a = batch(3, 4, &mut r);
        let b = batch(3, 5, &mut r);
        let c = batch(2, 4, &mut r);
        assert!(similarity_distance(&a, &b, &a, &a).is_err());
        assert!(similarity_distance(&a, &a, &c, &c).is_err());
    }

    #[test]
    fn kl_degenerate_cases() {
        let mut r = ChaCha8Rng::seed_from_u64(3);
        let a = batch(5, 6, &mut r);
        let b = batch(5, 6, &mut r);
        assert!(kl_div(&a, &b, &a, &b, 0.07).unwrap().value.abs() < 1e-15);
        let x = unit(&[1.0, 2.0]);
        let y = unit(&[-1.0, 0.5]);
        assert_eq!(kl_div(&x, &y, &y, &x, 0.07).unwrap().value, 0.0);
    }

    #[test]
    fn kl_reverse_swaps_roles() {
        let mut r = ChaCha8Rng::seed_from_u64(4);
        let (a, b, c, d) = (batch(4, 5, &mut r), batch(4, 5, &mut r), batch(4, 5, &mut r), batch(4, 5, &mut r));
        let fwd = kl_div(&c, &d, &a, &b, 0.2).unwrap();
        let rev = kl_div_directed(&a, &b, &c, &d, 0.2, KlDirection::Reverse).unwrap();
        assert_eq!(fwd.value, rev.value);
        assert_eq!(fwd.grad(0), rev.grad(2));
        assert_eq!(fwd.grad(3), rev.grad(1));
    }

    #[test]
    fn detached_slots_have_no_gradient_and_same_value() {
        let mut r = ChaCha8Rng::seed_from_u64(5);
        let (a, b, c, d) = (batch(4, 3, &mut r), batch(4, 3, &mut r), batch(4, 6, &mut r), batch(4, 6, &mut r));
        let full = similarity_distance(&a, &b, &c, &d).unwrap();
        let part = similarity_distance(&a, &b.clone().detach(), &c.clone().detach(), &d).unwrap();
        assert_eq!(full.value, part.value);
        assert!(part.grad(1).is_none() && part.grad(2).is_none());
        assert_eq!(full.grad(0), part.grad(0));
        assert_eq!(full.grad(3), part.grad(3));
    }

    /// Central differences on one slot. The kernels never re-check row norms,
    /// so the raw matrix can be perturbed off the sphere.
    fn fd_slot<F>(args: &[EmbeddingBatch<f64>], slot: usize, loss: F) -> Matrix<f64>
    where
        F: Fn(&[EmbeddingBatch<f64>]) -> f64,
    {
        finite_diff_grad(
            |m| {
                let mut probe = args.to_vec();
                probe[slot] = EmbeddingBatch { matrix: m.clone(), detached: false };
                Ok(loss(&probe))
            },
            args[slot].matrix(),
            1e-5,
        )
        .unwrap()
    }

    #[test]
    fn raw_gradients_match_finite_differences() {
        let mut r = ChaCha8Rng::seed_from_u64(6);
        let args: Vec<_> = (0..4).map(|_| batch(4, 5, &mut r)).collect();
        let tau = 0.3;
        let cases: Vec<(usize, Box<dyn Fn(&[EmbeddingBatch<f64>]) -> LossValue<f64>>)> = vec![
            (2, Box::new(move |x| infonce(&x[0], &x[1], tau).unwrap())),
            (2, Box::new(|x| feature_distance(&x[0], &x[1]).unwrap())),
            (4, Box::new(|x| similarity_distance(&x[0], &x[1], &x[2], &x[3]).unwrap())),
            (4, Box::new(move |x| kl_div(&x[0], &x[1], &x[2], &x[3], tau).unwrap())),
            (4, Box::new(move |x| {
                kl_div_directed(&x[0], &x[1], &x[2], &x[3], tau, KlDirection::Reverse).unwrap()
            })),
        ];
        for (slots, f) in &cases {
            let lv = f(&args);
            for s in 0..*slots {
                let numeric = fd_slot(&args, s, |x| f(x).value);
                let rep = compare_grads(lv.grad(s).unwrap(), &numeric, 1e-6).unwrap();
                assert!(rep.passes(1e-5), "slot {s}: {rep:?}");
            }
        }
    }
}
