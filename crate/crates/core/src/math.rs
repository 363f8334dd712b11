//! Dense matrices, probability vectors and the numerically stable softmax
//! machinery shared by every estimator.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major matrix of finite `f64` values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RealMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl RealMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::DimensionMismatch {
                expected: rows * cols,
                actual: data.len(),
            });
        }
        if let Some(pos) = data.iter().position(|x| !x.is_finite()) {
            return Err(Error::invalid(format!(
                "matrix entry {pos} is not finite ({})",
                data[pos]
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    /// Builds a matrix from equally sized rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::DimensionMismatch {
                    expected: cols,
                    actual: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), cols, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        self.data.chunks_exact(self.cols.max(1)).take(self.rows)
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|x| x * factor).collect(),
        }
    }

    /// Column means as a vector of length `cols`.
    pub fn column_mean(&self) -> Vec<f64> {
        let mut mean = vec![0.0; self.cols];
        for r in self.iter_rows() {
            axpy(1.0, r, &mut mean);
        }
        let inv = 1.0 / self.rows as f64;
        mean.iter_mut().for_each(|x| *x *= inv);
        mean
    }

    /// Returns a copy with the rows reordered so that row `i` is `self.row(perm[i])`.
    pub fn permute_rows(&self, perm: &[usize]) -> Self {
        let mut data = Vec::with_capacity(self.data.len());
        for &p in perm {
            data.extend_from_slice(self.row(p));
        }
        Self {
            rows: perm.len(),
            cols: self.cols,
            data,
        }
    }

    /// Mean of squared entrywise differences.
    pub fn mse(&self, other: &RealMatrix) -> Result<f64> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::DimensionMismatch {
                expected: self.data.len(),
                actual: other.data.len(),
            });
        }
        let sum: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        Ok(sum / self.data.len() as f64)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// Non-negative weights summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityVector(Vec<f64>);

/// Tolerance on the total mass of a [`ProbabilityVector`].
pub const PROBABILITY_SUM_TOLERANCE: f64 = 1e-12;

impl ProbabilityVector {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::invalid("probability vector is empty"));
        }
        if let Some(w) = weights.iter().find(|w| !(w.is_finite() && **w >= 0.0)) {
            return Err(Error::invalid(format!("invalid probability weight {w}")));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > PROBABILITY_SUM_TOLERANCE {
            return Err(Error::invalid(format!(
                "probability weights sum to {total}, not 1"
            )));
        }
        Ok(Self(weights))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

impl std::ops::Index<usize> for ProbabilityVector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

fn check_logits(logits: &[f64]) -> Result<()> {
    if logits.is_empty() {
        return Err(Error::invalid("empty logit vector"));
    }
    if let Some(x) = logits.iter().find(|x| !x.is_finite()) {
        return Err(Error::invalid(format!("non-finite logit {x}")));
    }
    Ok(())
}

fn max_of(xs: &[f64]) -> f64 {
    xs.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

/// `ln Σ exp(x)` with the maximum factored out.
pub fn logsumexp(logits: &[f64]) -> Result<f64> {
    check_logits(logits)?;
    Ok(logsumexp_unchecked(logits))
}

/// [`logsumexp`] without input validation. Accepts `-inf` entries.
pub(crate) fn logsumexp_unchecked(logits: &[f64]) -> f64 {
    let max = max_of(logits);
    if max == f64::NEG_INFINITY {
        return max;
    }
    let sum: f64 = logits.iter().map(|x| (x - max).exp()).sum();
    max + sum.ln()
}

/// Max-subtracted softmax.
pub fn stable_softmax(logits: &[f64]) -> Result<ProbabilityVector> {
    check_logits(logits)?;
    let mut out = logits.to_vec();
    softmax_in_place(&mut out);
    Ok(ProbabilityVector(out))
}

/// Overwrites `xs` with its softmax; `xs` must be nonempty and finite.
pub(crate) fn softmax_in_place(xs: &mut [f64]) {
    let max = max_of(xs);
    let mut total = 0.0;
    for x in xs.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    let inv = 1.0 / total;
    xs.iter_mut().for_each(|x| *x *= inv);
}

/// Log-density of `N(mean, I)` at `x`.
pub fn gaussian_logpdf_identity_cov(x: &[f64], mean: &[f64]) -> Result<f64> {
    if x.len() != mean.len() {
        return Err(Error::DimensionMismatch {
            expected: mean.len(),
            actual: x.len(),
        });
    }
    Ok(gaussian_logpdf_unchecked(x, mean))
}

#[inline]
pub(crate) fn gaussian_logpdf_unchecked(x: &[f64], mean: &[f64]) -> f64 {
    let sq: f64 = x.iter().zip(mean).map(|(a, b)| (a - b) * (a - b)).sum();
    log_normalizer(x.len()) - 0.5 * sq
}

/// Log-density of the standard normal at `x`.
#[inline]
pub(crate) fn standard_normal_logpdf(x: &[f64]) -> f64 {
    log_normalizer(x.len()) - 0.5 * sq_norm(x)
}

#[inline]
fn log_normalizer(dim: usize) -> f64 {
    -0.5 * dim as f64 * (2.0 * PI).ln()
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn sq_norm(a: &[f64]) -> f64 {
    dot(a, a)
}

/// `y += alpha * x`
#[inline]
pub(crate) fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn softmax_examples() {
        let p = stable_softmax(&[0.0, 0.0]).unwrap();
        assert_eq!(p.as_slice(), &[0.5, 0.5]);

        let p = stable_softmax(&[2f64.ln(), 0.0]).unwrap();
        assert!((p[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((p[1] - 1.0 / 3.0).abs() < 1e-15);

        let p = stable_softmax(&[1000.0, 0.0]).unwrap();
        assert_eq!(p[0], 1.0);
        assert!(p[1] >= 0.0 && p[1] < 1e-300);
    }

    #[test]
    fn softmax_rejects_bad_input() {
        assert!(matches!(stable_softmax(&[]), Err(Error::InvalidArgument(_))));
        assert!(matches!(
            stable_softmax(&[0.0, f64::NAN]),
            Err(Error::InvalidArgument(_))
        ));
        assert!(matches!(
            logsumexp(&[f64::INFINITY]),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn logsumexp_examples() {
        assert_eq!(logsumexp(&[0.0]).unwrap(), 0.0);
        let v = logsumexp(&[1000.0, 1000.0]).unwrap();
        assert!((v - (1000.0 + 2f64.ln())).abs() < 1e-12);
    }

    #[test]
    fn logsumexp_matches_naive_on_moderate_inputs() {
        // Fixed pseudo-random vector in [-5, 5].
        let xs: Vec<f64> = (0..10)
            .map(|i| ((i as f64 * 2.399963).sin() * 5.0).clamp(-5.0, 5.0))
            .collect();
        let naive = xs.iter().map(|x| x.exp()).sum::<f64>().ln();
        assert!((logsumexp(&xs).unwrap() - naive).abs() < 1e-12);
    }

    #[test]
    fn logpdf_examples() {
        let v = gaussian_logpdf_identity_cov(&[0.3, -1.0], &[0.3, -1.0]).unwrap();
        assert!((v + (2.0 * PI).ln()).abs() < 1e-12);
        assert!((v + 1.8378770664).abs() < 1e-10);

        let v = gaussian_logpdf_identity_cov(&[1.0], &[0.0]).unwrap();
        assert!((v - (-0.5 * (2.0 * PI).ln() - 0.5)).abs() < 1e-15);

        assert!(matches!(
            gaussian_logpdf_identity_cov(&[1.0], &[0.0, 1.0]),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn logpdf_matches_density_product() {
        // Independent route: product of 1-D densities.
        let x: [f64; 3] = [0.4, -1.3, 2.2];
        let mu: [f64; 3] = [-0.1, 0.5, 1.0];
        let direct: f64 = x
            .iter()
            .zip(&mu)
            .map(|(a, m)| (-(a - m) * (a - m) / 2.0).exp() / (2.0 * PI).sqrt())
            .product();
        let v = gaussian_logpdf_identity_cov(&x, &mu).unwrap();
        assert!((v - direct.ln()).abs() < 1e-12);
    }

    #[test]
    fn logpdf_integrates_to_one_in_one_dimension() {
        let n = 16_000;
        let h = 16.0 / n as f64;
        let mut total = 0.0;
        for i in 0..=n {
            let x = -8.0 + i as f64 * h;
            let w = if i == 0 || i == n { 0.5 } else { 1.0 };
            total += w * gaussian_logpdf_identity_cov(&[x], &[0.0]).unwrap().exp();
        }
        assert!((total * h - 1.0).abs() < 1e-3);
    }

    #[test]
    fn matrix_rejects_non_finite_and_bad_shapes() {
        assert!(RealMatrix::new(2, 2, vec![0.0; 3]).is_err());
        assert!(RealMatrix::new(1, 2, vec![0.0, f64::INFINITY]).is_err());
        assert!(RealMatrix::from_rows(&[vec![1.0, 2.0], vec![3.0]]).is_err());
    }

    #[test]
    fn probability_vector_validation() {
        assert!(ProbabilityVector::new(vec![0.0, 0.0]).is_err());
        assert!(ProbabilityVector::new(vec![-0.5, 1.5]).is_err());
        assert!(ProbabilityVector::new(vec![0.25, 0.75]).is_ok());
    }

    proptest! {
        #[test]
        fn softmax_is_shift_invariant(
            xs in prop::collection::vec(-50.0f64..50.0, 1..20),
            c in -100.0f64..100.0,
        ) {
            let a = stable_softmax(&xs).unwrap();
            let shifted: Vec<f64> = xs.iter().map(|x| x + c).collect();
            let b = stable_softmax(&shifted).unwrap();
            for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
            let total: f64 = a.as_slice().iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
        }

        #[test]
        fn logsumexp_dominates_max(xs in prop::collection::vec(-500.0f64..500.0, 1..20)) {
            let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = logsumexp(&xs).unwrap();
            prop_assert!((lse - max).exp() >= 1.0);
        }
    }
}
