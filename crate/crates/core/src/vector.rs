//! Flat parameter vectors and the handful of arithmetic kernels the
//! simulator needs. All reductions run in the order the caller supplies;
//! call sites pass vectors in ascending client-id order.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Model parameters, gradients and local updates all live in this type.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamVector(Vec<f64>);

impl ParamVector {
    /// Builds a vector, rejecting NaN and infinities.
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("ParamVector::new"));
        }
        Ok(Self(values))
    }

    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|&v| v == 0.0)
    }

    pub fn dot(&self, other: &ParamVector) -> Result<f64> {
        check_dim(self.dim(), other.dim())?;
        Ok(self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum())
    }

    /// `self - other`.
    pub fn sub(&self, other: &ParamVector) -> Result<ParamVector> {
        axpy(-1.0, other, self)
    }

    pub fn scale(&self, alpha: f64) -> Result<ParamVector> {
        ParamVector::new(self.0.iter().map(|v| alpha * v).collect())
    }

    /// Raw little-endian bytes, used for audit hashing.
    pub fn to_bits(&self) -> Vec<u64> {
        self.0.iter().map(|v| v.to_bits()).collect()
    }
}

impl std::ops::Index<usize> for ParamVector {
    type Output = f64;

    fn index(&self, index: usize) -> &f64 {
        &self.0[index]
    }
}

fn check_dim(expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(Error::DimensionMismatch { expected, actual });
    }
    Ok(())
}

/// `alpha * x + y`, elementwise.
pub fn axpy(alpha: f64, x: &ParamVector, y: &ParamVector) -> Result<ParamVector> {
    check_dim(x.dim(), y.dim())?;
    let out: Vec<f64> = x.0.iter().zip(&y.0).map(|(a, b)| alpha * a + b).collect();
    ParamVector::new(out).map_err(|_| Error::NonFinite("axpy"))
}

/// Elementwise arithmetic mean; sums in list order, then divides once.
pub fn mean<'a, I>(vectors: I) -> Result<ParamVector>
where
    I: IntoIterator<Item = &'a ParamVector>,
{
    let mut iter = vectors.into_iter();
    let first = iter.next().ok_or(Error::EmptyMean)?;
    let mut acc = first.0.clone();
    let mut count = 1usize;
    for v in iter {
        check_dim(acc.len(), v.dim())?;
        for (a, b) in acc.iter_mut().zip(&v.0) {
            *a += b;
        }
        count += 1;
    }
    let n = count as f64;
    for a in acc.iter_mut() {
        *a /= n;
    }
    ParamVector::new(acc).map_err(|_| Error::NonFinite("mean"))
}

pub fn sq_norm(x: &ParamVector) -> Result<f64> {
    let s: f64 = x.0.iter().map(|v| v * v).sum();
    if !s.is_finite() {
        return Err(Error::NonFinite("sq_norm"));
    }
    Ok(s)
}

pub fn norm(x: &ParamVector) -> Result<f64> {
    sq_norm(x).map(f64::sqrt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pv(v: &[f64]) -> ParamVector {
        ParamVector::new(v.to_vec()).unwrap()
    }

    #[test]
    fn axpy_examples() {
        assert_eq!(axpy(2.0, &pv(&[1.0, 2.0]), &pv(&[3.0, 4.0])).unwrap(), pv(&[5.0, 8.0]));
        assert_eq!(axpy(0.0, &pv(&[9.0, 9.0]), &pv(&[3.0, 4.0])).unwrap(), pv(&[3.0, 4.0]));
        assert_eq!(axpy(1.0, &pv(&[0.0, 0.0]), &pv(&[0.0, 0.0])).unwrap(), pv(&[0.0, 0.0]));
    }

    #[test]
    fn axpy_errors() {
        assert!(matches!(
            axpy(1.0, &pv(&[1.0]), &pv(&[1.0, 2.0])),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(matches!(
            axpy(f64::MAX, &pv(&[f64::MAX]), &pv(&[0.0])),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn mean_examples() {
        assert_eq!(mean([&pv(&[1.0, 1.0])]).unwrap(), pv(&[1.0, 1.0]));
        assert_eq!(mean([&pv(&[0.0, 2.0]), &pv(&[2.0, 0.0])]).unwrap(), pv(&[1.0, 1.0]));
        assert_eq!(
            mean([&pv(&[1.0, 0.0]), &pv(&[0.0, 1.0]), &pv(&[-1.0, -1.0])]).unwrap(),
            pv(&[0.0, 0.0])
        );
        assert!(matches!(mean(std::iter::empty()), Err(Error::EmptyMean)));
    }

    #[test]
    fn sq_norm_examples() {
        assert_eq!(sq_norm(&pv(&[3.0, 4.0])).unwrap(), 25.0);
        assert_eq!(sq_norm(&pv(&[0.0, 0.0])).unwrap(), 0.0);
        assert_eq!(sq_norm(&pv(&[-1.0, -1.0, -1.0])).unwrap(), 3.0);
    }

    #[test]
    fn rejects_nan() {
        assert!(ParamVector::new(vec![1.0, f64::NAN]).is_err());
        assert!(ParamVector::new(vec![f64::INFINITY]).is_err());
    }

    proptest! {
        #[test]
        fn self_difference_is_exactly_zero(v in prop::collection::vec(-1e6f64..1e6, 1..32)) {
            let x = pv(&v);
            prop_assert_eq!(sq_norm(&axpy(-1.0, &x, &x).unwrap()).unwrap(), 0.0);
        }

        #[test]
        fn mean_is_permutation_invariant(
            rows in prop::collection::vec(prop::collection::vec(-100f64..100.0, 4), 1..10),
            seed in any::<u64>(),
        ) {
            let vs: Vec<ParamVector> = rows.iter().map(|r| pv(r)).collect();
            let mut perm: Vec<usize> = (0..vs.len()).collect();
            // cheap deterministic shuffle
            let mut s = seed | 1;
            for i in (1..perm.len()).rev() {
                s ^= s << 13; s ^= s >> 7; s ^= s << 17;
                perm.swap(i, (s % (i as u64 + 1)) as usize);
            }
            let a = mean(vs.iter()).unwrap();
            let b = mean(perm.iter().map(|&i| &vs[i])).unwrap();
            for i in 0..a.dim() {
                let scale = a[i].abs().max(b[i].abs()).max(1.0);
                prop_assert!((a[i] - b[i]).abs() <= 1e-12 * scale);
            }
            // fixed order is bit-exact
            prop_assert_eq!(a, mean(vs.iter()).unwrap());
        }
    }
}
