//! Low-rank inverse updates: `(A + UVᵀ)⁻¹ = A⁻¹ - A⁻¹U (I_k + VᵀA⁻¹U)⁻¹ VᵀA⁻¹`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub const MAX_RANK: usize = 8;

/// Anything that can apply `A⁻¹` to a block of vectors.
pub trait InverseAction {
    fn dim(&self) -> usize;
    fn apply(&self, rhs: &DMatrix<f64>) -> DMatrix<f64>;

    fn apply_vec(&self, rhs: &DVector<f64>) -> DVector<f64> {
        let m = DMatrix::from_column_slice(rhs.len(), 1, rhs.as_slice());
        self.apply(&m).column(0).into_owned()
    }
}

/// A stored dense inverse.
#[derive(Debug, Clone)]
pub struct DenseInverse(pub DMatrix<f64>);

impl InverseAction for DenseInverse {
    fn dim(&self) -> usize {
        self.0.nrows()
    }

    fn apply(&self, rhs: &DMatrix<f64>) -> DMatrix<f64> {
        &self.0 * rhs
    }
}

/// Inverse action of `A + UVᵀ` built from that of `A`.
#[derive(Debug, Clone)]
pub struct WoodburyUpdate<A> {
    base: A,
    /// `A⁻¹U`, `p x k`
    a_inv_u: DMatrix<f64>,
    v: DMatrix<f64>,
    /// `(I_k + VᵀA⁻¹U)⁻¹`
    inner_inv: DMatrix<f64>,
}

pub fn woodbury_update<A: InverseAction>(base: A, u: &DMatrix<f64>, v: &DMatrix<f64>) -> Result<WoodburyUpdate<A>> {
    let p = base.dim();
    let k = u.ncols();
    if u.nrows() != p || v.nrows() != p || v.ncols() != k {
        return Err(Error::InvalidParameter(format!(
            "U and V must both be {p} x k, got {}x{} and {}x{}",
            u.nrows(),
            u.ncols(),
            v.nrows(),
            v.ncols()
        )));
    }
    if k > MAX_RANK {
        return Err(Error::InvalidParameter(format!("update rank {k} exceeds {MAX_RANK}")));
    }
    let a_inv_u = base.apply(u);
    let inner = DMatrix::identity(k, k) + v.transpose() * &a_inv_u;
    let scale = inner.amax().max(1.0);
    let lu = inner.lu();
    let det = lu.determinant();
    if !det.is_finite() || det.abs() <= 1e-12 * scale.powi(k as i32) {
        return Err(Error::InnerSingular(k));
    }
    let inner_inv = lu.try_inverse().ok_or(Error::InnerSingular(k))?;
    Ok(WoodburyUpdate { base, a_inv_u, v: v.clone(), inner_inv })
}

impl<A: InverseAction> InverseAction for WoodburyUpdate<A> {
    fn dim(&self) -> usize {
        self.base.dim()
    }

    fn apply(&self, rhs: &DMatrix<f64>) -> DMatrix<f64> {
        let y = self.base.apply(rhs);
        let correction = &self.a_inv_u * (&self.inner_inv * (self.v.transpose() * &y));
        y - correction
    }
}

impl<A: InverseAction> WoodburyUpdate<A> {
    /// Materialise the updated inverse.
    pub fn dense(&self) -> DMatrix<f64> {
        self.apply(&DMatrix::identity(self.dim(), self.dim()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{max_abs, spd_inverse};
    use crate::rng::{stream, Stream};
    use crate::simulator::gaussian_matrix;

    fn spd(p: usize, seed: u64) -> DMatrix<f64> {
        let g = gaussian_matrix(&mut stream(seed, Stream::Features), p, 2 * p);
        crate::linalg::scaled_outer_gram(&g, 0.5)
    }

    #[test]
    fn zero_update_is_identity() {
        let a = spd(6, 1);
        let inv = spd_inverse(a).unwrap();
        let upd = woodbury_update(DenseInverse(inv.clone()), &DMatrix::zeros(6, 2), &DMatrix::zeros(6, 2)).unwrap();
        assert_eq!(upd.dense(), inv);
    }

    #[test]
    fn rank_one_matches_sherman_morrison() {
        let a = spd(5, 2);
        let a_inv = spd_inverse(a).unwrap();
        let u = DVector::from_row_slice(&[0.3, -1.0, 0.5, 2.0, 0.1]);
        let v = DVector::from_row_slice(&[1.0, 0.2, -0.4, 0.0, 0.7]);
        let au = &a_inv * &u;
        let va = a_inv.transpose() * &v;
        let expected = &a_inv - (&au * va.transpose()) / (1.0 + v.dot(&au));
        let upd = woodbury_update(
            DenseInverse(a_inv),
            &DMatrix::from_column_slice(5, 1, u.as_slice()),
            &DMatrix::from_column_slice(5, 1, v.as_slice()),
        )
        .unwrap();
        assert!(max_abs(&(upd.dense() - expected)) < 1e-12);
    }

    #[test]
    fn rank_three_against_dense_inverse() {
        let p = 100;
        let a = spd(p, 3);
        let a_inv = spd_inverse(a.clone()).unwrap();
        let u = gaussian_matrix(&mut stream(3, Stream::Poison), p, 3) * 0.1;
        let v = gaussian_matrix(&mut stream(3, Stream::Labels), p, 3) * 0.1;
        let updated = &a + &u * v.transpose();
        let dense = updated.clone().lu().try_inverse().unwrap();
        let upd = woodbury_update(DenseInverse(a_inv), &u, &v).unwrap();
        assert!(max_abs(&(upd.dense() - &dense)) < 1e-10);
        let x = DVector::from_fn(p, |i, _| (i as f64).sin());
        assert!((upd.apply_vec(&x) - &dense * &x).amax() < 1e-10);
    }

    #[test]
    fn singular_inner_and_rank_cap() {
        // A = I, u = e₁, v = -e₁: I + vᵀu = 0
        let mut u = DMatrix::zeros(4, 1);
        u[(0, 0)] = 1.0;
        let v = -&u;
        let r = woodbury_update(DenseInverse(DMatrix::identity(4, 4)), &u, &v);
        assert!(matches!(r, Err(Error::InnerSingular(1))));
        let big = DMatrix::zeros(20, 9);
        assert!(woodbury_update(DenseInverse(DMatrix::identity(20, 20)), &big, &big).is_err());
    }
}
