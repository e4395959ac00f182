use crate::error::{contract, Result};
use crate::rng::Rng;
use crate::tensor::{norm, Tensor};

/// A matrix seen only through products with vectors.
pub trait LinearOperator {
    fn nrows(&self) -> usize;
    fn ncols(&self) -> usize;
    /// `A v`
    fn apply(&self, v: &[f64]) -> Vec<f64>;
    /// `Aᵀ u`
    fn apply_transpose(&self, u: &[f64]) -> Vec<f64>;
}

impl LinearOperator for Tensor {
    fn nrows(&self) -> usize {
        self.shape()[0]
    }

    fn ncols(&self) -> usize {
        self.shape()[1]
    }

    fn apply(&self, v: &[f64]) -> Vec<f64> {
        self.matvec(v)
    }

    fn apply_transpose(&self, u: &[f64]) -> Vec<f64> {
        self.rmatvec(u)
    }
}

/// Largest singular value of a matrix by power iteration on `WᵀW`.
///
/// The estimate `‖W v_k‖` is a Rayleigh quotient of the iterates, so it
/// never decreases as `iters` grows. A zero matrix yields 0.
pub fn spectral_norm(w: &Tensor, iters: usize, seed: u64) -> Result<f64> {
    if w.rank() != 2 {
        return contract(format!("spectral norm needs a matrix, got {:?}", w.shape()));
    }
    spectral_norm_op(w, iters, seed)
}

pub fn spectral_norm_op<A: LinearOperator + ?Sized>(a: &A, iters: usize, seed: u64) -> Result<f64> {
    if iters == 0 {
        return contract("spectral norm needs at least one iteration");
    }
    let mut rng = Rng::new(seed);
    let mut v: Vec<f64> = (0..a.ncols()).map(|_| rng.normal()).collect();
    let n0 = norm(&v);
    v.iter_mut().for_each(|x| *x /= n0);
    let mut sigma = 0.0;
    for _ in 0..iters {
        let av = a.apply(&v);
        sigma = f64::max(sigma, norm(&av));
        let mut u = a.apply_transpose(&av);
        let nu = norm(&u);
        if nu == 0.0 {
            break;
        }
        u.iter_mut().for_each(|x| *x /= nu);
        v = u;
    }
    Ok(f64::max(sigma, norm(&a.apply(&v))))
}
