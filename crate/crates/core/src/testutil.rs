//! Finite-difference oracles shared by the unit tests.

use crate::rng::Rng;
use crate::tensor::Tensor;

pub const FD_STEP: f64 = 1e-5;

/// Central differences of `f` at `x`.
pub fn fd_gradient(x: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + FD_STEP;
            let up = f(&probe);
            probe[i] = orig - FD_STEP;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * FD_STEP)
        })
        .collect()
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, or the absolute difference when both vanish.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = f64::max(
        a.iter().map(|v| v * v).sum::<f64>().sqrt(),
        b.iter().map(|v| v * v).sum::<f64>().sqrt(),
    );
    if scale < 1e-10 {
        diff
    } else {
        diff / scale
    }
}

pub fn random_tensor(shape: &[usize], rng: &mut Rng) -> Tensor {
    let mut t = Tensor::zeros(shape);
    t.data_mut().iter_mut().for_each(|v| *v = rng.normal());
    t
}
