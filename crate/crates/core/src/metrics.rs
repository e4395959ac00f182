//! Recovery-quality metrics (MSE, cosine similarity, SSIM), hidden-feature
//! separability statistics and mean ± std / worst-case aggregation.

use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::losses::PairSet;
use crate::tensor::Tensor;

fn same_shape(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return contract(format!("shape mismatch {:?} vs {:?}", a.shape(), b.shape()));
    }
    Ok(())
}

/// Mean squared difference over all coordinates.
pub fn mse(x: &Tensor, y: &Tensor) -> Result<f64> {
    same_shape(x, y)?;
    let sum: f64 = x.data().iter().zip(y.data()).map(|(a, b)| (a - b).powi(2)).sum();
    Ok(sum / x.len() as f64)
}

/// Cosine similarity of two flat vectors; 0 when either is the zero vector.
pub fn cosine(x: &[f64], y: &[f64]) -> f64 {
    let dot: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    let nx = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    let ny = y.iter().map(|v| v * v).sum::<f64>().sqrt();
    if nx == 0.0 || ny == 0.0 {
        return 0.0;
    }
    (dot / (nx * ny)).clamp(-1.0, 1.0)
}

/// Mean over samples (rows) of the per-sample cosine similarity.
pub fn mcs(x: &Tensor, y: &Tensor) -> Result<f64> {
    same_shape(x, y)?;
    let n = x.rows();
    Ok((0..n).map(|i| cosine(x.row(i), y.row(i))).sum::<f64>() / n as f64)
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn gaussian_window() -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - half).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let total: f64 = g.iter().sum();
    g.into_iter().map(|v| v / total).collect()
}

fn ssim_from_moments(mx: f64, my: f64, exx: f64, eyy: f64, exy: f64) -> f64 {
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let vx = exx - mx * mx;
    let vy = eyy - my * my;
    let cov = exy - mx * my;
    ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
}

/// SSIM of one `H × W` plane with dynamic range 1, averaged over every
/// position where the 11×11 Gaussian window fits. Planes smaller than the
/// window use one uniformly weighted window over the whole plane.
pub fn ssim_plane(x: &[f64], y: &[f64], h: usize, w: usize) -> f64 {
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        let n = (h * w) as f64;
        let mean = |f: &dyn Fn(usize) -> f64| (0..h * w).map(f).sum::<f64>() / n;
        return ssim_from_moments(
            mean(&|i| x[i]),
            mean(&|i| y[i]),
            mean(&|i| x[i] * x[i]),
            mean(&|i| y[i] * y[i]),
            mean(&|i| x[i] * y[i]),
        );
    }
    let g = gaussian_window();
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut total = 0.0;
    for r in 0..oh {
        for c in 0..ow {
            let (mut mx, mut my, mut exx, mut eyy, mut exy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for (i, gi) in g.iter().enumerate() {
                for (j, gj) in g.iter().enumerate() {
                    let k = (r + i) * w + c + j;
                    let wt = gi * gj;
                    mx += wt * x[k];
                    my += wt * y[k];
                    exx += wt * x[k] * x[k];
                    eyy += wt * y[k] * y[k];
                    exy += wt * x[k] * y[k];
                }
            }
            total += ssim_from_moments(mx, my, exx, eyy, exy);
        }
    }
    total / (oh * ow) as f64
}

/// Raw SSIM in `[-1, 1]` of two `C × H × W` images, averaged over channels.
pub fn ssim_raw(x: &Tensor, y: &Tensor) -> Result<f64> {
    same_shape(x, y)?;
    let [ch, h, w] = x.shape()[..] else {
        return contract(format!("SSIM expects C×H×W images, got {:?}", x.shape()));
    };
    let plane = h * w;
    let total: f64 = (0..ch)
        .map(|c| {
            let r = c * plane..(c + 1) * plane;
            ssim_plane(&x.data()[r.clone()], &y.data()[r], h, w)
        })
        .sum();
    Ok(total / ch as f64)
}

/// SSIM mapped to `[0, 1]` by `(s + 1) / 2`.
pub fn ssim(x: &Tensor, y: &Tensor) -> Result<f64> {
    Ok((ssim_raw(x, y)? + 1.0) / 2.0)
}

/// Hidden-feature separability of one set of samples.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Separability {
    /// Smallest distance between distinct samples.
    pub delta_h: f64,
    /// Largest distance over the supplied pair set; absent when it is empty.
    pub delta_big: Option<f64>,
    /// Mean distance over all distinct unordered pairs.
    pub mean_pair: f64,
}

fn flat_rows(h: &Tensor) -> Result<Tensor> {
    let n = h.rows();
    if n < 2 {
        return contract(format!("separability needs at least 2 samples, got {n}"));
    }
    h.clone().reshape(&[n, h.len() / n])
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Euclidean separability statistics of the rows of `h`.
pub fn separability(h: &Tensor, pairs: &PairSet) -> Result<Separability> {
    let h = flat_rows(h)?;
    let n = h.rows();
    let mut min = f64::INFINITY;
    let mut sum = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            let d = dist(h.row(i), h.row(j));
            min = min.min(d);
            sum += d;
        }
    }
    let mut delta_big = None::<f64>;
    for &(a, b) in pairs.iter() {
        if a >= n || b >= n {
            return contract(format!("pair ({a}, {b}) outside {n} samples"));
        }
        let d = dist(h.row(a), h.row(b));
        delta_big = Some(delta_big.map_or(d, |m| m.max(d)));
    }
    Ok(Separability {
        delta_h: min,
        delta_big,
        mean_pair: sum / (n * (n - 1) / 2) as f64,
    })
}

/// Mean distance over distinct unordered pairs, restricted to pairs with
/// different labels when `cross_class_only` is set. Returns 0 when no pair
/// qualifies.
pub fn mean_pair_distance(h: &Tensor, labels: &[usize], cross_class_only: bool) -> Result<f64> {
    let h = flat_rows(h)?;
    if labels.len() != h.rows() {
        return contract(format!("{} labels for {} samples", labels.len(), h.rows()));
    }
    let (mut sum, mut count) = (0.0, 0usize);
    for i in 0..h.rows() {
        for j in i + 1..h.rows() {
            if cross_class_only && labels[i] == labels[j] {
                continue;
            }
            sum += dist(h.row(i), h.row(j));
            count += 1;
        }
    }
    Ok(if count == 0 { 0.0 } else { sum / count as f64 })
}

/// Mean, population standard deviation and worst case (the maximum, i.e.
/// the best-recovered sample) of per-sample metric values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimilarityReport {
    pub mean: f64,
    pub std: f64,
    pub worst: f64,
    pub count: usize,
}

impl SimilarityReport {
    pub const CSV_HEADER: &'static str = "metric,mean,std,worst,count";

    pub fn csv_row(&self, metric: &str) -> String {
        format!("{metric},{},{},{},{}", self.mean, self.std, self.worst, self.count)
    }
}

pub fn aggregate(values: &[f64]) -> Result<SimilarityReport> {
    if values.is_empty() {
        return contract("cannot aggregate an empty set of values");
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Ok(SimilarityReport {
        mean,
        std: var.sqrt(),
        worst: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        count: values.len(),
    })
}

/// Per-sample metric values over (original, recovered) pairs.
pub fn per_sample(pairs: &[(Tensor, Tensor)], metric: Metric) -> Result<Vec<f64>> {
    pairs
        .iter()
        .map(|(x, y)| match metric {
            Metric::Mse => mse(x, y),
            Metric::Cosine => {
                same_shape(x, y)?;
                Ok(cosine(x.data(), y.data()))
            }
            Metric::Ssim => ssim(x, y),
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    Mse,
    Cosine,
    Ssim,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::Mse => "mse",
            Metric::Cosine => "mcs",
            Metric::Ssim => "ssim",
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use crate::testutil::random_tensor;
    use proptest::prelude::*;

    fn t(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn mse_values() {
        let a = t(&[vec![0.0, 0.0]]);
        assert_eq!(mse(&a, &a).unwrap(), 0.0);
        assert_eq!(mse(&a, &t(&[vec![2.0, 0.0]])).unwrap(), 2.0);
        assert!(mse(&a, &Tensor::zeros(&[1, 3])).is_err());
    }

    #[test]
    fn cosine_values() {
        assert!((cosine(&[1.0, 2.0], &[1.0, 2.0]) - 1.0).abs() < 1e-15);
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 3.0]), 0.0);
        assert_eq!(cosine(&[0.0, 0.0], &[1.0, 1.0]), 0.0);
        let x = t(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let y = t(&[vec![2.0, 0.0], vec![1.0, 0.0]]);
        assert!((mcs(&x, &y).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn ssim_identical_is_one() {
        let mut rng = Rng::new(3);
        for shape in [[1, 28, 28], [3, 12, 15], [1, 5, 5]] {
            let x = random_tensor(&shape, &mut rng).map(f64::abs).map(|v| v.min(1.0));
            assert_eq!(ssim(&x, &x).unwrap(), 1.0);
        }
    }

    /// Direct evaluation of the SSIM formula with global statistics.
    fn global_ssim(x: &[f64], y: &[f64]) -> f64 {
        let n = x.len() as f64;
        let mx = x.iter().sum::<f64>() / n;
        let my = y.iter().sum::<f64>() / n;
        let vx = x.iter().map(|v| (v - mx).powi(2)).sum::<f64>() / n;
        let vy = y.iter().map(|v| (v - my).powi(2)).sum::<f64>() / n;
        let cov = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum::<f64>() / n;
        let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
        ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
    }

    #[test]
    fn ssim_of_inverted_binary_image() {
        let data: Vec<f64> = (0..25).map(|i| f64::from((i * 7 % 3 == 0) as u8)).collect();
        let x = Tensor::new(vec![1, 5, 5], data.clone()).unwrap();
        let inv = x.map(|v| 1.0 - v);
        let raw = ssim_raw(&x, &inv).unwrap();
        assert!(raw < 0.0);
        assert!(ssim(&x, &inv).unwrap() < 0.5);
        let oracle = global_ssim(&data, inv.data());
        assert!((raw - oracle).abs() < 1e-12, "{raw} vs {oracle}");
    }

    #[test]
    fn ssim_windowed_matches_brute_force() {
        // Oracle: explicit 2-D Gaussian weights at each valid offset.
        let mut rng = Rng::new(9);
        let x = random_tensor(&[1, 13, 12], &mut rng).map(|v| v.abs().min(1.0));
        let y = random_tensor(&[1, 13, 12], &mut rng).map(|v| v.abs().min(1.0));
        let mut wts = [[0.0; 11]; 11];
        let mut total = 0.0;
        for (i, row) in wts.iter_mut().enumerate() {
            for (j, w) in row.iter_mut().enumerate() {
                let d2 = (i as f64 - 5.0).powi(2) + (j as f64 - 5.0).powi(2);
                *w = (-d2 / 4.5).exp();
                total += *w;
            }
        }
        let (c1, c2) = (1e-4, 9e-4);
        let mut acc = 0.0;
        for r in 0..3 {
            for c in 0..2 {
                let px = |i: usize, j: usize| x.data()[(r + i) * 12 + c + j];
                let py = |i: usize, j: usize| y.data()[(r + i) * 12 + c + j];
                let mut m = [0.0; 5];
                for i in 0..11 {
                    for j in 0..11 {
                        let w = wts[i][j] / total;
                        let (a, b) = (px(i, j), py(i, j));
                        m[0] += w * a;
                        m[1] += w * b;
                        m[2] += w * a * a;
                        m[3] += w * b * b;
                        m[4] += w * a * b;
                    }
                }
                let (vx, vy, cv) = (m[2] - m[0] * m[0], m[3] - m[1] * m[1], m[4] - m[0] * m[1]);
                acc += ((2.0 * m[0] * m[1] + c1) * (2.0 * cv + c2))
                    / ((m[0] * m[0] + m[1] * m[1] + c1) * (vx + vy + c2));
            }
        }
        let oracle = (acc / 6.0 + 1.0) / 2.0;
        assert!((ssim(&x, &y).unwrap() - oracle).abs() < 1e-12);
        assert!((ssim(&x, &y).unwrap() - ssim(&y, &x).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn separability_small_cases() {
        let h = t(&[vec![0.0, 0.0], vec![3.0, 4.0], vec![0.0, 1.0]]);
        let s = separability(&h, &PairSet(vec![(0, 1)])).unwrap();
        assert_eq!(s.delta_h, 1.0);
        assert_eq!(s.delta_big, Some(5.0));
        let mean = (5.0 + 1.0 + 18f64.sqrt()) / 3.0;
        assert!((s.mean_pair - mean).abs() < 1e-15);
        assert_eq!(separability(&h, &PairSet::default()).unwrap().delta_big, None);

        let dup = t(&[vec![1.0, 2.0], vec![1.0, 2.0], vec![0.0, 0.0]]);
        assert_eq!(separability(&dup, &PairSet::default()).unwrap().delta_h, 0.0);
        assert!(separability(&t(&[vec![1.0]]), &PairSet::default()).is_err());
    }

    #[test]
    fn separability_matches_brute_force() {
        let mut rng = Rng::new(21);
        let h = random_tensor(&[20, 3], &mut rng);
        let pairs = PairSet(vec![(0, 5), (7, 19), (3, 4)]);
        let s = separability(&h, &pairs).unwrap();
        let d = |i: usize, j: usize| -> f64 {
            (0..3).map(|k| (h.row(i)[k] - h.row(j)[k]).powi(2)).sum::<f64>().sqrt()
        };
        let mut all = Vec::new();
        for i in 0..20 {
            for j in 0..20 {
                if i < j {
                    all.push(d(i, j));
                }
            }
        }
        assert_eq!(s.delta_h, all.iter().copied().fold(f64::INFINITY, f64::min));
        assert_eq!(s.delta_big, Some(d(0, 5).max(d(7, 19)).max(d(3, 4))));
        assert!((s.mean_pair - all.iter().sum::<f64>() / all.len() as f64).abs() < 1e-12);
    }

    #[test]
    fn cross_class_mean() {
        let h = t(&[vec![0.0], vec![1.0], vec![3.0]]);
        assert_eq!(mean_pair_distance(&h, &[0, 0, 1], true).unwrap(), 2.5);
        assert_eq!(mean_pair_distance(&h, &[0, 0, 1], false).unwrap(), 2.0);
        assert_eq!(mean_pair_distance(&h, &[0, 0, 0], true).unwrap(), 0.0);
    }

    #[test]
    fn aggregate_values() {
        let one = aggregate(&[0.3]).unwrap();
        assert_eq!((one.std, one.worst, one.mean), (0.0, 0.3, 0.3));
        let two = aggregate(&[0.0, 1.0]).unwrap();
        assert_eq!((two.mean, two.worst, two.std), (0.5, 1.0, 0.5));
        assert!(aggregate(&[]).is_err());
        assert_eq!(two.csv_row("ssim"), "ssim,0.5,0.5,1,2");
    }

    proptest! {
        #[test]
        fn aggregate_matches_two_pass(values in proptest::collection::vec(-10.0f64..10.0, 1..50)) {
            let r = aggregate(&values).unwrap();
            let n = values.len() as f64;
            let mut mean = 0.0;
            for v in &values { mean += v; }
            mean /= n;
            let mut ss = 0.0;
            for v in &values { ss += (v - mean) * (v - mean); }
            prop_assert!((r.mean - mean).abs() < 1e-12);
            prop_assert!((r.std - (ss / n).sqrt()).abs() < 1e-12);
            prop_assert!(r.worst >= r.mean - 5.0 * r.std);
        }

        #[test]
        fn delta_h_permutation_and_scaling(seed in 0u64..200, scale in 0.1f64..10.0) {
            let mut rng = Rng::new(seed);
            let h = random_tensor(&[8, 3], &mut rng);
            let base = separability(&h, &PairSet::default()).unwrap().delta_h;
            let mut order: Vec<usize> = (0..8).collect();
            rng.shuffle(&mut order);
            let permuted = separability(&h.select_rows(&order), &PairSet::default()).unwrap().delta_h;
            prop_assert_eq!(base, permuted);
            let scaled = separability(&h.map(|v| v * scale), &PairSet::default()).unwrap().delta_h;
            prop_assert!((scaled - scale * base).abs() <= 1e-12 * scale.max(1.0) * base.max(1.0));
        }

        #[test]
        fn mse_zero_iff_equal(a in proptest::collection::vec(-5.0f64..5.0, 6), b in proptest::collection::vec(-5.0f64..5.0, 6)) {
            let x = Tensor::vector(a.clone());
            let y = Tensor::vector(b.clone());
            let m = mse(&x, &y).unwrap();
            prop_assert!(m >= 0.0);
            prop_assert_eq!(m == 0.0, a == b);
        }
    }
}
