//! Classification and consistency losses. Every loss returns its value
//! together with the gradient with respect to its direct input.

use serde::{Deserialize, Serialize};

use crate::error::{config, contract, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub grad: Tensor,
}

/// Weight `lambda`, separability balance `beta` and distance clamp `eps`
/// (squared distances are clamped to `[eps, 1/eps]`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MixConParams {
    pub lambda: f64,
    pub beta: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
}

pub const DEFAULT_EPS: f64 = 1e-6;

fn default_eps() -> f64 {
    DEFAULT_EPS
}

impl MixConParams {
    pub fn new(lambda: f64, beta: f64) -> Self {
        Self {
            lambda,
            beta,
            eps: DEFAULT_EPS,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return config(format!("lambda must be finite and >= 0, got {}", self.lambda));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return config(format!("beta must be finite and >= 0, got {}", self.beta));
        }
        if !(self.eps > 0.0 && self.eps < 1.0) {
            return config(format!("eps must lie in (0, 1), got {}", self.eps));
        }
        Ok(())
    }
}

/// Sample-index pairs within a batch.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PairSet(pub Vec<(usize, usize)>);

impl PairSet {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &(usize, usize)> {
        self.0.iter()
    }
}

/// Convex penalty on a squared distance that blows up at both ends of
/// `(0, ∞)`.
pub trait SeparabilityPenalty {
    fn value(&self, dist: f64) -> f64;
    fn derivative(&self, dist: f64) -> f64;
}

/// `dist + beta / dist`, minimized at `dist = sqrt(beta)`.
#[derive(Debug, Clone, Copy)]
pub struct InverseBalance {
    pub beta: f64,
}

impl SeparabilityPenalty for InverseBalance {
    fn value(&self, dist: f64) -> f64 {
        dist + self.beta / dist
    }

    fn derivative(&self, dist: f64) -> f64 {
        1.0 - self.beta / (dist * dist)
    }
}

pub fn one_hot(labels: &[usize], classes: usize) -> Result<Tensor> {
    if labels.is_empty() || classes == 0 {
        return contract("one-hot encoding needs labels and classes");
    }
    let mut t = Tensor::zeros(&[labels.len(), classes]);
    for (i, &l) in labels.iter().enumerate() {
        if l >= classes {
            return contract(format!("label {l} out of range for {classes} classes"));
        }
        t.row_mut(i)[l] = 1.0;
    }
    Ok(t)
}

/// Softmax cross-entropy summed over the batch. Gradient is `softmax − y`
/// per row.
pub fn cross_entropy(scores: &Tensor, labels: &Tensor) -> Result<LossValue> {
    if scores.shape() != labels.shape() || scores.rank() != 2 {
        return contract(format!(
            "scores {:?} and labels {:?} must be equal N×C matrices",
            scores.shape(),
            labels.shape()
        ));
    }
    let c = scores.shape()[1];
    let mut grad = Tensor::zeros(scores.shape());
    let mut value = 0.0;
    for i in 0..scores.rows() {
        let y = labels.row(i);
        let hot = y.iter().filter(|&&v| v == 1.0).count();
        if hot != 1 || y.iter().any(|&v| v != 0.0 && v != 1.0) {
            return contract(format!("label row {i} is not one-hot"));
        }
        let s = scores.row(i);
        let max = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = s.iter().map(|v| (v - max).exp()).sum();
        let lse = max + sum.ln();
        let g = grad.row_mut(i);
        for k in 0..c {
            let p = (s[k] - lse).exp();
            g[k] = p - y[k];
            if y[k] == 1.0 {
                value -= s[k] - lse;
            }
        }
    }
    Ok(LossValue { value, grad })
}

/// Scales every row to unit ℓ2 norm; zero rows stay zero.
pub fn normalize_features(h: &Tensor) -> Tensor {
    let mut out = h.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 0.0 {
            row.iter_mut().for_each(|v| *v /= n);
        }
    }
    out
}

/// Pulls a gradient taken at `normalize_features(h)` back to `h`:
/// `(g − n⟨n, g⟩) / ‖h‖` per row, zero for zero rows.
pub fn normalize_features_backward(h: &Tensor, grad: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(h.shape());
    for i in 0..h.rows() {
        let row = h.row(i);
        let g = grad.row(i);
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n == 0.0 {
            continue;
        }
        let inner: f64 = row.iter().zip(g).map(|(a, b)| a * b).sum::<f64>() / n;
        for ((o, &hv), &gv) in out.row_mut(i).iter_mut().zip(row).zip(g) {
            *o = (gv - hv / n * inner) / n;
        }
    }
    out
}

/// Members of each class present in `labels`, classes ordered by first
/// appearance and members by position.
fn group_by_class(labels: &[usize]) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = Vec::new();
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for (i, &l) in labels.iter().enumerate() {
        match order.iter().position(|&c| c == l) {
            Some(g) => groups[g].push(i),
            None => {
                order.push(l);
                groups.push(vec![i]);
            }
        }
    }
    groups
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

fn check_features(h: &Tensor, labels: &[usize]) -> Result<()> {
    if h.rank() != 2 || h.rows() != labels.len() {
        return contract(format!(
            "features {:?} do not match {} labels",
            h.shape(),
            labels.len()
        ));
    }
    Ok(())
}

/// The mixed-class pairing used by [`mixcon_loss_with`], each unordered pair
/// listed once.
pub fn mixcon_pairs(labels: &[usize]) -> PairSet {
    let groups = group_by_class(labels);
    let Some(p) = groups.iter().map(Vec::len).min() else {
        return PairSet::default();
    };
    let mut pairs = Vec::new();
    for rank in 0..p {
        for c1 in 0..groups.len() {
            for c2 in c1 + 1..groups.len() {
                pairs.push((groups[c1][rank], groups[c2][rank]));
            }
        }
    }
    PairSet(pairs)
}

/// Mixed-class consistency loss with the `dist + beta/dist` penalty.
pub fn mixcon_loss(h: &Tensor, labels: &[usize], params: &MixConParams) -> Result<(LossValue, PairSet)> {
    params.validate()?;
    mixcon_loss_with(h, labels, params.eps, &InverseBalance { beta: params.beta })
}

/// Mixed-class consistency loss with an arbitrary penalty.
///
/// Samples are grouped by class in order of appearance and the `i`-th
/// member of each class is paired with the `i`-th member of every other
/// class, for ranks below the smallest class size `p`. Squared distances
/// are clamped to `[eps, 1/eps]` with zero gradient outside that range.
/// The value averages the penalty over ranks and ordered class pairs.
///
/// The returned pair set lists each unordered pair once.
pub fn mixcon_loss_with(
    h: &Tensor,
    labels: &[usize],
    eps: f64,
    penalty: &dyn SeparabilityPenalty,
) -> Result<(LossValue, PairSet)> {
    check_features(h, labels)?;
    let groups = group_by_class(labels);
    let mut grad = Tensor::zeros(h.shape());
    if groups.len() < 2 {
        return Ok((LossValue { value: 0.0, grad }, PairSet::default()));
    }
    let classes = groups.len();
    let p = groups.iter().map(Vec::len).min().unwrap();
    // Ordered pairs (c1, c2) and (c2, c1) contribute identical terms.
    let scale = 2.0 / (p * classes * (classes - 1)) as f64;
    let (lo, hi) = (eps, 1.0 / eps);
    let width = h.row_len();
    let mut value = 0.0;
    let mut pairs = Vec::with_capacity(p * classes * (classes - 1) / 2);
    let mut diff = vec![0.0; width];
    for rank in 0..p {
        for c1 in 0..classes {
            for c2 in c1 + 1..classes {
                let (a, b) = (groups[c1][rank], groups[c2][rank]);
                pairs.push((a, b));
                for ((d, x), y) in diff.iter_mut().zip(h.row(a)).zip(h.row(b)) {
                    *d = x - y;
                }
                let dist: f64 = diff.iter().map(|v| v * v).sum();
                let clamped = dist.clamp(lo, hi);
                value += scale * penalty.value(clamped);
                if dist < lo || dist > hi {
                    continue;
                }
                let coef = scale * penalty.derivative(clamped) * 2.0;
                for (g, d) in grad.row_mut(a).iter_mut().zip(&diff) {
                    *g += coef * d;
                }
                for (g, d) in grad.row_mut(b).iter_mut().zip(&diff) {
                    *g -= coef * d;
                }
            }
        }
    }
    Ok((LossValue { value, grad }, PairSet(pairs)))
}

/// Within-class consistency loss: mean over present classes of the mean
/// squared distance over ordered pairs of distinct members. Classes with a
/// single member contribute zero.
pub fn unicon_loss(h: &Tensor, labels: &[usize]) -> Result<LossValue> {
    check_features(h, labels)?;
    let groups = group_by_class(labels);
    let mut grad = Tensor::zeros(h.shape());
    let mut value = 0.0;
    let classes = groups.len() as f64;
    for members in &groups {
        let k = members.len();
        if k < 2 {
            continue;
        }
        // Each unordered pair stands for two ordered pairs.
        let scale = 2.0 / (classes * (k * (k - 1)) as f64);
        for (ii, &i) in members.iter().enumerate() {
            for &j in &members[ii + 1..] {
                value += scale * sq_dist(h.row(i), h.row(j));
                let diff: Vec<f64> = h.row(i).iter().zip(h.row(j)).map(|(a, b)| a - b).collect();
                for (g, d) in grad.row_mut(i).iter_mut().zip(&diff) {
                    *g += 2.0 * scale * d;
                }
                for (g, d) in grad.row_mut(j).iter_mut().zip(&diff) {
                    *g -= 2.0 * scale * d;
                }
            }
        }
    }
    Ok(LossValue { value, grad })
}

/// `L = L_class + lambda · L_con`, with gradients kept at their separate
/// injection points.
#[derive(Debug, Clone, PartialEq)]
pub struct Objective {
    pub value: f64,
    pub class_value: f64,
    pub consistency_value: f64,
    /// Gradient with respect to the network output scores.
    pub score_grad: Tensor,
    /// Gradient with respect to the cut-layer features.
    pub hidden_grad: Tensor,
}

pub fn combined_objective(class_loss: LossValue, con_loss: LossValue, lambda: f64) -> Objective {
    let mut hidden_grad = con_loss.grad;
    hidden_grad.data_mut().iter_mut().for_each(|g| *g *= lambda);
    Objective {
        value: class_loss.value + lambda * con_loss.value,
        class_value: class_loss.value,
        consistency_value: con_loss.value,
        score_grad: class_loss.grad,
        hidden_grad,
    }
}

/// Which consistency term joins the classification loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Consistency {
    /// Classification loss only.
    #[default]
    None,
    MixCon(MixConParams),
    UniCon { lambda: f64 },
}

/// A consistency term evaluated on raw cut-layer features.
#[derive(Debug, Clone)]
pub struct ConsistencyTerm {
    /// Unweighted loss value.
    pub value: f64,
    /// Unweighted gradient with respect to the raw features.
    pub grad: Tensor,
    pub pairs: PairSet,
}

impl Consistency {
    pub fn lambda(&self) -> f64 {
        match self {
            Consistency::None => 0.0,
            Consistency::MixCon(p) => p.lambda,
            Consistency::UniCon { lambda } => *lambda,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Consistency::None => Ok(()),
            Consistency::MixCon(p) => p.validate(),
            Consistency::UniCon { lambda } if *lambda >= 0.0 && lambda.is_finite() => Ok(()),
            Consistency::UniCon { lambda } => config(format!("lambda must be >= 0, got {lambda}")),
        }
    }

    /// Flattens each sample's features, optionally normalizes rows, applies
    /// the loss and pulls the gradient back to the raw feature shape.
    /// Returns `None` for [`Consistency::None`].
    pub fn evaluate(&self, hidden: &Tensor, labels: &[usize], normalize: bool) -> Result<Option<ConsistencyTerm>> {
        if matches!(self, Consistency::None) {
            return Ok(None);
        }
        let n = hidden.rows();
        let flat = hidden.clone().reshape(&[n, hidden.len() / n])?;
        let feats = if normalize { normalize_features(&flat) } else { flat.clone() };
        let (loss, pairs) = match self {
            Consistency::MixCon(p) => mixcon_loss(&feats, labels, p)?,
            Consistency::UniCon { .. } => (unicon_loss(&feats, labels)?, PairSet::default()),
            Consistency::None => unreachable!(),
        };
        let grad = if normalize {
            normalize_features_backward(&flat, &loss.grad)
        } else {
            loss.grad
        };
        Ok(Some(ConsistencyTerm {
            value: loss.value,
            grad: grad.reshape(hidden.shape())?,
            pairs,
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use crate::testutil::{fd_gradient, random_tensor, rel_err};
    use proptest::prelude::*;

    fn rows(r: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(r).unwrap()
    }

    /// Literal evaluation of the mixed-class formula over every ordered
    /// class pair, independent of the implementation's grouping code.
    fn mixcon_brute(h: &Tensor, labels: &[usize], beta: f64, eps: f64) -> f64 {
        let mut classes: Vec<usize> = Vec::new();
        for &l in labels {
            if !classes.contains(&l) {
                classes.push(l);
            }
        }
        if classes.len() < 2 {
            return 0.0;
        }
        let members = |c: usize| -> Vec<usize> { (0..labels.len()).filter(|&i| labels[i] == c).collect() };
        let p = classes.iter().map(|&c| members(c).len()).min().unwrap();
        let mut total = 0.0;
        for i in 0..p {
            for &c1 in &classes {
                for &c2 in &classes {
                    if c1 == c2 {
                        continue;
                    }
                    let d = sq_dist(h.row(members(c1)[i]), h.row(members(c2)[i])).clamp(eps, 1.0 / eps);
                    total += d + beta / d;
                }
            }
        }
        let c = classes.len() as f64;
        total / (p as f64 * c * (c - 1.0))
    }

    #[test]
    fn cross_entropy_values() {
        let y = one_hot(&[0], 2).unwrap();
        let l = cross_entropy(&rows(&[vec![0.0, 0.0]]), &y).unwrap();
        assert!((l.value - std::f64::consts::LN_2).abs() < 1e-12);
        let l = cross_entropy(&rows(&[vec![800.0, 0.0]]), &y).unwrap();
        assert!(l.value.abs() < 1e-12);
        assert!(l.grad.data().iter().all(|g| g.abs() < 1e-12));
    }

    #[test]
    fn cross_entropy_rejects_soft_labels() {
        let soft = rows(&[vec![0.5, 0.5]]);
        assert!(cross_entropy(&rows(&[vec![0.0, 0.0]]), &soft).is_err());
        assert!(one_hot(&[3], 2).is_err());
    }

    #[test]
    fn cross_entropy_gradient_matches_fd() {
        for seed in 0..20 {
            let mut rng = Rng::new(seed);
            let s = random_tensor(&[4, 3], &mut rng);
            let labels: Vec<usize> = (0..4).map(|_| rng.below(3) as usize).collect();
            let y = one_hot(&labels, 3).unwrap();
            let l = cross_entropy(&s, &y).unwrap();
            let fd = fd_gradient(s.data(), |v| {
                cross_entropy(&Tensor::new(vec![4, 3], v.to_vec()).unwrap(), &y).unwrap().value
            });
            assert!(rel_err(l.grad.data(), &fd) < 1e-4);
        }
    }

    #[test]
    fn normalize_rows() {
        let n = normalize_features(&rows(&[vec![3.0, 4.0], vec![0.0, 0.0], vec![0.6, 0.8]]));
        assert_eq!(n.row(0), &[0.6, 0.8]);
        assert_eq!(n.row(1), &[0.0, 0.0]);
        assert!((n.row(2)[0] - 0.6).abs() < 1e-15 && (n.row(2)[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn normalize_backward_matches_fd() {
        for seed in 0..20 {
            let mut rng = Rng::new(seed);
            let h = random_tensor(&[3, 4], &mut rng);
            let g = random_tensor(&[3, 4], &mut rng);
            let got = normalize_features_backward(&h, &g);
            let fd = fd_gradient(h.data(), |v| {
                normalize_features(&Tensor::new(vec![3, 4], v.to_vec()).unwrap()).dot(&g)
            });
            assert!(rel_err(got.data(), &fd) < 1e-4);
        }
    }

    #[test]
    fn mixcon_orthogonal_pair() {
        let h = rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let params = MixConParams { lambda: 1.0, beta: 0.01, eps: 1e-6 };
        let (l, pairs) = mixcon_loss(&h, &[0, 1], &params).unwrap();
        assert!((l.value - 2.005).abs() < 1e-12);
        assert!((mixcon_brute(&h, &[0, 1], 0.01, 1e-6) - 2.005).abs() < 1e-12);
        assert_eq!(pairs.0, vec![(0, 1)]);
    }

    #[test]
    fn mixcon_pairs_agree_with_loss() {
        let mut rng = Rng::new(12);
        for _ in 0..20 {
            let n = 2 + rng.below(12) as usize;
            let labels: Vec<usize> = (0..n).map(|_| rng.below(4) as usize).collect();
            let h = random_tensor(&[n, 3], &mut rng);
            let params = MixConParams { lambda: 1.0, beta: 0.01, eps: 1e-6 };
            let (_, pairs) = mixcon_loss(&h, &labels, &params).unwrap();
            assert_eq!(mixcon_pairs(&labels), pairs);
        }
    }

    #[test]
    fn mixcon_clamp_floor() {
        let h = rows(&[vec![0.6, 0.8], vec![0.6, 0.8]]);
        let params = MixConParams { lambda: 1.0, beta: 0.0, eps: 1e-6 };
        let (l, _) = mixcon_loss(&h, &[0, 1], &params).unwrap();
        assert!((l.value - 1e-6).abs() < 1e-18);
        assert!(l.grad.data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn mixcon_single_class_is_zero() {
        let h = rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let (l, pairs) = mixcon_loss(&h, &[4, 4], &MixConParams::new(1.0, 0.1)).unwrap();
        assert_eq!(l.value, 0.0);
        assert!(pairs.is_empty());
    }

    #[test]
    fn mixcon_matches_brute_force_and_fd() {
        for seed in 0..20 {
            let mut rng = Rng::new(seed);
            let n = 9;
            let labels: Vec<usize> = (0..n).map(|_| rng.below(3) as usize).collect();
            let h = normalize_features(&random_tensor(&[n, 4], &mut rng));
            let params = MixConParams { lambda: 1.0, beta: 0.05, eps: 1e-6 };
            let (l, _) = mixcon_loss(&h, &labels, &params).unwrap();
            assert!((l.value - mixcon_brute(&h, &labels, 0.05, 1e-6)).abs() < 1e-12);
            let fd = fd_gradient(h.data(), |v| {
                mixcon_loss(&Tensor::new(vec![n, 4], v.to_vec()).unwrap(), &labels, &params).unwrap().0.value
            });
            assert!(rel_err(l.grad.data(), &fd) < 1e-4, "seed {seed}");
        }
    }

    #[test]
    fn mixcon_attains_lower_bound_at_sqrt_beta() {
        // Two classes, every same-rank pair at squared distance sqrt(beta).
        let beta: f64 = 0.04;
        let d = beta.sqrt().sqrt();
        let h = rows(&[vec![0.0, 0.0], vec![d, 0.0], vec![0.0, 5.0], vec![d, 5.0]]);
        let (l, _) = mixcon_loss(&h, &[0, 1, 0, 1], &MixConParams::new(1.0, beta)).unwrap();
        assert!((l.value - 2.0 * beta.sqrt()).abs() < 1e-9);
    }

    #[test]
    fn unicon_values() {
        let same = rows(&[vec![0.3, 0.4], vec![0.3, 0.4]]);
        assert_eq!(unicon_loss(&same, &[0, 0]).unwrap().value, 0.0);
        let ortho = rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        assert!((unicon_loss(&ortho, &[0, 0]).unwrap().value - 2.0).abs() < 1e-12);
        let lone = rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        assert_eq!(unicon_loss(&lone, &[0, 1]).unwrap().value, 0.0);
    }

    #[test]
    fn unicon_gradient_matches_fd() {
        for seed in 0..20 {
            let mut rng = Rng::new(50 + seed);
            let labels = [0, 1, 1, 0, 0, 1];
            let h = random_tensor(&[6, 3], &mut rng);
            let l = unicon_loss(&h, &labels).unwrap();
            let fd = fd_gradient(h.data(), |v| {
                unicon_loss(&Tensor::new(vec![6, 3], v.to_vec()).unwrap(), &labels).unwrap().value
            });
            assert!(rel_err(l.grad.data(), &fd) < 1e-4);
        }
    }

    #[test]
    fn combined_objective_linearity() {
        let lv = |v: f64| LossValue { value: v, grad: Tensor::full(&[1, 2], 1.0) };
        let o = combined_objective(lv(0.5), lv(2.0), 0.0);
        assert_eq!(o.value, 0.5);
        assert!(o.hidden_grad.data().iter().all(|&g| g == 0.0));
        assert_eq!(combined_objective(lv(1.0), lv(1.0), 1.0).value, 2.0);
        assert!((combined_objective(lv(0.5), lv(2.005), 0.1).value - 0.7005).abs() < 1e-12);
    }

    #[test]
    fn consistency_gradient_through_normalization_matches_fd() {
        let kinds = [
            Consistency::MixCon(MixConParams { lambda: 1.0, beta: 0.01, eps: 1e-6 }),
            Consistency::UniCon { lambda: 1.0 },
        ];
        for kind in kinds {
            for seed in 0..20 {
                let mut rng = Rng::new(200 + seed);
                let labels = [0, 2, 1, 0, 2, 1, 1];
                let h = random_tensor(&[7, 2, 2], &mut rng);
                let term = kind.evaluate(&h, &labels, true).unwrap().unwrap();
                let fd = fd_gradient(h.data(), |v| {
                    let t = Tensor::new(vec![7, 2, 2], v.to_vec()).unwrap();
                    kind.evaluate(&t, &labels, true).unwrap().unwrap().value
                });
                assert!(rel_err(term.grad.data(), &fd) < 1e-4, "{kind:?} seed {seed}");
            }
        }
    }

    proptest! {
        #[test]
        fn mixcon_respects_am_gm_bound(
            seed in 0u64..1000,
            beta in 1e-4f64..0.5,
            n in 4usize..12,
        ) {
            let mut rng = Rng::new(seed);
            let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
            let h = normalize_features(&random_tensor(&[n, 3], &mut rng));
            let (l, _) = mixcon_loss(&h, &labels, &MixConParams::new(1.0, beta)).unwrap();
            prop_assert!(l.value >= 2.0 * beta.sqrt() - 1e-12);
        }

        #[test]
        fn mixcon_invariant_under_rank_consistent_permutation(seed in 0u64..1000) {
            // Two classes of three, permuting the ranks identically in both.
            let mut rng = Rng::new(seed);
            let h = random_tensor(&[6, 3], &mut rng);
            let labels = [0, 0, 0, 1, 1, 1];
            let params = MixConParams::new(1.0, 0.02);
            let (base, _) = mixcon_loss(&h, &labels, &params).unwrap();
            let mut perm = [0usize, 1, 2];
            rng.shuffle(&mut perm);
            let order: Vec<usize> = perm.iter().copied().chain(perm.iter().map(|i| i + 3)).collect();
            let (shuffled, _) = mixcon_loss(&h.select_rows(&order), &labels, &params).unwrap();
            prop_assert!((base.value - shuffled.value).abs() < 1e-12);
        }
    }
}
