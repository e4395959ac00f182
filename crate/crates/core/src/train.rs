//! Mini-batch SGD on `L = L_class + λ·L_con`, with the consistency gradient
//! injected at the cut layer, plus the (λ, β) sweep runner.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{batches, flip_labels, BatchPlan, Dataset};
use crate::error::{config, Error, Result};
use crate::losses::{cross_entropy, mixcon_pairs, one_hot, Consistency, MixConParams, DEFAULT_EPS};
use crate::metrics::{mean_pair_distance, separability};
use crate::nn::{init_network, predict_class, softmax_rows, Init, Network, NetworkSpec};
use crate::rng::Rng;

/// How per-sample classification losses combine within a batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    #[default]
    Mean,
    Sum,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    #[serde(default)]
    pub consistency: Consistency,
    /// Fraction of training labels reassigned before training.
    #[serde(default)]
    pub label_flip_fraction: f64,
    pub seed: u64,
    pub init: Init,
    /// Normalize cut-layer features to unit length inside the consistency
    /// loss (the features fed to the head are untouched).
    #[serde(default = "default_true")]
    pub normalize_features: bool,
    #[serde(default)]
    pub reduction: Reduction,
    /// Rescale each batch gradient to at most this global ℓ2 norm.
    #[serde(default)]
    pub grad_clip: Option<f64>,
}

fn default_true() -> bool {
    true
}

impl TrainConfig {
    /// Recipe for the two-Gaussian task: SGD lr 0.1, 20 epochs, batches of
    /// 32, 5% label noise. Uses fan-in uniform initialization and clips
    /// batch gradients to norm 1: with `Init::Gaussian` the two-unit ReLU
    /// cut layer usually starts dead, and without clipping the `beta/dist`
    /// term throws the network into dead regions whenever a same-rank pair
    /// lands close together.
    pub fn synthetic(seed: u64) -> Self {
        Self {
            epochs: 20,
            learning_rate: 0.1,
            batch_size: 32,
            consistency: Consistency::None,
            label_flip_fraction: 0.05,
            seed,
            init: Init::UniformFanIn,
            normalize_features: true,
            reduction: Reduction::Mean,
            grad_clip: Some(1.0),
        }
    }

    /// Recipe for LeNet5 on image data: SGD lr 0.01, 20 epochs.
    pub fn image(seed: u64) -> Self {
        Self {
            epochs: 20,
            learning_rate: 0.01,
            batch_size: 32,
            consistency: Consistency::None,
            label_flip_fraction: 0.0,
            seed,
            init: Init::UniformFanIn,
            normalize_features: true,
            reduction: Reduction::Mean,
            grad_clip: None,
        }
    }

    /// LeNet5 on the 2000-sample MNIST subset. With ~30x fewer steps per
    /// epoch than full MNIST, lr 0.01 is still far from converged after 20
    /// epochs, so this uses lr 0.05 and batch 16.
    pub fn mnist_subset(seed: u64) -> Self {
        Self { learning_rate: 0.05, batch_size: 16, ..Self::image(seed) }
    }

    pub fn with_consistency(self, consistency: Consistency) -> Self {
        Self { consistency, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return config("epochs must be at least 1");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return config(format!("learning rate must be positive, got {}", self.learning_rate));
        }
        if self.batch_size == 0 {
            return config("batch size must be positive");
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return config(format!("gradient clip must be positive, got {c}"));
            }
        }
        if !(0.0..=1.0).contains(&self.label_flip_fraction) {
            return config(format!("label flip fraction {} outside [0, 1]", self.label_flip_fraction));
        }
        self.consistency.validate()
    }
}

/// Statistics recorded after each epoch. Separability is measured on the
/// raw cut-layer features of the test set; `delta_big` uses the MixCon
/// pairing of the test labels.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean over batches of the (reduced) classification loss.
    pub class_loss: f64,
    /// Mean over batches of the unweighted consistency loss.
    pub consistency_loss: f64,
    pub train_acc: f64,
    pub test_acc: f64,
    pub mean_pair_dist: f64,
    pub cross_class_pair_dist: f64,
    pub delta_h: f64,
    pub delta_big: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn last(&self) -> Option<&EpochRecord> {
        self.epochs.last()
    }
}

/// Fraction of samples whose predicted class (largest softmax output)
/// equals the label.
pub fn evaluate_accuracy(net: &Network, ds: &Dataset) -> Result<f64> {
    let probs = softmax_rows(&net.predict(&ds.inputs)?);
    let mut correct = 0usize;
    for (i, &label) in ds.labels.iter().enumerate() {
        if predict_class(probs.row(i))? == label {
            correct += 1;
        }
    }
    Ok(correct as f64 / ds.len() as f64)
}

fn epoch_stats(net: &Network, train: &Dataset, test: &Dataset) -> Result<(f64, f64, f64, f64, f64, Option<f64>)> {
    let hidden = net.hidden(&test.inputs)?;
    let sep = separability(&hidden, &mixcon_pairs(&test.labels))?;
    let cross = mean_pair_distance(&hidden, &test.labels, true)?;
    Ok((
        evaluate_accuracy(net, train)?,
        evaluate_accuracy(net, test)?,
        sep.mean_pair,
        cross,
        sep.delta_h,
        sep.delta_big,
    ))
}

/// Trains `net` in place. Label noise touches the training split only.
/// Batch order in epoch `e` is drawn from a stream derived from
/// `(cfg.seed, e)`.
pub fn train(net: Network, train_ds: &Dataset, test_ds: &Dataset, cfg: &TrainConfig) -> Result<(Network, TrainHistory)> {
    train_observed(net, train_ds, test_ds, cfg, &mut |_, _| Ok(()))
}

/// [`train`] with `observer(epochs_done, &net)` called after every epoch.
pub fn train_observed(
    mut net: Network,
    train_ds: &Dataset,
    test_ds: &Dataset,
    cfg: &TrainConfig,
    observer: &mut dyn FnMut(usize, &Network) -> Result<()>,
) -> Result<(Network, TrainHistory)> {
    cfg.validate()?;
    let noisy = flip_labels(train_ds, cfg.label_flip_fraction, Rng::derive(cfg.seed, u64::MAX).next_u64())?;
    let lambda = cfg.consistency.lambda();
    let mut history = TrainHistory::default();
    for epoch in 0..cfg.epochs {
        let plan = BatchPlan {
            seed: Rng::derive(cfg.seed, epoch as u64).next_u64(),
            batch_size: cfg.batch_size.min(noisy.len()),
            shuffle: true,
        };
        let (mut class_sum, mut con_sum, mut count) = (0.0, 0.0, 0usize);
        for (b, (x, labels)) in batches(&noisy, &plan)?.into_iter().enumerate() {
            let fail = |msg: String| Error::Training { epoch, batch: b, msg };
            let (scores, tape) = net.forward(&x)?;
            let mut ce = cross_entropy(&scores, &one_hot(&labels, noisy.num_classes)?)?;
            if cfg.reduction == Reduction::Mean {
                let scale = 1.0 / labels.len() as f64;
                ce.value *= scale;
                ce.grad.data_mut().iter_mut().for_each(|g| *g *= scale);
            }
            let term = if lambda > 0.0 {
                cfg.consistency
                    .evaluate(tape.activation(net.spec.cut_index), &labels, cfg.normalize_features)?
            } else {
                None
            };
            let total = ce.value + term.as_ref().map_or(0.0, |t| lambda * t.value);
            if !total.is_finite() {
                return Err(fail(format!("loss became {total}")));
            }
            let hidden_grad = term.as_ref().map(|t| t.grad.map(|g| g * lambda));
            let (mut grads, _) = net.backward(&tape, &ce.grad, hidden_grad.as_ref())?;
            if grads.iter().flatten().any(|g| !g.all_finite()) {
                return Err(fail("non-finite gradient".into()));
            }
            if let Some(max) = cfg.grad_clip {
                let norm = grads.iter().flatten().map(|g| g.dot(g)).sum::<f64>().sqrt();
                if norm > max {
                    let scale = max / norm;
                    grads.iter_mut().flatten().for_each(|g| g.data_mut().iter_mut().for_each(|v| *v *= scale));
                }
            }
            net.sgd_step(&grads, cfg.learning_rate);
            class_sum += ce.value;
            con_sum += term.map_or(0.0, |t| t.value);
            count += 1;
        }
        if net.param_tensors().any(|p| !p.all_finite()) {
            return Err(Error::Training {
                epoch,
                batch: count.saturating_sub(1),
                msg: "parameters became non-finite".into(),
            });
        }
        let (train_acc, test_acc, mean_pair_dist, cross_class_pair_dist, delta_h, delta_big) =
            epoch_stats(&net, &noisy, test_ds)?;
        history.epochs.push(EpochRecord {
            epoch,
            class_loss: class_sum / count as f64,
            consistency_loss: con_sum / count as f64,
            train_acc,
            test_acc,
            mean_pair_dist,
            cross_class_pair_dist,
            delta_h,
            delta_big,
        });
        observer(epoch + 1, &net)?;
    }
    Ok((net, history))
}

/// Initializes a network from `spec` with `cfg.init` and `cfg.seed`, then
/// trains it.
pub fn train_fresh(spec: &NetworkSpec, train_ds: &Dataset, test_ds: &Dataset, cfg: &TrainConfig) -> Result<(Network, TrainHistory)> {
    let net = init_network(spec, cfg.init, cfg.seed)?;
    train(net, train_ds, test_ds, cfg)
}

/// Which consistency loss a sweep varies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SweepLoss {
    #[default]
    MixCon,
    /// β is ignored.
    UniCon,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepGrid {
    pub lambdas: Vec<f64>,
    pub betas: Vec<f64>,
    /// One run per seed for every cell; defaults to the base seed.
    #[serde(default)]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub loss: SweepLoss,
    pub base: TrainConfig,
}

impl SweepGrid {
    /// Cells in row-major (λ outer, β, then seed) order.
    pub fn cells(&self) -> Result<Vec<(f64, f64, u64)>> {
        if self.lambdas.is_empty() || self.betas.is_empty() {
            return config("sweep grid needs at least one lambda and one beta");
        }
        let seeds = if self.seeds.is_empty() { vec![self.base.seed] } else { self.seeds.clone() };
        let mut out = Vec::new();
        for &l in &self.lambdas {
            for &b in &self.betas {
                for &s in &seeds {
                    out.push((l, b, s));
                }
            }
        }
        Ok(out)
    }

    /// Training configuration of one cell.
    pub fn cell_config(&self, lambda: f64, beta: f64, seed: u64) -> TrainConfig {
        let eps = match self.base.consistency {
            Consistency::MixCon(p) => p.eps,
            _ => DEFAULT_EPS,
        };
        let consistency = match self.loss {
            SweepLoss::MixCon => Consistency::MixCon(MixConParams { lambda, beta, eps }),
            SweepLoss::UniCon => Consistency::UniCon { lambda },
        };
        TrainConfig { consistency, seed, ..self.base }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub lambda: f64,
    pub beta: f64,
    pub seed: u64,
    pub train_acc: f64,
    pub test_acc: f64,
    pub mean_pair_dist: f64,
    pub delta_h: f64,
    /// `ok`, or the error that stopped the cell.
    pub status: String,
}

impl SweepRow {
    pub const CSV_HEADER: &'static str = "lambda,beta,seed,train_acc,test_acc,mean_pair_dist,delta_h,status";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.lambda,
            self.beta,
            self.seed,
            self.train_acc,
            self.test_acc,
            self.mean_pair_dist,
            self.delta_h,
            self.status.replace([',', '\n'], ";")
        )
    }
}

/// Trains one model per grid cell. Cells run concurrently; rows come back
/// in grid order. A failing cell yields a row with NaN statistics and the
/// error in `status`.
pub fn run_sweep(grid: &SweepGrid, train_ds: &Dataset, test_ds: &Dataset, spec: &NetworkSpec) -> Result<Vec<SweepRow>> {
    let cells = grid.cells()?;
    Ok(cells
        .par_iter()
        .map(|&(lambda, beta, seed)| {
            let cfg = grid.cell_config(lambda, beta, seed);
            let row = |status: String, rec: Option<&EpochRecord>| SweepRow {
                lambda,
                beta,
                seed,
                train_acc: rec.map_or(f64::NAN, |r| r.train_acc),
                test_acc: rec.map_or(f64::NAN, |r| r.test_acc),
                mean_pair_dist: rec.map_or(f64::NAN, |r| r.mean_pair_dist),
                delta_h: rec.map_or(f64::NAN, |r| r.delta_h),
                status,
            };
            match train_fresh(spec, train_ds, test_ds, &cfg) {
                Ok((_, history)) => row("ok".into(), history.last()),
                Err(e) => row(format!("error: {e}"), None),
            }
        })
        .collect())
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from(SweepRow::CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_synthetic;
    use crate::nn::{init_params, LayerSpec};
    use crate::tensor::Tensor;

    fn tiny() -> (Dataset, Dataset) {
        gen_synthetic(3, 64, 32).unwrap()
    }

    fn quick(seed: u64) -> TrainConfig {
        TrainConfig { epochs: 2, ..TrainConfig::synthetic(seed) }
    }

    #[test]
    fn single_sgd_step_moves_by_learning_rate_times_gradient() {
        // Loss ⟨grad_y, w·x⟩ on a 1→1 linear layer: d/dw = grad_y·x.
        let spec = NetworkSpec {
            input_shape: vec![1],
            layers: vec![LayerSpec::Linear { in_dim: 1, out_dim: 1 }],
            cut_index: 1,
        };
        let mut net = Network::from_params(
            spec,
            vec![vec![Tensor::new(vec![1, 1], vec![0.5]).unwrap(), Tensor::vector(vec![0.0])]],
        )
        .unwrap();
        let (_, tape) = net.forward(&Tensor::vector(vec![2.0])).unwrap();
        let (grads, _) = net.backward(&tape, &Tensor::vector(vec![3.0]), None).unwrap();
        net.sgd_step(&grads, 0.1);
        assert_eq!(net.params[0][0].data()[0], 0.5 - 0.1 * 6.0);
        assert_eq!(net.params[0][1].data()[0], -0.1 * 3.0);
    }

    #[test]
    fn accuracy_of_constant_and_perfect_predictors() {
        let spec = NetworkSpec {
            input_shape: vec![2],
            layers: vec![LayerSpec::Linear { in_dim: 2, out_dim: 2 }],
            cut_index: 1,
        };
        // Bias favours class 0 regardless of input.
        let constant = Network::from_params(
            spec.clone(),
            vec![vec![Tensor::zeros(&[2, 2]), Tensor::vector(vec![1.0, 0.0])]],
        )
        .unwrap();
        let ds = Dataset::new(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap(), vec![0, 1], 2).unwrap();
        assert_eq!(evaluate_accuracy(&constant, &ds).unwrap(), 0.5);

        let spec3 = NetworkSpec {
            input_shape: vec![3],
            layers: vec![LayerSpec::Linear { in_dim: 3, out_dim: 3 }],
            cut_index: 1,
        };
        let memorizer = Network::from_params(spec3, vec![vec![Tensor::eye(3), Tensor::zeros(&[3])]]).unwrap();
        let ds3 = Dataset::new(Tensor::eye(3), vec![0, 1, 2], 3).unwrap();
        assert_eq!(evaluate_accuracy(&memorizer, &ds3).unwrap(), 1.0);
    }

    #[test]
    fn training_is_deterministic() {
        let (tr, te) = tiny();
        let cfg = quick(1).with_consistency(Consistency::MixCon(MixConParams::new(0.1, 0.01)));
        let a = train_fresh(&NetworkSpec::synthetic_mlp(), &tr, &te, &cfg).unwrap();
        let b = train_fresh(&NetworkSpec::synthetic_mlp(), &tr, &te, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.1.epochs.len(), 2);
    }

    #[test]
    fn zero_lambda_matches_vanilla_bit_for_bit() {
        let (tr, te) = tiny();
        let vanilla = quick(2);
        let zero = vanilla.with_consistency(Consistency::MixCon(MixConParams::new(0.0, 0.5)));
        let spec = NetworkSpec::synthetic_mlp();
        let (na, ha) = train_fresh(&spec, &tr, &te, &vanilla).unwrap();
        let (nb, hb) = train_fresh(&spec, &tr, &te, &zero).unwrap();
        assert_eq!(na, nb);
        assert_eq!(ha, hb);
    }

    #[test]
    fn history_distances_are_ordered() {
        let (tr, te) = tiny();
        let cfg = quick(4).with_consistency(Consistency::MixCon(MixConParams::new(0.5, 0.1)));
        let (_, h) = train_fresh(&NetworkSpec::synthetic_mlp(), &tr, &te, &cfg).unwrap();
        for r in &h.epochs {
            assert!(r.delta_h >= 0.0);
            assert!(r.delta_h <= r.mean_pair_dist);
            assert!((0.0..=1.0).contains(&r.test_acc));
        }
    }

    #[test]
    fn divergence_names_epoch_and_batch() {
        let (tr, te) = tiny();
        let cfg = TrainConfig { learning_rate: 1e300, ..quick(0) };
        match train_fresh(&NetworkSpec::synthetic_mlp(), &tr, &te, &cfg) {
            Err(Error::Training { epoch: 0, .. }) => {}
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig { epochs: 0, ..quick(0) }.validate().is_err());
        assert!(TrainConfig { learning_rate: 0.0, ..quick(0) }.validate().is_err());
        assert!(quick(0).validate().is_ok());
    }

    #[test]
    fn one_cell_sweep_equals_direct_training() {
        let (tr, te) = tiny();
        let grid = SweepGrid {
            lambdas: vec![0.1],
            betas: vec![0.01],
            seeds: vec![],
            loss: SweepLoss::MixCon,
            base: quick(5),
        };
        let rows = run_sweep(&grid, &tr, &te, &NetworkSpec::synthetic_mlp()).unwrap();
        assert_eq!(rows.len(), 1);
        let cfg = quick(5).with_consistency(Consistency::MixCon(MixConParams::new(0.1, 0.01)));
        let (_, h) = train_fresh(&NetworkSpec::synthetic_mlp(), &tr, &te, &cfg).unwrap();
        let last = h.last().unwrap();
        assert_eq!(rows[0].status, "ok");
        assert_eq!(rows[0].test_acc, last.test_acc);
        assert_eq!(rows[0].mean_pair_dist, last.mean_pair_dist);
        assert_eq!(rows[0].delta_h, last.delta_h);
    }

    #[test]
    fn sweep_rows_follow_grid_order_and_record_errors() {
        let (tr, te) = tiny();
        let grid = SweepGrid {
            lambdas: vec![0.1, -1.0],
            betas: vec![0.0, 0.01],
            seeds: vec![],
            loss: SweepLoss::MixCon,
            base: TrainConfig { epochs: 1, ..quick(0) },
        };
        let rows = run_sweep(&grid, &tr, &te, &NetworkSpec::synthetic_mlp()).unwrap();
        let keys: Vec<(f64, f64)> = rows.iter().map(|r| (r.lambda, r.beta)).collect();
        assert_eq!(keys, vec![(0.1, 0.0), (0.1, 0.01), (-1.0, 0.0), (-1.0, 0.01)]);
        assert_eq!(rows[0].status, "ok");
        assert!(rows[2].status.starts_with("error"));
        let csv = sweep_csv(&rows);
        assert!(csv.starts_with("lambda,beta,seed,train_acc,test_acc,mean_pair_dist,delta_h,status\n"));
        assert_eq!(csv.lines().count(), 5);
        assert!(run_sweep(&SweepGrid { lambdas: vec![], ..grid }, &tr, &te, &NetworkSpec::synthetic_mlp()).is_err());
    }

    #[test]
    fn init_is_used_by_train_fresh() {
        let (tr, te) = tiny();
        let spec = NetworkSpec::synthetic_mlp();
        let cfg = TrainConfig { init: Init::Gaussian { alpha: 0.1 }, ..quick(9) };
        let direct = train(init_params(&spec, 0.1, 9).unwrap(), &tr, &te, &cfg).unwrap();
        assert_eq!(train_fresh(&spec, &tr, &te, &cfg).unwrap(), direct);
    }

    #[test]
    fn clipping_bounds_the_update() {
        let spec = NetworkSpec {
            input_shape: vec![1],
            layers: vec![LayerSpec::Linear { in_dim: 1, out_dim: 2 }],
            cut_index: 1,
        };
        let net = Network::from_params(spec, vec![vec![Tensor::zeros(&[2, 1]), Tensor::zeros(&[2])]]).unwrap();
        let ds = Dataset::new(Tensor::full(&[2, 1], 100.0), vec![0, 0], 2).unwrap();
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 2,
            label_flip_fraction: 0.0,
            grad_clip: Some(0.5),
            learning_rate: 1.0,
            ..quick(0)
        };
        let (after, _) = train(net.clone(), &ds, &ds, &cfg).unwrap();
        let moved: f64 = after
            .param_tensors()
            .zip(net.param_tensors())
            .map(|(a, b)| a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>())
            .sum::<f64>()
            .sqrt();
        assert!((moved - 0.5).abs() < 1e-12, "{moved}");
        assert!(TrainConfig { grad_clip: Some(0.0), ..cfg }.validate().is_err());
    }
}
