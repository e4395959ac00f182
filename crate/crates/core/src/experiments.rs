//! End-to-end experiment pipelines shared by the CLI and the acceptance
//! suite: the synthetic utility/inversion study and the MNIST-scale
//! privacy/utility trade-off.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::{gen_synthetic, Dataset};
use crate::error::Result;
use crate::invert::{attack_dataset, recovered_pairs, InversionConfig};
use crate::losses::{Consistency, MixConParams};
use crate::metrics::{aggregate, per_sample, Metric, SimilarityReport};
use crate::nn::{init_network, make_variant, NetworkSpec, Variant};
use crate::tensor::Tensor;
use crate::train::{train_observed, TrainConfig, TrainHistory};

/// One trained model of the synthetic study.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthModel {
    pub name: &'static str,
    pub variant: Option<Variant>,
    pub lambda: f64,
    pub beta: f64,
}

impl SynthModel {
    pub fn network(&self) -> &'static str {
        match self.variant {
            None => "default",
            Some(Variant::Deeper) => "deeper",
            Some(Variant::Wider) => "wider",
        }
    }

    pub fn consistency(&self) -> Consistency {
        if self.lambda == 0.0 {
            Consistency::None
        } else {
            Consistency::MixCon(MixConParams::new(self.lambda, self.beta))
        }
    }
}

/// Vanilla, then MixCon(0.1, 0.01) and MixCon(0.1, 0) each on the default,
/// deeper and wider heads.
pub fn synth_models() -> Vec<SynthModel> {
    let mut out = vec![SynthModel {
        name: "vanilla",
        variant: None,
        lambda: 0.0,
        beta: 0.0,
    }];
    for beta in [0.01, 0.0] {
        for variant in [None, Some(Variant::Deeper), Some(Variant::Wider)] {
            out.push(SynthModel {
                name: "mixcon",
                variant,
                lambda: 0.1,
                beta,
            });
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSettings {
    pub seed: u64,
    pub n_train: usize,
    pub n_test: usize,
    /// Test samples attacked per model.
    pub attack_samples: usize,
    pub train: TrainConfig,
    pub attack: InversionConfig,
}

impl SynthSettings {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            n_train: 800,
            n_test: 200,
            attack_samples: 200,
            train: TrainConfig::synthetic(seed),
            attack: InversionConfig::synthetic(seed),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtilityRow {
    pub model: String,
    pub network: String,
    pub lambda: f64,
    pub beta: f64,
    pub train_acc: f64,
    pub test_acc: f64,
    pub mean_pair_dist: f64,
    pub delta_h: f64,
}

impl UtilityRow {
    pub const CSV_HEADER: &'static str = "model,network,lambda,beta,train_acc,test_acc,mean_pair_dist,delta_h";

    fn new(model: &SynthModel, history: &TrainHistory) -> Self {
        let last = history.last().expect("at least one epoch");
        Self {
            model: model.name.into(),
            network: model.network().into(),
            lambda: model.lambda,
            beta: model.beta,
            train_acc: last.train_acc,
            test_acc: last.test_acc,
            mean_pair_dist: last.mean_pair_dist,
            delta_h: last.delta_h,
        }
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.model,
            self.network,
            self.lambda,
            self.beta,
            self.train_acc,
            self.test_acc,
            self.mean_pair_dist,
            self.delta_h
        )
    }
}

/// Per-model attack quality, one aggregate per metric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InversionRow {
    pub model: String,
    pub lambda: f64,
    pub beta: f64,
    pub metric: String,
    pub report: SimilarityReport,
}

impl InversionRow {
    pub const CSV_HEADER: &'static str = "model,lambda,beta,metric,mean,std,worst,count";

    pub fn csv_row(&self) -> String {
        let r = &self.report;
        format!(
            "{},{},{},{},{},{},{},{}",
            self.model, self.lambda, self.beta, self.metric, r.mean, r.std, r.worst, r.count
        )
    }
}

/// Cut-layer features of the test set for one model after `epoch` epochs.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenDump {
    pub model: String,
    pub network: String,
    pub beta: f64,
    pub epoch: usize,
    pub features: Tensor,
    pub labels: Vec<usize>,
}

pub const HIDDEN_CSV_HEADER: &str = "model,network,beta,index,label,h0,h1";

/// All dumps for one epoch as CSV. Features are flattened per sample.
pub fn hidden_csv(dumps: &[&HiddenDump]) -> String {
    let mut out = String::from(HIDDEN_CSV_HEADER);
    out.push('\n');
    for d in dumps {
        for (i, label) in d.labels.iter().enumerate() {
            let row = d.features.row(i);
            let _ = write!(out, "{},{},{},{i},{label}", d.model, d.network, d.beta);
            for v in row {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthReport {
    pub utility: Vec<UtilityRow>,
    pub inversion: Vec<InversionRow>,
    pub histories: Vec<TrainHistory>,
    pub hidden: Vec<HiddenDump>,
}

impl SynthReport {
    pub fn utility_csv(&self) -> String {
        to_csv(UtilityRow::CSV_HEADER, self.utility.iter().map(UtilityRow::csv_row))
    }

    pub fn inversion_csv(&self) -> String {
        to_csv(InversionRow::CSV_HEADER, self.inversion.iter().map(InversionRow::csv_row))
    }

    /// `(epoch, csv)` for every recorded epoch.
    pub fn hidden_csvs(&self) -> Vec<(usize, String)> {
        let mut epochs: Vec<usize> = self.hidden.iter().map(|d| d.epoch).collect();
        epochs.sort_unstable();
        epochs.dedup();
        epochs
            .into_iter()
            .map(|e| {
                let dumps: Vec<&HiddenDump> = self.hidden.iter().filter(|d| d.epoch == e).collect();
                (e, hidden_csv(&dumps))
            })
            .collect()
    }

    pub fn find(&self, network: &str, lambda: f64, beta: f64) -> Option<&UtilityRow> {
        self.utility
            .iter()
            .find(|r| r.network == network && r.lambda == lambda && r.beta == beta)
    }

    pub fn inversion_for(&self, lambda: f64, beta: f64, metric: Metric) -> Option<&SimilarityReport> {
        self.inversion
            .iter()
            .find(|r| r.lambda == lambda && r.beta == beta && r.metric == metric.name())
            .map(|r| &r.report)
    }
}

pub(crate) fn to_csv(header: &str, rows: impl Iterator<Item = String>) -> String {
    let mut out = String::from(header);
    out.push('\n');
    for r in rows {
        out.push_str(&r);
        out.push('\n');
    }
    out
}

fn attack_report(
    net: &crate::nn::Network,
    test: &Dataset,
    cfg: &InversionConfig,
    n: usize,
    metrics: &[Metric],
) -> Result<Vec<(Metric, SimilarityReport)>> {
    let pairs = recovered_pairs(attack_dataset(net, test, cfg, n)?)?;
    metrics
        .iter()
        .map(|&m| Ok((m, aggregate(&per_sample(&pairs, m)?)?)))
        .collect()
}

/// Trains every model of [`synth_models`] on one synthetic draw, records
/// test-set cut features per epoch, and attacks the default-network models
/// with the ℓ1 inversion.
pub fn run_synth(settings: &SynthSettings) -> Result<SynthReport> {
    let (train_ds, test_ds) = gen_synthetic(settings.seed, settings.n_train, settings.n_test)?;
    let base = NetworkSpec::synthetic_mlp();
    let mut report = SynthReport {
        utility: Vec::new(),
        inversion: Vec::new(),
        histories: Vec::new(),
        hidden: Vec::new(),
    };
    for model in synth_models() {
        let spec = match model.variant {
            Some(v) => make_variant(&base, v)?,
            None => base.clone(),
        };
        let cfg = settings.train.with_consistency(model.consistency());
        let net = init_network(&spec, cfg.init, cfg.seed)?;
        let mut dumps = Vec::new();
        let mut dump = |epoch: usize, net: &crate::nn::Network| -> Result<()> {
            dumps.push(HiddenDump {
                model: model.name.into(),
                network: model.network().into(),
                beta: model.beta,
                epoch,
                features: net.hidden(&test_ds.inputs)?,
                labels: test_ds.labels.clone(),
            });
            Ok(())
        };
        dump(0, &net)?;
        let (net, history) = train_observed(net, &train_ds, &test_ds, &cfg, &mut dump)?;
        report.hidden.extend(dumps);
        report.utility.push(UtilityRow::new(&model, &history));
        report.histories.push(history);
        if model.variant.is_none() {
            for (metric, r) in attack_report(&net, &test_ds, &settings.attack, settings.attack_samples, &[Metric::Mse, Metric::Cosine])? {
                report.inversion.push(InversionRow {
                    model: model.name.into(),
                    lambda: model.lambda,
                    beta: model.beta,
                    metric: metric.name().into(),
                    report: r,
                });
            }
        }
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageSettings {
    pub lambda: f64,
    pub beta: f64,
    pub attack_samples: usize,
    pub train: TrainConfig,
    pub attack: InversionConfig,
}

impl ImageSettings {
    /// Vanilla vs MixCon(1, 1e-4) on the MNIST subset, 100 attacked samples.
    pub fn mnist_subset(seed: u64) -> Self {
        Self {
            lambda: 1.0,
            beta: 1e-4,
            attack_samples: 100,
            train: TrainConfig::mnist_subset(seed),
            attack: InversionConfig::mnist_subset(1e-5, seed),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TradeoffRow {
    pub model: String,
    pub lambda: f64,
    pub beta: f64,
    pub train_acc: f64,
    pub test_acc: f64,
    pub mean_pair_dist: f64,
    pub ssim: SimilarityReport,
    pub mse: SimilarityReport,
}

impl TradeoffRow {
    pub const CSV_HEADER: &'static str =
        "model,lambda,beta,train_acc,test_acc,mean_pair_dist,ssim_mean,ssim_std,ssim_worst,mse_mean,mse_std,mse_worst,count";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.model,
            self.lambda,
            self.beta,
            self.train_acc,
            self.test_acc,
            self.mean_pair_dist,
            self.ssim.mean,
            self.ssim.std,
            self.ssim.worst,
            self.mse.mean,
            self.mse.std,
            self.mse.worst,
            self.ssim.count
        )
    }
}

pub fn tradeoff_csv(rows: &[TradeoffRow]) -> String {
    to_csv(TradeoffRow::CSV_HEADER, rows.iter().map(TradeoffRow::csv_row))
}

/// Trains LeNet5 with and without MixCon on image data and attacks the cut
/// features of the first `attack_samples` test images.
pub fn run_image_tradeoff(train_ds: &Dataset, test_ds: &Dataset, settings: &ImageSettings) -> Result<Vec<TradeoffRow>> {
    let channels = train_ds.sample_shape().first().copied().unwrap_or(1);
    let spec = NetworkSpec::lenet5(channels);
    let models = [
        ("vanilla", 0.0, 0.0, Consistency::None),
        (
            "mixcon",
            settings.lambda,
            settings.beta,
            Consistency::MixCon(MixConParams::new(settings.lambda, settings.beta)),
        ),
    ];
    let mut rows = Vec::new();
    for (name, lambda, beta, consistency) in models {
        let cfg = settings.train.with_consistency(consistency);
        let net = init_network(&spec, cfg.init, cfg.seed)?;
        let (net, history) = train_observed(net, train_ds, test_ds, &cfg, &mut |_, _| Ok(()))?;
        let last = history.last().expect("at least one epoch");
        let reports = attack_report(&net, test_ds, &settings.attack, settings.attack_samples, &[Metric::Ssim, Metric::Mse])?;
        rows.push(TradeoffRow {
            model: name.into(),
            lambda,
            beta,
            train_acc: last.train_acc,
            test_acc: last.test_acc,
            mean_pair_dist: last.mean_pair_dist,
            ssim: reports[0].1,
            mse: reports[1].1,
        });
    }
    Ok(rows)
}
