//! TOML run configuration. Every key is optional; missing keys fall back to
//! the recipe of the dataset in use, and command-line flags override both.
//!
//! ```toml
//! seed = 0
//! out = "results"
//! threads = 1
//!
//! [train]
//! network = "lenet5"          # synthetic_mlp | deeper | wider | lenet5
//! checkpoint = "model.ckpt"   # written into `out`
//! [train.data]
//! source = "idx"              # synthetic | idx
//! dir = "data/mnist-subset"
//! [train.training]
//! epochs = 20
//! loss = "mixcon"             # none | mixcon | unicon
//! lambda = 1.0
//! beta = 1e-4
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use mixcon::data::{gen_synthetic, load_idx, Dataset};
use mixcon::invert::{InitKind, InversionConfig, MatchLoss};
use mixcon::losses::{Consistency, MixConParams};
use mixcon::nn::{make_variant, NetworkSpec, Variant};
use mixcon::train::{Reduction, SweepLoss, TrainConfig};
use serde::Deserialize;

pub const DEFAULT_OUT: &str = "results";
pub const DEFAULT_IDX_DIR: &str = "data/mnist-subset";

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub threads: Option<usize>,
    pub synth: SynthSection,
    pub train: TrainSection,
    pub invert: InvertSection,
    pub sweep: SweepSection,
    pub reduce: ReduceSection,
    pub report: ReportSection,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    #[default]
    Synthetic,
    Idx,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub source: Option<Source>,
    /// Directory holding `train-images-idx3-ubyte`, `train-labels-idx1-ubyte`,
    /// `t10k-images-idx3-ubyte` and `t10k-labels-idx1-ubyte`.
    pub dir: Option<PathBuf>,
    /// Synthetic split sizes (default 800/200), or a cap on IDX splits.
    pub n_train: Option<usize>,
    pub n_test: Option<usize>,
}

impl DataSection {
    pub fn source(&self, fallback: Source) -> Source {
        self.source.unwrap_or(fallback)
    }

    pub fn load(&self, fallback: Source, seed: u64) -> Result<(Dataset, Dataset)> {
        match self.source(fallback) {
            Source::Synthetic => Ok(gen_synthetic(seed, self.n_train.unwrap_or(800), self.n_test.unwrap_or(200))?),
            Source::Idx => {
                let dir = self.dir.clone().unwrap_or_else(|| PathBuf::from(DEFAULT_IDX_DIR));
                let load = |images: &str, labels: &str| {
                    load_idx(dir.join(images), dir.join(labels))
                        .with_context(|| format!("loading IDX files from {}", dir.display()))
                };
                let mut train = load("train-images-idx3-ubyte", "train-labels-idx1-ubyte")?;
                let mut test = load("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte")?;
                if let Some(n) = self.n_train {
                    train = train.head(n)?;
                }
                if let Some(n) = self.n_test {
                    test = test.head(n)?;
                }
                Ok((train, test))
            }
        }
    }
}

pub fn network_spec(name: Option<&str>, source: Source, channels: usize) -> Result<NetworkSpec> {
    let name = name.unwrap_or(match source {
        Source::Synthetic => "synthetic_mlp",
        Source::Idx => "lenet5",
    });
    Ok(match name {
        "synthetic_mlp" => NetworkSpec::synthetic_mlp(),
        "deeper" => make_variant(&NetworkSpec::synthetic_mlp(), Variant::Deeper)?,
        "wider" => make_variant(&NetworkSpec::synthetic_mlp(), Variant::Wider)?,
        "lenet5" => NetworkSpec::lenet5(channels),
        other => bail!("unknown network `{other}` (expected synthetic_mlp, deeper, wider or lenet5)"),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    None,
    Mixcon,
    Unicon,
}

/// Overrides on top of a [`TrainConfig`] recipe.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingSection {
    pub epochs: Option<usize>,
    pub learning_rate: Option<f64>,
    pub batch_size: Option<usize>,
    pub loss: Option<LossKind>,
    pub lambda: Option<f64>,
    pub beta: Option<f64>,
    pub eps: Option<f64>,
    pub label_flip_fraction: Option<f64>,
    pub normalize_features: Option<bool>,
    pub reduction: Option<Reduction>,
    /// Gradient-norm clip; 0 disables clipping.
    pub grad_clip: Option<f64>,
}

impl TrainingSection {
    pub fn recipe(source: Source, seed: u64) -> TrainConfig {
        match source {
            Source::Synthetic => TrainConfig::synthetic(seed),
            Source::Idx => TrainConfig::mnist_subset(seed),
        }
    }

    pub fn apply(&self, mut cfg: TrainConfig) -> Result<TrainConfig> {
        cfg.epochs = self.epochs.unwrap_or(cfg.epochs);
        cfg.learning_rate = self.learning_rate.unwrap_or(cfg.learning_rate);
        cfg.batch_size = self.batch_size.unwrap_or(cfg.batch_size);
        cfg.label_flip_fraction = self.label_flip_fraction.unwrap_or(cfg.label_flip_fraction);
        cfg.normalize_features = self.normalize_features.unwrap_or(cfg.normalize_features);
        cfg.reduction = self.reduction.unwrap_or(cfg.reduction);
        if let Some(clip) = self.grad_clip {
            cfg.grad_clip = (clip > 0.0).then_some(clip);
        }
        let loss = self.loss.unwrap_or(match self.lambda {
            Some(l) if l > 0.0 => LossKind::Mixcon,
            _ => LossKind::None,
        });
        cfg.consistency = match loss {
            LossKind::None => Consistency::None,
            LossKind::Mixcon => {
                let mut p = MixConParams::new(self.lambda.unwrap_or(0.1), self.beta.unwrap_or(0.01));
                if let Some(eps) = self.eps {
                    p.eps = eps;
                }
                Consistency::MixCon(p)
            }
            LossKind::Unicon => Consistency::UniCon {
                lambda: self.lambda.unwrap_or(1.0),
            },
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Overrides on top of an [`InversionConfig`] recipe.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackSection {
    pub loss: Option<MatchLoss>,
    pub tv_weight: Option<f64>,
    pub weight_decay: Option<f64>,
    pub learning_rate: Option<f64>,
    pub iterations: Option<usize>,
    pub init: Option<InitKind>,
    pub clamp: Option<[f64; 2]>,
}

impl AttackSection {
    pub fn recipe(source: Source, seed: u64) -> InversionConfig {
        match source {
            Source::Synthetic => InversionConfig::synthetic(seed),
            Source::Idx => InversionConfig::mnist_subset(1e-5, seed),
        }
    }

    pub fn apply(&self, mut cfg: InversionConfig) -> Result<InversionConfig> {
        cfg.loss = self.loss.unwrap_or(cfg.loss);
        cfg.tv_weight = self.tv_weight.unwrap_or(cfg.tv_weight);
        cfg.weight_decay = self.weight_decay.unwrap_or(cfg.weight_decay);
        cfg.learning_rate = self.learning_rate.unwrap_or(cfg.learning_rate);
        cfg.iterations = self.iterations.unwrap_or(cfg.iterations);
        cfg.init = self.init.unwrap_or(cfg.init);
        if self.clamp.is_some() {
            cfg.clamp = self.clamp;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSection {
    pub n_train: Option<usize>,
    pub n_test: Option<usize>,
    pub attack_samples: Option<usize>,
    pub training: TrainingSection,
    pub attack: AttackSection,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub network: Option<String>,
    /// File name of the saved weights inside the output directory.
    pub checkpoint: Option<String>,
    pub data: DataSection,
    pub training: TrainingSection,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InvertSection {
    pub network: Option<String>,
    pub checkpoint: Option<PathBuf>,
    pub samples: Option<usize>,
    pub data: DataSection,
    pub attack: AttackSection,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub network: Option<String>,
    pub lambdas: Option<Vec<f64>>,
    pub betas: Option<Vec<f64>>,
    pub seeds: Option<Vec<u64>>,
    pub loss: Option<SweepLoss>,
    pub data: DataSection,
    pub training: TrainingSection,
}

/// λ grid of the image sweeps.
pub const SWEEP_LAMBDAS: [f64; 8] = [0.01, 0.1, 0.5, 1.0, 2.0, 5.0, 10.0, 100.0];
/// β grid of the image sweeps.
pub const SWEEP_BETAS: [f64; 7] = [1e-2, 1e-3, 1e-4, 1e-5, 1e-6, 1e-7, 1e-8];

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReduceSection {
    pub dimacs: Option<PathBuf>,
    /// Copies per variable; defaults to `100·B²`.
    pub k: Option<usize>,
    pub samples: Option<usize>,
    pub trials: Option<usize>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportSection {
    pub lambda: Option<f64>,
    pub beta: Option<f64>,
    pub attack_samples: Option<usize>,
    pub data: DataSection,
    pub training: TrainingSection,
    pub attack: AttackSection,
}
