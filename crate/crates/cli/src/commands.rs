use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use mixcon::experiments::{run_image_tradeoff, run_synth, tradeoff_csv, ImageSettings, SynthSettings};
use mixcon::hardness::{parse_dimacs, verify};
use mixcon::invert::attack_dataset;
use mixcon::metrics::{aggregate, ssim, Metric, SimilarityReport};
use mixcon::nn::{init_network, load_checkpoint, save_checkpoint};
use mixcon::train::{run_sweep, sweep_csv, train, SweepGrid, TrainHistory};

use crate::config::{
    network_spec, AttackSection, FileConfig, Source, TrainingSection, DEFAULT_OUT, SWEEP_BETAS, SWEEP_LAMBDAS,
};
use crate::{Cli, Command, InvertArgs, ReduceArgs, ReportArgs, SweepArgs, SynthArgs, TrainArgs};

struct Ctx {
    seed: u64,
    out: PathBuf,
    file: FileConfig,
}

impl Ctx {
    fn write(&self, name: &str, contents: &str) -> Result<()> {
        let path = self.out.join(name);
        fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))?;
        println!("wrote {}", path.display());
        Ok(())
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let file = match &cli.global.config {
        Some(path) => FileConfig::load(path)?,
        None => FileConfig::default(),
    };
    if let Some(threads) = cli.global.threads.or(file.threads) {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .context("configuring the thread pool")?;
    }
    let ctx = Ctx {
        seed: cli.global.seed.or(file.seed).unwrap_or(0),
        out: cli
            .global
            .out
            .clone()
            .or_else(|| file.out.clone())
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT)),
        file,
    };
    fs::create_dir_all(&ctx.out).with_context(|| format!("creating {}", ctx.out.display()))?;
    match cli.command {
        Command::Synth(args) => synth(&ctx, args),
        Command::Train(args) => train_cmd(&ctx, args),
        Command::Invert(args) => invert(&ctx, args),
        Command::Sweep(args) => sweep(&ctx, args),
        Command::Reduce(args) => reduce(&ctx, args),
        Command::Report(args) => report(&ctx, args),
    }
}

fn synth(ctx: &Ctx, args: SynthArgs) -> Result<()> {
    let sec = &ctx.file.synth;
    let mut training = sec.training.clone();
    training.epochs = args.epochs.or(training.epochs);
    let defaults = SynthSettings::new(ctx.seed);
    let settings = SynthSettings {
        seed: ctx.seed,
        n_train: sec.n_train.unwrap_or(defaults.n_train),
        n_test: sec.n_test.unwrap_or(defaults.n_test),
        attack_samples: args.attack_samples.or(sec.attack_samples).unwrap_or(defaults.attack_samples),
        train: training.apply(defaults.train)?,
        attack: sec.attack.apply(defaults.attack)?,
    };
    let report = run_synth(&settings)?;
    ctx.write("table1.csv", &report.utility_csv())?;
    ctx.write("table2.csv", &report.inversion_csv())?;
    for (epoch, csv) in report.hidden_csvs() {
        ctx.write(&format!("hidden_epoch_{epoch}.csv"), &csv)?;
    }
    Ok(())
}

fn history_csv(history: &TrainHistory) -> String {
    let mut out = String::from(
        "epoch,class_loss,consistency_loss,train_acc,test_acc,mean_pair_dist,cross_class_pair_dist,delta_h,delta_big\n",
    );
    for r in &history.epochs {
        let big = r.delta_big.map(|v| v.to_string()).unwrap_or_default();
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{big}",
            r.epoch + 1,
            r.class_loss,
            r.consistency_loss,
            r.train_acc,
            r.test_acc,
            r.mean_pair_dist,
            r.cross_class_pair_dist,
            r.delta_h
        );
    }
    out
}

fn data_source(dir: Option<&PathBuf>, configured: Option<Source>) -> Source {
    match (dir, configured) {
        (Some(_), _) => Source::Idx,
        (None, Some(s)) => s,
        (None, None) => Source::Synthetic,
    }
}

fn train_cmd(ctx: &Ctx, args: TrainArgs) -> Result<()> {
    let sec = &ctx.file.train;
    let mut data = sec.data.clone();
    data.dir = args.data_dir.clone().or(data.dir);
    let source = data_source(args.data_dir.as_ref(), data.source);
    let mut training = sec.training.clone();
    training.epochs = args.epochs.or(training.epochs);
    training.lambda = args.lambda.or(training.lambda);
    training.beta = args.beta.or(training.beta);
    let cfg = training.apply(TrainingSection::recipe(source, ctx.seed))?;
    let (train_ds, test_ds) = data.load(source, ctx.seed)?;
    let channels = train_ds.sample_shape().first().copied().unwrap_or(1);
    let spec = network_spec(args.network.as_deref().or(sec.network.as_deref()), source, channels)?;
    let net = init_network(&spec, cfg.init, cfg.seed)?;
    let (net, history) = train(net, &train_ds, &test_ds, &cfg)?;
    let ckpt = ctx.out.join(sec.checkpoint.as_deref().unwrap_or("model.ckpt"));
    save_checkpoint(&net, &ckpt).with_context(|| format!("writing {}", ckpt.display()))?;
    println!("wrote {}", ckpt.display());
    ctx.write("history.csv", &history_csv(&history))?;
    let last = history.last().expect("at least one epoch");
    println!("train accuracy {:.4}, test accuracy {:.4}", last.train_acc, last.test_acc);
    Ok(())
}

fn invert(ctx: &Ctx, args: InvertArgs) -> Result<()> {
    let sec = &ctx.file.invert;
    let mut data = sec.data.clone();
    data.dir = args.data_dir.clone().or(data.dir);
    let source = data_source(args.data_dir.as_ref(), data.source);
    let Some(ckpt) = args.checkpoint.or_else(|| sec.checkpoint.clone()) else {
        bail!("invert needs a checkpoint (--checkpoint or [invert] checkpoint)");
    };
    let (_, test_ds) = data.load(source, ctx.seed)?;
    let channels = test_ds.sample_shape().first().copied().unwrap_or(1);
    let spec = network_spec(args.network.as_deref().or(sec.network.as_deref()), source, channels)?;
    let net = load_checkpoint(&ckpt, &spec).with_context(|| format!("loading {}", ckpt.display()))?;
    let cfg = sec.attack.apply(AttackSection::recipe(source, ctx.seed))?;
    let default_n = match source {
        Source::Synthetic => 200,
        Source::Idx => 100,
    };
    let n = args.samples.or(sec.samples).unwrap_or(default_n).min(test_ds.len());
    let images = test_ds.sample_shape().len() == 3;
    let mut metrics = vec![Metric::Mse, Metric::Cosine];
    if images {
        metrics.push(Metric::Ssim);
    }
    let mut samples = String::from("index,");
    samples.push_str(&metrics.iter().map(|m| m.name()).collect::<Vec<_>>().join(","));
    samples.push_str(",status\n");
    let mut values: Vec<Vec<f64>> = vec![Vec::new(); metrics.len()];
    for s in attack_dataset(&net, &test_ds, &cfg, n)? {
        let row: Vec<String> = match &s.outcome {
            Ok(r) => {
                let mut cells = Vec::new();
                for (k, m) in metrics.iter().enumerate() {
                    let v = metric_value(*m, &s.original, &r.recovered)?;
                    values[k].push(v);
                    cells.push(v.to_string());
                }
                cells.push("ok".into());
                cells
            }
            Err(e) => {
                let mut cells = vec!["NaN".to_string(); metrics.len()];
                cells.push(format!("\"{e}\""));
                cells
            }
        };
        let _ = writeln!(samples, "{},{}", s.index, row.join(","));
    }
    let mut summary = String::from(SimilarityReport::CSV_HEADER);
    summary.push('\n');
    for (m, v) in metrics.iter().zip(&values) {
        if !v.is_empty() {
            summary.push_str(&aggregate(v)?.csv_row(m.name()));
            summary.push('\n');
        }
    }
    ctx.write("inversion.csv", &summary)?;
    ctx.write("inversion_samples.csv", &samples)?;
    Ok(())
}

fn metric_value(metric: Metric, x: &mixcon::Tensor, y: &mixcon::Tensor) -> Result<f64> {
    Ok(match metric {
        Metric::Mse => mixcon::metrics::mse(x, y)?,
        Metric::Cosine => mixcon::metrics::cosine(x.data(), y.data()),
        Metric::Ssim => ssim(x, y)?,
    })
}

fn sweep(ctx: &Ctx, args: SweepArgs) -> Result<()> {
    let sec = &ctx.file.sweep;
    let mut data = sec.data.clone();
    data.dir = args.data_dir.clone().or(data.dir);
    let source = data_source(args.data_dir.as_ref(), data.source);
    let mut training = sec.training.clone();
    training.epochs = args.epochs.or(training.epochs);
    let grid = SweepGrid {
        lambdas: args.lambdas.or_else(|| sec.lambdas.clone()).unwrap_or_else(|| SWEEP_LAMBDAS.to_vec()),
        betas: args.betas.or_else(|| sec.betas.clone()).unwrap_or_else(|| SWEEP_BETAS.to_vec()),
        seeds: sec.seeds.clone().unwrap_or_else(|| vec![ctx.seed]),
        loss: sec.loss.unwrap_or_default(),
        base: training.apply(TrainingSection::recipe(source, ctx.seed))?,
    };
    let (train_ds, test_ds) = data.load(source, ctx.seed)?;
    let channels = train_ds.sample_shape().first().copied().unwrap_or(1);
    let spec = network_spec(sec.network.as_deref(), source, channels)?;
    let rows = run_sweep(&grid, &train_ds, &test_ds, &spec)?;
    ctx.write("sweep.csv", &sweep_csv(&rows))?;
    let failed = rows.iter().filter(|r| r.status != "ok").count();
    if failed > 0 {
        eprintln!("{failed} of {} cells failed; see the status column", rows.len());
    }
    Ok(())
}

fn reduce(ctx: &Ctx, args: ReduceArgs) -> Result<()> {
    let sec = &ctx.file.reduce;
    let Some(path) = args.dimacs.or_else(|| sec.dimacs.clone()) else {
        bail!("reduce needs a DIMACS file");
    };
    let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    let phi = parse_dimacs(&text).with_context(|| format!("parsing {}", path.display()))?;
    let k = args.k.or(sec.k).unwrap_or(100 * phi.b() * phi.b()).max(1);
    let samples = args.samples.or(sec.samples).unwrap_or(10_000);
    let trials = args.trials.or(sec.trials).unwrap_or(1_000);
    let report = verify(&phi, k, samples, trials, ctx.seed)?;
    ctx.write("reduce.json", &(serde_json::to_string_pretty(&report)? + "\n"))?;
    Ok(())
}

fn report(ctx: &Ctx, args: ReportArgs) -> Result<()> {
    let sec = &ctx.file.report;
    let mut data = sec.data.clone();
    data.dir = args.data_dir.clone().or(data.dir);
    let source = data.source.unwrap_or(Source::Idx);
    let mut training = sec.training.clone();
    training.epochs = args.epochs.or(training.epochs);
    let defaults = ImageSettings::mnist_subset(ctx.seed);
    let base = match source {
        Source::Idx => defaults.train,
        Source::Synthetic => TrainingSection::recipe(source, ctx.seed),
    };
    let settings = ImageSettings {
        lambda: sec.lambda.unwrap_or(defaults.lambda),
        beta: sec.beta.unwrap_or(defaults.beta),
        attack_samples: args.attack_samples.or(sec.attack_samples).unwrap_or(defaults.attack_samples),
        train: training.apply(base)?,
        attack: sec.attack.apply(AttackSection::recipe(source, ctx.seed))?,
    };
    let (train_ds, test_ds) = data.load(source, ctx.seed)?;
    let rows = run_image_tradeoff(&train_ds, &test_ds, &settings)?;
    ctx.write("tradeoff.csv", &tradeoff_csv(&rows))?;
    ctx.write("report.md", &markdown(&rows, &ctx.out))?;
    Ok(())
}

fn markdown(rows: &[mixcon::experiments::TradeoffRow], out: &Path) -> String {
    let mut md = String::from("# Privacy/utility report\n\n");
    let _ = writeln!(md, "Raw numbers: `{}`.\n", out.join("tradeoff.csv").display());
    md.push_str("| model | λ | β | test acc | mean pair dist | SSIM mean ± std (best) |\n");
    md.push_str("|---|---|---|---|---|---|\n");
    for r in rows {
        let _ = writeln!(
            md,
            "| {} | {} | {} | {:.4} | {:.4} | {:.3} ± {:.3} ({:.3}) |",
            r.model, r.lambda, r.beta, r.test_acc, r.mean_pair_dist, r.ssim.mean, r.ssim.std, r.ssim.worst
        );
    }
    md
}
