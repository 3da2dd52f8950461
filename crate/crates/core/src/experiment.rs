//! Synthetic scale-varying blob localization task, a trainer, and the
//! rate-versus-scale and dilation-group studies run on it.

use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{AdcError, Result};
use crate::model::{NetConfig, SpatialKind, ToyPoseNet};
use crate::optim::{Adam, Schedule};
use crate::stats::{mean, spearman, variance};
use crate::tensor::{read_vector, write_vector, Tensor4};

pub const SIGMA_MIN: f64 = 1.0;
pub const SIGMA_MAX: f64 = 6.0;
pub const TARGET_SIGMA: f64 = 1.5;
/// Distance kept between a blob center and the image border.
pub const CENTER_MARGIN: f64 = 4.0;

const EVAL_SALT: u64 = 0x5eed_e7a1;
const SHUFFLE_STREAM: u64 = 7;

#[derive(Clone, Debug, PartialEq)]
pub struct BlobSample {
    /// `1×1×H×W`
    pub image: Tensor4,
    /// `1×1×H×W`, peak 1 at the lattice point nearest the blob center.
    pub target: Tensor4,
    pub scale: f64,
    pub center: (f64, f64),
}

fn gaussian(size: usize, ci: f64, cj: f64, sigma: f64) -> Tensor4 {
    let inv = 1.0 / (2.0 * sigma * sigma);
    Tensor4::from_fn([1, 1, size, size], |_, _, i, j| {
        let (di, dj) = (i as f64 - ci, j as f64 - cj);
        (-(di * di + dj * dj) * inv).exp()
    })
}

/// Sample `index` of `n`: σ is log-uniform within the index's third of
/// `[SIGMA_MIN, SIGMA_MAX]`, so the σ-terciles hold equal counts.
pub fn make_sample(seed: u64, index: usize, n: usize, size: usize) -> BlobSample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    let third = tercile_slot(index, n);
    let (lo, hi) = (SIGMA_MIN.ln(), SIGMA_MAX.ln());
    let step = (hi - lo) / 3.0;
    let log_sigma = lo + step * (third as f64 + rng.random::<f64>());
    let scale = log_sigma.exp();
    let span = (size as f64 - 1.0 - 2.0 * CENTER_MARGIN).max(0.0);
    let ci = CENTER_MARGIN + span * rng.random::<f64>();
    let cj = CENTER_MARGIN + span * rng.random::<f64>();
    BlobSample {
        image: gaussian(size, ci, cj, scale),
        target: gaussian(size, ci.round(), cj.round(), TARGET_SIGMA),
        scale,
        center: (ci, cj),
    }
}

/// Which third of the σ range sample `index` of `n` is drawn from. Counts
/// per third differ by at most one and are exact when `n` is divisible by 3.
pub fn tercile_slot(index: usize, n: usize) -> usize {
    let full = 3 * (n / 3);
    if index < full {
        index % 3
    } else {
        index - full
    }
}

pub fn generate_dataset(seed: u64, n: usize, size: usize) -> Result<Vec<BlobSample>> {
    if n == 0 || size == 0 {
        return Err(AdcError::Config("dataset size and image size must be positive".into()));
    }
    Ok((0..n).into_par_iter().map(|k| make_sample(seed, k, n, size)).collect())
}

pub fn eval_seed(seed: u64) -> u64 {
    seed ^ EVAL_SALT
}

/// σ-tercile of each sample: 0 small, 1 medium, 2 large, by rank.
pub fn scale_terciles(scales: &[f64]) -> Vec<usize> {
    let n = scales.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scales[a].total_cmp(&scales[b]).then(a.cmp(&b)));
    let mut buckets = vec![0; n];
    for (rank, &k) in order.iter().enumerate() {
        buckets[k] = rank * 3 / n;
    }
    buckets
}

pub const BUCKET_NAMES: [&str; 3] = ["small", "medium", "large"];

/// Writes images, targets, scales and centers as consecutive records.
pub fn save_dataset(path: &Path, samples: &[BlobSample]) -> Result<()> {
    let mut out = BufWriter::new(fs::File::create(path)?);
    let images: Vec<Tensor4> = samples.iter().map(|s| s.image.clone()).collect();
    let targets: Vec<Tensor4> = samples.iter().map(|s| s.target.clone()).collect();
    Tensor4::stack(&images)?.write_to(&mut out)?;
    Tensor4::stack(&targets)?.write_to(&mut out)?;
    write_vector(&samples.iter().map(|s| s.scale).collect::<Vec<_>>(), &mut out)?;
    let centers: Vec<f64> = samples.iter().flat_map(|s| [s.center.0, s.center.1]).collect();
    write_vector(&centers, &mut out)?;
    out.flush()?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Vec<BlobSample>> {
    let mut input = BufReader::new(fs::File::open(path)?);
    let images = Tensor4::read_from(&mut input)?;
    let targets = Tensor4::read_from(&mut input)?;
    let scales = read_vector(&mut input)?;
    let centers = read_vector(&mut input)?;
    let n = images.batch();
    if targets.dims() != images.dims() || scales.len() != n || centers.len() != 2 * n {
        return Err(AdcError::Format("dataset records disagree on sample count".into()));
    }
    (0..n)
        .map(|k| {
            Ok(BlobSample {
                image: images.batch_item(k),
                target: targets.batch_item(k),
                scale: scales[k],
                center: (centers[2 * k], centers[2 * k + 1]),
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub schedule: Schedule,
    /// Evaluate every this many epochs; the last epoch is always evaluated.
    pub eval_every: usize,
    pub train_size: usize,
    pub eval_size: usize,
    pub image_size: usize,
    pub net: NetConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            epochs: 24,
            batch_size: 4,
            schedule: Schedule::default(),
            eval_every: 2,
            train_size: 3000,
            eval_size: 600,
            image_size: 32,
            net: NetConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        if self.epochs == 0 || self.batch_size == 0 || self.eval_every == 0 {
            return Err(AdcError::Config("epochs, batch_size and eval_every must be positive".into()));
        }
        if self.train_size == 0 || self.eval_size == 0 || self.image_size == 0 {
            return Err(AdcError::Config("dataset and image sizes must be positive".into()));
        }
        if !(self.schedule.base_lr > 0.0 && self.schedule.base_lr.is_finite()) {
            return Err(AdcError::Config("learning rate must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
}

/// Per-sample mean rate of every ADC block at one evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct RateLogRow {
    pub epoch: usize,
    pub sample: usize,
    pub block: usize,
    pub mean_rate: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: ToyPoseNet,
    pub curve: Vec<LossPoint>,
    pub rate_log: Vec<RateLogRow>,
    pub final_eval_loss: f64,
}

/// Per-sample eval outputs: MSE and, for each block, the group rates.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub loss: f64,
    pub sample_losses: Vec<f64>,
    /// `rates[sample][block]` is empty for fixed-rate blocks.
    pub rates: Vec<Vec<Vec<f64>>>,
}

pub fn evaluate(model: &ToyPoseNet, samples: &[BlobSample]) -> Result<Evaluation> {
    let parts: Vec<(f64, Vec<Vec<f64>>)> = samples
        .par_iter()
        .map(|s| {
            let out = model.forward(&s.image)?;
            let diff = out.heatmap.max_abs_diff(&s.target)?;
            if !diff.is_finite() {
                return Err(AdcError::NonFinite("evaluation output"));
            }
            let loss = out
                .heatmap
                .data()
                .iter()
                .zip(s.target.data())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                / s.target.len() as f64;
            let rates = out
                .rates
                .iter()
                .map(|r| r.as_ref().map(|r| r.matrix().row(0).to_vec()).unwrap_or_default())
                .collect();
            Ok((loss, rates))
        })
        .collect::<Result<_>>()?;
    let (sample_losses, rates): (Vec<f64>, Vec<Vec<Vec<f64>>>) = parts.into_iter().unzip();
    Ok(Evaluation {
        loss: mean(&sample_losses),
        sample_losses,
        rates,
    })
}

fn log_rates(epoch: usize, eval: &Evaluation, log: &mut Vec<RateLogRow>) {
    for (sample, blocks) in eval.rates.iter().enumerate() {
        for (block, rates) in blocks.iter().enumerate() {
            if !rates.is_empty() {
                log.push(RateLogRow {
                    epoch,
                    sample,
                    block,
                    mean_rate: mean(rates),
                });
            }
        }
    }
}

/// Mini-batch Adam on per-pixel heatmap MSE. Batches are drawn from a
/// per-epoch shuffle seeded by `config.seed`, so paired runs see the same
/// data order.
pub fn train(
    mut model: ToyPoseNet,
    config: &TrainConfig,
    train_set: &[BlobSample],
    eval_set: &[BlobSample],
) -> Result<TrainOutcome> {
    config.validate()?;
    let mut adam = Adam::new(model.param_count());
    let mut curve = Vec::new();
    let mut rate_log = Vec::new();
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut shuffle = ChaCha8Rng::seed_from_u64(config.seed);
    shuffle.set_stream(SHUFFLE_STREAM);
    let mut final_eval_loss = f64::NAN;
    for epoch in 0..config.epochs {
        order.shuffle(&mut shuffle);
        let lr = config.schedule.lr_at(epoch, config.epochs);
        let mut epoch_loss = 0.0;
        for (step, batch) in order.chunks(config.batch_size).enumerate() {
            let images: Vec<&Tensor4> = batch.iter().map(|&k| &train_set[k].image).collect();
            let targets: Vec<&Tensor4> = batch.iter().map(|&k| &train_set[k].target).collect();
            let (loss, grad) = model.batch_loss_and_grad(&images, &targets)?;
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(AdcError::Diverged { epoch, step, loss });
            }
            let update = adam.step(&grad, lr);
            model.update_params(|k, v| *v += update[k]);
            epoch_loss += loss * batch.len() as f64;
        }
        curve.push(LossPoint {
            epoch: epoch + 1,
            split: "train".into(),
            loss: epoch_loss / train_set.len() as f64,
        });
        if (epoch + 1) % config.eval_every == 0 || epoch + 1 == config.epochs {
            let eval = evaluate(&model, eval_set)?;
            curve.push(LossPoint {
                epoch: epoch + 1,
                split: "eval".into(),
                loss: eval.loss,
            });
            log_rates(epoch + 1, &eval, &mut rate_log);
            final_eval_loss = eval.loss;
        }
    }
    Ok(TrainOutcome {
        model,
        curve,
        rate_log,
        final_eval_loss,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateRow {
    pub block: usize,
    pub bucket: String,
    /// Mean of all group rates over the bucket's samples.
    pub mean: f64,
    /// Mean over the bucket's samples of the across-group rate variance.
    pub var: f64,
    /// Spearman correlation of σ with the per-sample mean rate, over all samples.
    pub spearman: f64,
    pub degenerate: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleRates {
    pub sample: usize,
    pub scale: f64,
    pub block: usize,
    pub rates: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RateAnalysis {
    pub rows: Vec<RateRow>,
    pub samples: Vec<SampleRates>,
}

impl RateAnalysis {
    /// Spearman value and degeneracy flag of each ADC block.
    pub fn block_correlations(&self) -> Vec<(usize, f64, bool)> {
        self.rows
            .iter()
            .filter(|r| r.bucket == "all")
            .map(|r| (r.block, r.spearman, r.degenerate))
            .collect()
    }
}

pub fn rate_scale_analysis(model: &ToyPoseNet, eval_set: &[BlobSample]) -> Result<RateAnalysis> {
    let eval = evaluate(model, eval_set)?;
    let scales: Vec<f64> = eval_set.iter().map(|s| s.scale).collect();
    let buckets = scale_terciles(&scales);
    let mut rows = Vec::new();
    let mut samples = Vec::new();
    for block in 0..model.blocks.len() {
        if eval.rates.first().is_none_or(|r| r[block].is_empty()) {
            continue;
        }
        let per_sample: Vec<&Vec<f64>> = eval.rates.iter().map(|r| &r[block]).collect();
        let means: Vec<f64> = per_sample.iter().map(|r| mean(r)).collect();
        let corr = spearman(&scales, &means);
        let summarize = |members: Vec<usize>, bucket: &str| RateRow {
            block,
            bucket: bucket.into(),
            mean: mean(&members.iter().map(|&k| means[k]).collect::<Vec<_>>()),
            var: mean(&members.iter().map(|&k| variance(per_sample[k])).collect::<Vec<_>>()),
            spearman: corr.value,
            degenerate: corr.degenerate,
        };
        for (b, name) in BUCKET_NAMES.iter().enumerate() {
            let members: Vec<usize> = (0..eval_set.len()).filter(|&k| buckets[k] == b).collect();
            if !members.is_empty() {
                rows.push(summarize(members, name));
            }
        }
        rows.push(summarize((0..eval_set.len()).collect(), "all"));
        for (k, r) in per_sample.iter().enumerate() {
            samples.push(SampleRates {
                sample: k,
                scale: scales[k],
                block,
                rates: r.to_vec(),
            });
        }
    }
    Ok(RateAnalysis { rows, samples })
}

/// `{1, 2, 4, C_in}` restricted to divisors of `c_in`, deduplicated.
pub fn ablation_groups(c_in: usize) -> Vec<usize> {
    let mut g: Vec<usize> = [1, 2, 4, c_in].into_iter().filter(|g| c_in % g == 0).collect();
    g.sort_unstable();
    g.dedup();
    g
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub g: usize,
    pub seed: u64,
    pub final_loss: f64,
}

/// Datasets for a config: train from `seed`, eval from a salted seed.
pub fn datasets(config: &TrainConfig) -> Result<(Vec<BlobSample>, Vec<BlobSample>)> {
    Ok((
        generate_dataset(config.seed, config.train_size, config.image_size)?,
        generate_dataset(eval_seed(config.seed), config.eval_size, config.image_size)?,
    ))
}

/// Builds the net for `config` and trains it on freshly generated data.
pub fn run(config: &TrainConfig) -> Result<TrainOutcome> {
    let (train_set, eval_set) = datasets(config)?;
    let model = ToyPoseNet::new(config.net.clone(), config.seed)?;
    train(model, config, &train_set, &eval_set)
}

/// Trains one ADC net per `(g, seed)` pair with everything else shared.
pub fn groups_ablation(config: &TrainConfig, seeds: &[u64]) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for &seed in seeds {
        for g in ablation_groups(config.net.bottleneck) {
            let mut c = config.clone();
            c.seed = seed;
            c.net.spatial = SpatialKind::Adc { groups: g };
            rows.push(AblationRow {
                g,
                seed,
                final_loss: run(&c)?.final_eval_loss,
            });
        }
    }
    Ok(rows)
}

pub fn loss_curve_csv(curve: &[LossPoint]) -> String {
    let mut s = String::from("epoch,split,loss\n");
    for p in curve {
        s.push_str(&format!("{},{},{:e}\n", p.epoch, p.split, p.loss));
    }
    s
}

pub fn rate_log_csv(log: &[RateLogRow]) -> String {
    let mut s = String::from("epoch,sample,block,mean_rate\n");
    for r in log {
        s.push_str(&format!("{},{},{},{:e}\n", r.epoch, r.sample, r.block, r.mean_rate));
    }
    s
}

pub fn rate_table_csv(rows: &[RateRow]) -> String {
    let mut s = String::from("block,bucket,mean,var,spearman,degenerate\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{:e},{:e},{:e},{}\n",
            r.block, r.bucket, r.mean, r.var, r.spearman, r.degenerate
        ));
    }
    s
}

pub fn sample_rates_csv(samples: &[SampleRates]) -> String {
    let mut s = String::from("sample,scale,block,rates\n");
    for r in samples {
        let rates: Vec<String> = r.rates.iter().map(|v| format!("{v:e}")).collect();
        s.push_str(&format!("{},{:e},{},{}\n", r.sample, r.scale, r.block, rates.join(";")));
    }
    s
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("g,seed,final_loss\n");
    for r in rows {
        s.push_str(&format!("{},{},{:e}\n", r.g, r.seed, r.final_loss));
    }
    s
}

/// Loads the datasets for `config` from `dir`, generating and caching them
/// on first use.
pub fn cached_datasets(config: &TrainConfig, dir: &Path) -> Result<(Vec<BlobSample>, Vec<BlobSample>)> {
    fs::create_dir_all(dir)?;
    let get = |seed: u64, n: usize| -> Result<Vec<BlobSample>> {
        let path = dir.join(format!("blobs_s{seed}_n{n}_{0}x{0}.bin", config.image_size));
        if path.exists() {
            let data = load_dataset(&path)?;
            if data.len() == n {
                return Ok(data);
            }
        }
        let data = generate_dataset(seed, n, config.image_size)?;
        save_dataset(&path, &data)?;
        Ok(data)
    };
    Ok((get(config.seed, config.train_size)?, get(eval_seed(config.seed), config.eval_size)?))
}

pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const RUN_CONFIG: &str = "train_config.json";

/// Writes the analysis CSVs into `dir` and returns their paths.
pub fn save_analysis(dir: &Path, analysis: &RateAnalysis) -> Result<Vec<std::path::PathBuf>> {
    fs::create_dir_all(dir)?;
    let table = dir.join("rate_table.csv");
    let samples = dir.join("sample_rates.csv");
    fs::write(&table, rate_table_csv(&analysis.rows))?;
    fs::write(&samples, sample_rates_csv(&analysis.samples))?;
    Ok(vec![table, samples])
}

/// Writes the checkpoint, its training config, the loss curve, the rate
/// log and, for ADC nets, the rate analysis on `eval_set`.
pub fn save_run(
    dir: &Path,
    config: &TrainConfig,
    outcome: &TrainOutcome,
    eval_set: &[BlobSample],
) -> Result<Vec<std::path::PathBuf>> {
    let ckpt = dir.join(CHECKPOINT_DIR);
    outcome.model.save(&ckpt)?;
    fs::write(ckpt.join(RUN_CONFIG), serde_json::to_string_pretty(config)? + "\n")?;
    let curve = dir.join("loss_curve.csv");
    fs::write(&curve, loss_curve_csv(&outcome.curve))?;
    let mut paths = vec![ckpt.join("manifest.json"), ckpt.join("params.bin"), ckpt.join(RUN_CONFIG), curve];
    if !outcome.rate_log.is_empty() {
        let log = dir.join("rate_log.csv");
        fs::write(&log, rate_log_csv(&outcome.rate_log))?;
        paths.push(log);
        paths.extend(save_analysis(dir, &rate_scale_analysis(&outcome.model, eval_set)?)?);
    }
    Ok(paths)
}

/// Reloads a checkpoint written by [`save_run`] with its training config.
pub fn load_run(checkpoint: &Path) -> Result<(ToyPoseNet, TrainConfig)> {
    let model = ToyPoseNet::load(checkpoint)?;
    let config: TrainConfig = serde_json::from_str(&fs::read_to_string(checkpoint.join(RUN_CONFIG))?)?;
    Ok((model, config))
}
