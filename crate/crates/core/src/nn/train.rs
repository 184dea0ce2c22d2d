use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::model::{Gradients, Mode, ModelParams};
use super::spec::{NetworkSpec, INPUT_SHAPE};
use super::Tensor4;
use crate::data::RawImage;
use crate::error::{Error, Result};
use crate::surrogate::SurrogateExample;

/// Samples per gradient chunk. Chunks are the unit of parallel work and are
/// always reduced in index order, so results do not depend on thread count.
pub const GRAD_CHUNK: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub base_lr: f64,
    /// Multiplier applied every `lr_step_epochs`.
    pub lr_decay: f64,
    /// Defaults to two thirds of `epochs`, rounded.
    pub lr_step_epochs: Option<usize>,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Worker threads; 1 runs strictly sequentially, 0 uses all cores.
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            base_lr: 0.01,
            lr_decay: 0.1,
            lr_step_epochs: None,
            momentum: 0.9,
            weight_decay: 5e-4,
            batch_size: 128,
            epochs: 30,
            seed: 0,
            threads: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::Config(format!("base_lr must be positive, got {}", self.base_lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        if !(self.lr_decay > 0.0) || self.weight_decay < 0.0 {
            return Err(Error::Config("lr_decay must be positive and weight_decay nonnegative".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.lr_step_epochs == Some(0) {
            return Err(Error::Config("lr_step_epochs must be at least 1".into()));
        }
        Ok(())
    }

    pub fn step_epochs(&self) -> usize {
        self.lr_step_epochs
            .unwrap_or_else(|| (self.epochs as f64 * 2.0 / 3.0).round() as usize)
            .max(1)
    }

    /// Learning rate used throughout the 0-based `epoch`.
    pub fn learning_rate(&self, epoch: usize) -> f64 {
        self.base_lr * self.lr_decay.powi((epoch / self.step_epochs()) as i32)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub learning_rate: f64,
    pub mean_loss: f64,
    pub holdout_accuracy: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub epochs: Vec<EpochStats>,
}

impl TrainLog {
    pub const CSV_HEADER: &'static str = "epoch,learning_rate,mean_loss,holdout_accuracy";

    /// One row per epoch; a missing holdout accuracy is an empty field.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for e in &self.epochs {
            let acc = e.holdout_accuracy.map(|a| a.to_string()).unwrap_or_default();
            out.push_str(&format!("{},{},{},{}\n", e.epoch, e.learning_rate, e.mean_loss, acc));
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let mut offset = 0u64;
        match lines.next() {
            Some(h) if h == Self::CSV_HEADER => offset += h.len() as u64 + 1,
            _ => return Err(Error::format("training log", 0, "missing header")),
        }
        let mut epochs = Vec::new();
        for line in lines {
            let bad = |msg: &str| Error::format("training log", offset, msg.to_string());
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 4 {
                return Err(bad("expected 4 fields"));
            }
            epochs.push(EpochStats {
                epoch: f[0].parse().map_err(|_| bad("bad epoch"))?,
                learning_rate: f[1].parse().map_err(|_| bad("bad learning rate"))?,
                mean_loss: f[2].parse().map_err(|_| bad("bad loss"))?,
                holdout_accuracy: match f[3] {
                    "" => None,
                    a => Some(a.parse().map_err(|_| bad("bad accuracy"))?),
                },
            });
            offset += line.len() as u64 + 1;
        }
        Ok(Self { epochs })
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mixes a base seed with a path of indices into an independent seed.
pub fn derive_seed(seed: u64, path: &[u64]) -> u64 {
    path.iter().fold(splitmix(seed), |acc, &p| splitmix(acc ^ splitmix(p)))
}

const INIT_TAG: u64 = 1;
const SHUFFLE_TAG: u64 = 2;
const DROPOUT_TAG: u64 = 3;

/// Stacks 32x32 RGB images into an `N x 3 x 32 x 32` tensor of `pixel/255 - 0.5`.
pub fn normalize_batch<'a>(images: impl ExactSizeIterator<Item = &'a RawImage>) -> Result<Tensor4<f32>> {
    let [c, h, w] = INPUT_SHAPE;
    let n = images.len();
    let mut out = Tensor4::zeros([n, c, h, w]);
    for (i, img) in images.enumerate() {
        if img.width() != w || img.height() != h {
            return Err(Error::Contract(format!(
                "network input must be {w}x{h}, image {i} is {}x{}",
                img.width(),
                img.height()
            )));
        }
        let sample = out.sample_mut(i);
        for (p, rgb) in img.pixels().chunks_exact(3).enumerate() {
            for ch in 0..3 {
                sample[ch * h * w + p] = rgb[ch] as f32 / 255.0 - 0.5;
            }
        }
    }
    Ok(out)
}

fn check_labels(examples: &[SurrogateExample], classes: usize) -> Result<()> {
    match examples.iter().position(|e| e.label as usize >= classes) {
        Some(i) => Err(Error::Contract(format!(
            "example {i} has label {} but the network has {classes} classes",
            examples[i].label
        ))),
        None => Ok(()),
    }
}

/// Runs `f` on the configured pool; `threads == 1` stays on the calling thread.
pub(crate) struct Workers(Option<rayon::ThreadPool>);

impl Workers {
    pub(crate) fn new(threads: usize) -> Result<Self> {
        if threads == 1 {
            return Ok(Self(None));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map(|p| Self(Some(p)))
            .map_err(|e| Error::Config(format!("cannot start {threads} worker threads: {e}")))
    }

    pub(crate) fn parallel(&self) -> bool {
        self.0.is_some()
    }

    pub(crate) fn install<R: Send>(&self, f: impl FnOnce() -> R + Send) -> R {
        match &self.0 {
            Some(p) => p.install(f),
            None => f(),
        }
    }

    /// Maps `f` over `0..n`, returning results in index order.
    pub(crate) fn map<R: Send>(&self, n: usize, f: impl Fn(usize) -> R + Sync + Send) -> Vec<R> {
        if self.parallel() {
            self.install(|| (0..n).into_par_iter().map(&f).collect())
        } else {
            (0..n).map(f).collect()
        }
    }
}

/// Fraction of `examples` the model classifies correctly.
pub fn evaluate_accuracy(model: &ModelParams<f32>, examples: &[SurrogateExample], threads: usize) -> Result<f64> {
    if examples.is_empty() {
        return Ok(0.0);
    }
    let workers = Workers::new(threads)?;
    let chunks: Vec<&[SurrogateExample]> = examples.chunks(GRAD_CHUNK * 4).collect();
    let hits = workers.map(chunks.len(), |i| -> Result<usize> {
        let chunk = chunks[i];
        let x = normalize_batch(chunk.iter().map(|e| &e.image))?;
        let pred = model.predict(&x)?;
        Ok(pred.iter().zip(chunk).filter(|(p, e)| **p == e.label).count())
    });
    let mut correct = 0;
    for h in hits {
        correct += h?;
    }
    Ok(correct as f64 / examples.len() as f64)
}

/// Mini-batch SGD with momentum and weight decay over seeded shuffled epochs.
pub struct Trainer<'a> {
    model: ModelParams<f32>,
    velocity: Gradients<f32>,
    cfg: TrainConfig,
    train: &'a [SurrogateExample],
    holdout: &'a [SurrogateExample],
    epoch: usize,
    log: TrainLog,
    workers: Workers,
}

impl<'a> Trainer<'a> {
    /// Fresh model initialized from `cfg.seed`.
    pub fn new(
        spec: NetworkSpec,
        cfg: TrainConfig,
        train: &'a [SurrogateExample],
        holdout: &'a [SurrogateExample],
    ) -> Result<Self> {
        let model = ModelParams::new(spec, INPUT_SHAPE, derive_seed(cfg.seed, &[INIT_TAG]))?;
        Self::with_model(model, cfg, train, holdout)
    }

    pub fn with_model(
        model: ModelParams<f32>,
        cfg: TrainConfig,
        train: &'a [SurrogateExample],
        holdout: &'a [SurrogateExample],
    ) -> Result<Self> {
        cfg.validate()?;
        check_labels(train, model.classes())?;
        check_labels(holdout, model.classes())?;
        if train.is_empty() {
            return Err(Error::Contract("training set is empty".into()));
        }
        let velocity = Gradients::zeros_like(&model);
        let workers = Workers::new(cfg.threads)?;
        Ok(Self {
            model,
            velocity,
            cfg,
            train,
            holdout,
            epoch: 0,
            log: TrainLog::default(),
            workers,
        })
    }

    /// Continues from a checkpoint. The log starts empty; see [`Trainer::with_log`].
    pub fn resume(
        ckpt: &Checkpoint,
        spec: NetworkSpec,
        cfg: TrainConfig,
        train: &'a [SurrogateExample],
        holdout: &'a [SurrogateExample],
    ) -> Result<Self> {
        let (model, velocity) = ckpt.restore(spec, INPUT_SHAPE)?;
        let mut t = Self::with_model(model, cfg, train, holdout)?;
        t.velocity = velocity;
        t.epoch = ckpt.epoch as usize;
        Ok(t)
    }

    /// Replaces the log, e.g. with the entries recorded before a resume.
    pub fn with_log(mut self, log: TrainLog) -> Self {
        self.log = log;
        self
    }

    /// Number of completed epochs.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn finished(&self) -> bool {
        self.epoch >= self.cfg.epochs
    }

    pub fn model(&self) -> &ModelParams<f32> {
        &self.model
    }

    pub fn log(&self) -> &TrainLog {
        &self.log
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn into_parts(self) -> (ModelParams<f32>, TrainLog) {
        (self.model, self.log)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::capture(&self.model, &self.velocity, self.epoch as u32)
    }

    fn epoch_order(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.train.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.cfg.seed, &[SHUFFLE_TAG]));
        rng.set_stream(self.epoch as u64);
        order.shuffle(&mut rng);
        order
    }

    fn batch_gradient(&self, batch_idx: usize, batch: &[usize]) -> Result<(f64, Gradients<f32>)> {
        let scale = 1.0 / batch.len() as f32;
        let chunks: Vec<&[usize]> = batch.chunks(GRAD_CHUNK).collect();
        let (epoch, seed, train, model) = (self.epoch, self.cfg.seed, self.train, &self.model);
        let chunk_grad = |c: usize| -> Result<(f64, Gradients<f32>)> {
            let idx = chunks[c];
            let x = normalize_batch(idx.iter().map(|&i| &train[i].image))?;
            let labels: Vec<u32> = idx.iter().map(|&i| train[i].label).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
                seed,
                &[DROPOUT_TAG, epoch as u64, batch_idx as u64, c as u64],
            ));
            model.loss_and_grad(&x, &labels, Mode::Train, &mut rng, scale)
        };
        let mut total: Option<(f64, Gradients<f32>)> = None;
        let mut reduce = |r: Result<(f64, Gradients<f32>)>| -> Result<()> {
            let (loss, g) = r?;
            match &mut total {
                None => total = Some((loss, g)),
                Some((l, acc)) => {
                    *l += loss;
                    acc.add_assign(&g);
                }
            }
            Ok(())
        };
        if self.workers.parallel() {
            let width = self.workers.install(rayon::current_num_threads).max(1);
            for start in (0..chunks.len()).step_by(width) {
                let end = (start + width).min(chunks.len());
                let group = self
                    .workers
                    .install(|| (start..end).into_par_iter().map(chunk_grad).collect::<Vec<_>>());
                for r in group {
                    reduce(r)?;
                }
            }
        } else {
            for c in 0..chunks.len() {
                reduce(chunk_grad(c))?;
            }
        }
        Ok(total.expect("batch is non-empty"))
    }

    fn apply_update(&mut self, grads: &Gradients<f32>, lr: f32) {
        let mu = self.cfg.momentum as f32;
        let wd = self.cfg.weight_decay as f32;
        let layers = self.model.layers.iter_mut().zip(&mut self.velocity.layers).zip(&grads.layers);
        for ((p, v), g) in layers {
            for (w, (vel, gr)) in p.weights.iter_mut().zip(v.weights.iter_mut().zip(&g.weights)) {
                *vel = mu * *vel + lr * (*gr + wd * *w);
                *w -= *vel;
            }
            for (b, (vel, gr)) in p.bias.iter_mut().zip(v.bias.iter_mut().zip(&g.bias)) {
                *vel = mu * *vel + lr * *gr;
                *b -= *vel;
            }
        }
    }

    /// Runs one epoch and appends its statistics to the log.
    pub fn run_epoch(&mut self) -> Result<EpochStats> {
        let lr = self.cfg.learning_rate(self.epoch);
        let order = self.epoch_order();
        let mut loss_sum = 0.0;
        for (b, batch) in order.chunks(self.cfg.batch_size).enumerate() {
            let diverged = Error::Divergence {
                epoch: self.epoch,
                batch: b,
            };
            let (loss, grads) = match self.batch_gradient(b, batch) {
                Err(Error::Numeric(_)) => return Err(diverged),
                r => r?,
            };
            if !loss.is_finite() || !grads.all_finite() {
                return Err(diverged);
            }
            loss_sum += loss;
            self.apply_update(&grads, lr as f32);
        }
        let holdout_accuracy = if self.holdout.is_empty() {
            None
        } else {
            Some(evaluate_accuracy(&self.model, self.holdout, self.cfg.threads)?)
        };
        let stats = EpochStats {
            epoch: self.epoch,
            learning_rate: lr,
            mean_loss: loss_sum / self.train.len() as f64,
            holdout_accuracy,
        };
        self.epoch += 1;
        self.log.epochs.push(stats.clone());
        Ok(stats)
    }

    /// Runs the remaining epochs, calling `after_epoch` after each one.
    pub fn run(&mut self, mut after_epoch: impl FnMut(&Self, &EpochStats) -> Result<()>) -> Result<()> {
        while !self.finished() {
            let stats = self.run_epoch()?;
            after_epoch(self, &stats)?;
        }
        Ok(())
    }
}

/// Trains a fresh `spec` network on `train` for `cfg.epochs` epochs.
pub fn train(
    train: &[SurrogateExample],
    holdout: &[SurrogateExample],
    spec: NetworkSpec,
    cfg: &TrainConfig,
) -> Result<(ModelParams<f32>, TrainLog)> {
    let mut t = Trainer::new(spec, cfg.clone(), train, holdout)?;
    t.run(|_, _| Ok(()))?;
    Ok(t.into_parts())
}
