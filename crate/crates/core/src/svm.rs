//! One-vs-all linear SVM on pooled features, and the fold evaluation protocol.

use std::path::Path;

use byteorder::{ByteOrder, LittleEndian};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};
use crate::features::FeatureMatrix;
use crate::nn::{derive_seed, Workers};

pub const SVM_MAGIC: &[u8; 8] = b"SCNNSVM1";
const STD_FLOOR: f64 = 1e-8;

/// Per-column mean and standard deviation fitted on training rows.
#[derive(Clone, Debug, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl Standardizer {
    /// Population statistics; deviations below `1e-8` are floored.
    pub fn fit(x: &FeatureMatrix) -> Result<Self> {
        if x.rows == 0 {
            return Err(Error::Contract("cannot standardize an empty matrix".into()));
        }
        let n = x.rows as f64;
        let mut mean = vec![0f64; x.cols];
        for r in 0..x.rows {
            mean.iter_mut().zip(x.row(r)).for_each(|(m, &v)| *m += v as f64);
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0f64; x.cols];
        for r in 0..x.rows {
            for ((s, &v), m) in var.iter_mut().zip(x.row(r)).zip(&mean) {
                *s += (v as f64 - m).powi(2);
            }
        }
        Ok(Self {
            mean: mean.iter().map(|&m| m as f32).collect(),
            std: var.iter().map(|&s| (s / n).sqrt().max(STD_FLOOR) as f32).collect(),
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn apply_row(&self, row: &[f32], out: &mut [f32]) {
        for (((o, &v), &m), &s) in out.iter_mut().zip(row).zip(&self.mean).zip(&self.std) {
            *o = ((v as f64 - m as f64) / s as f64) as f32;
        }
    }

    pub fn apply(&self, x: &FeatureMatrix) -> Result<FeatureMatrix> {
        if x.cols != self.dim() {
            return Err(Error::Contract(format!(
                "feature dim {} does not match standardizer dim {}",
                x.cols,
                self.dim()
            )));
        }
        let mut data = vec![0f32; x.data.len()];
        for (r, out) in data.chunks_exact_mut(x.cols.max(1)).enumerate().take(x.rows) {
            self.apply_row(x.row(r), out);
        }
        FeatureMatrix::new(x.rows, x.cols, data)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SvmConfig {
    pub lambda: f64,
    pub epochs: usize,
    pub seed: u64,
    /// Worker threads; 1 runs strictly sequentially, 0 uses all cores.
    pub threads: usize,
}

impl Default for SvmConfig {
    fn default() -> Self {
        Self {
            lambda: 1e-4,
            epochs: 20,
            seed: 0,
            threads: 1,
        }
    }
}

impl SvmConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("svm lambda must be positive, got {}", self.lambda)));
        }
        if self.epochs == 0 {
            return Err(Error::Config("svm epochs must be at least 1".into()));
        }
        Ok(())
    }
}

/// `classes` one-vs-all hyperplanes over standardized features.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearModel {
    pub classes: usize,
    pub dim: usize,
    /// Row-major `classes x dim`.
    pub weights: Vec<f32>,
    pub bias: Vec<f32>,
    pub standardizer: Standardizer,
    pub lambda: f64,
}

pub trait Classifier {
    fn predict(&self, x: &FeatureMatrix) -> Result<Vec<u32>>;
}

impl LinearModel {
    /// Per-class scores `W_k . standardize(x) + b_k`, row-major `rows x classes`.
    pub fn scores(&self, x: &FeatureMatrix) -> Result<Vec<f64>> {
        let z = self.standardizer.apply(x)?;
        let mut out = Vec::with_capacity(x.rows * self.classes);
        for r in 0..z.rows {
            let row = z.row(r);
            for k in 0..self.classes {
                out.push(dot(&self.weights[k * self.dim..(k + 1) * self.dim], row) + self.bias[k] as f64);
            }
        }
        Ok(out)
    }

    pub fn encode(&self) -> Vec<u8> {
        let (k, d) = (self.classes, self.dim);
        let floats = k * d + k + 2 * d;
        let mut out = vec![0u8; 16 + 4 * floats + 8];
        out[..8].copy_from_slice(SVM_MAGIC);
        LittleEndian::write_u32(&mut out[8..12], k as u32);
        LittleEndian::write_u32(&mut out[12..16], d as u32);
        let mut off = 16;
        for buf in [&self.weights, &self.bias, &self.standardizer.mean, &self.standardizer.std] {
            LittleEndian::write_f32_into(buf, &mut out[off..off + 4 * buf.len()]);
            off += 4 * buf.len();
        }
        LittleEndian::write_f64(&mut out[off..], self.lambda);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 {
            return Err(Error::format("svm model", bytes.len() as u64, "truncated header"));
        }
        if &bytes[..8] != SVM_MAGIC {
            return Err(Error::format("svm model", 0, "bad magic"));
        }
        let k = LittleEndian::read_u32(&bytes[8..12]) as usize;
        let d = LittleEndian::read_u32(&bytes[12..16]) as usize;
        let need = 16 + 4 * (k * d + k + 2 * d) + 8;
        if bytes.len() != need {
            return Err(Error::format(
                "svm model",
                bytes.len().min(need) as u64,
                format!("{k} classes x {d} dims need {need} bytes, file has {}", bytes.len()),
            ));
        }
        let mut off = 16;
        let mut take = |n: usize| {
            let mut v = vec![0f32; n];
            LittleEndian::read_f32_into(&bytes[off..off + 4 * n], &mut v);
            off += 4 * n;
            v
        };
        let weights = take(k * d);
        let bias = take(k);
        let mean = take(d);
        let std = take(d);
        Ok(Self {
            classes: k,
            dim: d,
            weights,
            bias,
            standardizer: Standardizer { mean, std },
            lambda: LittleEndian::read_f64(&bytes[need - 8..]),
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()).at(path)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::decode(&std::fs::read(path).at(path)?)
    }
}

impl Classifier for LinearModel {
    /// Argmax of the class scores; ties go to the smaller class id.
    fn predict(&self, x: &FeatureMatrix) -> Result<Vec<u32>> {
        let s = self.scores(x)?;
        Ok(s.chunks_exact(self.classes.max(1)).map(argmax).collect())
    }
}

pub fn predict(model: &LinearModel, x: &FeatureMatrix) -> Result<Vec<u32>> {
    model.predict(x)
}

fn argmax(row: &[f64]) -> u32 {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best as u32
}

fn dot(w: &[f32], x: &[f32]) -> f64 {
    w.iter().zip(x).map(|(&a, &b)| a as f64 * b as f64).sum()
}

fn dot64(w: &[f64], x: &[f32]) -> f64 {
    w.iter().zip(x).map(|(&a, &b)| a * b as f64).sum()
}

/// `lambda/2 |w|^2 + mean_i max(0, 1 - y_i (w . x_i + b))`.
pub fn binary_objective(w: &[f64], b: f64, z: &FeatureMatrix, y: &[f64], lambda: f64) -> f64 {
    let reg = 0.5 * lambda * w.iter().map(|v| v * v).sum::<f64>();
    let hinge: f64 = (0..z.rows)
        .map(|r| (1.0 - y[r] * (dot64(w, z.row(r)) + b)).max(0.0))
        .sum();
    reg + hinge / z.rows.max(1) as f64
}

/// Per-class objectives on the full training set: entry 0 is the zero model,
/// entry `e` the model returned after epoch `e`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SvmLog {
    pub objectives: Vec<Vec<f64>>,
}

/// Bias minimizing the mean hinge loss for fixed scores `s`. The loss is
/// piecewise linear in `b` with a kink per row; its slope reaches zero after
/// as many kinks as there are positive rows. Returns the middle of that flat
/// stretch.
pub fn optimal_bias(scores: &[f64], y: &[f64]) -> f64 {
    let mut kinks: Vec<f64> = scores
        .iter()
        .zip(y)
        .map(|(&s, &yi)| if yi > 0.0 { 1.0 - s } else { -1.0 - s })
        .collect();
    kinks.sort_by(f64::total_cmp);
    let positives = y.iter().filter(|&&v| v > 0.0).count();
    match positives {
        0 => kinks.first().copied().unwrap_or(0.0),
        p if p == kinks.len() => kinks[p - 1],
        p => 0.5 * (kinks[p - 1] + kinks[p]),
    }
}

/// Stochastic subgradient descent on one binary problem. Weights take steps
/// of `1/(lambda t)`; the unregularized bias is held fixed within an epoch
/// and set to its exact minimizer at each epoch boundary. The model reported
/// for an epoch is the average of that epoch's weight iterates with its
/// optimal bias.
pub fn train_binary(z: &FeatureMatrix, y: &[f64], cfg: &SvmConfig, seed: u64) -> (Vec<f64>, f64, Vec<f64>) {
    let (n, d) = (z.rows, z.cols);
    let mut w = vec![0f64; d];
    let mut b = 0f64;
    let mut avg_w = vec![0f64; d];
    let mut objectives = vec![binary_objective(&w, b, z, y, cfg.lambda)];
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t = 0usize;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        avg_w.iter_mut().for_each(|v| *v = 0.0);
        for &i in &order {
            t += 1;
            let eta = 1.0 / (cfg.lambda * t as f64);
            let x = z.row(i);
            let margin = y[i] * (dot64(&w, x) + b);
            let shrink = 1.0 - eta * cfg.lambda;
            w.iter_mut().for_each(|v| *v *= shrink);
            if margin < 1.0 {
                let step = eta * y[i];
                w.iter_mut().zip(x).for_each(|(v, &xv)| *v += step * xv as f64);
            }
            avg_w.iter_mut().zip(&w).for_each(|(a, v)| *a += v);
        }
        avg_w.iter_mut().for_each(|v| *v /= n as f64);
        let scores: Vec<f64> = (0..n).map(|r| dot64(&w, z.row(r))).collect();
        b = optimal_bias(&scores, y);
        let avg_scores: Vec<f64> = (0..n).map(|r| dot64(&avg_w, z.row(r))).collect();
        let avg_b = optimal_bias(&avg_scores, y);
        objectives.push(binary_objective(&avg_w, avg_b, z, y, cfg.lambda));
        if objectives.len() == cfg.epochs + 1 {
            return (avg_w, avg_b, objectives);
        }
    }
    (w, b, objectives)
}

/// Trains one binary classifier per class (class `k` against the rest).
pub fn train_ova(x: &FeatureMatrix, labels: &[u32], cfg: &SvmConfig) -> Result<(LinearModel, SvmLog)> {
    cfg.validate()?;
    if labels.len() != x.rows {
        return Err(Error::Contract(format!("{} labels for {} rows", labels.len(), x.rows)));
    }
    let classes = labels.iter().max().map_or(0, |&m| m as usize + 1);
    let present = {
        let mut seen = vec![false; classes];
        labels.iter().for_each(|&l| seen[l as usize] = true);
        seen.iter().filter(|&&s| s).count()
    };
    if present < 2 {
        return Err(Error::Contract(format!("one-vs-all needs at least 2 classes, found {present}")));
    }
    let standardizer = Standardizer::fit(x)?;
    let z = standardizer.apply(x)?;
    let workers = Workers::new(cfg.threads)?;
    let per_class = workers.map(classes, |k| {
        let y: Vec<f64> = labels.iter().map(|&l| if l as usize == k { 1.0 } else { -1.0 }).collect();
        train_binary(&z, &y, cfg, derive_seed(cfg.seed, &[k as u64]))
    });
    let mut weights = Vec::with_capacity(classes * x.cols);
    let mut bias = Vec::with_capacity(classes);
    let mut log = SvmLog::default();
    for (w, b, obj) in per_class {
        weights.extend(w.iter().map(|&v| v as f32));
        bias.push(b as f32);
        log.objectives.push(obj);
    }
    let model = LinearModel {
        classes,
        dim: x.cols,
        weights,
        bias,
        standardizer,
        lambda: cfg.lambda,
    };
    Ok((model, log))
}

pub fn accuracy(predicted: &[u32], truth: &[u32]) -> f64 {
    if truth.is_empty() {
        return 0.0;
    }
    predicted.iter().zip(truth).filter(|(p, t)| p == t).count() as f64 / truth.len() as f64
}

#[derive(Clone, Debug, PartialEq)]
pub struct FoldReport {
    pub accuracies: Vec<f64>,
    pub mean: f64,
}

/// Fits one classifier per fold on that fold's training rows and scores each
/// on the whole test set.
pub fn evaluate_stl_folds<C: Classifier>(
    build: impl Fn(&FeatureMatrix, &[u32]) -> Result<C>,
    train_x: &FeatureMatrix,
    train_y: &[u32],
    folds: &[Vec<usize>],
    test_x: &FeatureMatrix,
    test_y: &[u32],
) -> Result<FoldReport> {
    if train_y.len() != train_x.rows || test_y.len() != test_x.rows {
        return Err(Error::Contract("label count does not match feature rows".into()));
    }
    let mut accuracies = Vec::with_capacity(folds.len());
    for (f, fold) in folds.iter().enumerate() {
        if fold.is_empty() {
            return Err(Error::Contract(format!("fold {f} is empty")));
        }
        let fx = train_x.select(fold)?;
        let fy: Vec<u32> = fold.iter().map(|&i| train_y[i]).collect();
        let clf = build(&fx, &fy)?;
        accuracies.push(accuracy(&clf.predict(test_x)?, test_y));
    }
    let mean = accuracies.iter().sum::<f64>() / accuracies.len().max(1) as f64;
    Ok(FoldReport { accuracies, mean })
}
