//! Text and CSV renderings of stage results.
//!
//! Reports never contain wall-clock values; timings go to a separate file so
//! that two identical runs produce identical reports.

use std::fmt::Write;

use crate::nn::TrainLog;

/// Full-scale reference accuracies (percent), reached with the complete
/// 100k-image unlabeled split and thousands of surrogate classes. Desk-scale
/// runs are not expected to approach them.
///
/// | setting | accuracy |
/// |---|---|
/// | STL-10, 64-128-256_512, C = 20000 | 61.04 |
/// | STL-10, 92-256-512_1024, C = 25000 | 61.94 |
/// | CIFAR-10 transfer, 92-256-512_1024 | 75.17 |
/// | CIFAR-100 transfer, 92-256-512_1024 | 51.27 |
pub const FULL_SCALE_TARGETS: [(&str, f64); 4] = [
    ("stl10 64-128-256_512 C=20000", 61.04),
    ("stl10 92-256-512_1024 C=25000", 61.94),
    ("cifar10 transfer 92-256-512_1024", 75.17),
    ("cifar100 transfer 92-256-512_1024", 51.27),
];

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ProposalStats {
    pub images: usize,
    pub total: usize,
    pub min: usize,
    pub median: usize,
    pub max: usize,
    pub mean: f64,
}

impl ProposalStats {
    pub fn from_counts(counts: &[usize]) -> Self {
        if counts.is_empty() {
            return Self::default();
        }
        let mut sorted = counts.to_vec();
        sorted.sort_unstable();
        let total: usize = counts.iter().sum();
        Self {
            images: counts.len(),
            total,
            min: sorted[0],
            median: sorted[sorted.len() / 2],
            max: sorted[sorted.len() - 1],
            mean: total as f64 / counts.len() as f64,
        }
    }

    pub fn summary(&self) -> String {
        format!(
            "{} images, {} boxes; per image min {} median {} mean {:.2} max {}",
            self.images, self.total, self.min, self.median, self.mean, self.max
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunReport {
    pub classes: usize,
    pub architecture: String,
    pub proposals: ProposalStats,
    pub surrogate_examples: usize,
    pub training: TrainLog,
    pub feature_dim: usize,
    pub folds: Vec<usize>,
    pub fold_accuracies: Vec<f64>,
    pub mean_accuracy: f64,
    /// `(stage, seconds)`; rendered only by [`RunReport::timings_text`].
    pub timings: Vec<(String, f64)>,
}

impl RunReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "architecture      {}", self.architecture);
        let _ = writeln!(s, "classes           {}", self.classes);
        let _ = writeln!(s, "proposals         {}", self.proposals.summary());
        let _ = writeln!(s, "surrogate set     {} examples", self.surrogate_examples);
        let _ = writeln!(s, "feature dim       {}", self.feature_dim);
        let _ = writeln!(s);
        let _ = writeln!(s, "epoch  lr          mean loss   holdout acc");
        for e in &self.training.epochs {
            let acc = e.holdout_accuracy.map_or("-".to_string(), |a| format!("{a:.4}"));
            let _ = writeln!(s, "{:<6} {:<11.3e} {:<11.6} {}", e.epoch, e.learning_rate, e.mean_loss, acc);
        }
        let _ = writeln!(s);
        let _ = writeln!(s, "fold  accuracy");
        for (f, a) in self.folds.iter().zip(&self.fold_accuracies) {
            let _ = writeln!(s, "{f:<5} {:.2}", 100.0 * a);
        }
        let _ = writeln!(s, "mean  {:.2}", 100.0 * self.mean_accuracy);
        s
    }

    /// One row per fold plus a `mean` row, accuracies as fractions.
    pub fn folds_csv(&self) -> String {
        let mut s = String::from("fold,accuracy\n");
        for (f, a) in self.folds.iter().zip(&self.fold_accuracies) {
            let _ = writeln!(s, "{f},{a}");
        }
        let _ = writeln!(s, "mean,{}", self.mean_accuracy);
        s
    }

    pub fn timings_text(&self) -> String {
        let mut s = String::new();
        for (stage, secs) in &self.timings {
            let _ = writeln!(s, "{stage:<12} {secs:.3}s");
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentRow {
    pub classes: usize,
    pub architecture: String,
    pub mean_accuracy: f64,
}

pub fn experiment_table(rows: &[ExperimentRow]) -> String {
    let arch_w = rows.iter().map(|r| r.architecture.len()).max().unwrap_or(0).max("architecture".len());
    let mut s = format!("{:>8}  {:<arch_w$}  {:>8}\n", "C", "architecture", "accuracy");
    for r in rows {
        let _ = writeln!(s, "{:>8}  {:<arch_w$}  {:>8.2}", r.classes, r.architecture, 100.0 * r.mean_accuracy);
    }
    s
}

pub fn experiment_csv(rows: &[ExperimentRow]) -> String {
    let mut s = String::from("classes,architecture,mean_accuracy\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{}", r.classes, r.architecture, r.mean_accuracy);
    }
    s
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransferReport {
    pub target: String,
    pub architecture: String,
    pub classes: usize,
    pub train_rows: usize,
    pub test_rows: usize,
    pub feature_dim: usize,
    pub accuracy: f64,
}

impl TransferReport {
    pub fn to_text(&self) -> String {
        format!(
            "target            {}\narchitecture      {}\nsurrogate classes {}\ntrain rows        {}\ntest rows         {}\nfeature dim       {}\naccuracy          {} ({:.2}%)\n",
            self.target,
            self.architecture,
            self.classes,
            self.train_rows,
            self.test_rows,
            self.feature_dim,
            self.accuracy,
            100.0 * self.accuracy
        )
    }
}
