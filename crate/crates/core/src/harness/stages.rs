use std::cell::RefCell;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use super::config::ExperimentConfig;
use super::manifest::{key_of, write_atomic, Manifest};
use super::report::{
    experiment_csv, experiment_table, ExperimentRow, ProposalStats, RunReport, TransferReport,
};
use crate::data::cifar::load_cifar;
use crate::data::stl10::{self, StlReader};
use crate::data::{DatasetKind, DatasetSpec, LabeledExample, RawImage};
use crate::error::{Error, IoContext, Result};
use crate::features::{extract_features, FeatureMatrix};
use crate::nn::{derive_seed, Checkpoint, NetworkSpec, TrainConfig, TrainLog, Trainer, Workers, INPUT_SHAPE};
use crate::proposals::{cache, selective_search, ProposalSet};
use crate::surrogate::{
    build_surrogate_dataset, count_proposals, select_top_classes, shuffle_split, SurrogateDataset, DATASET_MAGIC,
    PATCH_SIDE,
};
use crate::svm::{accuracy, evaluate_stl_folds, predict, train_ova, LinearModel};

pub const PROPOSALS_FILE: &str = "proposals.bin";
pub const EXPERIMENT_TABLE: &str = "experiment.txt";
pub const EXPERIMENT_CSV: &str = "experiment.csv";

const HOLDOUT_TAG: u64 = 4;
const PROPOSAL_BLOCK: usize = 64;

/// Transfer target for [`Pipeline::transfer`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Target {
    Cifar10,
    Cifar100,
}

impl Target {
    pub fn name(self) -> &'static str {
        match self {
            Target::Cifar10 => "cifar10",
            Target::Cifar100 => "cifar100",
        }
    }

    fn kinds(self) -> (DatasetKind, DatasetKind) {
        match self {
            Target::Cifar10 => (DatasetKind::Cifar10Train, DatasetKind::Cifar10Test),
            Target::Cifar100 => (DatasetKind::Cifar100Train, DatasetKind::Cifar100Test),
        }
    }
}

impl std::str::FromStr for Target {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cifar10" => Ok(Target::Cifar10),
            "cifar100" => Ok(Target::Cifar100),
            other => Err(Error::Config(format!("unknown transfer target {other:?} (cifar10 or cifar100)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProposalOutcome {
    pub cached: bool,
    pub stats: ProposalStats,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SurrogateOutcome {
    pub cached: bool,
    pub classes: usize,
    pub examples: usize,
    /// Fewer images than requested classes were available.
    pub truncated: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub enum TrainOutcome {
    Cached,
    Finished { log: TrainLog, resumed_from: Option<usize> },
    /// Stopped at the epoch budget; rerunning continues from `epoch`.
    Paused { epoch: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExtractOutcome {
    pub cached: bool,
    pub train_rows: usize,
    pub test_rows: usize,
    pub feature_dim: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SvmOutcome {
    pub cached: bool,
    pub report: RunReport,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransferOutcome {
    pub cached: bool,
    pub report: TransferReport,
}

/// Runs pipeline stages against one output directory.
///
/// Every stage reads its inputs only after checking them against the
/// manifest, and skips itself when its own outputs are already current.
#[derive(Clone, Debug)]
pub struct Pipeline {
    cfg: ExperimentConfig,
    manifest: Manifest,
}

fn millis(t: Instant) -> u64 {
    t.elapsed().as_millis() as u64
}

fn file_len(path: &Path) -> Result<u64> {
    Ok(std::fs::metadata(path).at(path)?.len())
}

fn opt(v: Option<usize>) -> String {
    v.map_or("all".into(), |n| n.to_string())
}

impl Pipeline {
    pub fn new(cfg: ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        std::fs::create_dir_all(&cfg.output_dir).at(&cfg.output_dir)?;
        let manifest = Manifest::new(&cfg.output_dir);
        Ok(Self { cfg, manifest })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.cfg
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn path(&self, artifact: &str) -> PathBuf {
        self.manifest.artifact_path(artifact)
    }

    /// Canonical architecture name for a preset or alias.
    pub fn architecture(name: &str) -> Result<String> {
        Ok(NetworkSpec::preset(name, 2)?.name)
    }

    pub fn surrogate_file(c: usize) -> String {
        format!("surrogate_c{c}.bin")
    }

    fn tag(c: usize, arch: &str) -> Result<String> {
        Ok(format!("c{c}_{}", Self::architecture(arch)?))
    }

    pub fn model_file(c: usize, arch: &str) -> Result<String> {
        Ok(format!("model_{}.ckpt", Self::tag(c, arch)?))
    }

    pub fn train_log_file(c: usize, arch: &str) -> Result<String> {
        Ok(format!("trainlog_{}.csv", Self::tag(c, arch)?))
    }

    pub fn features_file(c: usize, arch: &str, split: &str) -> Result<String> {
        Ok(format!("features_{}_{split}.bin", Self::tag(c, arch)?))
    }

    pub fn svm_file(c: usize, arch: &str, fold: usize) -> Result<String> {
        Ok(format!("svm_{}_fold{fold}.bin", Self::tag(c, arch)?))
    }

    pub fn report_file(c: usize, arch: &str, ext: &str) -> Result<String> {
        Ok(format!("report_{}.{ext}", Self::tag(c, arch)?))
    }

    pub fn timings_file(c: usize, arch: &str) -> Result<String> {
        Ok(format!("timings_{}.txt", Self::tag(c, arch)?))
    }

    pub fn transfer_file(c: usize, arch: &str, target: Target, what: &str) -> Result<String> {
        Ok(format!("{what}_{}_{}", Self::tag(c, arch)?, target.name()))
    }

    fn unlabeled_path(&self) -> PathBuf {
        self.cfg.stl10_dir().join(stl10::UNLABELED_FILE)
    }

    fn proposals_key(&self) -> Result<String> {
        let s = &self.cfg.segmentation;
        Ok(key_of(&[
            "proposals",
            &file_len(&self.unlabeled_path())?.to_string(),
            &opt(self.cfg.data.unlabeled_limit),
            &format!("{:?}/{:?}/{}", s.sigma, s.k, s.min_size),
            &self.cfg.proposals.min_box_side.to_string(),
        ]))
    }

    fn surrogate_key(&self, c: usize, proposals_sha: &str) -> Result<String> {
        Ok(key_of(&[
            "surrogate",
            &c.to_string(),
            &PATCH_SIDE.to_string(),
            &file_len(&self.unlabeled_path())?.to_string(),
            proposals_sha,
        ]))
    }

    fn train_key(&self, arch: &str, surrogate_sha: &str) -> Result<String> {
        let cfg = TrainConfig {
            threads: 1,
            ..self.cfg.train_config()
        };
        let cfg_text = toml::to_string(&cfg).map_err(|e| Error::Config(e.to_string()))?;
        Ok(key_of(&[
            "train",
            &NetworkSpec::preset(arch, 2)?.describe(),
            &format!("{:?}", self.cfg.surrogate.holdout_fraction),
            &cfg_text,
            surrogate_sha,
        ]))
    }

    fn extract_key(&self, model_sha: &str) -> Result<String> {
        let dir = self.cfg.stl10_dir();
        Ok(key_of(&[
            "extract",
            &opt(self.cfg.data.train_limit),
            &opt(self.cfg.data.test_limit),
            &file_len(&dir.join(stl10::TRAIN_X_FILE))?.to_string(),
            &file_len(&dir.join(stl10::TEST_X_FILE))?.to_string(),
            model_sha,
        ]))
    }

    fn svm_key(&self, features_sha: &(String, String)) -> Result<String> {
        let dir = self.cfg.stl10_dir();
        let svm = self.cfg.svm_config();
        Ok(key_of(&[
            "svm",
            &format!("{:?}/{}/{}", svm.lambda, svm.epochs, svm.seed),
            &format!("{:?}", self.cfg.data.folds),
            &super::manifest::sha256_file(&dir.join(stl10::TRAIN_Y_FILE))?,
            &super::manifest::sha256_file(&dir.join(stl10::TEST_Y_FILE))?,
            &super::manifest::sha256_file(&dir.join(stl10::FOLDS_FILE))?,
            &features_sha.0,
            &features_sha.1,
        ]))
    }

    fn transfer_key(&self, target: Target, model_sha: &str) -> Result<String> {
        let svm = self.cfg.svm_config();
        let t = &self.cfg.transfer;
        Ok(key_of(&[
            "transfer",
            target.name(),
            &opt(t.train_limit),
            &opt(t.test_limit),
            &format!("{:?}/{}/{}", svm.lambda, svm.epochs, svm.seed),
            model_sha,
        ]))
    }

    fn verify_proposals(&self) -> Result<String> {
        self.manifest.verify(PROPOSALS_FILE, &self.proposals_key()?)
    }

    fn verify_surrogate(&self, c: usize) -> Result<String> {
        let p = self.verify_proposals()?;
        self.manifest.verify(&Self::surrogate_file(c), &self.surrogate_key(c, &p)?)
    }

    fn verify_model(&self, c: usize, arch: &str) -> Result<String> {
        let s = self.verify_surrogate(c)?;
        let key = self.train_key(arch, &s)?;
        self.manifest.verify(&Self::train_log_file(c, arch)?, &key)?;
        self.manifest.verify(&Self::model_file(c, arch)?, &key)
    }

    fn verify_features(&self, c: usize, arch: &str) -> Result<(String, String)> {
        let key = self.extract_key(&self.verify_model(c, arch)?)?;
        Ok((
            self.manifest.verify(&Self::features_file(c, arch, "stl_train")?, &key)?,
            self.manifest.verify(&Self::features_file(c, arch, "stl_test")?, &key)?,
        ))
    }

    fn elapsed_s(&self, artifact: &str) -> Result<f64> {
        Ok(self.manifest.latest(artifact)?.map_or(0.0, |e| e.elapsed_ms as f64 / 1000.0))
    }

    /// Selective search over the unlabeled split, streamed in blocks.
    pub fn proposals(&self) -> Result<ProposalOutcome> {
        let key = self.proposals_key()?;
        if self.manifest.current(PROPOSALS_FILE, &key)?.is_some() {
            let sets = cache::read(&self.path(PROPOSALS_FILE))?;
            let counts: Vec<usize> = sets.iter().map(|s| s.boxes.len()).collect();
            return Ok(ProposalOutcome {
                cached: true,
                stats: ProposalStats::from_counts(&counts),
            });
        }
        let start = Instant::now();
        let mut reader = StlReader::open(self.unlabeled_path())?;
        let n = match self.cfg.data.unlabeled_limit {
            Some(l) if l > reader.len() => {
                return Err(Error::Contract(format!(
                    "unlabeled_limit {l} exceeds the {} images in {}",
                    reader.len(),
                    reader.path().display()
                )))
            }
            Some(l) => l,
            None => reader.len(),
        };
        let params = self.cfg.segmentation.params();
        let min_side = self.cfg.proposals.min_box_side;
        let workers = Workers::new(self.cfg.threads)?;
        let out = self.path(PROPOSALS_FILE);
        let tmp = self.path(&format!("{PROPOSALS_FILE}.tmp"));
        let mut w = BufWriter::new(File::create(&tmp).at(&tmp)?);
        cache::write_header(&mut w).at(&tmp)?;
        let mut counts = Vec::with_capacity(n);
        let mut next = 0;
        while next < n {
            let block = reader.read_range(next, PROPOSAL_BLOCK.min(n - next))?;
            let sets: Vec<ProposalSet> = workers.map(block.len(), |i| {
                let mut set = selective_search(&block[i], &params, min_side);
                set.image_index = (next + i) as u32;
                set
            });
            for s in &sets {
                cache::write_record(&mut w, s)?;
                counts.push(s.boxes.len());
            }
            next += block.len();
            log::info!("proposals: {next}/{n} images");
        }
        w.flush().at(&tmp)?;
        drop(w);
        std::fs::rename(&tmp, &out).at(&out)?;
        self.manifest.record("proposals", PROPOSALS_FILE, &key, self.cfg.seed, millis(start))?;
        Ok(ProposalOutcome {
            cached: false,
            stats: ProposalStats::from_counts(&counts),
        })
    }

    pub fn surrogate(&self, c: usize) -> Result<SurrogateOutcome> {
        let key = self.surrogate_key(c, &self.verify_proposals()?)?;
        let file = Self::surrogate_file(c);
        let sets = cache::read(&self.path(PROPOSALS_FILE))?;
        let counts = count_proposals(&sets, Some(sets.len()));
        let sel = select_top_classes(&counts, c)?;
        if self.manifest.current(&file, &key)?.is_some() {
            let (examples, classes) = surrogate_header(&self.path(&file))?;
            return Ok(SurrogateOutcome {
                cached: true,
                classes,
                examples,
                truncated: sel.truncated,
            });
        }
        let start = Instant::now();
        if sel.truncated {
            log::warn!("only {} source images available for {c} requested classes", sel.class_count());
        }
        let mut reader = StlReader::open(self.unlabeled_path())?;
        let ds = build_surrogate_dataset(&mut reader, &sets, &sel, PATCH_SIDE)?;
        write_atomic(&self.path(&file), &ds.encode()?)?;
        self.manifest.record("surrogate", &file, &key, self.cfg.seed, millis(start))?;
        Ok(SurrogateOutcome {
            cached: false,
            classes: ds.class_count,
            examples: ds.len(),
            truncated: sel.truncated,
        })
    }

    /// Trains (or resumes training) the surrogate network. With
    /// `epoch_budget`, stops after that many new epochs and leaves a
    /// resumable checkpoint behind.
    pub fn train(&self, c: usize, arch: &str, epoch_budget: Option<usize>) -> Result<TrainOutcome> {
        let key = self.train_key(arch, &self.verify_surrogate(c)?)?;
        let model_file = Self::model_file(c, arch)?;
        let log_file = Self::train_log_file(c, arch)?;
        if self.manifest.current(&model_file, &key)?.is_some() && self.manifest.current(&log_file, &key)?.is_some() {
            return Ok(TrainOutcome::Cached);
        }
        let start = Instant::now();
        let ds = SurrogateDataset::read(&self.path(&Self::surrogate_file(c)))?;
        let (train, holdout) = shuffle_split(
            &ds,
            derive_seed(self.cfg.seed, &[HOLDOUT_TAG]),
            self.cfg.surrogate.holdout_fraction,
        )?;
        let spec = NetworkSpec::preset(arch, ds.class_count)?;
        let cfg = self.cfg.train_config();

        let partial_ckpt = self.path(&format!("{model_file}.partial"));
        let partial_log = self.path(&format!("{log_file}.partial"));
        let partial_key = self.path(&format!("{model_file}.partial.key"));
        let resumable = std::fs::read_to_string(&partial_key).is_ok_and(|k| k.trim() == key)
            && partial_ckpt.exists()
            && partial_log.exists();
        let mut trainer = if resumable {
            let ckpt = Checkpoint::read(&partial_ckpt)?;
            let log = TrainLog::from_csv(&std::fs::read_to_string(&partial_log).at(&partial_log)?)?;
            log::info!("train: resuming at epoch {}", ckpt.epoch);
            Trainer::resume(&ckpt, spec, cfg, &train.examples, &holdout.examples)?.with_log(log)
        } else {
            write_atomic(&partial_key, key.as_bytes())?;
            Trainer::new(spec, cfg, &train.examples, &holdout.examples)?
        };
        let resumed_from = resumable.then(|| trainer.epoch());

        let mut ran = 0;
        while !trainer.finished() {
            if epoch_budget.is_some_and(|b| ran >= b) {
                return Ok(TrainOutcome::Paused { epoch: trainer.epoch() });
            }
            let stats = trainer.run_epoch()?;
            ran += 1;
            write_atomic(&partial_ckpt, &trainer.checkpoint().encode())?;
            write_atomic(&partial_log, trainer.log().to_csv().as_bytes())?;
            log::info!(
                "train: epoch {} lr {:.3e} loss {:.4} holdout {}",
                stats.epoch,
                stats.learning_rate,
                stats.mean_loss,
                stats.holdout_accuracy.map_or("-".into(), |a| format!("{a:.4}"))
            );
        }
        write_atomic(&self.path(&model_file), &trainer.checkpoint().encode())?;
        write_atomic(&self.path(&log_file), trainer.log().to_csv().as_bytes())?;
        let ms = millis(start);
        self.manifest.record("train", &log_file, &key, self.cfg.seed, ms)?;
        self.manifest.record("train", &model_file, &key, self.cfg.seed, ms)?;
        for p in [&partial_ckpt, &partial_log, &partial_key] {
            let _ = std::fs::remove_file(p);
        }
        Ok(TrainOutcome::Finished {
            log: trainer.log().clone(),
            resumed_from,
        })
    }

    fn load_model(&self, c: usize, arch: &str) -> Result<crate::nn::ModelParams<f32>> {
        let ckpt = Checkpoint::read(&self.path(&Self::model_file(c, arch)?))?;
        let classes = surrogate_header(&self.path(&Self::surrogate_file(c)))?.1;
        Ok(ckpt.restore(NetworkSpec::preset(arch, classes)?, INPUT_SHAPE)?.0)
    }

    fn stl_labeled(&self, kind: DatasetKind, limit: Option<usize>) -> Result<(Vec<RawImage>, Vec<u32>)> {
        let spec = DatasetSpec::new(kind, self.cfg.stl10_dir()).with_limit(limit);
        match stl10::load_stl10(&spec)? {
            stl10::StlData::Labeled { examples, .. } => Ok(split_examples(examples)),
            stl10::StlData::Unlabeled(_) => unreachable!("labeled split requested"),
        }
    }

    /// Pooled features for the STL-10 train and test splits.
    pub fn extract(&self, c: usize, arch: &str) -> Result<ExtractOutcome> {
        let key = self.extract_key(&self.verify_model(c, arch)?)?;
        let train_file = Self::features_file(c, arch, "stl_train")?;
        let test_file = Self::features_file(c, arch, "stl_test")?;
        if self.manifest.current(&train_file, &key)?.is_some() && self.manifest.current(&test_file, &key)?.is_some() {
            let tr = FeatureMatrix::read(&self.path(&train_file))?;
            let te = FeatureMatrix::read(&self.path(&test_file))?;
            return Ok(ExtractOutcome {
                cached: true,
                train_rows: tr.rows,
                test_rows: te.rows,
                feature_dim: tr.cols,
            });
        }
        let start = Instant::now();
        let model = self.load_model(c, arch)?;
        let mut rows = Vec::new();
        let mut dim = 0;
        for (file, kind, limit) in [
            (&train_file, DatasetKind::Stl10Train, self.cfg.data.train_limit),
            (&test_file, DatasetKind::Stl10Test, self.cfg.data.test_limit),
        ] {
            let (images, _) = self.stl_labeled(kind, limit)?;
            let f = extract_features(&model, &images, self.cfg.threads)?;
            write_atomic(&self.path(file), &f.encode())?;
            rows.push(f.rows);
            dim = f.cols;
        }
        let ms = millis(start);
        self.manifest.record("extract", &train_file, &key, self.cfg.seed, ms)?;
        self.manifest.record("extract", &test_file, &key, self.cfg.seed, ms)?;
        Ok(ExtractOutcome {
            cached: false,
            train_rows: rows[0],
            test_rows: rows[1],
            feature_dim: dim,
        })
    }

    fn selected_folds(&self, train_rows: usize) -> Result<(Vec<usize>, Vec<Vec<usize>>)> {
        let path = self.cfg.stl10_dir().join(stl10::FOLDS_FILE);
        let all = stl10::load_folds(&path)?;
        let ids: Vec<usize> = self.cfg.data.folds.clone().unwrap_or_else(|| (0..all.len()).collect());
        let mut folds = Vec::with_capacity(ids.len());
        for &f in &ids {
            let fold = all.get(f).ok_or_else(|| {
                Error::Contract(format!("fold {f} requested but {} defines {}", path.display(), all.len()))
            })?;
            if let Some(&bad) = fold.iter().find(|&&i| i >= train_rows) {
                return Err(Error::Contract(format!(
                    "fold {f} references training image {bad}, beyond the {train_rows} loaded"
                )));
            }
            folds.push(fold.clone());
        }
        Ok((ids, folds))
    }

    /// Fold-protocol SVM evaluation and the run report.
    pub fn svm(&self, c: usize, arch: &str) -> Result<SvmOutcome> {
        let feats = self.verify_features(c, arch)?;
        let key = self.svm_key(&feats)?;
        let txt = Self::report_file(c, arch, "txt")?;
        let csv = Self::report_file(c, arch, "csv")?;
        let train_x = FeatureMatrix::read(&self.path(&Self::features_file(c, arch, "stl_train")?))?;
        let (ids, folds) = self.selected_folds(train_x.rows)?;
        let cached = self.manifest.current(&txt, &key)?.is_some() && self.manifest.current(&csv, &key)?.is_some();
        let start = Instant::now();

        let (fold_accuracies, mean_accuracy) = if cached {
            parse_folds_csv(&std::fs::read_to_string(self.path(&csv)).at(&self.path(&csv))?)?
        } else {
            let test_x = FeatureMatrix::read(&self.path(&Self::features_file(c, arch, "stl_test")?))?;
            let dir = self.cfg.stl10_dir();
            let train_y = stl10::load_labels(&dir.join(stl10::TRAIN_Y_FILE), Some(train_x.rows))?;
            let test_y = stl10::load_labels(&dir.join(stl10::TEST_Y_FILE), Some(test_x.rows))?;
            let cfg = self.cfg.svm_config();
            let models: RefCell<Vec<LinearModel>> = RefCell::new(Vec::new());
            let folds_report = evaluate_stl_folds(
                |x, y| {
                    let (m, _) = train_ova(x, y, &cfg)?;
                    models.borrow_mut().push(m.clone());
                    Ok(m)
                },
                &train_x,
                &train_y,
                &folds,
                &test_x,
                &test_y,
            )?;
            for (f, m) in ids.iter().zip(models.into_inner()) {
                let file = Self::svm_file(c, arch, *f)?;
                write_atomic(&self.path(&file), &m.encode())?;
                self.manifest.record("svm", &file, &key, self.cfg.seed, millis(start))?;
            }
            (folds_report.accuracies, folds_report.mean)
        };

        let sets = cache::read(&self.path(PROPOSALS_FILE))?;
        let counts: Vec<usize> = sets.iter().map(|s| s.boxes.len()).collect();
        let (surrogate_examples, _) = surrogate_header(&self.path(&Self::surrogate_file(c)))?;
        let log_path = self.path(&Self::train_log_file(c, arch)?);
        let training = TrainLog::from_csv(&std::fs::read_to_string(&log_path).at(&log_path)?)?;
        let mut report = RunReport {
            classes: c,
            architecture: Self::architecture(arch)?,
            proposals: ProposalStats::from_counts(&counts),
            surrogate_examples,
            training,
            feature_dim: train_x.cols,
            folds: ids,
            fold_accuracies,
            mean_accuracy,
            timings: Vec::new(),
        };
        if !cached {
            write_atomic(&self.path(&txt), report.to_text().as_bytes())?;
            write_atomic(&self.path(&csv), report.folds_csv().as_bytes())?;
            let ms = millis(start);
            self.manifest.record("svm", &txt, &key, self.cfg.seed, ms)?;
            self.manifest.record("svm", &csv, &key, self.cfg.seed, ms)?;
        }
        report.timings = vec![
            ("proposals".into(), self.elapsed_s(PROPOSALS_FILE)?),
            ("surrogate".into(), self.elapsed_s(&Self::surrogate_file(c))?),
            ("train".into(), self.elapsed_s(&Self::model_file(c, arch)?)?),
            ("extract".into(), self.elapsed_s(&Self::features_file(c, arch, "stl_train")?)?),
            ("svm".into(), self.elapsed_s(&txt)?),
        ];
        write_atomic(&self.path(&Self::timings_file(c, arch)?), report.timings_text().as_bytes())?;
        Ok(SvmOutcome { cached, report })
    }

    /// Every stage for one (C, architecture) pair, reusing current artifacts.
    pub fn run_all(&self, c: usize, arch: &str) -> Result<RunReport> {
        self.proposals()?;
        self.surrogate(c)?;
        self.train(c, arch, None)?;
        self.extract(c, arch)?;
        Ok(self.svm(c, arch)?.report)
    }

    /// Runs the configured sweep. The table and CSV are rewritten after each
    /// row, so a failing configuration leaves the finished rows on disk.
    pub fn experiment(&self) -> Result<Vec<ExperimentRow>> {
        for &c in &self.cfg.experiment.classes {
            self.cfg.check_classes(c)?;
        }
        let mut rows = Vec::new();
        for arch in &self.cfg.experiment.architectures {
            for &c in &self.cfg.experiment.classes {
                let report = self.run_all(c, arch)?;
                rows.push(ExperimentRow {
                    classes: c,
                    architecture: report.architecture,
                    mean_accuracy: report.mean_accuracy,
                });
                write_atomic(&self.path(EXPERIMENT_TABLE), experiment_table(&rows).as_bytes())?;
                write_atomic(&self.path(EXPERIMENT_CSV), experiment_csv(&rows).as_bytes())?;
            }
        }
        Ok(rows)
    }

    /// Linear SVM on frozen features of a CIFAR split.
    pub fn transfer(&self, target: Target) -> Result<TransferOutcome> {
        let c = self.cfg.surrogate.classes;
        let arch = self.cfg.network.preset.clone();
        let key = self.transfer_key(target, &self.verify_model(c, &arch)?)?;
        let report_file = Self::transfer_file(c, &arch, target, "transfer")? + ".txt";
        if self.manifest.current(&report_file, &key)?.is_some() {
            let report = parse_transfer_report(&std::fs::read_to_string(self.path(&report_file)).at(&self.path(&report_file))?)?;
            return Ok(TransferOutcome { cached: true, report });
        }
        let start = Instant::now();
        let model = self.load_model(c, &arch)?;
        let (train_kind, test_kind) = target.kinds();
        let root = match target {
            Target::Cifar10 => self.cfg.cifar10_dir(),
            Target::Cifar100 => self.cfg.cifar100_dir(),
        };
        let t = &self.cfg.transfer;
        let (train_imgs, train_y) =
            split_examples(load_cifar(&DatasetSpec::new(train_kind, &root).with_limit(t.train_limit))?);
        let (test_imgs, test_y) = split_examples(load_cifar(&DatasetSpec::new(test_kind, &root).with_limit(t.test_limit))?);
        let train_x = extract_features(&model, &train_imgs, self.cfg.threads)?;
        let test_x = extract_features(&model, &test_imgs, self.cfg.threads)?;
        let (svm, _) = train_ova(&train_x, &train_y, &self.cfg.svm_config())?;
        let acc = accuracy(&predict(&svm, &test_x)?, &test_y);
        let report = TransferReport {
            target: target.name().into(),
            architecture: Self::architecture(&arch)?,
            classes: c,
            train_rows: train_x.rows,
            test_rows: test_x.rows,
            feature_dim: train_x.cols,
            accuracy: acc,
        };
        let files = [
            (Self::transfer_file(c, &arch, target, "features")? + "_train.bin", train_x.encode()),
            (Self::transfer_file(c, &arch, target, "features")? + "_test.bin", test_x.encode()),
            (Self::transfer_file(c, &arch, target, "svm")? + ".bin", svm.encode()),
            (report_file, report.to_text().into_bytes()),
        ];
        for (file, bytes) in &files {
            write_atomic(&self.path(file), bytes)?;
        }
        let ms = millis(start);
        for (file, _) in &files {
            self.manifest.record("transfer", file, &key, self.cfg.seed, ms)?;
        }
        Ok(TransferOutcome { cached: false, report })
    }
}

fn split_examples(examples: Vec<LabeledExample>) -> (Vec<RawImage>, Vec<u32>) {
    examples.into_iter().map(|e| (e.image, e.label)).unzip()
}

/// `(example count, class count)` from a surrogate file header.
fn surrogate_header(path: &Path) -> Result<(usize, usize)> {
    use std::io::Read;
    let mut head = [0u8; 16];
    File::open(path).and_then(|mut f| f.read_exact(&mut head)).at(path)?;
    if &head[..8] != DATASET_MAGIC {
        return Err(Error::format(path.display().to_string(), 0, "missing SCNNDS01 header"));
    }
    let n = u32::from_le_bytes(head[8..12].try_into().expect("4 bytes"));
    let c = u32::from_le_bytes(head[12..16].try_into().expect("4 bytes"));
    Ok((n as usize, c as usize))
}

fn parse_folds_csv(text: &str) -> Result<(Vec<f64>, f64)> {
    let bad = || Error::format("fold report", 0, "unexpected layout");
    let mut accs = Vec::new();
    let mut mean = None;
    for line in text.lines().skip(1) {
        let (k, v) = line.split_once(',').ok_or_else(bad)?;
        let v: f64 = v.parse().map_err(|_| bad())?;
        if k == "mean" {
            mean = Some(v);
        } else {
            accs.push(v);
        }
    }
    Ok((accs, mean.ok_or_else(bad)?))
}

fn parse_transfer_report(text: &str) -> Result<TransferReport> {
    let bad = |what: &str| Error::format("transfer report", 0, format!("bad {what}"));
    let field = |name: &str| -> Result<String> {
        text.lines()
            .find_map(|l| l.strip_prefix(name).map(|v| v.trim().to_string()))
            .ok_or_else(|| bad(name))
    };
    let num = |name: &str| -> Result<usize> { field(name)?.parse().map_err(|_| bad(name)) };
    Ok(TransferReport {
        target: field("target")?,
        architecture: field("architecture")?,
        classes: num("surrogate classes")?,
        train_rows: num("train rows")?,
        test_rows: num("test rows")?,
        feature_dim: num("feature dim")?,
        accuracy: field("accuracy")?
            .split_whitespace()
            .next()
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| bad("accuracy"))?,
    })
}
