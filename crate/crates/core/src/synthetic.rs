//! Procedural stand-ins for the STL-10 and CIFAR files.
//!
//! Each scene is a textured background with a few distractor blobs and one
//! foreground object whose shape and hue depend on the class. Scenes are
//! written in the original binary layouts so every loader and stage runs
//! unchanged on them.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::cifar::{self, CifarVariant};
use crate::data::stl10::{self, STL_SIDE};
use crate::data::{LabeledExample, RawImage};
use crate::error::{IoContext, Result};
use crate::nn::derive_seed;

const SHAPES: u32 = 10;

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = h.rem_euclid(360.0) / 60.0;
    let c = v * s;
    let x = c * (1.0 - (h % 2.0 - 1.0).abs());
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [(r + m) * 255.0, (g + m) * 255.0, (b + m) * 255.0]
}

/// Whether the point `(u, v)`, in object-local units where the object spans
/// roughly `[-1, 1]`, lies inside shape `shape`.
fn inside(shape: u32, u: f64, v: f64) -> bool {
    let r = (u * u + v * v).sqrt();
    match shape {
        0 => r <= 1.0,
        1 => u.abs() <= 0.85 && v.abs() <= 0.85,
        2 => v <= 0.8 && v >= -0.9 + 1.7 * u.abs() * 1.1,
        3 => (0.55..=1.0).contains(&r),
        4 => (u.abs() <= 0.3 && v.abs() <= 1.0) || (v.abs() <= 0.3 && u.abs() <= 1.0),
        5 => u.abs() <= 1.0 && v.abs() <= 0.8 && ((v + 1.0) * 2.5).floor() as i64 % 2 == 0,
        6 => u.abs() <= 0.8 && v.abs() <= 1.0 && ((u + 1.0) * 2.5).floor() as i64 % 2 == 0,
        7 => u.abs() + v.abs() <= 1.0,
        8 => {
            u.abs() <= 0.9
                && v.abs() <= 0.9
                && (((u + 1.0) * 2.2).floor() as i64 + ((v + 1.0) * 2.2).floor() as i64) % 2 == 0
        }
        _ => (u / 1.0).powi(2) + (v / 0.45).powi(2) <= 1.0,
    }
}

/// Renders one `side x side` scene of `class`. Shape is `class % 10`; for
/// more than ten classes the hue also varies with `class / 10`.
pub fn render_scene(class: u32, classes: u32, side: usize, rng: &mut impl Rng) -> RawImage {
    let shape = class % SHAPES;
    let hue_slots = classes.div_ceil(SHAPES).max(1);
    let base_hue = if classes <= SHAPES {
        class as f64 * 36.0
    } else {
        (class / SHAPES) as f64 * 360.0 / hue_slots as f64 + shape as f64 * 7.0
    };
    let s = side as f64;

    let bg_hue = rng.gen_range(0.0..360.0);
    let bg_a = hsv_to_rgb(bg_hue, rng.gen_range(0.05..0.35), rng.gen_range(0.25..0.85));
    let bg_b = hsv_to_rgb(bg_hue + rng.gen_range(-40.0..40.0), rng.gen_range(0.05..0.35), rng.gen_range(0.25..0.85));
    let angle: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let (ga, gb) = (angle.cos(), angle.sin());

    let blobs: Vec<([f64; 3], f64, f64, f64)> = (0..rng.gen_range(1..4))
        .map(|_| {
            let col = hsv_to_rgb(rng.gen_range(0.0..360.0), rng.gen_range(0.1..0.6), rng.gen_range(0.2..0.9));
            (col, rng.gen_range(0.0..s), rng.gen_range(0.0..s), rng.gen_range(0.06..0.16) * s)
        })
        .collect();

    let obj = hsv_to_rgb(
        base_hue + rng.gen_range(-12.0..12.0),
        rng.gen_range(0.55..0.95),
        rng.gen_range(0.55..1.0),
    );
    let half = rng.gen_range(0.2..0.32) * s;
    let cy = rng.gen_range(half..s - half);
    let cx = rng.gen_range(half..s - half);
    let rot: f64 = rng.gen_range(-0.35..0.35);
    let (rc, rs) = (rot.cos(), rot.sin());

    let mut noise = || rng.gen_range(-10.0..10.0);
    let mut px = Vec::with_capacity(side * side * 3);
    for r in 0..side {
        for c in 0..side {
            let (y, x) = (r as f64 + 0.5, c as f64 + 0.5);
            let t = (((x / s - 0.5) * ga + (y / s - 0.5) * gb) + 0.75) / 1.5;
            let mut rgb = [0.0; 3];
            for ch in 0..3 {
                rgb[ch] = bg_a[ch] * (1.0 - t) + bg_b[ch] * t;
            }
            for (col, by, bx, br) in &blobs {
                if (y - by).powi(2) + (x - bx).powi(2) <= br * br {
                    rgb = *col;
                }
            }
            let (dy, dx) = ((y - cy) / half, (x - cx) / half);
            let (u, v) = (rc * dx + rs * dy, -rs * dx + rc * dy);
            if inside(shape, u, v) {
                let shade = 1.0 - 0.25 * (u * 0.5 + v * 0.5 + 1.0) / 2.0;
                for ch in 0..3 {
                    rgb[ch] = obj[ch] * shade;
                }
            }
            for v in rgb {
                px.push((v + noise()).round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    RawImage::new(side, side, px).expect("side is positive")
}

/// `n` labeled scenes with labels cycling through `0..classes`.
pub fn labeled_scenes(n: usize, classes: u32, side: usize, seed: u64) -> Vec<LabeledExample> {
    (0..n)
        .map(|i| {
            let label = i as u32 % classes;
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[i as u64]));
            LabeledExample {
                image: render_scene(label, classes, side, &mut rng),
                label,
            }
        })
        .collect()
}

/// `n` scenes of random classes, without labels.
pub fn unlabeled_scenes(n: usize, classes: u32, side: usize, seed: u64) -> Vec<RawImage> {
    (0..n)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[i as u64]));
            let class = rng.gen_range(0..classes);
            render_scene(class, classes, side, &mut rng)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StlFixture {
    pub unlabeled: usize,
    pub train: usize,
    pub test: usize,
    pub folds: usize,
    pub fold_size: usize,
    pub seed: u64,
}

impl Default for StlFixture {
    fn default() -> Self {
        Self {
            unlabeled: 500,
            train: 1000,
            test: 500,
            folds: 10,
            fold_size: 200,
            seed: 0,
        }
    }
}

/// Writes the six STL-10 binary files into `dir`.
pub fn write_stl10_fixture(dir: &Path, f: &StlFixture) -> Result<()> {
    std::fs::create_dir_all(dir).at(dir)?;
    let unlabeled = unlabeled_scenes(f.unlabeled, 10, STL_SIDE, derive_seed(f.seed, &[0]));
    stl10::write_images(&dir.join(stl10::UNLABELED_FILE), &unlabeled)?;
    for (tag, n, x, y) in [
        (1, f.train, stl10::TRAIN_X_FILE, stl10::TRAIN_Y_FILE),
        (2, f.test, stl10::TEST_X_FILE, stl10::TEST_Y_FILE),
    ] {
        let ex = labeled_scenes(n, 10, STL_SIDE, derive_seed(f.seed, &[tag]));
        let images: Vec<RawImage> = ex.iter().map(|e| e.image.clone()).collect();
        stl10::write_images(&dir.join(x), &images)?;
        let labels: Vec<u32> = ex.iter().map(|e| e.label).collect();
        stl10::write_labels(&dir.join(y), &labels)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(f.seed, &[3]));
    let folds: Vec<Vec<usize>> = (0..f.folds)
        .map(|_| {
            let mut idx = rand::seq::index::sample(&mut rng, f.train, f.fold_size.min(f.train)).into_vec();
            idx.sort_unstable();
            idx
        })
        .collect();
    stl10::write_folds(&dir.join(stl10::FOLDS_FILE), &folds)
}

/// Writes CIFAR-10 (`data_batch_1..5`, `test_batch`) or CIFAR-100
/// (`train`, `test`) files into `dir`; the training scenes are spread over
/// the CIFAR-10 batches in order.
pub fn write_cifar_fixture(dir: &Path, variant: CifarVariant, train: usize, test: usize, seed: u64) -> Result<()> {
    std::fs::create_dir_all(dir).at(dir)?;
    let classes = variant.classes();
    let train_ex = labeled_scenes(train, classes, cifar::CIFAR_SIDE, derive_seed(seed, &[1]));
    let test_ex = labeled_scenes(test, classes, cifar::CIFAR_SIDE, derive_seed(seed, &[2]));
    let (train_files, test_file) = match variant {
        CifarVariant::Cifar10 => (
            cifar::split_files(crate::data::DatasetKind::Cifar10Train)?.1,
            "test_batch.bin",
        ),
        CifarVariant::Cifar100 => (vec!["train.bin"], "test.bin"),
    };
    let per_file = train.div_ceil(train_files.len()).max(1);
    for (i, name) in train_files.iter().enumerate() {
        let lo = (i * per_file).min(train);
        let hi = ((i + 1) * per_file).min(train);
        cifar::write_batch(&dir.join(name), variant, &train_ex[lo..hi])?;
    }
    cifar::write_batch(&dir.join(test_file), variant, &test_ex)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{load_cifar, load_stl10, DatasetKind, DatasetSpec, StlData};

    #[test]
    fn deterministic_and_varied() {
        let a = labeled_scenes(12, 10, 96, 3);
        let b = labeled_scenes(12, 10, 96, 3);
        assert_eq!(a, b);
        assert_ne!(a[0].image, a[10].image);
        assert_eq!(a[11].label, 1);
        assert_ne!(labeled_scenes(1, 10, 96, 4)[0], a[0]);
    }

    #[test]
    fn every_shape_is_drawn() {
        for shape in 0..SHAPES {
            let hits = (0..41 * 41)
                .filter(|i| inside(shape, (i % 41) as f64 / 20.0 - 1.0, (i / 41) as f64 / 20.0 - 1.0))
                .count();
            assert!(hits > 200 && hits < 41 * 41, "shape {shape} covers {hits}");
        }
    }

    #[test]
    fn fixtures_load_through_readers() {
        let dir = tempfile::tempdir().unwrap();
        let f = StlFixture {
            unlabeled: 3,
            train: 20,
            test: 10,
            folds: 10,
            fold_size: 5,
            seed: 1,
        };
        write_stl10_fixture(dir.path(), &f).unwrap();
        match load_stl10(&DatasetSpec::new(DatasetKind::Stl10Train, dir.path())).unwrap() {
            StlData::Labeled { examples, folds } => {
                assert_eq!(examples.len(), 20);
                assert!(examples.iter().all(|e| e.label < 10));
                let folds = folds.unwrap();
                assert_eq!(folds.len(), 10);
                assert!(folds.iter().all(|f| f.len() == 5 && f.iter().all(|&i| i < 20)));
            }
            _ => panic!("expected labeled data"),
        }
        write_cifar_fixture(dir.path(), CifarVariant::Cifar10, 12, 4, 2).unwrap();
        let train = load_cifar(&DatasetSpec::new(DatasetKind::Cifar10Train, dir.path())).unwrap();
        assert_eq!(train.len(), 12);
        assert_eq!(train[3].label, 3);
        write_cifar_fixture(dir.path(), CifarVariant::Cifar100, 120, 4, 2).unwrap();
        let c100 = load_cifar(&DatasetSpec::new(DatasetKind::Cifar100Test, dir.path())).unwrap();
        assert_eq!(c100.len(), 4);
        let c100 = load_cifar(&DatasetSpec::new(DatasetKind::Cifar100Train, dir.path())).unwrap();
        assert_eq!(c100[117].label, 17);
    }
}
