//! Dataset readers and image primitives.

pub mod cifar;
pub mod image;
pub mod stl10;

use std::path::PathBuf;

pub use cifar::load_cifar;
pub use image::{crop, resize_bilinear, rgb_to_hsv, BoundingBox, HsvImage, RawImage};
pub use stl10::{load_stl10, StlData, StlReader};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabeledExample {
    pub image: RawImage,
    pub label: u32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatasetKind {
    Stl10Unlabeled,
    Stl10Train,
    Stl10Test,
    Cifar10Train,
    Cifar10Test,
    Cifar100Train,
    Cifar100Test,
}

#[derive(Clone, Debug)]
pub struct DatasetSpec {
    pub kind: DatasetKind,
    pub root: PathBuf,
    pub limit: Option<usize>,
}

impl DatasetSpec {
    pub fn new(kind: DatasetKind, root: impl Into<PathBuf>) -> Self {
        Self {
            kind,
            root: root.into(),
            limit: None,
        }
    }

    pub fn with_limit(mut self, limit: Option<usize>) -> Self {
        self.limit = limit;
        self
    }
}

/// Anything that can hand out source images by index.
pub trait ImageSource {
    fn len(&self) -> usize;
    fn image(&mut self, index: usize) -> crate::Result<RawImage>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl ImageSource for [RawImage] {
    fn len(&self) -> usize {
        <[RawImage]>::len(self)
    }

    fn image(&mut self, index: usize) -> crate::Result<RawImage> {
        self.get(index).cloned().ok_or_else(|| {
            crate::Error::Contract(format!("image index {index} out of range"))
        })
    }
}

impl ImageSource for StlReader {
    fn len(&self) -> usize {
        StlReader::len(self)
    }

    fn image(&mut self, index: usize) -> crate::Result<RawImage> {
        self.read(index)
    }
}
