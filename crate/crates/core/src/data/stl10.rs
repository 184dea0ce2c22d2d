//! STL-10 binary format.
//!
//! Each image record is 96x96x3 bytes: three channel planes (R, G, B), each
//! plane stored column-major. Label files hold one byte per image in `1..=10`.
//! `fold_indices.txt` has ten lines of space-separated 0-based indices into
//! the training split.

use std::fs::File;
use std::io::{BufRead, BufReader, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use super::image::RawImage;
use super::{DatasetKind, DatasetSpec, LabeledExample};
use crate::error::{Error, IoContext, Result};

pub const STL_SIDE: usize = 96;
pub const STL_PLANE: usize = STL_SIDE * STL_SIDE;
pub const STL_RECORD_BYTES: usize = STL_PLANE * 3;
pub const STL_CLASSES: u32 = 10;

pub const UNLABELED_FILE: &str = "unlabeled_X.bin";
pub const TRAIN_X_FILE: &str = "train_X.bin";
pub const TRAIN_Y_FILE: &str = "train_y.bin";
pub const TEST_X_FILE: &str = "test_X.bin";
pub const TEST_Y_FILE: &str = "test_y.bin";
pub const FOLDS_FILE: &str = "fold_indices.txt";

pub fn decode_record(bytes: &[u8]) -> RawImage {
    debug_assert_eq!(bytes.len(), STL_RECORD_BYTES);
    RawImage::from_fn(STL_SIDE, STL_SIDE, |r, c| {
        let i = c * STL_SIDE + r;
        [bytes[i], bytes[STL_PLANE + i], bytes[2 * STL_PLANE + i]]
    })
}

pub fn encode_record(img: &RawImage) -> Result<Vec<u8>> {
    if img.width() != STL_SIDE || img.height() != STL_SIDE {
        return Err(Error::Contract(format!(
            "STL-10 records are {STL_SIDE}x{STL_SIDE}, got {}x{}",
            img.width(),
            img.height()
        )));
    }
    let mut out = vec![0u8; STL_RECORD_BYTES];
    for r in 0..STL_SIDE {
        for c in 0..STL_SIDE {
            let p = img.pixel(r, c);
            let i = c * STL_SIDE + r;
            out[i] = p[0];
            out[STL_PLANE + i] = p[1];
            out[2 * STL_PLANE + i] = p[2];
        }
    }
    Ok(out)
}

/// Random-access reader over an STL-10 image file.
///
/// The unlabeled split is 2.7 GB, so stages that touch it stream records
/// through this instead of loading the whole file.
#[derive(Debug)]
pub struct StlReader {
    path: PathBuf,
    file: BufReader<File>,
    records: usize,
}

impl StlReader {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let file = File::open(&path).at(&path)?;
        let len = file.metadata().at(&path)?.len();
        let whole = len / STL_RECORD_BYTES as u64;
        if len % STL_RECORD_BYTES as u64 != 0 {
            return Err(Error::format(
                path.display().to_string(),
                whole * STL_RECORD_BYTES as u64,
                format!(
                    "truncated record: file size {len} is not a multiple of {STL_RECORD_BYTES}"
                ),
            ));
        }
        Ok(Self {
            path,
            file: BufReader::with_capacity(STL_RECORD_BYTES * 4, file),
            records: whole as usize,
        })
    }

    pub fn len(&self) -> usize {
        self.records
    }

    pub fn is_empty(&self) -> bool {
        self.records == 0
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn read(&mut self, index: usize) -> Result<RawImage> {
        if index >= self.records {
            return Err(Error::Contract(format!(
                "record {index} out of range for {} ({} records)",
                self.path.display(),
                self.records
            )));
        }
        let offset = (index * STL_RECORD_BYTES) as u64;
        self.file.seek(SeekFrom::Start(offset)).at(&self.path)?;
        self.read_next()
    }

    /// Reads the record at the current position.
    pub fn read_next(&mut self) -> Result<RawImage> {
        let mut buf = vec![0u8; STL_RECORD_BYTES];
        self.file.read_exact(&mut buf).at(&self.path)?;
        Ok(decode_record(&buf))
    }

    pub fn read_range(&mut self, start: usize, count: usize) -> Result<Vec<RawImage>> {
        if count == 0 {
            return Ok(Vec::new());
        }
        let first = self.read(start)?;
        let mut out = Vec::with_capacity(count);
        out.push(first);
        for _ in 1..count {
            out.push(self.read_next()?);
        }
        Ok(out)
    }
}

fn check_limit(limit: Option<usize>, available: usize, path: &Path) -> Result<usize> {
    match limit {
        Some(n) if n > available => Err(Error::Contract(format!(
            "limit {n} exceeds the {available} records in {}",
            path.display()
        ))),
        Some(n) => Ok(n),
        None => Ok(available),
    }
}

pub fn load_images(path: &Path, limit: Option<usize>) -> Result<Vec<RawImage>> {
    let mut reader = StlReader::open(path)?;
    let n = check_limit(limit, reader.len(), path)?;
    reader.read_range(0, n)
}

pub fn load_labels(path: &Path, limit: Option<usize>) -> Result<Vec<u32>> {
    let bytes = std::fs::read(path).at(path)?;
    let n = check_limit(limit, bytes.len(), path)?;
    bytes[..n]
        .iter()
        .enumerate()
        .map(|(i, &b)| {
            if (1..=STL_CLASSES as u8).contains(&b) {
                Ok(b as u32 - 1)
            } else {
                Err(Error::format(
                    path.display().to_string(),
                    i as u64,
                    format!("label {b} outside 1..=10"),
                ))
            }
        })
        .collect()
}

pub fn load_folds(path: &Path) -> Result<Vec<Vec<usize>>> {
    let file = File::open(path).at(path)?;
    let mut folds = Vec::new();
    let mut offset = 0u64;
    for line in BufReader::new(file).lines() {
        let line = line.at(path)?;
        let len = line.len() as u64 + 1;
        if !line.trim().is_empty() {
            let fold = line
                .split_whitespace()
                .map(|tok| {
                    tok.parse::<usize>().map_err(|_| {
                        Error::format(path.display().to_string(), offset, format!("bad index {tok:?}"))
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            folds.push(fold);
        }
        offset += len;
    }
    Ok(folds)
}

/// Loaded STL-10 split.
#[derive(Clone, Debug)]
pub enum StlData {
    Unlabeled(Vec<RawImage>),
    Labeled {
        examples: Vec<LabeledExample>,
        /// Present for the training split.
        folds: Option<Vec<Vec<usize>>>,
    },
}

pub fn load_stl10(spec: &DatasetSpec) -> Result<StlData> {
    let root = &spec.root;
    let (x, y) = match spec.kind {
        DatasetKind::Stl10Unlabeled => {
            return Ok(StlData::Unlabeled(load_images(
                &root.join(UNLABELED_FILE),
                spec.limit,
            )?))
        }
        DatasetKind::Stl10Train => (TRAIN_X_FILE, TRAIN_Y_FILE),
        DatasetKind::Stl10Test => (TEST_X_FILE, TEST_Y_FILE),
        other => {
            return Err(Error::Contract(format!(
                "load_stl10 called with {other:?}"
            )))
        }
    };
    let images = load_images(&root.join(x), spec.limit)?;
    let labels = load_labels(&root.join(y), Some(images.len()))?;
    let examples = images
        .into_iter()
        .zip(labels)
        .map(|(image, label)| LabeledExample { image, label })
        .collect();
    let folds = if spec.kind == DatasetKind::Stl10Train {
        Some(load_folds(&root.join(FOLDS_FILE))?)
    } else {
        None
    };
    Ok(StlData::Labeled { examples, folds })
}

pub fn write_images(path: &Path, images: &[RawImage]) -> Result<()> {
    let mut f = std::io::BufWriter::new(File::create(path).at(path)?);
    for img in images {
        f.write_all(&encode_record(img)?).at(path)?;
    }
    f.flush().at(path)
}

/// Writes 0-based labels as STL-10 1-based label bytes.
pub fn write_labels(path: &Path, labels: &[u32]) -> Result<()> {
    let bytes = labels
        .iter()
        .map(|&l| {
            if l < STL_CLASSES {
                Ok(l as u8 + 1)
            } else {
                Err(Error::Contract(format!("label {l} outside 0..10")))
            }
        })
        .collect::<Result<Vec<u8>>>()?;
    std::fs::write(path, bytes).at(path)
}

pub fn write_folds(path: &Path, folds: &[Vec<usize>]) -> Result<()> {
    let text: String = folds
        .iter()
        .map(|f| {
            let line: Vec<String> = f.iter().map(|i| i.to_string()).collect();
            line.join(" ") + "\n"
        })
        .collect();
    std::fs::write(path, text).at(path)
}
