//! CIFAR-10 / CIFAR-100 binary batches.
//!
//! CIFAR-10 records are 3073 bytes (label, then 1024-byte R, G, B planes, each
//! row-major). CIFAR-100 records are 3074 bytes: coarse label, fine label,
//! then the same planes. Only the fine label is returned.

use std::path::{Path, PathBuf};

use super::image::RawImage;
use super::{DatasetKind, DatasetSpec, LabeledExample};
use crate::error::{Error, IoContext, Result};

pub const CIFAR_SIDE: usize = 32;
pub const CIFAR_PLANE: usize = CIFAR_SIDE * CIFAR_SIDE;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CifarVariant {
    Cifar10,
    Cifar100,
}

impl CifarVariant {
    pub fn label_bytes(self) -> usize {
        match self {
            CifarVariant::Cifar10 => 1,
            CifarVariant::Cifar100 => 2,
        }
    }

    pub fn record_bytes(self) -> usize {
        self.label_bytes() + 3 * CIFAR_PLANE
    }

    pub fn classes(self) -> u32 {
        match self {
            CifarVariant::Cifar10 => 10,
            CifarVariant::Cifar100 => 100,
        }
    }
}

pub fn split_files(kind: DatasetKind) -> Result<(CifarVariant, Vec<&'static str>)> {
    Ok(match kind {
        DatasetKind::Cifar10Train => (
            CifarVariant::Cifar10,
            vec![
                "data_batch_1.bin",
                "data_batch_2.bin",
                "data_batch_3.bin",
                "data_batch_4.bin",
                "data_batch_5.bin",
            ],
        ),
        DatasetKind::Cifar10Test => (CifarVariant::Cifar10, vec!["test_batch.bin"]),
        DatasetKind::Cifar100Train => (CifarVariant::Cifar100, vec!["train.bin"]),
        DatasetKind::Cifar100Test => (CifarVariant::Cifar100, vec!["test.bin"]),
        other => return Err(Error::Contract(format!("load_cifar called with {other:?}"))),
    })
}

pub fn decode_record(variant: CifarVariant, bytes: &[u8]) -> (u32, RawImage) {
    let label = bytes[variant.label_bytes() - 1] as u32;
    let planes = &bytes[variant.label_bytes()..];
    let img = RawImage::from_fn(CIFAR_SIDE, CIFAR_SIDE, |r, c| {
        let i = r * CIFAR_SIDE + c;
        [planes[i], planes[CIFAR_PLANE + i], planes[2 * CIFAR_PLANE + i]]
    });
    (label, img)
}

/// Encodes one record. For CIFAR-100 the caller supplies the coarse label.
pub fn encode_record(variant: CifarVariant, ex: &LabeledExample, coarse: u8) -> Result<Vec<u8>> {
    let img = &ex.image;
    if img.width() != CIFAR_SIDE || img.height() != CIFAR_SIDE {
        return Err(Error::Contract(format!(
            "CIFAR records are 32x32, got {}x{}",
            img.width(),
            img.height()
        )));
    }
    if ex.label >= variant.classes() {
        return Err(Error::Contract(format!("label {} out of range", ex.label)));
    }
    let mut out = Vec::with_capacity(variant.record_bytes());
    if variant == CifarVariant::Cifar100 {
        out.push(coarse);
    }
    out.push(ex.label as u8);
    for ch in 0..3 {
        out.extend(img.pixels().iter().skip(ch).step_by(3));
    }
    Ok(out)
}

pub fn decode_file(variant: CifarVariant, path: &Path, bytes: &[u8], limit: usize) -> Result<Vec<LabeledExample>> {
    let rb = variant.record_bytes();
    if bytes.len() % rb != 0 {
        return Err(Error::format(
            path.display().to_string(),
            (bytes.len() / rb * rb) as u64,
            format!("file size {} is not a multiple of {rb}", bytes.len()),
        ));
    }
    bytes
        .chunks_exact(rb)
        .take(limit)
        .enumerate()
        .map(|(i, rec)| {
            let (label, image) = decode_record(variant, rec);
            if label >= variant.classes() {
                return Err(Error::format(
                    path.display().to_string(),
                    (i * rb + variant.label_bytes() - 1) as u64,
                    format!("label {label} >= {}", variant.classes()),
                ));
            }
            Ok(LabeledExample { image, label })
        })
        .collect()
}

pub fn load_cifar(spec: &DatasetSpec) -> Result<Vec<LabeledExample>> {
    let (variant, files) = split_files(spec.kind)?;
    let paths: Vec<PathBuf> = files.iter().map(|f| spec.root.join(f)).collect();
    let mut out = Vec::new();
    let mut available = 0;
    for path in &paths {
        let remaining = spec.limit.map_or(usize::MAX, |n| n.saturating_sub(out.len()));
        if remaining == 0 {
            break;
        }
        let bytes = std::fs::read(path).at(path)?;
        available += bytes.len() / variant.record_bytes();
        out.extend(decode_file(variant, path, &bytes, remaining)?);
    }
    if let Some(n) = spec.limit {
        if n > out.len() {
            return Err(Error::Contract(format!(
                "limit {n} exceeds the {available} records under {}",
                spec.root.display()
            )));
        }
    }
    Ok(out)
}

/// Writes examples as one CIFAR batch file; CIFAR-100 coarse labels are written as `fine / 5`.
pub fn write_batch(path: &Path, variant: CifarVariant, examples: &[LabeledExample]) -> Result<()> {
    let mut bytes = Vec::with_capacity(examples.len() * variant.record_bytes());
    for ex in examples {
        bytes.extend(encode_record(variant, ex, (ex.label / 5) as u8)?);
    }
    std::fs::write(path, bytes).at(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn black_image_label_three() {
        let mut rec = vec![0u8; 3073];
        rec[0] = 3;
        let (label, img) = decode_record(CifarVariant::Cifar10, &rec);
        assert_eq!(label, 3);
        assert!(img.pixels().iter().all(|&p| p == 0));
    }

    #[test]
    fn cifar100_returns_fine_label() {
        // Separate decoder: fine label is byte 1, red plane starts at byte 2.
        let mut rec = vec![0u8; 3074];
        rec[0] = 1;
        rec[1] = 42;
        rec[2 + 5 * 32 + 6] = 200; // R at row 5, col 6
        rec[2 + 1024 + 31] = 9; // G at row 0, col 31
        let (label, img) = decode_record(CifarVariant::Cifar100, &rec);
        assert_eq!(label, 42);
        assert_eq!(img.pixel(5, 6), [200, 0, 0]);
        assert_eq!(img.pixel(0, 31), [0, 9, 0]);
    }

    #[test]
    fn size_and_label_errors() {
        let p = Path::new("x.bin");
        assert!(matches!(
            decode_file(CifarVariant::Cifar10, p, &[0u8; 3072], usize::MAX),
            Err(Error::Format { .. })
        ));
        let mut rec = vec![0u8; 3073];
        rec[0] = 10;
        assert!(matches!(
            decode_file(CifarVariant::Cifar10, p, &rec, usize::MAX),
            Err(Error::Format { offset: 0, .. })
        ));
    }

    #[test]
    fn standard_train_split_size() {
        let per_batch = 30_730_000 / CifarVariant::Cifar10.record_bytes();
        assert_eq!(per_batch * 5, 50_000);
    }
}
