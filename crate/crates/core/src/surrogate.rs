//! Surrogate classification dataset: every proposal of a source image is
//! labelled with that image's (densely remapped) index.

use std::collections::BTreeMap;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::{crop, resize_bilinear, ImageSource, RawImage};
use crate::error::{Error, IoContext, Result};
use crate::proposals::ProposalSet;

pub const DATASET_MAGIC: &[u8; 8] = b"SCNNDS01";
pub const PATCH_SIDE: usize = 32;

/// Number of proposals per source image, indexed by image.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ProposalCounts {
    pub counts: Vec<usize>,
}

/// Counts boxes per image. Images with no record in the cache count as 0;
/// `image_count` fixes the length (defaults to the largest index + 1).
pub fn count_proposals(cache: &[ProposalSet], image_count: Option<usize>) -> ProposalCounts {
    let len = image_count.unwrap_or_else(|| {
        cache.iter().map(|s| s.image_index as usize + 1).max().unwrap_or(0)
    });
    let mut counts = vec![0; len];
    for set in cache {
        if let Some(c) = counts.get_mut(set.image_index as usize) {
            *c = set.boxes.len();
        }
    }
    ProposalCounts { counts }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassSelection {
    /// Source image indices, most proposals first.
    pub chosen: Vec<usize>,
    pub label_map: BTreeMap<usize, u32>,
    /// Set when fewer than the requested number of classes were available.
    pub truncated: bool,
}

impl ClassSelection {
    pub fn class_count(&self) -> usize {
        self.chosen.len()
    }
}

pub fn select_top_classes(t: &ProposalCounts, c: usize) -> Result<ClassSelection> {
    if c == 0 {
        return Err(Error::Contract("class count must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..t.counts.len()).collect();
    order.sort_by(|&a, &b| t.counts[b].cmp(&t.counts[a]));
    let truncated = c > order.len();
    order.truncate(c);
    let label_map = order.iter().enumerate().map(|(j, &i)| (i, j as u32)).collect();
    Ok(ClassSelection {
        chosen: order,
        label_map,
        truncated,
    })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SurrogateExample {
    pub image: RawImage,
    pub label: u32,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SurrogateDataset {
    pub examples: Vec<SurrogateExample>,
    pub class_count: usize,
}

impl SurrogateDataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.class_count];
        for ex in &self.examples {
            counts[ex.label as usize] += 1;
        }
        counts
    }

    pub fn labels(&self) -> Vec<u32> {
        self.examples.iter().map(|e| e.label).collect()
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(16 + self.len() * (4 + PATCH_SIDE * PATCH_SIDE * 3));
        out.extend_from_slice(DATASET_MAGIC);
        out.write_u32::<LittleEndian>(self.len() as u32).expect("vec write");
        out.write_u32::<LittleEndian>(self.class_count as u32).expect("vec write");
        for ex in &self.examples {
            if ex.image.width() != PATCH_SIDE || ex.image.height() != PATCH_SIDE {
                return Err(Error::Contract(format!(
                    "dataset files hold {PATCH_SIDE}x{PATCH_SIDE} patches, got {}x{}",
                    ex.image.width(),
                    ex.image.height()
                )));
            }
            out.write_u32::<LittleEndian>(ex.label).expect("vec write");
            out.extend_from_slice(ex.image.pixels());
        }
        Ok(out)
    }

    pub fn write(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.encode()?).at(path)
    }

    pub fn read(path: &std::path::Path) -> Result<Self> {
        Self::decode(&std::fs::read(path).at(path)?)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        const WHAT: &str = "surrogate dataset";
        const PATCH: usize = PATCH_SIDE * PATCH_SIDE * 3;
        if bytes.len() < 16 || &bytes[..8] != DATASET_MAGIC {
            return Err(Error::format(WHAT, 0, "missing SCNNDS01 header"));
        }
        let mut cur = &bytes[8..16];
        let n = cur.read_u32::<LittleEndian>().expect("length checked") as usize;
        let class_count = cur.read_u32::<LittleEndian>().expect("length checked") as usize;
        let expected = 16 + n * (4 + PATCH);
        if bytes.len() != expected {
            return Err(Error::format(
                WHAT,
                bytes.len().min(expected) as u64,
                format!("expected {expected} bytes for {n} examples, found {}", bytes.len()),
            ));
        }
        let examples = bytes[16..]
            .chunks_exact(4 + PATCH)
            .enumerate()
            .map(|(i, rec)| {
                let label = u32::from_le_bytes(rec[..4].try_into().expect("4 bytes"));
                if label as usize >= class_count {
                    return Err(Error::format(
                        WHAT,
                        (16 + i * (4 + PATCH)) as u64,
                        format!("label {label} >= class count {class_count}"),
                    ));
                }
                Ok(SurrogateExample {
                    image: RawImage::new(PATCH_SIDE, PATCH_SIDE, rec[4..].to_vec())?,
                    label,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            examples,
            class_count,
        })
    }
}

/// Crops every cached box of every chosen image, resizes to `patch` x `patch`,
/// and labels it with the image's class. Order: chosen order, then box order.
pub fn build_surrogate_dataset<S: ImageSource + ?Sized>(
    images: &mut S,
    cache: &[ProposalSet],
    sel: &ClassSelection,
    patch: usize,
) -> Result<SurrogateDataset> {
    let by_image: BTreeMap<usize, &ProposalSet> =
        cache.iter().map(|s| (s.image_index as usize, s)).collect();
    // Source reads are sequential (the reader owns a file cursor); cropping
    // and resizing fan out per class.
    let mut sources = Vec::with_capacity(sel.chosen.len());
    for &src in &sel.chosen {
        if src >= images.len() {
            return Err(Error::Contract(format!(
                "chosen image {src} outside the {} available images",
                images.len()
            )));
        }
        sources.push(images.image(src)?);
    }
    let per_class: Vec<Vec<SurrogateExample>> = sel
        .chosen
        .par_iter()
        .zip(sources.par_iter())
        .map(|(&src, img)| {
            let label = sel.label_map[&src];
            let boxes = by_image.get(&src).map_or(&[][..], |s| &s.boxes[..]);
            boxes
                .iter()
                .map(|b| {
                    let patch_img = crop(img, b).map_err(|_| {
                        Error::Contract(format!(
                            "box {b:?} of image {src} lies outside its {}x{} bounds",
                            img.width(),
                            img.height()
                        ))
                    })?;
                    Ok(SurrogateExample {
                        image: resize_bilinear(&patch_img, patch, patch)?,
                        label,
                    })
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SurrogateDataset {
        examples: per_class.into_iter().flatten().collect(),
        class_count: sel.chosen.len(),
    })
}

/// Stratified, seeded split into `(train, holdout)`.
///
/// The total holdout size is `round(n * fraction)`, apportioned over classes
/// by largest remainder so every class is within one example of its exact share.
pub fn shuffle_split(
    ds: &SurrogateDataset,
    seed: u64,
    holdout_fraction: f64,
) -> Result<(SurrogateDataset, SurrogateDataset)> {
    if !(0.0..1.0).contains(&holdout_fraction) {
        return Err(Error::Contract(format!(
            "holdout fraction {holdout_fraction} outside [0, 1)"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); ds.class_count];
    for (i, ex) in ds.examples.iter().enumerate() {
        members[ex.label as usize].push(i);
    }
    for m in &mut members {
        m.shuffle(&mut rng);
    }

    let total = (ds.len() as f64 * holdout_fraction).round() as usize;
    let exact: Vec<f64> = members.iter().map(|m| m.len() as f64 * holdout_fraction).collect();
    let mut quota: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let assigned: usize = quota.iter().sum();
    let mut by_remainder: Vec<usize> = (0..members.len()).collect();
    by_remainder.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &c in by_remainder.iter().take(total.saturating_sub(assigned)) {
        if quota[c] < members[c].len() {
            quota[c] += 1;
        }
    }

    let mut train_idx = Vec::with_capacity(ds.len());
    let mut hold_idx = Vec::with_capacity(total);
    for (m, q) in members.iter().zip(&quota) {
        hold_idx.extend_from_slice(&m[..*q]);
        train_idx.extend_from_slice(&m[*q..]);
    }
    train_idx.shuffle(&mut rng);
    hold_idx.shuffle(&mut rng);
    let pick = |idx: &[usize]| SurrogateDataset {
        examples: idx.iter().map(|&i| ds.examples[i].clone()).collect(),
        class_count: ds.class_count,
    };
    Ok((pick(&train_idx), pick(&hold_idx)))
}
