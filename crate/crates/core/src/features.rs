//! Transfer features: last convolutional maps, max-pooled over four quadrants.

use std::path::Path;

use byteorder::{ByteOrder, LittleEndian};

use crate::data::{resize_bilinear, RawImage};
use crate::error::{Error, IoContext, Result};
use crate::nn::{normalize_batch, ModelParams, Tensor4, Workers, INPUT_SHAPE};

pub const FEATURE_MAGIC: &[u8; 8] = b"SCNNFEA1";

const EXTRACT_CHUNK: usize = 32;

/// Activations feeding the first fully connected layer, `1 x K x H x W`.
pub fn forward_to_last_conv(model: &ModelParams<f32>, img: &RawImage) -> Result<Tensor4<f32>> {
    let x = normalize_batch(std::iter::once(img))?;
    model.features(&x)
}

/// Per channel, the max over each of four blocks split at `floor(h/2)` and
/// `floor(w/2)`. Output is quadrant-major (TL, TR, BL, BR), channel-minor.
pub fn quadrant_max_pool(maps: &[f32], shape: [usize; 3]) -> Result<Vec<f32>> {
    let [k, h, w] = shape;
    if h < 2 || w < 2 {
        return Err(Error::Contract(format!("quadrant pooling needs maps of at least 2x2, got {h}x{w}")));
    }
    if maps.len() != k * h * w {
        return Err(Error::Contract(format!("{} values for {k}x{h}x{w} maps", maps.len())));
    }
    let (mh, mw) = (h / 2, w / 2);
    let blocks = [(0, mh, 0, mw), (0, mh, mw, w), (mh, h, 0, mw), (mh, h, mw, w)];
    let mut out = vec![0f32; 4 * k];
    for (q, &(r0, r1, c0, c1)) in blocks.iter().enumerate() {
        for ch in 0..k {
            let plane = &maps[ch * h * w..(ch + 1) * h * w];
            let mut m = f32::NEG_INFINITY;
            for r in r0..r1 {
                for &v in &plane[r * w + c0..r * w + c1] {
                    m = m.max(v);
                }
            }
            out[q * k + ch] = m;
        }
    }
    Ok(out)
}

/// Dense row-major `rows x cols` matrix of 32-bit features.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl FeatureMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Contract(format!(
                "feature matrix {rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// Rows at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            if i >= self.rows {
                return Err(Error::Contract(format!("row {i} out of range for {} rows", self.rows)));
            }
            data.extend_from_slice(self.row(i));
        }
        Self::new(indices.len(), self.cols, data)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = vec![0u8; 16 + 4 * self.data.len()];
        out[..8].copy_from_slice(FEATURE_MAGIC);
        LittleEndian::write_u32(&mut out[8..12], self.rows as u32);
        LittleEndian::write_u32(&mut out[12..16], self.cols as u32);
        LittleEndian::write_f32_into(&self.data, &mut out[16..]);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 {
            return Err(Error::format("feature file", bytes.len() as u64, "truncated header"));
        }
        if &bytes[..8] != FEATURE_MAGIC {
            return Err(Error::format("feature file", 0, "bad magic"));
        }
        let rows = LittleEndian::read_u32(&bytes[8..12]) as usize;
        let cols = LittleEndian::read_u32(&bytes[12..16]) as usize;
        let need = 16 + 4 * rows * cols;
        if bytes.len() != need {
            return Err(Error::format(
                "feature file",
                bytes.len().min(need) as u64,
                format!("{rows}x{cols} matrix needs {need} bytes, file has {}", bytes.len()),
            ));
        }
        let mut data = vec![0f32; rows * cols];
        LittleEndian::read_f32_into(&bytes[16..], &mut data);
        Ok(Self { rows, cols, data })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()).at(path)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::decode(&std::fs::read(path).at(path)?)
    }
}

/// Feature length for `model`: four values per map of the last convolution.
pub fn feature_dim(model: &ModelParams<f32>) -> Result<usize> {
    let cut = model
        .spec()
        .feature_cut()
        .ok_or_else(|| Error::Contract("network has no fully connected layer".into()))?;
    let shape = if cut == 0 { model.input_shape() } else { model.shapes()[cut - 1] };
    Ok(4 * shape[0])
}

fn to_input_size(img: &RawImage) -> Result<RawImage> {
    let [_, h, w] = INPUT_SHAPE;
    if img.width() == w && img.height() == h {
        Ok(img.clone())
    } else {
        resize_bilinear(img, w, h)
    }
}

/// One feature row per image, in input order. Images of any size are
/// resized to the network input first.
pub fn extract_features(model: &ModelParams<f32>, images: &[RawImage], threads: usize) -> Result<FeatureMatrix> {
    let cols = feature_dim(model)?;
    let workers = Workers::new(threads)?;
    let chunks: Vec<(usize, &[RawImage])> = images
        .chunks(EXTRACT_CHUNK)
        .enumerate()
        .map(|(i, c)| (i * EXTRACT_CHUNK, c))
        .collect();
    let parts = workers.map(chunks.len(), |ci| -> Result<Vec<f32>> {
        let (first, chunk) = chunks[ci];
        let with_index = |i: usize, e: Error| match e {
            Error::Contract(m) => Error::Contract(format!("image {}: {m}", first + i)),
            other => other,
        };
        let resized = chunk
            .iter()
            .enumerate()
            .map(|(i, img)| to_input_size(img).map_err(|e| with_index(i, e)))
            .collect::<Result<Vec<_>>>()?;
        let maps = model.features(&normalize_batch(resized.iter())?)?;
        let [_, k, h, w] = maps.dims();
        let mut rows = Vec::with_capacity(chunk.len() * cols);
        for i in 0..chunk.len() {
            rows.extend(quadrant_max_pool(maps.sample(i), [k, h, w]).map_err(|e| with_index(i, e))?);
        }
        Ok(rows)
    });
    let mut data = Vec::with_capacity(images.len() * cols);
    for p in parts {
        data.extend(p?);
    }
    FeatureMatrix::new(images.len(), cols, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{NetworkSpec, INPUT_SHAPE};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn naive_quadrants(maps: &[f32], [k, h, w]: [usize; 3]) -> Vec<f32> {
        let mut out = vec![f32::NEG_INFINITY; 4 * k];
        for ch in 0..k {
            for r in 0..h {
                for c in 0..w {
                    let q = 2 * usize::from(r >= h / 2) + usize::from(c >= w / 2);
                    let v = maps[(ch * h + r) * w + c];
                    out[q * k + ch] = out[q * k + ch].max(v);
                }
            }
        }
        out
    }

    #[test]
    fn constant_map() {
        let maps = vec![1.5f32; 2 * 8 * 8];
        assert_eq!(quadrant_max_pool(&maps, [2, 8, 8]).unwrap(), vec![1.5; 8]);
    }

    #[test]
    fn planted_spikes() {
        let mut maps = vec![0f32; 64];
        for (i, &(r, c)) in [(1, 2), (3, 6), (5, 0), (7, 7)].iter().enumerate() {
            maps[r * 8 + c] = 10.0 + i as f32;
        }
        assert_eq!(quadrant_max_pool(&maps, [1, 8, 8]).unwrap(), vec![10.0, 11.0, 12.0, 13.0]);
    }

    #[test]
    fn random_odd_maps_match_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let maps: Vec<f32> = (0..3 * 5 * 7).map(|_| rng.gen_range(-1.0..1.0)).collect();
        assert_eq!(quadrant_max_pool(&maps, [3, 5, 7]).unwrap(), naive_quadrants(&maps, [3, 5, 7]));
        assert!(quadrant_max_pool(&maps[..3 * 7], [3, 1, 7]).is_err());
    }

    #[test]
    fn zero_weight_model_gives_relu_of_bias() {
        let mut model = ModelParams::<f32>::zeros(NetworkSpec::net_small(4), INPUT_SHAPE).unwrap();
        for (k, b) in model.layers[6].bias.iter_mut().enumerate() {
            *b = if k % 2 == 0 { k as f32 * 0.01 } else { -1.0 };
        }
        let img = RawImage::filled(32, 32, [200, 10, 30]);
        let maps = forward_to_last_conv(&model, &img).unwrap();
        assert_eq!(maps.dims(), [1, 256, 8, 8]);
        for k in 0..256 {
            let want = model.layers[6].bias[k].max(0.0);
            assert!(maps.sample(0)[k * 64..(k + 1) * 64].iter().all(|&v| v == want));
        }
        assert!(forward_to_last_conv(&model, &RawImage::filled(16, 16, [0; 3])).is_err());
    }

    #[test]
    fn extraction_composes_and_keeps_order() {
        let model = ModelParams::<f32>::new(NetworkSpec::net_small(4), INPUT_SHAPE, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let imgs: Vec<RawImage> = (0..3)
            .map(|_| RawImage::from_fn(40, 40, |_, _| [rng.gen(), rng.gen(), rng.gen()]))
            .collect();
        let imgs = vec![imgs[0].clone(), imgs[1].clone(), imgs[0].clone(), imgs[2].clone()];
        let f = extract_features(&model, &imgs, 1).unwrap();
        assert_eq!((f.rows, f.cols), (4, 1024));
        assert_eq!(f.row(0), f.row(2));
        let manual = {
            let small = resize_bilinear(&imgs[3], 32, 32).unwrap();
            let maps = forward_to_last_conv(&model, &small).unwrap();
            quadrant_max_pool(maps.sample(0), [256, 8, 8]).unwrap()
        };
        assert_eq!(f.row(3), &manual[..]);
        assert!(f.data.iter().all(|&v| v >= 0.0 && v.is_finite()));
        let empty = extract_features(&model, &[], 1).unwrap();
        assert_eq!((empty.rows, empty.cols), (0, 1024));
        assert_eq!(extract_features(&model, &imgs, 2).unwrap(), f);
    }

    #[test]
    fn file_errors() {
        let m = FeatureMatrix::new(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let bytes = m.encode();
        assert_eq!(FeatureMatrix::decode(&bytes).unwrap(), m);
        assert!(FeatureMatrix::decode(&bytes[..bytes.len() - 1]).is_err());
        assert!(FeatureMatrix::decode(b"SCNNFEA0").is_err());
        assert_eq!(m.select(&[1]).unwrap().data, vec![4.0, 5.0, 6.0]);
    }

    proptest! {
        #[test]
        fn pooling_properties(k in 1usize..4, h in 2usize..7, w in 2usize..7, seed in any::<u64>(), scale in 0.1f32..10.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let maps: Vec<f32> = (0..k * h * w).map(|_| rng.gen_range(0.0..1.0)).collect();
            let base = quadrant_max_pool(&maps, [k, h, w]).unwrap();
            prop_assert_eq!(&base, &naive_quadrants(&maps, [k, h, w]));

            let scaled: Vec<f32> = maps.iter().map(|v| v * scale).collect();
            let s = quadrant_max_pool(&scaled, [k, h, w]).unwrap();
            for (a, b) in s.iter().zip(&base) {
                prop_assert!((a - b * scale).abs() <= 1e-6 * scale.max(1.0));
            }

            // Reversing channel order reverses each quadrant block.
            let plane = h * w;
            let rev: Vec<f32> = (0..k).rev().flat_map(|c| maps[c * plane..(c + 1) * plane].to_vec()).collect();
            let r = quadrant_max_pool(&rev, [k, h, w]).unwrap();
            for q in 0..4 {
                for c in 0..k {
                    prop_assert_eq!(r[q * k + c], base[q * k + (k - 1 - c)]);
                }
            }
        }

        #[test]
        fn feature_file_roundtrip(rows in 0usize..5, cols in 0usize..6, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let data: Vec<f32> = (0..rows * cols).map(|_| rng.gen()).collect();
            let bytes = FeatureMatrix::new(rows, cols, data).unwrap().encode();
            prop_assert_eq!(FeatureMatrix::decode(&bytes).unwrap().encode(), bytes);
        }
    }
}
