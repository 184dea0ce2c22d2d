use crate::error::{Error, Result};

/// An 8-bit RGB image stored row-major, three interleaved channels per pixel.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawImage {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl RawImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Contract(format!(
                "image dimensions must be positive, got {width}x{height}"
            )));
        }
        if pixels.len() != width * height * 3 {
            return Err(Error::Contract(format!(
                "pixel buffer of {} bytes does not match {width}x{height}x3",
                pixels.len()
            )));
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        assert!(width > 0 && height > 0, "image dimensions must be positive");
        let pixels = rgb.iter().copied().cycle().take(width * height * 3).collect();
        Self {
            width,
            height,
            pixels,
        }
    }

    /// Builds an image by evaluating `f(row, col)` for every pixel.
    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> [u8; 3]) -> Self {
        assert!(width > 0 && height > 0, "image dimensions must be positive");
        let mut pixels = Vec::with_capacity(width * height * 3);
        for r in 0..height {
            for c in 0..width {
                pixels.extend_from_slice(&f(r, c));
            }
        }
        Self {
            width,
            height,
            pixels,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn into_pixels(self) -> Vec<u8> {
        self.pixels
    }

    #[inline]
    pub fn pixel(&self, row: usize, col: usize) -> [u8; 3] {
        let i = (row * self.width + col) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    #[inline]
    pub fn channel(&self, row: usize, col: usize, ch: usize) -> u8 {
        self.pixels[(row * self.width + col) * 3 + ch]
    }

    pub fn full_box(&self) -> BoundingBox {
        BoundingBox::new(0, 0, self.height - 1, self.width - 1)
    }
}

/// Axis-aligned box with inclusive pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BoundingBox {
    pub top: usize,
    pub left: usize,
    pub bottom: usize,
    pub right: usize,
}

impl BoundingBox {
    pub fn new(top: usize, left: usize, bottom: usize, right: usize) -> Self {
        debug_assert!(top <= bottom && left <= right);
        Self {
            top,
            left,
            bottom,
            right,
        }
    }

    pub fn point(row: usize, col: usize) -> Self {
        Self::new(row, col, row, col)
    }

    pub fn width(&self) -> usize {
        self.right - self.left + 1
    }

    pub fn height(&self) -> usize {
        self.bottom - self.top + 1
    }

    pub fn area(&self) -> usize {
        self.width() * self.height()
    }

    pub fn union(&self, other: &BoundingBox) -> BoundingBox {
        BoundingBox {
            top: self.top.min(other.top),
            left: self.left.min(other.left),
            bottom: self.bottom.max(other.bottom),
            right: self.right.max(other.right),
        }
    }

    pub fn extend(&mut self, row: usize, col: usize) {
        self.top = self.top.min(row);
        self.left = self.left.min(col);
        self.bottom = self.bottom.max(row);
        self.right = self.right.max(col);
    }

    pub fn fits(&self, width: usize, height: usize) -> bool {
        self.top <= self.bottom && self.left <= self.right && self.bottom < height && self.right < width
    }
}

pub fn crop(img: &RawImage, bbox: &BoundingBox) -> Result<RawImage> {
    if !bbox.fits(img.width, img.height) {
        return Err(Error::Contract(format!(
            "box {bbox:?} outside {}x{} image",
            img.width, img.height
        )));
    }
    let w = bbox.width();
    let mut pixels = Vec::with_capacity(w * bbox.height() * 3);
    for r in bbox.top..=bbox.bottom {
        let start = (r * img.width + bbox.left) * 3;
        pixels.extend_from_slice(&img.pixels[start..start + w * 3]);
    }
    RawImage::new(w, bbox.height(), pixels)
}

/// Source coordinate and interpolation weight for one output index under
/// half-pixel-centre sampling.
#[inline]
fn sample_axis(out: usize, in_len: usize, out_len: usize) -> (usize, usize, f64) {
    let scale = in_len as f64 / out_len as f64;
    let src = ((out as f64 + 0.5) * scale - 0.5).max(0.0);
    let i0 = (src.floor() as usize).min(in_len - 1);
    let i1 = (i0 + 1).min(in_len - 1);
    (i0, i1, src - i0 as f64)
}

/// Bilinear resize with half-pixel centres (`align_corners = false`); each
/// channel is interpolated independently and rounded half away from zero.
pub fn resize_bilinear(img: &RawImage, out_w: usize, out_h: usize) -> Result<RawImage> {
    if out_w == 0 || out_h == 0 {
        return Err(Error::Contract(format!(
            "resize target must be positive, got {out_w}x{out_h}"
        )));
    }
    if out_w == img.width && out_h == img.height {
        return Ok(img.clone());
    }
    let cols: Vec<_> = (0..out_w)
        .map(|x| sample_axis(x, img.width, out_w))
        .collect();
    let mut pixels = Vec::with_capacity(out_w * out_h * 3);
    for y in 0..out_h {
        let (y0, y1, fy) = sample_axis(y, img.height, out_h);
        for &(x0, x1, fx) in &cols {
            for ch in 0..3 {
                let p00 = img.channel(y0, x0, ch) as f64;
                let p01 = img.channel(y0, x1, ch) as f64;
                let p10 = img.channel(y1, x0, ch) as f64;
                let p11 = img.channel(y1, x1, ch) as f64;
                let top = p00 + (p01 - p00) * fx;
                let bottom = p10 + (p11 - p10) * fx;
                let v = top + (bottom - top) * fy;
                pixels.push(v.round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    RawImage::new(out_w, out_h, pixels)
}

/// Per-pixel HSV image. Hue is in degrees `[0, 360)`, saturation and value in `[0, 1]`.
#[derive(Clone, Debug)]
pub struct HsvImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<[f32; 3]>,
}

pub fn hsv_pixel(rgb: [u8; 3]) -> [f32; 3] {
    let [r, g, b] = rgb.map(|v| v as f32 / 255.0);
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let v = max;
    if delta <= 0.0 {
        return [0.0, 0.0, v];
    }
    let s = delta / max;
    let sector = if max == r {
        ((g - b) / delta).rem_euclid(6.0)
    } else if max == g {
        (b - r) / delta + 2.0
    } else {
        (r - g) / delta + 4.0
    };
    let mut h = 60.0 * sector;
    if h >= 360.0 {
        h -= 360.0;
    }
    [h, s, v]
}

pub fn rgb_to_hsv(img: &RawImage) -> HsvImage {
    let data = img
        .pixels
        .chunks_exact(3)
        .map(|p| hsv_pixel([p[0], p[1], p[2]]))
        .collect();
    HsvImage {
        width: img.width,
        height: img.height,
        data,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn gradient(w: usize, h: usize) -> RawImage {
        RawImage::from_fn(w, h, |r, c| {
            [(r * 7 + c) as u8, (c * 13 % 256) as u8, ((r * c) % 251) as u8]
        })
    }

    #[test]
    fn new_checks_buffer_length() {
        assert!(RawImage::new(2, 2, vec![0; 11]).is_err());
        assert!(RawImage::new(0, 2, vec![]).is_err());
        assert!(RawImage::new(2, 2, vec![0; 12]).is_ok());
    }

    #[test]
    fn crop_full_box_is_identity() {
        let img = gradient(9, 5);
        assert_eq!(crop(&img, &img.full_box()).unwrap(), img);
    }

    #[test]
    fn crop_single_pixel() {
        let img = gradient(9, 5);
        let c = crop(&img, &BoundingBox::point(3, 7)).unwrap();
        assert_eq!((c.width(), c.height()), (1, 1));
        assert_eq!(c.pixel(0, 0), img.pixel(3, 7));
    }

    #[test]
    fn crop_out_of_bounds_is_rejected() {
        let img = gradient(9, 5);
        let err = crop(&img, &BoundingBox::new(0, 0, 5, 3)).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn crop_matches_naive_copy() {
        let img = gradient(23, 17);
        let mut rng = rand::thread_rng();
        use rand::Rng;
        for _ in 0..50 {
            let (t, b) = {
                let a = rng.gen_range(0..17);
                let b = rng.gen_range(0..17);
                (a.min(b), a.max(b))
            };
            let (l, r) = {
                let a = rng.gen_range(0..23);
                let b = rng.gen_range(0..23);
                (a.min(b), a.max(b))
            };
            let bx = BoundingBox::new(t, l, b, r);
            let out = crop(&img, &bx).unwrap();
            for rr in 0..bx.height() {
                for cc in 0..bx.width() {
                    for ch in 0..3 {
                        assert_eq!(out.pixels()[(rr * bx.width() + cc) * 3 + ch], img.pixels()[((t + rr) * 23 + l + cc) * 3 + ch]);
                    }
                }
            }
        }
    }

    #[test]
    fn resize_same_size_is_identity() {
        let img = gradient(8, 6);
        assert_eq!(resize_bilinear(&img, 8, 6).unwrap(), img);
    }

    #[test]
    fn resize_constant_stays_constant() {
        let img = RawImage::filled(13, 7, [12, 200, 99]);
        for (w, h) in [(32, 32), (1, 1), (5, 40)] {
            let out = resize_bilinear(&img, w, h).unwrap();
            assert!(out.pixels().chunks(3).all(|p| p == [12, 200, 99]));
        }
    }

    #[test]
    fn resize_2x2_checkerboard_to_4x4() {
        // Oracle: scalar bilinear evaluation with half-pixel centres. Source
        // coordinates for outputs 0..4 are -0.25 (clamped to 0), 0.25, 0.75,
        // 1.25 (clamped index 1). Values frozen from that evaluation.
        let img = RawImage::from_fn(2, 2, |r, c| if (r + c) % 2 == 1 { [255; 3] } else { [0; 3] });
        let out = resize_bilinear(&img, 4, 4).unwrap();
        let expected: [[u8; 4]; 4] = [
            [0, 64, 191, 255],
            [64, 96, 159, 191],
            [191, 159, 96, 64],
            [255, 191, 64, 0],
        ];
        for r in 0..4 {
            for c in 0..4 {
                assert_eq!(out.pixel(r, c), [expected[r][c]; 3], "at ({r},{c})");
            }
        }
    }

    #[test]
    fn hsv_anchors() {
        assert_eq!(hsv_pixel([255, 0, 0]), [0.0, 1.0, 1.0]);
        assert_eq!(hsv_pixel([128, 128, 128]), [0.0, 0.0, 128.0 / 255.0]);
        // Textbook conversion of (10, 200, 57): max = G, delta = 190/255,
        // H = 60 * ((57 - 10) / 190 + 2) = 134.842..., S = 190/200, V = 200/255.
        let [h, s, v] = hsv_pixel([10, 200, 57]);
        assert!((h as f64 - 134.842_105_263).abs() < 1e-4);
        assert!((s as f64 - 0.95).abs() < 1e-6);
        assert!((v as f64 - 200.0 / 255.0).abs() < 1e-6);
    }

    fn brute_hsv(rgb: [u8; 3]) -> [f64; 3] {
        let r = rgb[0] as f64 / 255.0;
        let g = rgb[1] as f64 / 255.0;
        let b = rgb[2] as f64 / 255.0;
        let max = r.max(g).max(b);
        let min = r.min(g).min(b);
        let c = max - min;
        let h = if c == 0.0 {
            0.0
        } else if max == r {
            60.0 * (((g - b) / c) % 6.0)
        } else if max == g {
            60.0 * ((b - r) / c + 2.0)
        } else {
            60.0 * ((r - g) / c + 4.0)
        };
        let h = if h < 0.0 { h + 360.0 } else { h };
        let s = if max == 0.0 { 0.0 } else { c / max };
        [h, s, max]
    }

    proptest! {
        #[test]
        fn hsv_matches_reference(r in any::<u8>(), g in any::<u8>(), b in any::<u8>()) {
            let got = hsv_pixel([r, g, b]);
            let want = brute_hsv([r, g, b]);
            prop_assert!(got[0] >= 0.0 && got[0] < 360.0);
            // hue wraps, compare on the circle
            let dh = ((got[0] as f64 - want[0]).abs()) % 360.0;
            prop_assert!(dh.min(360.0 - dh) < 1e-3);
            prop_assert!((got[1] as f64 - want[1]).abs() < 1e-5);
            prop_assert!((got[2] as f64 - want[2]).abs() < 1e-6);
        }

        #[test]
        fn resize_stays_within_channel_range(
            w in 1usize..12, h in 1usize..12, ow in 1usize..20, oh in 1usize..20, seed in any::<u64>()
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let img = RawImage::from_fn(w, h, |_, _| [rng.gen(), rng.gen(), rng.gen()]);
            let out = resize_bilinear(&img, ow, oh).unwrap();
            for ch in 0..3 {
                let lo = img.pixels().iter().skip(ch).step_by(3).min().unwrap();
                let hi = img.pixels().iter().skip(ch).step_by(3).max().unwrap();
                for v in out.pixels().iter().skip(ch).step_by(3) {
                    prop_assert!(v >= lo && v <= hi);
                }
            }
        }

        #[test]
        fn nested_crops_compose(
            t1 in 0usize..5, l1 in 0usize..5, h1 in 4usize..10, w1 in 4usize..10,
            t2 in 0usize..3, l2 in 0usize..3, h2 in 1usize..2, w2 in 1usize..2,
        ) {
            let img = gradient(20, 20);
            let outer = BoundingBox::new(t1, l1, t1 + h1 - 1, l1 + w1 - 1);
            let inner = BoundingBox::new(t2, l2, t2 + h2, l2 + w2);
            let composed = BoundingBox::new(t1 + t2, l1 + l2, t1 + t2 + h2, l1 + l2 + w2);
            let a = crop(&crop(&img, &outer).unwrap(), &inner).unwrap();
            prop_assert_eq!(a, crop(&img, &composed).unwrap());
        }
    }
}
