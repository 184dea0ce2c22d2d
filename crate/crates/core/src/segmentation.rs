//! Graph-based oversegmentation (Felzenszwalb-Huttenlocher) on an
//! 8-connected pixel grid with joint RGB edge weights.

use std::io::Write;

use crate::data::RawImage;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SegParams {
    /// Gaussian pre-smoothing standard deviation, in pixels.
    pub sigma: f32,
    /// Scale threshold; larger values favour larger components.
    pub k: f32,
    /// Minimum component area enforced by the post-pass.
    pub min_size: usize,
}

impl Default for SegParams {
    fn default() -> Self {
        Self {
            sigma: 0.8,
            k: 200.0,
            min_size: 50,
        }
    }
}

impl SegParams {
    pub fn validate(&self) -> crate::Result<()> {
        if !(self.sigma >= 0.0) || !(self.k > 0.0) || self.min_size < 1 {
            return Err(crate::Error::Contract(format!("invalid segmentation parameters {self:?}")));
        }
        Ok(())
    }
}

/// Float RGB image, row-major, three interleaved channels.
#[derive(Clone, Debug, PartialEq)]
pub struct FloatImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl FloatImage {
    pub fn from_raw(img: &RawImage) -> Self {
        Self {
            width: img.width(),
            height: img.height(),
            data: img.pixels().iter().map(|&v| v as f32).collect(),
        }
    }

    #[inline]
    pub fn rgb(&self, idx: usize) -> [f32; 3] {
        [self.data[idx * 3], self.data[idx * 3 + 1], self.data[idx * 3 + 2]]
    }
}

/// Normalized Gaussian weights for offsets `-radius..=radius`, radius = ceil(3 sigma).
pub fn gaussian_kernel(sigma: f32) -> Vec<f32> {
    let radius = (3.0 * sigma).ceil() as i64;
    let w: Vec<f64> = (-radius..=radius)
        .map(|d| (-((d * d) as f64) / (2.0 * (sigma as f64).powi(2))).exp())
        .collect();
    let sum: f64 = w.iter().sum();
    w.iter().map(|v| (v / sum) as f32).collect()
}

/// Separable Gaussian blur per channel with clamped borders.
pub fn gaussian_smooth(img: &RawImage, sigma: f32) -> FloatImage {
    let src = FloatImage::from_raw(img);
    if sigma <= 0.0 {
        return src;
    }
    let kernel = gaussian_kernel(sigma);
    let radius = (kernel.len() / 2) as isize;
    let (w, h) = (img.width(), img.height());
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;

    let mut tmp = vec![0f32; src.data.len()];
    for r in 0..h {
        for c in 0..w {
            for ch in 0..3 {
                let mut acc = 0f32;
                for (i, kv) in kernel.iter().enumerate() {
                    let cc = clamp(c as isize + i as isize - radius, w);
                    acc += kv * src.data[(r * w + cc) * 3 + ch];
                }
                tmp[(r * w + c) * 3 + ch] = acc;
            }
        }
    }
    let mut out = vec![0f32; src.data.len()];
    for r in 0..h {
        for c in 0..w {
            for ch in 0..3 {
                let mut acc = 0f32;
                for (i, kv) in kernel.iter().enumerate() {
                    let rr = clamp(r as isize + i as isize - radius, h);
                    acc += kv * tmp[(rr * w + c) * 3 + ch];
                }
                out[(r * w + c) * 3 + ch] = acc;
            }
        }
    }
    FloatImage {
        width: w,
        height: h,
        data: out,
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Edge {
    pub a: u32,
    pub b: u32,
    pub weight: f32,
}

/// 8-connected grid graph. Edges are emitted pixel by pixel in raster order,
/// each pixel contributing its right, down, down-right and up-right neighbours.
pub fn build_grid_graph(img: &FloatImage) -> Vec<Edge> {
    let (w, h) = (img.width, img.height);
    let mut edges = Vec::with_capacity((4 * w * h).saturating_sub(3 * w + 3 * h - 2));
    let dist = |p: usize, q: usize| {
        let (a, b) = (img.rgb(p), img.rgb(q));
        ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
    };
    let mut push = |p: usize, q: usize| {
        edges.push(Edge {
            a: p as u32,
            b: q as u32,
            weight: dist(p, q),
        })
    };
    for r in 0..h {
        for c in 0..w {
            let p = r * w + c;
            if c + 1 < w {
                push(p, p + 1);
            }
            if r + 1 < h {
                push(p, p + w);
            }
            if c + 1 < w && r + 1 < h {
                push(p, p + w + 1);
            }
            if c + 1 < w && r > 0 {
                push(p, p - w + 1);
            }
        }
    }
    edges
}

/// Union-find with union by rank, path compression, and component sizes.
#[derive(Clone, Debug)]
pub struct DisjointSet {
    parent: Vec<u32>,
    rank: Vec<u8>,
    size: Vec<u32>,
    components: usize,
}

impl DisjointSet {
    pub fn new(n: usize) -> Self {
        Self {
            parent: (0..n as u32).collect(),
            rank: vec![0; n],
            size: vec![1; n],
            components: n,
        }
    }

    pub fn find(&mut self, x: usize) -> usize {
        let mut root = x;
        while self.parent[root] as usize != root {
            root = self.parent[root] as usize;
        }
        let mut cur = x;
        while self.parent[cur] as usize != root {
            let next = self.parent[cur] as usize;
            self.parent[cur] = root as u32;
            cur = next;
        }
        root
    }

    /// Joins two roots and returns the new root.
    pub fn union_roots(&mut self, a: usize, b: usize) -> usize {
        debug_assert!(a != b);
        let (hi, lo) = if self.rank[a] >= self.rank[b] { (a, b) } else { (b, a) };
        self.parent[lo] = hi as u32;
        self.size[hi] += self.size[lo];
        if self.rank[hi] == self.rank[lo] {
            self.rank[hi] += 1;
        }
        self.components -= 1;
        hi
    }

    pub fn size(&self, root: usize) -> usize {
        self.size[root] as usize
    }

    pub fn components(&self) -> usize {
        self.components
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SegmentationResult {
    pub width: usize,
    pub height: usize,
    /// Region id per pixel, raster order; ids are `0..region_count`.
    pub labels: Vec<u32>,
    pub region_count: usize,
}

impl SegmentationResult {
    /// Renumbers an arbitrary label map densely in first-pixel order.
    pub fn from_labels(width: usize, height: usize, raw: &[u32]) -> Self {
        let mut map = std::collections::HashMap::new();
        let labels = raw
            .iter()
            .map(|l| {
                let next = map.len() as u32;
                *map.entry(*l).or_insert(next)
            })
            .collect();
        Self {
            width,
            height,
            labels,
            region_count: map.len(),
        }
    }

    #[inline]
    pub fn label(&self, row: usize, col: usize) -> u32 {
        self.labels[row * self.width + col]
    }

    pub fn region_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.region_count];
        for &l in &self.labels {
            sizes[l as usize] += 1;
        }
        sizes
    }

    /// Binary PGM (P5) with region ids spread over 0..=255, for visual inspection.
    pub fn write_pgm(&self, mut out: impl Write) -> std::io::Result<()> {
        write!(out, "P5\n{} {}\n255\n", self.width, self.height)?;
        let denom = (self.region_count.max(2) - 1) as f64;
        let bytes: Vec<u8> = self
            .labels
            .iter()
            .map(|&l| (l as f64 * 255.0 / denom).round() as u8)
            .collect();
        out.write_all(&bytes)
    }
}

pub fn felzenszwalb_segment(img: &RawImage, p: &SegParams) -> SegmentationResult {
    let smooth = gaussian_smooth(img, p.sigma);
    let mut edges = build_grid_graph(&smooth);
    // Stable sort: equal weights keep edge-index order.
    edges.sort_by(|x, y| x.weight.total_cmp(&y.weight));

    let n = img.width() * img.height();
    let mut set = DisjointSet::new(n);
    let mut threshold = vec![p.k; n];
    for e in &edges {
        let a = set.find(e.a as usize);
        let b = set.find(e.b as usize);
        if a != b && e.weight <= threshold[a] && e.weight <= threshold[b] {
            let root = set.union_roots(a, b);
            // Edges arrive in nondecreasing order, so e.weight is the new
            // maximum internal edge of the merged component.
            threshold[root] = e.weight + p.k / set.size(root) as f32;
        }
    }
    for e in &edges {
        let a = set.find(e.a as usize);
        let b = set.find(e.b as usize);
        if a != b && (set.size(a) < p.min_size || set.size(b) < p.min_size) {
            set.union_roots(a, b);
        }
    }

    let roots: Vec<u32> = (0..n).map(|i| set.find(i) as u32).collect();
    SegmentationResult::from_labels(img.width(), img.height(), &roots)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use std::collections::{HashMap, VecDeque};

    /// Connected components of equal colour under 8-connectivity.
    fn flood_fill_components(img: &RawImage) -> SegmentationResult {
        let (w, h) = (img.width(), img.height());
        let mut label = vec![u32::MAX; w * h];
        let mut next = 0;
        for start in 0..w * h {
            if label[start] != u32::MAX {
                continue;
            }
            let color = img.pixel(start / w, start % w);
            label[start] = next;
            let mut queue = VecDeque::from([start]);
            while let Some(p) = queue.pop_front() {
                let (r, c) = ((p / w) as isize, (p % w) as isize);
                for dr in -1..=1 {
                    for dc in -1..=1 {
                        let (rr, cc) = (r + dr, c + dc);
                        if rr < 0 || cc < 0 || rr >= h as isize || cc >= w as isize {
                            continue;
                        }
                        let q = rr as usize * w + cc as usize;
                        if label[q] == u32::MAX && img.pixel(rr as usize, cc as usize) == color {
                            label[q] = next;
                            queue.push_back(q);
                        }
                    }
                }
            }
            next += 1;
        }
        SegmentationResult::from_labels(w, h, &label)
    }

    #[test]
    fn smooth_sigma_zero_is_cast() {
        let img = RawImage::from_fn(5, 4, |r, c| [r as u8, c as u8, 9]);
        assert_eq!(gaussian_smooth(&img, 0.0), FloatImage::from_raw(&img));
    }

    #[test]
    fn smooth_constant_stays_constant() {
        let img = RawImage::filled(11, 9, [40, 80, 120]);
        let out = gaussian_smooth(&img, 1.7);
        for px in out.data.chunks(3) {
            assert!((px[0] - 40.0).abs() < 1e-3 && (px[1] - 80.0).abs() < 1e-3 && (px[2] - 120.0).abs() < 1e-3);
        }
    }

    #[test]
    fn smooth_impulse_row_matches_kernel() {
        // A single bright pixel in the middle of a 1-row image: the horizontal
        // pass spreads it by the normalized weights exp(-d^2 / (2 * 0.64)).
        let img = RawImage::from_fn(11, 1, |_, c| if c == 5 { [100, 0, 0] } else { [0, 0, 0] });
        let out = gaussian_smooth(&img, 0.8);
        let raw: Vec<f64> = (-3i32..=3).map(|d| (-(d * d) as f64 / 1.28).exp()).collect();
        let sum: f64 = raw.iter().sum();
        for d in -3i32..=3 {
            let expected = 100.0 * raw[(d + 3) as usize] / sum;
            let got = out.data[((5 + d) as usize) * 3] as f64;
            assert!((got - expected).abs() < 1e-3, "offset {d}: {got} vs {expected}");
        }
        assert_eq!(out.data[0], 0.0);
    }

    #[test]
    fn grid_edge_counts() {
        for (w, h) in [(2, 2), (1, 1), (5, 3), (1, 7), (96, 96)] {
            let img = FloatImage::from_raw(&RawImage::filled(w, h, [1, 2, 3]));
            let edges = build_grid_graph(&img);
            assert_eq!(edges.len() as isize, 4 * (w * h) as isize - 3 * h as isize - 3 * w as isize + 2);
            assert!(edges.iter().all(|e| e.weight == 0.0));
        }
    }

    #[test]
    fn grid_weights_on_3x3_gradient() {
        // Pixel (r, c) = (10r, 20c, 0). Enumerate all 20 expected edges by hand:
        // horizontal dist 20, vertical 10, both diagonals sqrt(500).
        let img = RawImage::from_fn(3, 3, |r, c| [10 * r as u8, 20 * c as u8, 0]);
        let edges = build_grid_graph(&FloatImage::from_raw(&img));
        assert_eq!(edges.len(), 20);
        let mut expected = HashMap::new();
        for r in 0..3 {
            for c in 0..3 {
                let p = r * 3 + c;
                if c < 2 {
                    expected.insert((p, p + 1), 20.0);
                }
                if r < 2 {
                    expected.insert((p, p + 3), 10.0);
                }
                if c < 2 && r < 2 {
                    expected.insert((p, p + 4), 500f32.sqrt());
                }
                if c < 2 && r > 0 {
                    expected.insert((p, p - 2), 500f32.sqrt());
                }
            }
        }
        for e in edges {
            let want = expected[&(e.a as usize, e.b as usize)];
            assert!((e.weight - want).abs() < 1e-5);
        }
    }

    #[test]
    fn constant_image_is_one_region() {
        let seg = felzenszwalb_segment(&RawImage::filled(20, 13, [7, 7, 7]), &SegParams::default());
        assert_eq!(seg.region_count, 1);
    }

    #[test]
    fn two_halves_split_exactly() {
        let img = RawImage::from_fn(16, 10, |_, c| if c < 7 { [250, 10, 10] } else { [10, 10, 250] });
        let p = SegParams { sigma: 0.0, k: 1.0, min_size: 1 };
        let seg = felzenszwalb_segment(&img, &p);
        assert_eq!(seg.region_count, 2);
        for r in 0..10 {
            for c in 0..16 {
                assert_eq!(seg.label(r, c), if c < 7 { 0 } else { 1 });
            }
        }
    }

    #[test]
    fn tiny_k_recovers_color_components() {
        let palette = [[0u8, 0, 0], [255, 0, 0], [0, 255, 0], [0, 0, 255]];
        for seed in 0..20 {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let img = RawImage::from_fn(16, 16, |_, _| palette[rng.gen_range(0..4)]);
            let p = SegParams { sigma: 0.0, k: 1e-6, min_size: 1 };
            assert_eq!(felzenszwalb_segment(&img, &p), flood_fill_components(&img));
        }
    }

    fn blobby(seed: u64, w: usize, h: usize) -> RawImage {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let centers: Vec<(f32, f32, [u8; 3])> = (0..6)
            .map(|_| (rng.gen_range(0.0..h as f32), rng.gen_range(0.0..w as f32), [rng.gen(), rng.gen(), rng.gen()]))
            .collect();
        RawImage::from_fn(w, h, |r, c| {
            let nearest = centers
                .iter()
                .min_by(|a, b| {
                    let da = (a.0 - r as f32).powi(2) + (a.1 - c as f32).powi(2);
                    let db = (b.0 - r as f32).powi(2) + (b.1 - c as f32).powi(2);
                    da.total_cmp(&db)
                })
                .unwrap();
            let noise: i16 = rng.gen_range(-20..=20);
            nearest.2.map(|v| (v as i16 + noise).clamp(0, 255) as u8)
        })
    }

    #[test]
    fn region_count_nonincreasing_in_k() {
        for seed in 0..5 {
            let img = blobby(seed, 40, 32);
            let mut prev = usize::MAX;
            for k in [1.0, 10.0, 50.0, 100.0, 200.0, 500.0, 1000.0, 5000.0] {
                let seg = felzenszwalb_segment(&img, &SegParams { sigma: 0.8, k, min_size: 5 });
                assert!(seg.region_count <= prev, "seed {seed} k {k}");
                prev = seg.region_count;
            }
        }
    }

    #[test]
    fn partition_and_min_size_hold() {
        for seed in 0..5 {
            let img = blobby(seed, 48, 48);
            let p = SegParams { sigma: 0.8, k: 100.0, min_size: 30 };
            let seg = felzenszwalb_segment(&img, &p);
            let sizes = seg.region_sizes();
            assert_eq!(sizes.iter().sum::<usize>(), 48 * 48);
            assert!(sizes.iter().all(|&s| s >= 30));
            assert_eq!(seg, felzenszwalb_segment(&img, &p));
        }
    }

    #[test]
    fn disjoint_set_sizes_sum() {
        let mut ds = DisjointSet::new(10);
        let a = ds.find(1);
        let b = ds.find(2);
        let r = ds.union_roots(a, b);
        let c = ds.find(7);
        let r = ds.union_roots(r, c);
        assert_eq!(ds.size(r), 3);
        assert_eq!(ds.find(7), ds.find(1));
        let r2 = ds.find(2);
        assert_eq!(ds.find(r2), r2);
        assert_eq!(ds.components(), 8);
        let roots: std::collections::BTreeSet<_> = (0..10).map(|i| ds.find(i)).collect();
        assert_eq!(roots.iter().map(|&r| ds.size(r)).sum::<usize>(), 10);
    }

    #[test]
    fn pgm_dump_header() {
        let seg = SegmentationResult::from_labels(3, 2, &[5, 5, 9, 9, 1, 1]);
        let mut buf = Vec::new();
        seg.write_pgm(&mut buf).unwrap();
        assert!(buf.starts_with(b"P5\n3 2\n255\n"));
        assert_eq!(&buf[buf.len() - 6..], &[0, 0, 128, 128, 255, 255]);
    }
}
