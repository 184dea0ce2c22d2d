use std::collections::BTreeSet;

use crate::data::{rgb_to_hsv, BoundingBox, RawImage};
use crate::segmentation::SegmentationResult;

pub const COLOR_BINS: usize = 25;
pub const COLOR_HIST_LEN: usize = COLOR_BINS * 3;
pub const TEXTURE_ORIENTATIONS: usize = 8;
pub const TEXTURE_BINS: usize = 10;
pub const TEXTURE_HIST_LEN: usize = TEXTURE_ORIENTATIONS * TEXTURE_BINS * 3;

/// Largest central-difference gradient magnitude an 8-bit channel can produce.
const MAX_GRADIENT: f32 = 127.5 * std::f32::consts::SQRT_2;

#[derive(Clone, Debug, PartialEq)]
pub struct Region {
    pub id: usize,
    pub size: usize,
    pub bbox: BoundingBox,
    /// 25 bins for each of H, S, V; L1-normalized over all 75 entries.
    pub color_hist: Vec<f64>,
    /// 8 orientations x 10 magnitude bins for each RGB channel; L1-normalized.
    pub texture_hist: Vec<f64>,
    pub neighbors: BTreeSet<usize>,
}

#[inline]
fn bin(v: f32, bins: usize) -> usize {
    ((v * bins as f32) as usize).min(bins - 1)
}

pub fn color_bins(hsv: [f32; 3]) -> [usize; 3] {
    [
        bin(hsv[0] / 360.0, COLOR_BINS),
        COLOR_BINS + bin(hsv[1], COLOR_BINS),
        2 * COLOR_BINS + bin(hsv[2], COLOR_BINS),
    ]
}

/// Texture histogram slot for every pixel and channel: orientation sector of
/// the central-difference gradient (borders clamped), then magnitude bin.
pub fn texture_bins(img: &RawImage) -> Vec<[usize; 3]> {
    let (w, h) = (img.width(), img.height());
    let mut out = Vec::with_capacity(w * h);
    for r in 0..h {
        let (up, down) = (r.saturating_sub(1), (r + 1).min(h - 1));
        for c in 0..w {
            let (left, right) = (c.saturating_sub(1), (c + 1).min(w - 1));
            let mut slots = [0usize; 3];
            for (ch, slot) in slots.iter_mut().enumerate() {
                let gx = (img.channel(r, right, ch) as f32 - img.channel(r, left, ch) as f32) / 2.0;
                let gy = (img.channel(down, c, ch) as f32 - img.channel(up, c, ch) as f32) / 2.0;
                let theta = gy.atan2(gx);
                let orient = bin((theta + std::f32::consts::PI) / std::f32::consts::TAU, TEXTURE_ORIENTATIONS);
                let mag = bin((gx * gx + gy * gy).sqrt() / MAX_GRADIENT, TEXTURE_BINS);
                *slot = ch * TEXTURE_ORIENTATIONS * TEXTURE_BINS + orient * TEXTURE_BINS + mag;
            }
            out.push(slots);
        }
    }
    out
}

fn normalize(hist: &mut [f64]) {
    let sum: f64 = hist.iter().sum();
    if sum > 0.0 {
        hist.iter_mut().for_each(|v| *v /= sum);
    }
}

/// One region per segment, with 8-connected adjacency and colour/texture histograms.
pub fn init_regions(seg: &SegmentationResult, img: &RawImage) -> crate::Result<Vec<Region>> {
    if seg.width != img.width() || seg.height != img.height() {
        return Err(crate::Error::Contract(format!(
            "segmentation {}x{} does not match image {}x{}",
            seg.width,
            seg.height,
            img.width(),
            img.height()
        )));
    }
    let (w, h) = (img.width(), img.height());
    let hsv = rgb_to_hsv(img);
    let texture = texture_bins(img);
    let mut regions: Vec<Region> = (0..seg.region_count)
        .map(|id| Region {
            id,
            size: 0,
            bbox: BoundingBox {
                top: usize::MAX,
                left: usize::MAX,
                bottom: 0,
                right: 0,
            },
            color_hist: vec![0.0; COLOR_HIST_LEN],
            texture_hist: vec![0.0; TEXTURE_HIST_LEN],
            neighbors: BTreeSet::new(),
        })
        .collect();
    for r in 0..h {
        for c in 0..w {
            let p = r * w + c;
            let l = seg.labels[p] as usize;
            let reg = &mut regions[l];
            reg.size += 1;
            reg.bbox.extend(r, c);
            for b in color_bins(hsv.data[p]) {
                reg.color_hist[b] += 1.0;
            }
            for b in texture[p] {
                reg.texture_hist[b] += 1.0;
            }
            // Forward half of the 8-neighbourhood covers every adjacent pair once.
            let mut link = |q: usize| {
                let m = seg.labels[q] as usize;
                if m != l {
                    regions[l].neighbors.insert(m);
                    regions[m].neighbors.insert(l);
                }
            };
            if c + 1 < w {
                link(p + 1);
            }
            if r + 1 < h {
                link(p + w);
                if c + 1 < w {
                    link(p + w + 1);
                }
                if c > 0 {
                    link(p + w - 1);
                }
            }
        }
    }
    for reg in &mut regions {
        normalize(&mut reg.color_hist);
        normalize(&mut reg.texture_hist);
    }
    Ok(regions)
}

fn intersection(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x.min(*y)).sum()
}

/// Sum of colour, texture, size and fill similarities, each in `[0, 1]`.
pub fn similarity(a: &Region, b: &Region, image_area: usize) -> f64 {
    let area = image_area as f64;
    let joint = (a.size + b.size) as f64;
    let s_color = intersection(&a.color_hist, &b.color_hist);
    let s_texture = intersection(&a.texture_hist, &b.texture_hist);
    let s_size = (1.0 - joint / area).clamp(0.0, 1.0);
    let hull = a.bbox.union(&b.bbox).area() as f64;
    let s_fill = (1.0 - (hull - joint) / area).clamp(0.0, 1.0);
    s_color + s_texture + s_size + s_fill
}

fn weighted_mean(a: &[f64], wa: f64, b: &[f64], wb: f64) -> Vec<f64> {
    let mut out: Vec<f64> = a.iter().zip(b).map(|(x, y)| (x * wa + y * wb) / (wa + wb)).collect();
    normalize(&mut out);
    out
}

/// Merges two neighbouring regions into a region with id `new_id`.
pub fn merge(a: &Region, b: &Region, new_id: usize) -> Region {
    let (wa, wb) = (a.size as f64, b.size as f64);
    let mut neighbors: BTreeSet<usize> = a.neighbors.union(&b.neighbors).copied().collect();
    neighbors.remove(&a.id);
    neighbors.remove(&b.id);
    Region {
        id: new_id,
        size: a.size + b.size,
        bbox: a.bbox.union(&b.bbox),
        color_hist: weighted_mean(&a.color_hist, wa, &b.color_hist, wb),
        texture_hist: weighted_mean(&a.texture_hist, wa, &b.texture_hist, wb),
        neighbors,
    }
}
