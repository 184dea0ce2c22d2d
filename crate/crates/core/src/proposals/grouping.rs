use std::cmp::Ordering;
use std::collections::{BTreeSet, HashSet};

use super::region::{init_regions, merge, similarity, Region};
use crate::data::{BoundingBox, RawImage};
use crate::segmentation::{felzenszwalb_segment, SegParams};

/// Queue entry ordered by descending similarity, then ascending id pair.
#[derive(Clone, Copy, Debug)]
struct Candidate {
    sim: f64,
    a: usize,
    b: usize,
}

impl PartialEq for Candidate {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Candidate {}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .sim
            .total_cmp(&self.sim)
            .then(self.a.cmp(&other.a))
            .then(self.b.cmp(&other.b))
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GroupingTrace {
    /// Boxes of the initial regions in id order, then of each merged region.
    pub boxes: Vec<BoundingBox>,
    /// Merged id pairs `(a, b)` with `a < b`, in merge order. The region
    /// created by the `i`-th merge has id `n + i`.
    pub merges: Vec<(usize, usize)>,
}

/// Greedy hierarchical grouping; returns all `2n - 1` boxes before deduplication.
pub fn hierarchical_group(regions: Vec<Region>) -> Vec<BoundingBox> {
    hierarchical_group_traced(regions).boxes
}

pub fn hierarchical_group_traced(regions: Vec<Region>) -> GroupingTrace {
    let n = regions.len();
    let image_area: usize = regions.iter().map(|r| r.size).sum();
    let mut trace = GroupingTrace {
        boxes: regions.iter().map(|r| r.bbox).collect(),
        merges: Vec::with_capacity(n.saturating_sub(1)),
    };
    let mut live: Vec<Option<Region>> = regions.into_iter().map(Some).collect();
    live.reserve(n.saturating_sub(1));

    let mut queue = BTreeSet::new();
    let mut sims = std::collections::HashMap::new();
    for reg in live.iter().flatten() {
        for &m in reg.neighbors.range(reg.id + 1..) {
            let other = live[m].as_ref().expect("neighbor ids refer to initial regions");
            let c = Candidate {
                sim: similarity(reg, other, image_area),
                a: reg.id,
                b: m,
            };
            queue.insert(c);
            sims.insert((reg.id, m), c.sim);
        }
    }

    while let Some(best) = queue.pop_first() {
        sims.remove(&(best.a, best.b));
        let ra = live[best.a].take().expect("queued regions are live");
        let rb = live[best.b].take().expect("queued regions are live");
        for (gone, reg) in [(best.a, &ra), (best.b, &rb)] {
            for &m in &reg.neighbors {
                let key = (gone.min(m), gone.max(m));
                if let Some(sim) = sims.remove(&key) {
                    queue.remove(&Candidate { sim, a: key.0, b: key.1 });
                }
            }
        }
        let new_id = live.len();
        let merged = merge(&ra, &rb, new_id);
        for &m in &merged.neighbors {
            let other = live[m].as_mut().expect("neighbors of live regions are live");
            other.neighbors.remove(&best.a);
            other.neighbors.remove(&best.b);
            other.neighbors.insert(new_id);
            let c = Candidate {
                sim: similarity(other, &merged, image_area),
                a: m,
                b: new_id,
            };
            queue.insert(c);
            sims.insert((m, new_id), c.sim);
        }
        trace.boxes.push(merged.bbox);
        trace.merges.push((best.a, best.b));
        live.push(Some(merged));
    }
    trace
}

/// Proposals for one source image.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ProposalSet {
    pub image_index: u32,
    pub boxes: Vec<BoundingBox>,
}

/// Keeps boxes with both sides at least `min_side`, then drops exact
/// duplicates while preserving first-occurrence order.
pub fn filter_and_dedup(boxes: &[BoundingBox], min_side: usize) -> Vec<BoundingBox> {
    let mut seen = HashSet::new();
    boxes
        .iter()
        .filter(|b| b.width() >= min_side && b.height() >= min_side)
        .filter(|b| seen.insert(**b))
        .copied()
        .collect()
}

pub fn selective_search(img: &RawImage, p: &SegParams, min_box_side: usize) -> ProposalSet {
    let seg = felzenszwalb_segment(img, p);
    let regions = init_regions(&seg, img).expect("segmentation built from this image");
    let boxes = hierarchical_group(regions);
    ProposalSet {
        image_index: 0,
        boxes: filter_and_dedup(&boxes, min_box_side),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::segmentation::SegmentationResult;

    #[test]
    fn one_region_gives_one_box() {
        let img = RawImage::filled(10, 6, [3, 3, 3]);
        let seg = SegmentationResult::from_labels(10, 6, &[0; 60]);
        let boxes = hierarchical_group(init_regions(&seg, &img).unwrap());
        assert_eq!(boxes, vec![img.full_box()]);
    }

    #[test]
    fn quadrants_give_seven_boxes() {
        let (w, h) = (12, 10);
        let img = RawImage::from_fn(w, h, |r, c| [(r * 20) as u8, (c * 20) as u8, 0]);
        let raw: Vec<u32> = (0..w * h)
            .map(|p| ((p / w) >= h / 2) as u32 * 2 + ((p % w) >= w / 2) as u32)
            .collect();
        let seg = SegmentationResult::from_labels(w, h, &raw);
        let boxes = hierarchical_group(init_regions(&seg, &img).unwrap());
        assert_eq!(boxes.len(), 7);
        assert_eq!(*boxes.last().unwrap(), img.full_box());
    }

    #[test]
    fn constant_image_single_proposal() {
        let img = RawImage::filled(96, 96, [90, 30, 200]);
        let set = selective_search(&img, &SegParams::default(), 16);
        assert_eq!(set.boxes, vec![img.full_box()]);
    }

    #[test]
    fn oversized_min_side_empties() {
        let img = RawImage::from_fn(40, 30, |r, c| [(r * 6) as u8, (c * 6) as u8, 0]);
        assert!(selective_search(&img, &SegParams::default(), 41).boxes.is_empty());
    }

    #[test]
    fn dedup_preserves_first_occurrence() {
        let a = BoundingBox::new(0, 0, 20, 20);
        let b = BoundingBox::new(1, 1, 30, 30);
        let tiny = BoundingBox::new(0, 0, 3, 30);
        assert_eq!(filter_and_dedup(&[b, a, tiny, b, a], 16), vec![b, a]);
    }
}
