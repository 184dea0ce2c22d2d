//! End-to-end acceptance checks. Everything runs inside one test so that the
//! timed criteria do not share the CPU with each other.

mod common;

use std::collections::{HashMap, VecDeque};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use scnn::data::{crop, resize_bilinear, BoundingBox, RawImage};
use scnn::features::{extract_features, quadrant_max_pool, FeatureMatrix};
use scnn::harness::{ExperimentConfig, Pipeline, PROPOSALS_FILE};
use scnn::nn::ops::softmax_loss;
use scnn::nn::{evaluate_accuracy, gradient_check, Checkpoint, ModelParams, NetworkSpec, TrainConfig, Trainer, INPUT_SHAPE};
use scnn::proposals::{cache, hierarchical_group_traced, init_regions, merge, similarity, Region};
use scnn::segmentation::{felzenszwalb_segment, SegParams, SegmentationResult};
use scnn::surrogate::{select_top_classes, ProposalCounts, SurrogateDataset, SurrogateExample};
use scnn::svm::{accuracy, predict, train_ova, LinearModel, SvmConfig};
use scnn::synthetic::{unlabeled_scenes, write_stl10_fixture, StlFixture};

type Outcome = Result<String, String>;

fn check(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn c1_gradients() -> Outcome {
    let mut notes = Vec::new();
    for spec in [NetworkSpec::net_small(10), NetworkSpec::net_large(10)] {
        let start = Instant::now();
        let r = gradient_check(&spec, 1, 1e-4).map_err(|e| e.to_string())?;
        let secs = start.elapsed().as_secs_f64();
        check(
            r.max_rel_error < 1e-4,
            format!("{}: max rel error {:e} (worst {:?})", spec.name, r.max_rel_error, r.worst),
        )?;
        check(secs < 60.0, format!("{}: {secs:.1}s", spec.name))?;
        notes.push(format!("{} err {:.1e} in {secs:.1}s", spec.name, r.max_rel_error));
    }
    Ok(notes.join(", "))
}

/// 8-connected components of equal colour, labelled in first-pixel order.
fn bfs_components(img: &RawImage) -> Vec<u32> {
    let (w, h) = (img.width() as i64, img.height() as i64);
    let mut labels = vec![u32::MAX; (w * h) as usize];
    let mut next = 0;
    for start in 0..labels.len() {
        if labels[start] != u32::MAX {
            continue;
        }
        let color = img.pixel(start / w as usize, start % w as usize);
        labels[start] = next;
        let mut queue = VecDeque::from([start]);
        while let Some(p) = queue.pop_front() {
            let (r, c) = ((p as i64) / w, (p as i64) % w);
            for dr in -1..=1 {
                for dc in -1..=1 {
                    let (rr, cc) = (r + dr, c + dc);
                    if rr < 0 || cc < 0 || rr >= h || cc >= w {
                        continue;
                    }
                    let q = (rr * w + cc) as usize;
                    if labels[q] == u32::MAX && img.pixel(rr as usize, cc as usize) == color {
                        labels[q] = next;
                        queue.push_back(q);
                    }
                }
            }
        }
        next += 1;
    }
    labels
}

fn same_partition(a: &[u32], b: &[u32]) -> bool {
    let mut fwd = HashMap::new();
    let mut back = HashMap::new();
    a.iter()
        .zip(b)
        .all(|(x, y)| *fwd.entry(*x).or_insert(*y) == *y && *back.entry(*y).or_insert(*x) == *x)
}

fn c2_segmentation() -> Outcome {
    let palette = [[200, 30, 30], [30, 200, 30], [30, 30, 200], [220, 220, 40]];
    let params = SegParams {
        sigma: 0.0,
        k: 1e-6,
        min_size: 1,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut regions = 0;
    for case in 0..100 {
        // Odd cases use 4x4 blocks so large components also occur.
        let cell = if case % 2 == 0 { 1 } else { 4 };
        let grid: Vec<usize> = (0..256).map(|_| rng.gen_range(0..4)).collect();
        let img = RawImage::from_fn(16, 16, |r, c| palette[grid[(r / cell) * 16 + c / cell]]);
        let seg = felzenszwalb_segment(&img, &params);
        let oracle = bfs_components(&img);
        check(same_partition(&seg.labels, &oracle), format!("case {case}: partitions differ"))?;
        regions += seg.region_count;
    }
    Ok(format!("100 images, {regions} regions in total"))
}

/// Adjacent live region ids `(a, b)`, `a < b`, recomputed from the pixel map.
fn adjacent_pairs(labels: &[u32], w: usize, h: usize, owner: &[usize]) -> Vec<(usize, usize)> {
    let mut pairs = std::collections::BTreeSet::new();
    for r in 0..h {
        for c in 0..w {
            let a = owner[labels[r * w + c] as usize];
            for (dr, dc) in [(0i64, 1i64), (1, 0), (1, 1), (1, -1)] {
                let (rr, cc) = (r as i64 + dr, c as i64 + dc);
                if rr >= h as i64 || cc < 0 || cc >= w as i64 {
                    continue;
                }
                let b = owner[labels[rr as usize * w + cc as usize] as usize];
                if a != b {
                    pairs.insert((a.min(b), a.max(b)));
                }
            }
        }
    }
    pairs.into_iter().collect()
}

/// Every step rescans all pixels for adjacency and rescores every pair.
fn brute_force_group(regions: Vec<Region>, seg: &SegmentationResult) -> (Vec<BoundingBox>, Vec<(usize, usize)>) {
    let n = regions.len();
    let area: usize = regions.iter().map(|r| r.size).sum();
    let mut boxes: Vec<BoundingBox> = regions.iter().map(|r| r.bbox).collect();
    let mut merges = Vec::new();
    let mut owner: Vec<usize> = (0..n).collect();
    let mut live: Vec<Option<Region>> = regions.into_iter().map(Some).collect();
    loop {
        let pairs = adjacent_pairs(&seg.labels, seg.width, seg.height, &owner);
        let mut best: Option<(f64, usize, usize)> = None;
        for (a, b) in pairs {
            let s = similarity(live[a].as_ref().unwrap(), live[b].as_ref().unwrap(), area);
            if best.map_or(true, |(bs, _, _)| s > bs) {
                best = Some((s, a, b));
            }
        }
        let Some((_, a, b)) = best else { break };
        let new_id = live.len();
        let merged = merge(live[a].as_ref().unwrap(), live[b].as_ref().unwrap(), new_id);
        live[a] = None;
        live[b] = None;
        for o in owner.iter_mut().filter(|o| **o == a || **o == b) {
            *o = new_id;
        }
        boxes.push(merged.bbox);
        merges.push((a, b));
        live.push(Some(merged));
    }
    (boxes, merges)
}

fn c3_grouping() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut total = 0;
    for case in 0..50 {
        let (w, h) = (rng.gen_range(6..14), rng.gen_range(6..14));
        let sites: Vec<(usize, usize)> = (0..rng.gen_range(1..=8)).map(|_| (rng.gen_range(0..h), rng.gen_range(0..w))).collect();
        let raw: Vec<u32> = (0..w * h)
            .map(|p| {
                let (r, c) = ((p / w) as i64, (p % w) as i64);
                (0..sites.len())
                    .min_by_key(|&i| (sites[i].0 as i64 - r).pow(2) + (sites[i].1 as i64 - c).pow(2))
                    .unwrap() as u32
            })
            .collect();
        let seg = SegmentationResult::from_labels(w, h, &raw);
        let img = RawImage::from_fn(w, h, |_, _| [rng.gen(), rng.gen(), rng.gen()]);
        let regions = init_regions(&seg, &img).map_err(|e| e.to_string())?;
        let n = regions.len();
        let trace = hierarchical_group_traced(regions.clone());
        let (boxes, merges) = brute_force_group(regions, &seg);
        check(trace.merges == merges, format!("case {case}: merge order {:?} vs {merges:?}", trace.merges))?;
        check(trace.boxes == boxes, format!("case {case}: boxes differ"))?;
        check(trace.boxes.len() == 2 * n - 1, format!("case {case}: {} boxes for {n} regions", trace.boxes.len()))?;
        total += n;
    }
    Ok(format!("50 cases, {total} initial regions"))
}

fn c4_selection() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut truncated = 0;
    for case in 0..100 {
        let len = rng.gen_range(1..=500);
        // Small count ranges force many ties.
        let hi = if case % 2 == 0 { 4 } else { 1000 };
        let counts: Vec<usize> = (0..len).map(|_| rng.gen_range(0..hi)).collect();
        let c = rng.gen_range(1..=100);
        let sel = select_top_classes(&ProposalCounts { counts: counts.clone() }, c).map_err(|e| e.to_string())?;
        let mut taken = vec![false; len];
        let mut oracle = Vec::new();
        for _ in 0..c.min(len) {
            let mut best: Option<usize> = None;
            for i in (0..len).filter(|&i| !taken[i]) {
                if best.map_or(true, |b| counts[i] > counts[b]) {
                    best = Some(i);
                }
            }
            let b = best.unwrap();
            taken[b] = true;
            oracle.push(b);
        }
        check(sel.chosen == oracle, format!("case {case}: selection differs"))?;
        check(sel.truncated == (c > len), format!("case {case}: truncation flag"))?;
        for (j, i) in oracle.iter().enumerate() {
            check(sel.label_map.get(i) == Some(&(j as u32)), format!("case {case}: label of image {i}"))?;
        }
        truncated += sel.truncated as usize;
    }
    Ok(format!("100 vectors, {truncated} with fewer images than classes"))
}

fn c5_shapes() -> Outcome {
    let img = unlabeled_scenes(1, 10, 96, 5).remove(0);
    let mut dims = Vec::new();
    for (spec, want) in [(NetworkSpec::net_small(10), 1024), (NetworkSpec::net_large(10), 2048)] {
        let model = ModelParams::<f32>::new(spec, INPUT_SHAPE, 5).map_err(|e| e.to_string())?;
        let f = extract_features(&model, std::slice::from_ref(&img), 1).map_err(|e| e.to_string())?;
        check((f.rows, f.cols) == (1, want), format!("got {}x{}, want 1x{want}", f.rows, f.cols))?;
        dims.push(f.cols.to_string());
    }
    Ok(format!("feature dims {}", dims.join(" and ")))
}

fn c6_anchors() -> Outcome {
    for classes in [2usize, 10, 100, 20000] {
        let labels: Vec<u32> = (0..3).map(|i| (i * 7 % classes) as u32).collect();
        let logits = vec![0.37f64; 3 * classes];
        let (loss, _) = softmax_loss(&logits, classes, &labels).map_err(|e| e.to_string())?;
        let want = (classes as f64).ln();
        check((loss - want).abs() < 1e-9, format!("C={classes}: loss {loss} vs ln C {want}"))?;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (rows, cols) = (60, 5);
    let mut data = Vec::with_capacity(rows * cols);
    let mut labels = Vec::with_capacity(rows);
    for i in 0..rows {
        let label = (i % 2) as u32;
        let sign = if label == 1 { 1.0 } else { -1.0 };
        data.push(sign * rng.gen_range(0.5f32..2.0));
        data.extend((1..cols).map(|_| rng.gen_range(-1.0f32..1.0)));
        labels.push(label);
    }
    let x = FeatureMatrix::new(rows, cols, data).map_err(|e| e.to_string())?;
    let (model, _) = train_ova(&x, &labels, &SvmConfig::default()).map_err(|e| e.to_string())?;
    let acc = accuracy(&predict(&model, &x).map_err(|e| e.to_string())?, &labels);
    check(acc == 1.0, format!("separable train accuracy {acc}"))?;

    for shape in [[1, 6, 6], [3, 5, 7], [2, 2, 2]] {
        let maps = vec![2.5f32; shape.iter().product()];
        let pooled = quadrant_max_pool(&maps, shape).map_err(|e| e.to_string())?;
        check(pooled.len() == 4 * shape[0], format!("{shape:?}: {} values", pooled.len()))?;
        for ch in 0..shape[0] {
            let quads: Vec<f32> = (0..4).map(|q| pooled[q * shape[0] + ch]).collect();
            check(quads == vec![2.5; 4], format!("{shape:?} channel {ch}: {quads:?}"))?;
        }
    }
    Ok("ln C loss, separable SVM at 100%, four equal quadrant maxima".into())
}

fn c7_overfit() -> Outcome {
    let scenes = unlabeled_scenes(10, 10, 96, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut examples = Vec::new();
    for (label, img) in scenes.iter().enumerate() {
        for _ in 0..20 {
            let (h, w) = (rng.gen_range(24..96), rng.gen_range(24..96));
            let (t, l) = (rng.gen_range(0..=96 - h), rng.gen_range(0..=96 - w));
            let b = BoundingBox::new(t, l, t + h - 1, l + w - 1);
            let patch = crop(img, &b).and_then(|p| resize_bilinear(&p, 32, 32)).map_err(|e| e.to_string())?;
            examples.push(SurrogateExample {
                image: patch,
                label: label as u32,
            });
        }
    }
    let cfg = TrainConfig {
        epochs: 200,
        ..TrainConfig::default()
    };
    let start = Instant::now();
    let mut trainer = Trainer::new(NetworkSpec::net_small(10), cfg, &examples, &[]).map_err(|e| e.to_string())?;
    let mut acc = 0.0;
    while !trainer.finished() {
        trainer.run_epoch().map_err(|e| e.to_string())?;
        acc = evaluate_accuracy(trainer.model(), &examples, 1).map_err(|e| e.to_string())?;
        if acc >= 0.99 {
            break;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    check(acc >= 0.99, format!("train accuracy {acc:.3} after {} epochs", trainer.epoch()))?;
    check(secs < 600.0, format!("{secs:.0}s"))?;
    Ok(format!("train accuracy {acc:.3} at epoch {} in {secs:.0}s", trainer.epoch()))
}

fn c8_desk_scale() -> Outcome {
    let data = tempfile::tempdir().map_err(|e| e.to_string())?;
    let out = tempfile::tempdir().map_err(|e| e.to_string())?;
    let start = Instant::now();
    let fixture = StlFixture {
        unlabeled: 500,
        train: 2000,
        test: 500,
        folds: 10,
        fold_size: 1000,
        seed: 1,
    };
    write_stl10_fixture(&data.path().join("stl10_binary"), &fixture).map_err(|e| e.to_string())?;
    let mut cfg = ExperimentConfig::default();
    cfg.output_dir = out.path().into();
    cfg.data.root = Some(data.path().into());
    cfg.data.folds = Some(vec![0]);
    cfg.surrogate.classes = 100;
    cfg.network.preset = "net_small".into();
    cfg.train.epochs = 10;
    let p = Pipeline::new(cfg).map_err(|e| e.to_string())?;
    let report = p.run_all(100, "net_small").map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();
    let acc = report.fold_accuracies[0];
    check(acc >= 0.20, format!("fold 0 accuracy {acc:.3}"))?;
    check(secs < 45.0 * 60.0, format!("{secs:.0}s"))?;
    Ok(format!(
        "fold 0 accuracy {acc:.3} ({} surrogate examples) in {secs:.0}s",
        report.surrogate_examples
    ))
}

const ARCH: &str = "64-128-256_512";
const DET_CLASSES: usize = 8;

fn artifacts() -> Vec<String> {
    let c = DET_CLASSES;
    let mut names = vec![PROPOSALS_FILE.to_string(), Pipeline::surrogate_file(c)];
    names.push(Pipeline::model_file(c, ARCH).unwrap());
    names.push(Pipeline::train_log_file(c, ARCH).unwrap());
    for split in ["stl_train", "stl_test"] {
        names.push(Pipeline::features_file(c, ARCH, split).unwrap());
    }
    for fold in [0, 1] {
        names.push(Pipeline::svm_file(c, ARCH, fold).unwrap());
    }
    for ext in ["txt", "csv"] {
        names.push(Pipeline::report_file(c, ARCH, ext).unwrap());
    }
    names
}

fn small_run(data: &Path, out: &Path) -> Result<(), String> {
    let p = Pipeline::new(common::config(data, out, DET_CLASSES)).map_err(|e| e.to_string())?;
    p.run_all(DET_CLASSES, ARCH).map(|_| ()).map_err(|e| e.to_string())
}

fn c9_determinism(data: &Path, first: &Path) -> Outcome {
    let second = tempfile::tempdir().map_err(|e| e.to_string())?;
    small_run(data, second.path())?;
    let names = artifacts();
    for name in &names {
        let a = std::fs::read(first.join(name)).map_err(|e| format!("{name}: {e}"))?;
        let b = std::fs::read(second.path().join(name)).map_err(|e| format!("{name}: {e}"))?;
        check(a == b, format!("{name} differs between runs"))?;
    }
    Ok(format!("{} artifacts identical", names.len()))
}

fn roundtrip(dir: &Path, name: &str, reencode: impl Fn(&Path, &Path) -> Result<(), Box<dyn std::error::Error>>) -> Result<(), String> {
    let src = dir.join(name);
    let copy = dir.join(format!("{name}.again"));
    reencode(&src, &copy).map_err(|e| format!("{name}: {e}"))?;
    let a = std::fs::read(&src).map_err(|e| e.to_string())?;
    let b = std::fs::read(&copy).map_err(|e| e.to_string())?;
    check(a == b, format!("{name} changed after read and rewrite"))
}

fn c10_roundtrips(dir: &Path) -> Outcome {
    let c = DET_CLASSES;
    roundtrip(dir, PROPOSALS_FILE, |src, dst| {
        std::fs::write(dst, cache::encode(&cache::read(src)?)?)?;
        Ok(())
    })?;
    roundtrip(dir, &Pipeline::surrogate_file(c), |src, dst| Ok(SurrogateDataset::read(src)?.write(dst)?))?;
    roundtrip(dir, &Pipeline::model_file(c, ARCH).unwrap(), |src, dst| Ok(Checkpoint::read(src)?.write(dst)?))?;
    roundtrip(dir, &Pipeline::features_file(c, ARCH, "stl_test").unwrap(), |src, dst| {
        Ok(FeatureMatrix::read(src)?.write(dst)?)
    })?;
    roundtrip(dir, &Pipeline::svm_file(c, ARCH, 0).unwrap(), |src, dst| Ok(LinearModel::read(src)?.write(dst)?))?;
    Ok("proposal cache, surrogate set, checkpoint, features and SVM model".into())
}

fn run(results: &mut Vec<(usize, bool, String)>, id: usize, f: impl FnOnce() -> Outcome) {
    let start = Instant::now();
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        Err(p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into()))
    });
    let secs = start.elapsed().as_secs_f64();
    let (ok, detail) = match outcome {
        Ok(d) => (true, d),
        Err(d) => (false, d),
    };
    println!("{} criterion {id}: {detail} [{secs:.1}s]", if ok { "PASS" } else { "FAIL" });
    results.push((id, ok, detail));
}

#[test]
fn acceptance_criteria() {
    let mut results = Vec::new();
    run(&mut results, 1, c1_gradients);
    run(&mut results, 2, c2_segmentation);
    run(&mut results, 3, c3_grouping);
    run(&mut results, 4, c4_selection);
    run(&mut results, 5, c5_shapes);
    run(&mut results, 6, c6_anchors);
    run(&mut results, 7, c7_overfit);
    run(&mut results, 8, c8_desk_scale);

    let data = tempfile::tempdir().unwrap();
    common::write_data(data.path(), 50, 100, 40);
    let first = tempfile::tempdir().unwrap();
    let base = small_run(data.path(), first.path());
    run(&mut results, 9, || {
        base.clone()?;
        c9_determinism(data.path(), first.path())
    });
    run(&mut results, 10, || {
        base.clone()?;
        c10_roundtrips(first.path())
    });

    let failed: Vec<String> = results
        .iter()
        .filter(|r| !r.1)
        .map(|(id, _, d)| format!("{id}: {d}"))
        .collect();
    assert!(failed.is_empty(), "failed criteria:\n{}", failed.join("\n"));
}
