//! Independent oracles shared by the integration tests and the acceptance
//! suite: finite-difference gradients, brute-force matching, dense-sweep AUC,
//! and foreground-mask extents.
#![allow(dead_code)]

use objn_core::bbox::{iou, BBox, CellDistribution};
use objn_core::detector::Detection;
use objn_core::layers::{self, LrnParams};
use objn_core::loss::softmax_xent_soft;
use objn_core::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const FD_EPS: f64 = 1e-5;
/// Denominator floor for relative errors: below it the comparison is absolute.
pub const REL_FLOOR: f64 = 1e-6;

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR)
}

pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| rel_err(a, n))
        .fold(0.0, f64::max)
}

/// Central differences of a scalar function of `x`.
pub fn numeric_grad(x: &Tensor<f64>, f: &dyn Fn(&Tensor<f64>) -> f64) -> Vec<f64> {
    let mut probe = x.clone();
    (0..x.len())
        .map(|i| {
            let orig = x.data()[i];
            probe.data_mut()[i] = orig + FD_EPS;
            let up = f(&probe);
            probe.data_mut()[i] = orig - FD_EPS;
            let down = f(&probe);
            probe.data_mut()[i] = orig;
            (up - down) / (2.0 * FD_EPS)
        })
        .collect()
}

pub fn random_tensor(rng: &mut ChaCha8Rng, dims: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n: usize = dims.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::new(dims.to_vec(), v).unwrap()
}

/// `sum(r * y)`, the scalar whose gradient with respect to `y` is `r`.
fn project(r: &Tensor<f64>, y: &Tensor<f64>) -> f64 {
    r.data().iter().zip(y.data()).map(|(a, b)| a * b).sum()
}

/// Shape-only description of the last configuration, for failure messages.
pub type GradCheck = (String, f64);

pub fn conv_case(rng: &mut ChaCha8Rng, fixed: bool) -> GradCheck {
    let (n, c, h, w, f, k, stride, pad) = if fixed {
        (2, 3, 8, 8, 4, 3, 2, 1)
    } else {
        let k = rng.random_range(1..=3);
        (
            rng.random_range(1..=2),
            rng.random_range(1..=3),
            rng.random_range(k..=7),
            rng.random_range(k..=7),
            rng.random_range(1..=3),
            k,
            rng.random_range(1..=2),
            rng.random_range(0..=1),
        )
    };
    let x = random_tensor(rng, &[n, c, h, w], -1.0, 1.0);
    let wt = random_tensor(rng, &[f, c, k, k], -1.0, 1.0);
    let b = random_tensor(rng, &[f], -1.0, 1.0);
    let y = layers::conv2d_forward(&x, &wt, &b, stride, pad).unwrap();
    let r = random_tensor(rng, y.dims(), -1.0, 1.0);
    let g = layers::conv2d_backward(&x, &wt, &r, stride, pad).unwrap();
    let dx = numeric_grad(&x, &|x| project(&r, &layers::conv2d_forward(x, &wt, &b, stride, pad).unwrap()));
    let dw = numeric_grad(&wt, &|wt| project(&r, &layers::conv2d_forward(&x, wt, &b, stride, pad).unwrap()));
    let db = numeric_grad(&b, &|b| project(&r, &layers::conv2d_forward(&x, &wt, b, stride, pad).unwrap()));
    let err = max_rel_err(g.d_input.data(), &dx)
        .max(max_rel_err(g.d_weights.data(), &dw))
        .max(max_rel_err(g.d_bias.data(), &db));
    (format!("conv x{:?} w{:?} s{stride} p{pad}", x.dims(), wt.dims()), err)
}

pub fn relu_case(rng: &mut ChaCha8Rng) -> GradCheck {
    let dims = [rng.random_range(1..=3), rng.random_range(1..=4), rng.random_range(1..=5), rng.random_range(1..=5)];
    // keep every entry at least 1e-3 from the kink
    let mut x = random_tensor(rng, &dims, 1e-3, 1.0);
    for v in x.data_mut() {
        if rng.random_bool(0.5) {
            *v = -*v;
        }
    }
    let r = random_tensor(rng, &dims, -1.0, 1.0);
    let a = layers::relu_backward(&x, &r).unwrap();
    let num = numeric_grad(&x, &|x| project(&r, &layers::relu_forward(x)));
    (format!("relu {dims:?}"), max_rel_err(a.data(), &num))
}

pub fn lrn_case(rng: &mut ChaCha8Rng) -> GradCheck {
    let dims = [rng.random_range(1..=2), rng.random_range(1..=7), rng.random_range(1..=4), rng.random_range(1..=4)];
    let p = LrnParams {
        k: rng.random_range(0.5..3.0),
        n: [1, 3, 5][rng.random_range(0..3)],
        alpha: rng.random_range(1e-4..0.5),
        beta: rng.random_range(0.3..1.0),
    };
    let x = random_tensor(rng, &dims, -2.0, 2.0);
    let r = random_tensor(rng, &dims, -1.0, 1.0);
    let a = layers::lrn_backward(&x, &r, &p).unwrap();
    let num = numeric_grad(&x, &|x| project(&r, &layers::lrn_forward(x, &p).unwrap()));
    (format!("lrn {dims:?} {p:?}"), max_rel_err(a.data(), &num))
}

pub fn maxpool_case(rng: &mut ChaCha8Rng) -> GradCheck {
    let window = rng.random_range(1..=3);
    let stride = rng.random_range(1..=3);
    let dims = [
        rng.random_range(1..=2),
        rng.random_range(1..=3),
        rng.random_range(window..=7),
        rng.random_range(window..=7),
    ];
    // distinct values 0.01 apart, so no perturbation can reorder a window
    let n: usize = dims.iter().product();
    let mut vals: Vec<f64> = (0..n).map(|i| i as f64 * 0.01 - 1.0).collect();
    for i in (1..n).rev() {
        vals.swap(i, rng.random_range(0..=i));
    }
    let x = Tensor::new(dims.to_vec(), vals).unwrap();
    let y = layers::maxpool_forward(&x, window, stride).unwrap();
    let r = random_tensor(rng, y.dims(), -1.0, 1.0);
    let a = layers::maxpool_backward(&x, &r, window, stride).unwrap();
    let num = numeric_grad(&x, &|x| project(&r, &layers::maxpool_forward(x, window, stride).unwrap()));
    (format!("maxpool {dims:?} w{window} s{stride}"), max_rel_err(a.data(), &num))
}

pub fn dense_case(rng: &mut ChaCha8Rng) -> GradCheck {
    let n = rng.random_range(1..=4);
    let trailing: Vec<usize> = (0..rng.random_range(1..=3)).map(|_| rng.random_range(1..=4)).collect();
    let d: usize = trailing.iter().product();
    let m = rng.random_range(1..=6);
    let mut dims = vec![n];
    dims.extend(&trailing);
    let x = random_tensor(rng, &dims, -1.0, 1.0);
    let w = random_tensor(rng, &[d, m], -1.0, 1.0);
    let b = random_tensor(rng, &[m], -1.0, 1.0);
    let r = random_tensor(rng, &[n, m], -1.0, 1.0);
    let g = layers::dense_backward(&x, &w, &r).unwrap();
    let dx = numeric_grad(&x, &|x| project(&r, &layers::dense_forward(x, &w, &b).unwrap()));
    let dw = numeric_grad(&w, &|w| project(&r, &layers::dense_forward(&x, w, &b).unwrap()));
    let db = numeric_grad(&b, &|b| project(&r, &layers::dense_forward(&x, &w, b).unwrap()));
    let err = max_rel_err(g.d_input.data(), &dx)
        .max(max_rel_err(g.d_weights.data(), &dw))
        .max(max_rel_err(g.d_bias.data(), &db));
    (format!("dense x{dims:?} -> {m}"), err)
}

pub fn random_distribution(rng: &mut ChaCha8Rng, k: usize) -> CellDistribution {
    let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.0..1.0f64).powi(3)).collect();
    let s: f64 = raw.iter().sum::<f64>().max(1e-12);
    let mut p: Vec<f64> = raw.iter().map(|v| v / s).collect();
    if s <= 1e-12 {
        p = vec![1.0 / k as f64; k];
    }
    CellDistribution::new(p).unwrap()
}

pub fn xent_case(rng: &mut ChaCha8Rng) -> GradCheck {
    let n = rng.random_range(1..=4);
    let k = rng.random_range(2..=10);
    let z = random_tensor(rng, &[n, k], -3.0, 3.0);
    let t: Vec<CellDistribution> = (0..n)
        .map(|_| {
            if rng.random_bool(0.3) {
                CellDistribution::one_hot(k, rng.random_range(0..k)).unwrap()
            } else {
                random_distribution(rng, k)
            }
        })
        .collect();
    let (_, g) = softmax_xent_soft(&z, &t).unwrap();
    let num = numeric_grad(&z, &|z| softmax_xent_soft(z, &t).unwrap().0);
    (format!("softmax_xent_soft {n}x{k}"), max_rel_err(g.data(), &num))
}

/// Greedy matching recomputed from scratch for every detection: the set of
/// ground truths already claimed is re-derived from the prefix each time.
pub fn oracle_match(dets: &[Detection], gts: &[BBox], thr: f64) -> Vec<bool> {
    fn claimed(dets: &[Detection], gts: &[BBox], thr: f64) -> Vec<Option<usize>> {
        let Some((last, prefix)) = dets.split_last() else {
            return Vec::new();
        };
        let mut out = claimed(prefix, gts, thr);
        let taken: Vec<usize> = out.iter().flatten().copied().collect();
        let mut candidates: Vec<(usize, f64)> = gts
            .iter()
            .enumerate()
            .filter(|(j, _)| !taken.contains(j))
            .map(|(j, g)| (j, iou(&last.box_, g)))
            .filter(|&(_, v)| v >= thr)
            .collect();
        // highest IoU first, lowest index on ties
        candidates.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        out.push(candidates.first().map(|c| c.0));
        out
    }
    claimed(dets, gts, thr).into_iter().map(|c| c.is_some()).collect()
}

/// Largest number of detection/ground-truth pairs with IoU >= `thr` that can
/// be matched one-to-one, by exhaustive search.
pub fn max_matching(dets: &[Detection], gts: &[BBox], thr: f64) -> usize {
    fn go(i: usize, dets: &[Detection], gts: &[BBox], used: &mut Vec<bool>, thr: f64) -> usize {
        if i == dets.len() {
            return 0;
        }
        let mut best = go(i + 1, dets, gts, used, thr);
        for j in 0..gts.len() {
            if !used[j] && iou(&dets[i].box_, &gts[j]) >= thr {
                used[j] = true;
                best = best.max(1 + go(i + 1, dets, gts, used, thr));
                used[j] = false;
            }
        }
        best
    }
    go(0, dets, gts, &mut vec![false; gts.len()], thr)
}

/// AUC by sweeping every threshold on a dense grid that contains all scores,
/// recounting true and false positives from scratch at each threshold.
pub fn oracle_auc(scored: &[(f64, bool)], total_gt: usize) -> f64 {
    let mut thresholds: Vec<f64> = scored.iter().map(|s| s.0).collect();
    // extra thresholds between and around the scores change nothing
    let (lo, hi) = thresholds
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &t| (l.min(t), h.max(t)));
    if lo.is_finite() {
        for i in 0..=1000 {
            thresholds.push(lo - 0.1 + (hi - lo + 0.2) * i as f64 / 1000.0);
        }
    }
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let mut pts: Vec<(f64, f64)> = Vec::new();
    for t in thresholds {
        let tp = scored.iter().filter(|s| s.0 >= t && s.1).count();
        let fp = scored.iter().filter(|s| s.0 >= t && !s.1).count();
        if tp + fp == 0 {
            continue;
        }
        let p = tp as f64 / (tp + fp) as f64;
        let r = tp as f64 / total_gt as f64;
        if pts.last() != Some(&(r, p)) {
            pts.push((r, p));
        }
    }
    let Some(&(_, p0)) = pts.first() else {
        return 0.0;
    };
    let mut area = 0.0;
    let mut prev = (0.0, p0);
    for &(r, p) in &pts {
        area += (r - prev.0) * (p + prev.1) / 2.0;
        prev = (r, p);
    }
    area
}

pub fn random_box(rng: &mut ChaCha8Rng, min_side: f64) -> BBox {
    loop {
        let w = rng.random_range(min_side..1.0);
        let h = rng.random_range(min_side..1.0);
        let x = rng.random_range(0.0..=1.0 - w);
        let y = rng.random_range(0.0..=1.0 - h);
        if let Ok(b) = BBox::new(x, y, x + w, y + h) {
            return b;
        }
    }
}

/// Pixels whose channel spread marks them as object paint.
pub const FOREGROUND_SPREAD: u8 = 60;

/// Bounding rectangle, in normalized coordinates, of the foreground pixels
/// inside each box's pixel footprint; also returns the number of foreground
/// pixels that fall outside every box.
pub fn mask_extents(rgb: &[u8], size: usize, boxes: &[BBox]) -> (Vec<Option<BBox>>, usize) {
    let fg = |x: usize, y: usize| {
        let p = &rgb[(y * size + x) * 3..][..3];
        p.iter().max().unwrap() - p.iter().min().unwrap() >= FOREGROUND_SPREAD
    };
    let s = size as f64;
    let px = |b: &BBox| {
        let [x0, y0, x1, y1] = b.to_array();
        (
            (x0 * s).round() as usize,
            (y0 * s).round() as usize,
            (x1 * s).round() as usize,
            (y1 * s).round() as usize,
        )
    };
    let mut stray = 0;
    for y in 0..size {
        for x in 0..size {
            if fg(x, y) {
                let covered = boxes.iter().any(|b| {
                    let (x0, y0, x1, y1) = px(b);
                    (x0..x1).contains(&x) && (y0..y1).contains(&y)
                });
                if !covered {
                    stray += 1;
                }
            }
        }
    }
    let extents = boxes
        .iter()
        .map(|b| {
            let (x0, y0, x1, y1) = px(b);
            let mut r: Option<(usize, usize, usize, usize)> = None;
            for y in y0..y1 {
                for x in x0..x1 {
                    if fg(x, y) {
                        r = Some(match r {
                            None => (x, y, x, y),
                            Some((a, b, c, d)) => (a.min(x), b.min(y), c.max(x), d.max(y)),
                        });
                    }
                }
            }
            r.map(|(a, b, c, d)| {
                BBox::new(a as f64 / s, b as f64 / s, (c + 1) as f64 / s, (d + 1) as f64 / s).unwrap()
            })
        })
        .collect();
    (extents, stray)
}

/// Boxes drawn from a few anchors so that overlaps (and contested matches)
/// are common.
fn clustered_box(rng: &mut ChaCha8Rng, anchors: &[BBox]) -> BBox {
    let a = anchors[rng.random_range(0..anchors.len())].to_array();
    let j = |v: f64, r: &mut ChaCha8Rng| (v + r.random_range(-0.08..0.08)).clamp(0.0, 1.0);
    loop {
        let (x0, y0, x1, y1) = (j(a[0], rng), j(a[1], rng), j(a[2], rng), j(a[3], rng));
        if let Ok(b) = BBox::new(x0.min(x1), y0.min(y1), x0.max(x1), y0.max(y1)) {
            return b;
        }
    }
}

pub fn random_instance(rng: &mut ChaCha8Rng) -> (Vec<Detection>, Vec<BBox>) {
    let anchors: Vec<BBox> = (0..rng.random_range(1..=3)).map(|_| random_box(rng, 0.1)).collect();
    let gts: Vec<BBox> = (0..rng.random_range(0..=4)).map(|_| clustered_box(rng, &anchors)).collect();
    let mut dets: Vec<Detection> = (0..rng.random_range(0..=6))
        .map(|_| Detection {
            box_: clustered_box(rng, &anchors),
            // coarse scores so ties occur
            score: rng.random_range(0..5) as f64 / 4.0,
        })
        .collect();
    dets.sort_by(|a, b| b.score.total_cmp(&a.score));
    (dets, gts)
}

/// In-memory sample source for trainer tests.
pub struct MemSource {
    pub images: Vec<Tensor<f32>>,
    pub classes: Vec<usize>,
    pub boxes: Vec<Vec<BBox>>,
    pub labeled: Vec<bool>,
    pub splits: Vec<objn_core::data::Split>,
}

impl objn_core::data::SampleSource for MemSource {
    fn len(&self) -> usize {
        self.images.len()
    }
    fn split(&self, i: usize) -> objn_core::data::Split {
        self.splits[i]
    }
    fn class_id(&self, i: usize) -> usize {
        self.classes[i]
    }
    fn has_bbox_labels(&self, i: usize) -> bool {
        self.labeled[i]
    }
    fn boxes(&self, i: usize) -> &[BBox] {
        &self.boxes[i]
    }
    fn image(&self, i: usize) -> &Tensor<f32> {
        &self.images[i]
    }
}
