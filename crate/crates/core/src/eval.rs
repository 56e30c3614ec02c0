//! Detection scoring (greedy IoU matching, precision-recall, area under the
//! PR curve) and classification top-k error.

use std::io::Write;
use std::path::Path;

use serde::Serialize;

use crate::bbox::{iou, BBox, BBoxGrid};
use crate::data::SampleSource;
use crate::detector::{nms_with_boxes, predict_batch, Detection, NmsParams};
use crate::error::{Error, Result};
use crate::loss::softmax_row;
use crate::model::Model;
use crate::tensor::Tensor;

pub const DEFAULT_MATCH_IOU: f64 = 0.5;

/// Flags each detection true positive or false positive.
///
/// Within an image, detections are taken in the given (descending score) order;
/// each claims the unmatched ground truth with the highest IoU, ties to the
/// lowest index, provided that IoU reaches `iou_match_threshold`.
pub fn match_detections(
    dets: &[Vec<Detection>],
    gts: &[Vec<BBox>],
    iou_match_threshold: f64,
) -> Result<Vec<Vec<bool>>> {
    if dets.len() != gts.len() {
        return Err(Error::Shape(format!(
            "{} detection lists for {} images",
            dets.len(),
            gts.len()
        )));
    }
    dets.iter()
        .zip(gts)
        .enumerate()
        .map(|(img, (d, g))| {
            if d.windows(2).any(|w| w[0].score < w[1].score) {
                return Err(Error::Data(format!(
                    "detections of image {img} are not sorted by descending score"
                )));
            }
            let mut taken = vec![false; g.len()];
            Ok(d.iter()
                .map(|det| {
                    let mut best: Option<(usize, f64)> = None;
                    for (j, gt) in g.iter().enumerate() {
                        if taken[j] {
                            continue;
                        }
                        let v = iou(&det.box_, gt);
                        if v >= iou_match_threshold && best.is_none_or(|(_, b)| v > b) {
                            best = Some((j, v));
                        }
                    }
                    match best {
                        Some((j, _)) => {
                            taken[j] = true;
                            true
                        }
                        None => false,
                    }
                })
                .collect())
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PrPoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
    pub tp: usize,
    pub fp: usize,
}

/// One point per distinct score, in descending score order (so recall is
/// non-decreasing along the curve).
pub fn pr_curve(scored: &[(f64, bool)], total_gt: usize) -> Result<Vec<PrPoint>> {
    if total_gt == 0 {
        return Err(Error::Data("precision-recall needs at least one ground truth".into()));
    }
    let mut sorted = scored.to_vec();
    sorted.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut points = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    for (i, &(score, hit)) in sorted.iter().enumerate() {
        if hit {
            tp += 1;
        } else {
            fp += 1;
        }
        let last_of_score = sorted.get(i + 1).is_none_or(|next| next.0 != score);
        if last_of_score {
            points.push(PrPoint {
                threshold: score,
                precision: tp as f64 / (tp + fp) as f64,
                recall: tp as f64 / total_gt as f64,
                tp,
                fp,
            });
        }
    }
    Ok(points)
}

/// Trapezoidal area under precision-recall, anchored at recall 0 with the first
/// point's precision; nothing is credited beyond the highest recall reached.
pub fn auc(curve: &[PrPoint]) -> f64 {
    let Some(first) = curve.first() else {
        return 0.0;
    };
    let mut area = 0.0;
    let (mut r, mut p) = (0.0, first.precision);
    for pt in curve {
        area += (pt.recall - r) * (pt.precision + p) / 2.0;
        r = pt.recall;
        p = pt.precision;
    }
    area.clamp(0.0, 1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub points: Vec<PrPoint>,
    pub auc: f64,
    pub total_gt: usize,
    pub detections_per_image: Vec<usize>,
}

impl EvalReport {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut s = String::from("row,threshold,precision,recall,tp,fp,auc,total_gt\n");
        for p in &self.points {
            s.push_str(&format!(
                "point,{},{},{},{},{},,\n",
                p.threshold, p.precision, p.recall, p.tp, p.fp
            ));
        }
        s.push_str(&format!("summary,,,,,,{},{}\n", self.auc, self.total_gt));
        f.write_all(s.as_bytes()).map_err(|e| Error::io(path, e))
    }
}

pub fn evaluate_detections(
    dets: &[Vec<Detection>],
    gts: &[Vec<BBox>],
    iou_match_threshold: f64,
) -> Result<EvalReport> {
    let flags = match_detections(dets, gts, iou_match_threshold)?;
    let scored: Vec<(f64, bool)> = dets
        .iter()
        .zip(&flags)
        .flat_map(|(d, f)| d.iter().zip(f).map(|(d, &f)| (d.score, f)))
        .collect();
    let total_gt = gts.iter().map(Vec::len).sum();
    let points = pr_curve(&scored, total_gt)?;
    Ok(EvalReport {
        auc: auc(&points),
        points,
        total_gt,
        detections_per_image: dets.iter().map(Vec::len).collect(),
    })
}

const EVAL_BATCH: usize = 64;

fn batch_images<S: SampleSource>(source: &S, idx: &[usize]) -> Result<Tensor<f32>> {
    let imgs: Vec<&Tensor<f32>> = idx.iter().map(|&i| source.image(i)).collect();
    Tensor::stack(&imgs)
}

/// Runs the box head over `indices` and applies NMS per image.
pub fn detect_all<S: SampleSource>(
    model: &Model,
    source: &S,
    indices: &[usize],
    nms: &NmsParams,
) -> Result<Vec<Vec<Detection>>> {
    let cell_boxes = model.grid()?.cell_boxes();
    let mut out = Vec::with_capacity(indices.len());
    for chunk in indices.chunks(EVAL_BATCH) {
        for dist in predict_batch(model, &batch_images(source, chunk)?)? {
            out.push(nms_with_boxes(&dist, &cell_boxes, nms)?);
        }
    }
    Ok(out)
}

/// Detection AUC of `model` over the labeled records among `indices`.
pub fn evaluate_model<S: SampleSource>(
    model: &Model,
    source: &S,
    indices: &[usize],
    nms: &NmsParams,
    iou_match_threshold: f64,
) -> Result<EvalReport> {
    let labeled: Vec<usize> = indices
        .iter()
        .copied()
        .filter(|&i| source.has_bbox_labels(i))
        .collect();
    let dets = detect_all(model, source, &labeled, nms)?;
    let gts: Vec<Vec<BBox>> = labeled.iter().map(|&i| source.boxes(i).to_vec()).collect();
    evaluate_detections(&dets, &gts, iou_match_threshold)
}

/// AUC obtained by predicting the uniform distribution for every image.
///
/// Every cell ties, so a detection cap would only keep whichever cells win the
/// index tie-break. The cap and the score threshold are therefore lifted and
/// all cells surviving suppression are scored equally.
pub fn uniform_baseline<S: SampleSource>(
    grid: &BBoxGrid,
    source: &S,
    indices: &[usize],
    nms: &NmsParams,
    iou_match_threshold: f64,
) -> Result<EvalReport> {
    let params = NmsParams {
        score_threshold: 0.0,
        max_detections: grid.num_cells(),
        ..*nms
    };
    let uniform = crate::bbox::CellDistribution::uniform(grid.num_cells());
    let dets = nms_with_boxes(&uniform, &grid.cell_boxes(), &params)?;
    let labeled: Vec<usize> = indices
        .iter()
        .copied()
        .filter(|&i| source.has_bbox_labels(i))
        .collect();
    let all_dets = vec![dets; labeled.len()];
    let gts: Vec<Vec<BBox>> = labeled.iter().map(|&i| source.boxes(i).to_vec()).collect();
    evaluate_detections(&all_dets, &gts, iou_match_threshold)
}

/// Fraction of rows whose label is not among the `k` largest logits; ties
/// rank the lower class index first.
pub fn topk_error_from_logits(logits: &Tensor<f32>, labels: &[usize], k: usize) -> Result<f64> {
    let &[n, classes] = logits.dims() else {
        return Err(Error::Shape(format!("logits must be N x K, got {:?}", logits.dims())));
    };
    if k == 0 || k > classes {
        return Err(Error::Config(format!("k must be in 1..={classes}, got {k}")));
    }
    if labels.len() != n {
        return Err(Error::Shape(format!("{} labels for {n} rows", labels.len())));
    }
    let mut wrong = 0;
    for (row, &label) in logits.data().chunks(classes).zip(labels) {
        let p = softmax_row(row);
        // classes ranked strictly ahead of the true one
        let ahead = (0..classes)
            .filter(|&c| p[c] > p[label] || (p[c] == p[label] && c < label))
            .count();
        if ahead >= k {
            wrong += 1;
        }
    }
    Ok(wrong as f64 / n as f64)
}

/// Top-k classification error of `model` over `indices`.
pub fn topk_error<S: SampleSource>(model: &Model, source: &S, indices: &[usize], k: usize) -> Result<f64> {
    Ok(topk_errors(model, source, indices, &[k])?[0])
}

/// Several top-k errors from one pass over the data.
pub fn topk_errors<S: SampleSource>(
    model: &Model,
    source: &S,
    indices: &[usize],
    ks: &[usize],
) -> Result<Vec<f64>> {
    let classes = model.num_classes()?;
    if let Some(&k) = ks.iter().find(|&&k| k == 0 || k > classes) {
        return Err(Error::Config(format!("k must be in 1..={classes}, got {k}")));
    }
    if indices.is_empty() {
        return Err(Error::Data("no records to evaluate".into()));
    }
    let mut wrong = vec![0.0; ks.len()];
    for chunk in indices.chunks(EVAL_BATCH) {
        let logits = model.forward(&batch_images(source, chunk)?)?;
        let labels: Vec<usize> = chunk.iter().map(|&i| source.class_id(i)).collect();
        for (w, &k) in wrong.iter_mut().zip(ks) {
            *w += topk_error_from_logits(&logits, &labels, k)? * chunk.len() as f64;
        }
    }
    Ok(wrong.into_iter().map(|w| w / indices.len() as f64).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bx(a: f64, b: f64, c: f64, d: f64) -> BBox {
        BBox::new(a, b, c, d).unwrap()
    }

    fn det(b: BBox, score: f64) -> Detection {
        Detection { box_: b, score }
    }

    #[test]
    fn perfect_and_duplicate_detections() {
        let gt = bx(0.1, 0.1, 0.4, 0.5);
        let f = match_detections(&[vec![det(gt, 0.9)]], &[vec![gt]], 0.5).unwrap();
        assert_eq!(f, vec![vec![true]]);
        let f = match_detections(&[vec![det(gt, 0.9), det(gt, 0.8)]], &[vec![gt]], 0.5).unwrap();
        assert_eq!(f, vec![vec![true, false]]);
    }

    #[test]
    fn unsorted_rejected() {
        let gt = bx(0.1, 0.1, 0.4, 0.5);
        assert!(match_detections(&[vec![det(gt, 0.1), det(gt, 0.8)]], &[vec![gt]], 0.5).is_err());
    }

    #[test]
    fn hand_counted_curve() {
        let pts = pr_curve(&[(0.9, true), (0.8, false), (0.7, true)], 2).unwrap();
        let pr: Vec<(f64, f64)> = pts.iter().map(|p| (p.precision, p.recall)).collect();
        assert_eq!(pr, vec![(1.0, 0.5), (0.5, 0.5), (2.0 / 3.0, 1.0)]);
        // 0.5 * 1 + 0 + 0.5 * (0.5 + 2/3) / 2
        assert!((auc(&pts) - (0.5 + 0.25 * (0.5 + 2.0 / 3.0))).abs() < 1e-12);
    }

    #[test]
    fn degenerate_curves() {
        assert!(pr_curve(&[], 0).is_err());
        let empty = pr_curve(&[], 3).unwrap();
        assert!(empty.is_empty());
        assert_eq!(auc(&empty), 0.0);
        let all_tp = pr_curve(&[(0.9, true), (0.5, true), (0.2, true)], 4).unwrap();
        assert!(all_tp.iter().all(|p| p.precision == 1.0));
    }

    #[test]
    fn auc_rectangles() {
        let p = |precision, recall| PrPoint {
            threshold: 0.5,
            precision,
            recall,
            tp: 0,
            fp: 0,
        };
        assert_eq!(auc(&[p(1.0, 1.0)]), 1.0);
        assert_eq!(auc(&[p(1.0, 0.5)]), 0.5);
    }

    #[test]
    fn tied_scores_share_a_point() {
        let pts = pr_curve(&[(0.5, true), (0.5, false), (0.4, true)], 2).unwrap();
        assert_eq!(pts.len(), 2);
        assert_eq!((pts[0].tp, pts[0].fp), (1, 1));
    }

    #[test]
    fn topk_hand_table() {
        // 4 records, 3 classes
        let logits = Tensor::<f32>::from_f64(
            &[4, 3],
            &[
                2.0, 1.0, 0.0, // ranks 0,1,2; label 0 -> top1 ok
                0.0, 1.0, 2.0, // ranks 2,1,0; label 1 -> top1 wrong, top2 ok
                1.0, 3.0, 2.0, // ranks 1,2,0; label 0 -> wrong for k=1,2
                5.0, 5.0, 1.0, // tie 0/1; label 1 -> top1 wrong (0 wins tie), top2 ok
            ],
        )
        .unwrap();
        let labels = [0, 1, 0, 1];
        assert_eq!(topk_error_from_logits(&logits, &labels, 1).unwrap(), 0.75);
        assert_eq!(topk_error_from_logits(&logits, &labels, 2).unwrap(), 0.25);
        assert_eq!(topk_error_from_logits(&logits, &labels, 3).unwrap(), 0.0);
        assert!(topk_error_from_logits(&logits, &labels, 4).is_err());
    }

    #[test]
    fn uniform_logits_tie_break() {
        let logits = Tensor::<f32>::zeros(&[5, 10]);
        let labels = [0, 3, 0, 9, 2];
        // class 0 wins every tie, so only the label-0 rows are correct
        assert_eq!(topk_error_from_logits(&logits, &labels, 1).unwrap(), 0.6);
    }
}
