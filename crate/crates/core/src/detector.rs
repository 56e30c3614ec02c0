//! Inference with a bounding-box head and non-max suppression over the
//! predicted cell distribution.

use serde::{Deserialize, Serialize};

use crate::bbox::{iou, BBox, BBoxGrid, CellDistribution};
use crate::error::{Error, Result};
use crate::loss::softmax_row;
use crate::model::Model;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Detection {
    pub box_: BBox,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NmsParams {
    pub iou_threshold: f64,
    pub score_threshold: f64,
    pub max_detections: usize,
}

impl Default for NmsParams {
    fn default() -> Self {
        NmsParams {
            iou_threshold: 0.5,
            score_threshold: 0.01,
            max_detections: 5,
        }
    }
}

impl NmsParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.iou_threshold) || !(0.0..=1.0).contains(&self.score_threshold) {
            return Err(Error::Config(format!(
                "nms thresholds must lie in [0,1], got iou {} and score {}",
                self.iou_threshold, self.score_threshold
            )));
        }
        if self.max_detections == 0 {
            return Err(Error::Config("max_detections must be >= 1".into()));
        }
        Ok(())
    }
}

/// Softmax over the box head for each image of a batch `[N, C, H, W]`.
pub fn predict_batch(model: &Model, images: &Tensor<f32>) -> Result<Vec<CellDistribution>> {
    model.grid()?;
    let logits = model.forward(images)?;
    let k = logits.dims()[1];
    logits
        .data()
        .chunks(k)
        .map(|row| CellDistribution::new(softmax_row(row)))
        .collect()
}

/// Cell distribution for a single `[C, H, W]` image.
pub fn predict_distribution(model: &Model, image: &Tensor<f32>) -> Result<CellDistribution> {
    let batch = Tensor::stack(&[image])?;
    Ok(predict_batch(model, &batch)?.remove(0))
}

/// Greedy suppression over all cells of `dist`.
pub fn nms(dist: &CellDistribution, grid: &BBoxGrid, params: &NmsParams) -> Result<Vec<Detection>> {
    nms_with_boxes(dist, &grid.cell_boxes(), params)
}

/// [`nms`] with the decoded cell boxes precomputed (`grid.cell_boxes()`).
///
/// Cells are visited in descending probability, ties by lowest index. A cell is
/// kept unless its box overlaps an already kept box by more than the IoU
/// threshold; the walk stops at the first surviving cell below the score
/// threshold or once `max_detections` are kept.
pub fn nms_with_boxes(
    dist: &CellDistribution,
    cell_boxes: &[BBox],
    params: &NmsParams,
) -> Result<Vec<Detection>> {
    params.validate()?;
    if cell_boxes.len() != dist.len() {
        return Err(Error::Shape(format!(
            "{} cell boxes for a distribution over {} cells",
            cell_boxes.len(),
            dist.len()
        )));
    }
    let probs = dist.probs();
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    let mut kept: Vec<Detection> = Vec::new();
    for idx in order {
        if kept.len() >= params.max_detections {
            break;
        }
        let b = cell_boxes[idx];
        if kept.iter().any(|d| iou(&d.box_, &b) > params.iou_threshold) {
            continue;
        }
        if probs[idx] < params.score_threshold {
            break;
        }
        kept.push(Detection {
            box_: b,
            score: probs[idx],
        });
    }
    Ok(kept)
}
