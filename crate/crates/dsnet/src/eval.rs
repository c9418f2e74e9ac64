//! Confusion-matrix accumulation and mean-intersection-over-union scoring.

use crate::backbone::DSNetModel;
use crate::blocks::Phase;
use crate::data::{Dataset, IGNORE_LABEL};
use crate::error::{DsnetError, Result};
use crate::tensor::Tensor;
use ndarray::{Array2, Array4, Ix4};

/// Rows index ground truth, columns index predictions; ignore-labeled
/// pixels touch no cell.
#[derive(Debug, Clone)]
pub struct ConfusionMatrix {
    pub counts: Array2<u64>,
    pub num_classes: usize,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> ConfusionMatrix {
        ConfusionMatrix {
            counts: Array2::zeros((num_classes, num_classes)),
            num_classes,
        }
    }

    pub fn record(&mut self, truth: &Array2<u32>, prediction: &Array2<u32>) -> Result<()> {
        if truth.dim() != prediction.dim() {
            return Err(DsnetError::Shape(format!(
                "confusion record: truth {:?} vs prediction {:?}",
                truth.dim(),
                prediction.dim()
            )));
        }
        for (t, p) in truth.iter().zip(prediction.iter()) {
            if *t == IGNORE_LABEL {
                continue;
            }
            let (ti, pi) = (*t as usize, *p as usize);
            if ti >= self.num_classes || pi >= self.num_classes {
                return Err(DsnetError::Validation(format!(
                    "class id out of range: truth {t}, prediction {p}"
                )));
            }
            self.counts[(ti, pi)] += 1;
        }
        Ok(())
    }

    /// Total pixels recorded (equals the number of non-ignored pixels seen).
    pub fn total(&self) -> u64 {
        self.counts.sum()
    }

    /// Per-class IoU = TP / (TP + FP + FN); `None` when the class was never
    /// present in truth or predictions.
    pub fn per_class_iou(&self) -> Vec<Option<f64>> {
        (0..self.num_classes)
            .map(|c| {
                let tp = self.counts[(c, c)];
                let fp: u64 = (0..self.num_classes)
                    .filter(|&t| t != c)
                    .map(|t| self.counts[(t, c)])
                    .sum();
                let fn_: u64 = (0..self.num_classes)
                    .filter(|&p| p != c)
                    .map(|p| self.counts[(c, p)])
                    .sum();
                let denom = tp + fp + fn_;
                (denom > 0).then(|| tp as f64 / denom as f64)
            })
            .collect()
    }

    /// Mean IoU over classes that appeared in truth or predictions.
    pub fn miou(&self) -> Result<f64> {
        let ious: Vec<f64> = self.per_class_iou().into_iter().flatten().collect();
        if ious.is_empty() {
            return Err(DsnetError::Data("no labeled pixels".into()));
        }
        Ok(ious.iter().sum::<f64>() / ious.len() as f64)
    }

    pub fn pixel_accuracy(&self) -> Result<f64> {
        let total = self.total();
        if total == 0 {
            return Err(DsnetError::Data("no labeled pixels".into()));
        }
        let correct: u64 = (0..self.num_classes).map(|c| self.counts[(c, c)]).sum();
        Ok(correct as f64 / total as f64)
    }
}

/// Per-pixel argmax over the class axis of (N, K, H, W) logits.
pub fn argmax_classes(logits: &Tensor) -> Vec<Array2<u32>> {
    let data = logits.to_array();
    let v = data.view().into_dimensionality::<Ix4>().unwrap();
    let (n, k, h, w) = v.dim();
    (0..n)
        .map(|item| {
            Array2::from_shape_fn((h, w), |(y, x)| {
                let mut best = 0usize;
                let mut best_v = v[(item, 0, y, x)];
                for c in 1..k {
                    if v[(item, c, y, x)] > best_v {
                        best_v = v[(item, c, y, x)];
                        best = c;
                    }
                }
                best as u32
            })
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct EvalOutcome {
    pub miou: f64,
    pub per_class_iou: Vec<Option<f64>>,
    pub pixel_accuracy: f64,
    pub confusion: ConfusionMatrix,
}

/// Run the model over the dataset in inference phase and score predictions.
pub fn evaluate(model: &DSNetModel, dataset: &Dataset) -> Result<EvalOutcome> {
    if dataset.is_empty() {
        return Err(DsnetError::Data("empty dataset".into()));
    }
    let mut confusion = ConfusionMatrix::new(dataset.num_classes);
    for sample in &dataset.samples {
        let (h, w) = sample.hw();
        let mut batch = Array4::<f64>::zeros((1, 3, h, w));
        batch
            .index_axis_mut(ndarray::Axis(0), 0)
            .assign(&sample.image);
        let logits = model.forward(&Tensor::constant(batch.into_dyn()), Phase::Eval)?;
        let preds = argmax_classes(&logits);
        confusion.record(&sample.mask, &preds[0])?;
    }
    Ok(EvalOutcome {
        miou: confusion.miou()?,
        per_class_iou: confusion.per_class_iou(),
        pixel_accuracy: confusion.pixel_accuracy()?,
        confusion,
    })
}
