//! Desk-scale training: SGD with momentum and weight decay, "poly" learning
//! rate decay, per-pixel cross-entropy with the ignore label, and the
//! ablation harness that retrains config variants on identical data.
//!
//! Everything here is single-threaded and seeded; two runs with the same
//! seed produce bit-for-bit identical loss traces.

use crate::backbone::DSNetModel;
use crate::blocks::Phase;
use crate::data::{augment, Dataset};
use crate::error::{DsnetError, Result};
use crate::eval::{argmax_classes, evaluate, ConfusionMatrix};
use crate::tensor::Tensor;
use ndarray::{Array3, Array4, ArrayD};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use std::io::Write;
use std::path::Path;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub iterations: usize,
    pub base_lr: f64,
    /// Poly decay exponent; 0.9 is the convention of the lineage this
    /// training protocol follows.
    pub power: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub crop: (usize, usize),
    pub scale_range: (f64, f64),
    pub seed: u64,
    /// Disable to train on raw samples (overfitting fixtures).
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 500,
            base_lr: 0.01,
            power: 0.9,
            momentum: 0.9,
            weight_decay: 0.0005,
            batch_size: 2,
            crop: (64, 64),
            scale_range: (0.4, 1.6),
            seed: 0,
            augment: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations < 1 {
            return Err(DsnetError::Validation("iterations must be >= 1".into()));
        }
        if self.batch_size < 1 {
            return Err(DsnetError::Validation("batch_size must be >= 1".into()));
        }
        if !(self.scale_range.0 > 0.0 && self.scale_range.0 <= self.scale_range.1) {
            return Err(DsnetError::Validation(format!(
                "scale range must satisfy 0 < min <= max, got {:?}",
                self.scale_range
            )));
        }
        if self.crop.0 < 1 || self.crop.1 < 1 {
            return Err(DsnetError::Validation("crop must be >= 1".into()));
        }
        Ok(())
    }
}

/// base_lr * (1 - iter/iterations)^power.
pub fn poly_lr(iter: usize, cfg: &TrainConfig) -> f64 {
    let frac = iter as f64 / cfg.iterations as f64;
    cfg.base_lr * (1.0 - frac).max(0.0).powf(cfg.power)
}

/// SGD with classic momentum; weight decay is added to the gradient.
pub struct Sgd {
    params: Vec<Tensor>,
    velocity: Vec<ArrayD<f64>>,
    momentum: f64,
    weight_decay: f64,
}

impl Sgd {
    pub fn new(params: Vec<Tensor>, momentum: f64, weight_decay: f64) -> Sgd {
        let velocity = params
            .iter()
            .map(|p| ArrayD::zeros(ndarray::IxDyn(&p.shape())))
            .collect();
        Sgd {
            params,
            velocity,
            momentum,
            weight_decay,
        }
    }

    pub fn step(&mut self, lr: f64) {
        for (p, v) in self.params.iter().zip(self.velocity.iter_mut()) {
            let Some(mut g) = p.grad() else { continue };
            if self.weight_decay != 0.0 {
                g = g + &(&*p.data() * self.weight_decay);
            }
            *v *= self.momentum;
            *v += &g;
            p.sub_assign(&(&*v * lr));
        }
    }

    pub fn zero_grad(&self) {
        for p in &self.params {
            p.zero_grad();
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainRecord {
    pub iter: usize,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub records: Vec<TrainRecord>,
    pub final_loss: f64,
    /// Pixel accuracy over the training set, inference phase.
    pub train_pixel_accuracy: f64,
}

/// Assemble a batch from dataset indices, augmenting when enabled.
fn make_batch(
    dataset: &Dataset,
    indices: &[usize],
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(Tensor, Array3<u32>)> {
    let first = &dataset.samples[indices[0]];
    let (h, w) = if cfg.augment { cfg.crop } else { first.hw() };
    let n = indices.len();
    let mut images = Array4::<f64>::zeros((n, 3, h, w));
    let mut labels = Array3::<u32>::zeros((n, h, w));
    for (bi, &si) in indices.iter().enumerate() {
        let sample = &dataset.samples[si];
        let prepared = if cfg.augment {
            augment(sample, cfg.crop, cfg.scale_range, rng)
        } else {
            sample.clone()
        };
        if prepared.hw() != (h, w) {
            return Err(DsnetError::Shape(format!(
                "sample `{}` is {:?}, batch expects {:?} (mixed sizes need augment=true)",
                prepared.name,
                prepared.hw(),
                (h, w)
            )));
        }
        images
            .index_axis_mut(ndarray::Axis(0), bi)
            .assign(&prepared.image);
        for y in 0..h {
            for x in 0..w {
                labels[(bi, y, x)] = prepared.mask[(y, x)];
            }
        }
    }
    Ok((Tensor::constant(images.into_dyn()), labels))
}

/// Train in place; returns the loss trace and final training accuracy.
/// Cross-entropy ignores label 255; a non-finite loss aborts with context.
pub fn train(model: &DSNetModel, dataset: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(DsnetError::Data("empty dataset".into()));
    }
    let params: Vec<Tensor> = model.named_params().into_iter().map(|(_, t)| t).collect();
    let mut optimizer = Sgd::new(params, cfg.momentum, cfg.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut records = Vec::with_capacity(cfg.iterations);

    let mut pool: Vec<usize> = Vec::new();
    for iter in 0..cfg.iterations {
        let mut indices = Vec::with_capacity(cfg.batch_size);
        while indices.len() < cfg.batch_size {
            if pool.is_empty() {
                pool = (0..dataset.len()).collect();
                pool.shuffle(&mut rng);
            }
            indices.push(pool.pop().unwrap());
        }
        let (batch, labels) = make_batch(dataset, &indices, cfg, &mut rng)?;
        let logits = model.forward(&batch, Phase::Train)?;
        let (loss, _) = logits.cross_entropy_ignore(&labels, crate::data::IGNORE_LABEL);
        let loss_v = loss.item();
        if !loss_v.is_finite() {
            return Err(DsnetError::Runtime(format!(
                "non-finite loss {loss_v} at iteration {iter}; aborting (lr {}, batch {:?})",
                poly_lr(iter, cfg),
                indices
            )));
        }
        optimizer.zero_grad();
        loss.backward();
        optimizer.step(poly_lr(iter, cfg));
        records.push(TrainRecord {
            iter,
            lr: poly_lr(iter, cfg),
            loss: loss_v,
        });
    }

    // Score the training set in inference phase.
    let mut confusion = ConfusionMatrix::new(dataset.num_classes);
    for sample in &dataset.samples {
        let (h, w) = sample.hw();
        let mut image = Array4::<f64>::zeros((1, 3, h, w));
        image.index_axis_mut(ndarray::Axis(0), 0).assign(&sample.image);
        let logits = model.forward(&Tensor::constant(image.into_dyn()), Phase::Eval)?;
        confusion.record(&sample.mask, &argmax_classes(&logits)[0])?;
    }
    Ok(TrainOutcome {
        final_loss: records.last().map(|r| r.loss).unwrap_or(f64::NAN),
        records,
        train_pixel_accuracy: confusion.pixel_accuracy()?,
    })
}

/// Write the loss trace as a line-delimited `iter,lr,loss` log.
pub fn write_metrics_log(records: &[TrainRecord], path: &Path) -> Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(file, "iter,lr,loss")?;
    for r in records {
        writeln!(file, "{},{},{}", r.iter, r.lr, r.loss)?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Ablation harness
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct AblationRow {
    pub variant: String,
    pub seed: u64,
    pub miou: f64,
    pub final_loss: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn render_text(&self) -> String {
        let mut out = format!("{:<20} {:>6} {:>10} {:>12}\n", "variant", "seed", "miou", "final_loss");
        for r in &self.rows {
            out.push_str(&format!(
                "{:<20} {:>6} {:>10.4} {:>12.4}\n",
                r.variant, r.seed, r.miou, r.final_loss
            ));
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("table serializes")
    }
}

/// Train every (variant, seed) pair on the same dataset with identical
/// training settings and report per-variant mIoU on that dataset.
pub fn run_ablation(
    variants: &[(String, crate::config::ModelConfig)],
    dataset: &Dataset,
    train_cfg: &TrainConfig,
    seeds: &[u64],
) -> Result<AblationTable> {
    let mut rows = Vec::new();
    for (name, cfg) in variants {
        cfg.validate()?;
        for &seed in seeds {
            let model = DSNetModel::build(cfg, crate::plan::Mode::Segmentation, seed)?;
            let mut cfg_seeded = train_cfg.clone();
            cfg_seeded.seed = seed;
            let outcome = train(&model, dataset, &cfg_seeded)?;
            let eval = evaluate(&model, dataset)?;
            rows.push(AblationRow {
                variant: name.clone(),
                seed,
                miou: eval.miou,
                final_loss: outcome.final_loss,
            });
        }
    }
    Ok(AblationTable { rows })
}
