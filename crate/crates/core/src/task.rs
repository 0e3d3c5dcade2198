//! Synthetic tasks and their metrics.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::backbone::{derive_seed, HeadKind};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    /// Per-pixel labels for filled/hollow rectangles and disks on noise.
    #[default]
    BlobSeg,
    /// Oriented stripes labelled by orientation bucket.
    StripeCls,
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TaskKind::BlobSeg => "blob_seg",
            TaskKind::StripeCls => "stripe_cls",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskConfig {
    pub kind: TaskKind,
    /// Including background for segmentation.
    pub n_classes: usize,
    pub image_size: usize,
    /// Held-out samples used for each metric evaluation.
    pub eval_samples: usize,
}

impl Default for TaskConfig {
    fn default() -> Self {
        TaskConfig {
            kind: TaskKind::BlobSeg,
            n_classes: 3,
            image_size: 16,
            eval_samples: 48,
        }
    }
}

/// Sample indices at or above this value are reserved for evaluation.
pub const EVAL_OFFSET: u64 = 1 << 40;

pub const MAX_SEG_CLASSES: usize = 5;

impl TaskConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 8 {
            return Err(Error::config(format!("image size {} is below 8", self.image_size)));
        }
        if self.n_classes < 2 {
            return Err(Error::config("a task needs at least two classes"));
        }
        if self.kind == TaskKind::BlobSeg && self.n_classes > MAX_SEG_CLASSES {
            return Err(Error::config(format!(
                "blob_seg supports at most {MAX_SEG_CLASSES} classes (background + 4 shape kinds)"
            )));
        }
        Ok(())
    }

    pub fn head(&self) -> HeadKind {
        match self.kind {
            TaskKind::BlobSeg => HeadKind::Segmentation {
                n_classes: self.n_classes,
            },
            TaskKind::StripeCls => HeadKind::Classification {
                n_classes: self.n_classes,
            },
        }
    }
}

/// One labelled example: a `1×S×S` image and either `S²` pixel labels or a
/// single class index.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub input: Tensor,
    pub targets: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskBatch {
    pub samples: Vec<Sample>,
    /// Data seed and first sample index the batch was drawn from.
    pub seed: u64,
    pub first_index: u64,
}

impl TaskBatch {
    /// Inputs stacked as `B×1×S×S`.
    pub fn inputs(&self) -> Tensor {
        let s = self.samples[0].input.shape().to_vec();
        let data = self.samples.iter().flat_map(|x| x.input.data().iter().copied()).collect();
        let mut shape = vec![self.samples.len()];
        shape.extend(s);
        Tensor::new(shape, data).expect("samples share a shape")
    }
}

/// Draws sample `index` of the stream identified by `seed`.
pub fn make_sample(cfg: &TaskConfig, seed: u64, index: u64) -> Result<Sample> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, index));
    Ok(match cfg.kind {
        TaskKind::BlobSeg => blob_seg(cfg.n_classes, cfg.image_size, &mut rng),
        TaskKind::StripeCls => stripe_cls(cfg.n_classes, cfg.image_size, &mut rng),
    })
}

/// Samples `first..first + n` of a stream.
pub fn make_batch(cfg: &TaskConfig, seed: u64, first: u64, n: usize) -> Result<TaskBatch> {
    let samples = (0..n as u64)
        .map(|i| make_sample(cfg, seed, first + i))
        .collect::<Result<_>>()?;
    Ok(TaskBatch {
        samples,
        seed,
        first_index: first,
    })
}

fn blob_seg(n_classes: usize, s: usize, rng: &mut ChaCha8Rng) -> Sample {
    let noise = Normal::new(0.0, 0.3).unwrap();
    let mut img: Vec<f64> = (0..s * s).map(|_| noise.sample(rng)).collect();
    let mut labels = vec![0usize; s * s];
    let n_shapes = rng.random_range(1..=(n_classes - 1).min(3));
    let mut classes: Vec<usize> = (1..n_classes).collect();
    for _ in 0..n_shapes {
        let class = classes.swap_remove(rng.random_range(0..classes.len()));
        let intensity = rng.random_range(0.6..1.4);
        let r = rng.random_range(s as f64 * 0.18..s as f64 * 0.32);
        let cy = rng.random_range(r..s as f64 - r);
        let cx = rng.random_range(r..s as f64 - r);
        for i in 0..s {
            for j in 0..s {
                let (dy, dx) = (i as f64 + 0.5 - cy, j as f64 + 0.5 - cx);
                let inside = match (class - 1) % 4 {
                    0 => dy.abs() <= r && dx.abs() <= r,
                    1 => dy * dy + dx * dx <= r * r,
                    2 => {
                        let m = dy.abs().max(dx.abs());
                        m <= r && m > r - 1.5
                    }
                    _ => {
                        let d = (dy * dy + dx * dx).sqrt();
                        d <= r && d > r - 1.5
                    }
                };
                if inside {
                    img[i * s + j] = intensity + noise.sample(rng);
                    labels[i * s + j] = class;
                }
            }
        }
    }
    Sample {
        input: Tensor::from_parts(vec![1, s, s], img),
        targets: labels,
    }
}

/// Orientation of bucket `class`: `class·π/n` radians from the x axis.
pub fn stripe_angle(class: usize, n_classes: usize) -> f64 {
    class as f64 * std::f64::consts::PI / n_classes as f64
}

fn stripe_cls(n_classes: usize, s: usize, rng: &mut ChaCha8Rng) -> Sample {
    let class = rng.random_range(0..n_classes);
    let theta = stripe_angle(class, n_classes);
    let freq = rng.random_range(0.15..0.3);
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    let noise = Normal::new(0.0, 0.2).unwrap();
    let (c, sn) = (theta.cos(), theta.sin());
    let img = (0..s * s)
        .map(|k| {
            let (y, x) = ((k / s) as f64, (k % s) as f64);
            (std::f64::consts::TAU * freq * (x * c + y * sn) + phase).sin() + noise.sample(rng)
        })
        .collect();
    Sample {
        input: Tensor::from_parts(vec![1, s, s], img),
        targets: vec![class],
    }
}

/// Mean IoU over classes present in `pred` or `target`.
pub fn miou(pred: &[usize], target: &[usize], n_classes: usize) -> Result<f64> {
    if pred.len() != target.len() {
        return Err(Error::dim("miou", &[pred.len()], &[target.len()]));
    }
    let mut inter = vec![0usize; n_classes];
    let mut union = vec![0usize; n_classes];
    for (&p, &t) in pred.iter().zip(target) {
        if p >= n_classes || t >= n_classes {
            return Err(Error::config(format!("class index {} out of range 0..{n_classes}", p.max(t))));
        }
        if p == t {
            inter[p] += 1;
            union[p] += 1;
        } else {
            union[p] += 1;
            union[t] += 1;
        }
    }
    let ious: Vec<f64> = inter
        .iter()
        .zip(&union)
        .filter(|(_, &u)| u > 0)
        .map(|(&i, &u)| i as f64 / u as f64)
        .collect();
    if ious.is_empty() {
        return Ok(1.0);
    }
    Ok(ious.iter().sum::<f64>() / ious.len() as f64)
}

/// mIoU over a whole evaluation set, from the pooled confusion counts.
pub fn miou_pooled(pairs: &[(Vec<usize>, Vec<usize>)], n_classes: usize) -> Result<f64> {
    let pred: Vec<usize> = pairs.iter().flat_map(|(p, _)| p.iter().copied()).collect();
    let target: Vec<usize> = pairs.iter().flat_map(|(_, t)| t.iter().copied()).collect();
    miou(&pred, &target, n_classes)
}

pub fn accuracy(pred: &[usize], target: &[usize]) -> Result<f64> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(Error::dim("accuracy", &[pred.len()], &[target.len()]));
    }
    Ok(pred.iter().zip(target).filter(|(p, t)| p == t).count() as f64 / pred.len() as f64)
}

/// Row-wise argmax of class-major `logits[K×P]` (or `[K]`).
pub fn argmax_classes(logits: &Tensor) -> Vec<usize> {
    let k = logits.shape()[0];
    let p = logits.len() / k;
    let d = logits.data();
    (0..p)
        .map(|j| {
            let mut best = 0;
            for c in 1..k {
                if d[c * p + j] > d[best * p + j] {
                    best = c;
                }
            }
            best
        })
        .collect()
}
