//! Adapter-only fine-tuning loop.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::{HeadKind, ModelGraph};
use crate::error::{Error, Result};
use crate::optim::{adamw_step, cosine_factor, AdamWConfig, OptimState};
use crate::tape::Tape;
use crate::task::{accuracy, argmax_classes, make_batch, make_sample, miou_pooled, TaskConfig, EVAL_OFFSET};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    /// Metric evaluation period in steps; 0 evaluates only at the ends.
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 2000,
            batch_size: 8,
            optimizer: AdamWConfig::default(),
            eval_every: 500,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be positive"));
        }
        self.optimizer.validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub step: usize,
    pub loss: Option<f64>,
    pub metric: Option<f64>,
}

/// Per-step losses interleaved with periodic metrics.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub rows: Vec<ReportRow>,
}

impl TrainReport {
    fn record(&mut self, step: usize, loss: Option<f64>, metric: Option<f64>) {
        match self.rows.last_mut() {
            Some(r) if r.step == step => {
                r.loss = r.loss.or(loss);
                r.metric = r.metric.or(metric);
            }
            _ => self.rows.push(ReportRow { step, loss, metric }),
        }
    }

    pub fn losses(&self) -> Vec<f64> {
        self.rows.iter().filter_map(|r| r.loss).collect()
    }

    pub fn metrics(&self) -> Vec<(usize, f64)> {
        self.rows.iter().filter_map(|r| r.metric.map(|m| (r.step, m))).collect()
    }

    pub fn final_metric(&self) -> Option<f64> {
        self.metrics().last().map(|&(_, m)| m)
    }

    pub fn extend(&mut self, other: TrainReport) {
        for r in other.rows {
            self.record(r.step, r.loss, r.metric);
        }
    }

    pub fn to_csv(&self) -> String {
        let fmt = |v: Option<f64>| v.map(|x| format!("{x:e}")).unwrap_or_default();
        let mut s = String::from("step,loss,metric\n");
        for r in &self.rows {
            s.push_str(&format!("{},{},{}\n", r.step, fmt(r.loss), fmt(r.metric)));
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_csv().as_bytes()).map_err(|e| Error::io(path, e))
    }
}

/// Mean loss of `samples` on one tape, with gradients written into the
/// model's trainable tensors.
pub fn loss_and_grads(model: &mut ModelGraph, inputs: &[(crate::Tensor, Vec<usize>)]) -> Result<f64> {
    let mut tape = Tape::new();
    let vars = model.register(&mut tape);
    let mut losses = Vec::with_capacity(inputs.len());
    for (x, t) in inputs {
        let xv = tape.constant(x);
        let trace = model.forward(&mut tape, &vars, xv)?;
        let logits = trace
            .logits
            .ok_or_else(|| Error::Usage("training requires a task head".into()))?;
        losses.push(tape.cross_entropy(logits, t)?);
    }
    let total = tape.add_all(&losses)?;
    let loss = tape.scale(total, 1.0 / inputs.len() as f64)?;
    let value = tape.value(loss).data()[0];
    if !value.is_finite() {
        return Err(Error::NonFinite { op: "loss" });
    }
    tape.backward(loss)?;
    model.collect_grads(&tape, &vars);
    Ok(value)
}

/// Task metric (mIoU or accuracy) on the fixed held-out sample range.
pub fn evaluate(model: &ModelGraph, task: &TaskConfig, data_seed: u64) -> Result<f64> {
    let head = model
        .head
        .as_ref()
        .ok_or_else(|| Error::Usage("evaluation requires a task head".into()))?;
    let mut pairs = Vec::with_capacity(task.eval_samples);
    for i in 0..task.eval_samples as u64 {
        let s = make_sample(task, data_seed, EVAL_OFFSET + i)?;
        let (tape, trace) = model.run(&s.input)?;
        let pred = argmax_classes(tape.value(trace.logits.unwrap()));
        pairs.push((pred, s.targets));
    }
    match head.kind {
        HeadKind::Segmentation { n_classes } => miou_pooled(&pairs, n_classes),
        HeadKind::Classification { .. } => {
            let (p, t): (Vec<usize>, Vec<usize>) = pairs.into_iter().map(|(p, t)| (p[0], t[0])).unzip();
            accuracy(&p, &t)
        }
    }
}

/// Trains from `optim.step` up to `until` (capped at `cfg.steps`, which also
/// sets the cosine horizon). Batch `k` always holds samples
/// `k·B .. (k+1)·B` of the training stream, so a run split at any step and
/// resumed from a checkpoint matches an uninterrupted one.
pub fn train(
    model: &mut ModelGraph,
    optim: &mut OptimState,
    task: &TaskConfig,
    cfg: &TrainConfig,
    data_seed: u64,
    until: usize,
) -> Result<TrainReport> {
    cfg.validate()?;
    task.validate()?;
    if model.head.as_ref().is_none_or(|h| h.kind != task.head()) {
        return Err(Error::config("model head does not match the task"));
    }
    let until = until.min(cfg.steps);
    let start = optim.step as usize;
    let mut report = TrainReport::default();
    if start == 0 {
        report.record(0, None, Some(evaluate(model, task, data_seed)?));
    }
    for step in start..until {
        let batch = make_batch(task, data_seed, (step * cfg.batch_size) as u64, cfg.batch_size)?;
        let pairs: Vec<_> = batch.samples.into_iter().map(|s| (s.input, s.targets)).collect();
        let loss = match loss_and_grads(model, &pairs) {
            Ok(l) => l,
            Err(Error::NonFinite { .. }) => return Err(Error::Divergence { step, loss: f64::NAN }),
            Err(e) => return Err(e),
        };
        let factor = cosine_factor(step as u64, cfg.steps as u64);
        adamw_step(&mut model.tensors_mut(), optim, &cfg.optimizer, factor)?;
        let done = step + 1;
        let metric = if (cfg.eval_every > 0 && done % cfg.eval_every == 0) || done == until {
            Some(evaluate(model, task, data_seed)?)
        } else {
            None
        };
        report.record(done, Some(loss), metric);
        if done % 100 == 0 {
            log::debug!("step {done}: loss {loss:.4}");
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneConfig;
    use crate::block::AdapterConfig;

    fn small_model(adapters: bool) -> ModelGraph {
        let cfg = BackboneConfig {
            style: crate::backbone::BackboneStyle::ConvnextLike,
            depths: vec![1, 1],
            dims: vec![8, 16],
            ..BackboneConfig::default()
        };
        let mut g = ModelGraph::build(&cfg, 1).unwrap();
        if adapters {
            let acfg = AdapterConfig {
                latent: 4,
                ..AdapterConfig::default()
            };
            g.insert_adapters(&acfg, 2).unwrap();
        }
        g.attach_head(TaskConfig::default().head(), 3).unwrap();
        g
    }

    fn quick_task() -> TaskConfig {
        TaskConfig {
            eval_samples: 4,
            ..TaskConfig::default()
        }
    }

    #[test]
    fn zero_steps_gives_initial_metric_only() {
        let mut g = small_model(true);
        let cfg = TrainConfig {
            steps: 0,
            ..TrainConfig::default()
        };
        let r = train(&mut g, &mut OptimState::new(), &quick_task(), &cfg, 0, 0).unwrap();
        assert_eq!(r.rows.len(), 1);
        assert!(r.rows[0].loss.is_none() && r.rows[0].metric.is_some());
    }

    #[test]
    fn zero_lr_keeps_loss_constant_on_fixed_data() {
        let mut g = small_model(true);
        let cfg = TrainConfig {
            optimizer: AdamWConfig {
                lr: 0.0,
                ..AdamWConfig::default()
            },
            ..TrainConfig::default()
        };
        let task = quick_task();
        let s = make_batch(&task, 0, 0, 2).unwrap();
        let pairs: Vec<_> = s.samples.into_iter().map(|s| (s.input, s.targets)).collect();
        let mut st = OptimState::new();
        let mut losses = Vec::new();
        for _ in 0..3 {
            losses.push(loss_and_grads(&mut g, &pairs).unwrap());
            adamw_step(&mut g.tensors_mut(), &mut st, &cfg.optimizer, 1.0).unwrap();
        }
        assert!(losses.iter().all(|l| l.to_bits() == losses[0].to_bits()));
    }

    #[test]
    fn deterministic_and_frozen() {
        let run = || {
            let mut g = small_model(true);
            let snap = g.snapshot_frozen();
            let cfg = TrainConfig {
                steps: 5,
                batch_size: 2,
                ..TrainConfig::default()
            };
            let r = train(&mut g, &mut OptimState::new(), &quick_task(), &cfg, 7, 5).unwrap();
            assert!(g.freeze_check(&snap));
            (g, r)
        };
        let (a, ra) = run();
        let (b, rb) = run();
        assert_eq!(ra.to_csv(), rb.to_csv());
        assert_eq!(a, b);
    }

    #[test]
    fn unfrozen_tensor_fails_freeze_check() {
        let mut g = small_model(true);
        let snap = g.snapshot_frozen();
        g.backbone[0].requires_grad = true;
        let cfg = TrainConfig {
            steps: 1,
            batch_size: 1,
            ..TrainConfig::default()
        };
        train(&mut g, &mut OptimState::new(), &quick_task(), &cfg, 0, 1).unwrap();
        assert!(!g.freeze_check(&snap));
    }

    #[test]
    fn head_mismatch_rejected() {
        let mut g = small_model(false);
        let task = TaskConfig {
            kind: crate::task::TaskKind::StripeCls,
            ..quick_task()
        };
        assert!(train(&mut g, &mut OptimState::new(), &task, &TrainConfig::default(), 0, 1).is_err());
    }

    #[test]
    fn csv_layout() {
        let mut r = TrainReport::default();
        r.record(0, None, Some(0.5));
        r.record(1, Some(1.25), None);
        assert_eq!(r.to_csv(), "step,loss,metric\n0,,5e-1\n1,1.25e0,\n");
    }
}
