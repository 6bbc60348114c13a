//! Mini-batch Adam training with per-epoch validation and best-epoch
//! selection.
//!
//! Randomness comes from two seeded ChaCha8 generators: the epoch shuffle
//! uses stream `epoch`, and each sample's dropout mask uses stream
//! `(epoch << 32) | index` of a second seed. Per-sample gradients are summed
//! in batch order, so results do not depend on the thread count.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::loss::bce_with_logits;
use super::{lr_at, probability, LabeledSet, Model};
use crate::error::{Error, Result};
use crate::metrics::auc;

const DROPOUT_SALT: u64 = 0x6472_6f70_6f75_7421;

/// Validation score used to pick the returned weights. Higher is better for
/// both; epochs without a defined score lose to any epoch with one, and
/// fall back to lower validation loss among themselves.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SelectionMetric {
    /// mean per-output AUC over outputs with both classes present
    #[default]
    MeanAuc,
    /// fraction of images whose outputs, thresholded at 0.5, all match
    ExactMatch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub selection: SelectionMetric,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            lr_start: 1e-3,
            lr_end: 1e-6,
            batch_size: 16,
            seed: 0,
            selection: SelectionMetric::MeanAuc,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::invalid("epochs must be at least 1"));
        }
        if !(self.lr_end > 0.0 && self.lr_start >= self.lr_end) || !self.lr_start.is_finite() {
            return Err(Error::invalid(format!(
                "learning rates must satisfy lr_start >= lr_end > 0, got {} and {}",
                self.lr_start, self.lr_end
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be at least 1"));
        }
        Ok(())
    }
}

/// Adam with the usual moment coefficients.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f32>,
    v: Vec<f32>,
    t: i32,
}

impl Adam {
    pub fn new(n_params: usize) -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f32], grads: &[f32], lr: f64) {
        self.t += 1;
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let step = (lr * c2.sqrt() / c1) as f32;
        let eps = (self.eps * c2.sqrt()) as f32;
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            *p -= step * *m / (v.sqrt() + eps);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_metric: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct History {
    pub selection: SelectionMetric,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
}

impl History {
    pub fn best(&self) -> &EpochRecord {
        &self.epochs[self.best_epoch]
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "epoch,lr,train_loss,val_loss,val_metric,best")?;
        for r in &self.epochs {
            writeln!(
                w,
                "{},{:e},{:.6},{:.6},{},{}",
                r.epoch,
                r.lr,
                r.train_loss,
                r.val_loss,
                r.val_metric.map(|m| format!("{m:.6}")).unwrap_or_default(),
                u8::from(r.epoch == self.best_epoch)
            )?;
        }
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_csv(&mut f)?;
        f.flush()?;
        Ok(())
    }
}

fn better(a: &EpochRecord, b: &EpochRecord) -> bool {
    match (a.val_metric, b.val_metric) {
        (Some(x), Some(y)) => x > y,
        (Some(_), None) => true,
        (None, Some(_)) => false,
        (None, None) => a.val_loss < b.val_loss,
    }
}

/// Validation loss and selection metric of `model` on `set`.
pub(crate) fn evaluate_set(model: &Model, set: &LabeledSet, metric: SelectionMetric) -> Result<(f64, Option<f64>)> {
    let rows = (0..set.len())
        .into_par_iter()
        .map(|i| model.logits(&set.source.load(i)?))
        .collect::<Result<Vec<Vec<f32>>>>()?;
    let loss = rows
        .iter()
        .zip(&set.targets)
        .map(|(z, t)| bce_with_logits(z, t).0)
        .sum::<f64>()
        / set.len() as f64;
    let probs: Vec<Vec<f64>> = rows
        .iter()
        .map(|z| z.iter().map(|&v| probability(v)).collect())
        .collect();
    let score = match metric {
        SelectionMetric::MeanAuc => {
            let mut aucs = Vec::new();
            for c in 0..model.num_outputs() {
                let scores: Vec<f64> = probs.iter().map(|r| r[c]).collect();
                let labels: Vec<bool> = set.targets.iter().map(|t| t[c] > 0.5).collect();
                if let Some(a) = auc(&scores, &labels)? {
                    aucs.push(a);
                }
            }
            (!aucs.is_empty()).then(|| aucs.iter().sum::<f64>() / aucs.len() as f64)
        }
        SelectionMetric::ExactMatch => {
            let hits = probs
                .iter()
                .zip(&set.targets)
                .filter(|(p, t)| p.iter().zip(t.iter()).all(|(p, t)| (*p >= 0.5) == (*t > 0.5)))
                .count();
            Some(hits as f64 / set.len() as f64)
        }
    };
    Ok((loss, score))
}

/// Trains a copy of `model` and returns the weights of the best validation
/// epoch together with the per-epoch history.
pub fn train(model: &Model, train_set: &LabeledSet, val_set: &LabeledSet, tc: &TrainConfig) -> Result<(Model, History)> {
    tc.validate()?;
    if train_set.is_empty() {
        return Err(Error::Training("empty training set".into()));
    }
    if val_set.is_empty() {
        return Err(Error::Training("empty validation set".into()));
    }
    let n_out = model.num_outputs();
    if let Some(t) = train_set.targets.iter().chain(&val_set.targets).find(|t| t.len() != n_out) {
        return Err(Error::DimensionMismatch(format!(
            "target length {} for a model with {n_out} outputs",
            t.len()
        )));
    }

    let mut model = model.clone();
    let mut adam = Adam::new(model.param_count());
    let mut best: Option<(EpochRecord, Vec<f32>)> = None;
    let mut records = Vec::with_capacity(tc.epochs);
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    for epoch in 0..tc.epochs {
        let lr = lr_at(epoch, tc)?;
        let mut shuffle = ChaCha8Rng::seed_from_u64(tc.seed);
        shuffle.set_stream(epoch as u64);
        order.sort_unstable();
        order.shuffle(&mut shuffle);

        let mut loss_sum = 0.0;
        for batch in order.chunks(tc.batch_size) {
            let per_sample = batch
                .par_iter()
                .map(|&i| -> Result<(f64, Vec<f32>)> {
                    let input = train_set.source.load(i)?;
                    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed ^ DROPOUT_SALT);
                    rng.set_stream(((epoch as u64) << 32) | i as u64);
                    let trace = model.forward(&input, Some(&mut rng))?;
                    let (loss, dlogits) = bce_with_logits(&trace.logits, &train_set.targets[i]);
                    let mut grads = vec![0.0f32; model.param_count()];
                    model.backward(&trace, &dlogits, &mut grads);
                    Ok((loss, grads))
                })
                .collect::<Result<Vec<_>>>()?;
            let mut grads = vec![0.0f32; model.param_count()];
            let scale = 1.0 / batch.len() as f32;
            for (loss, g) in &per_sample {
                if !loss.is_finite() {
                    return Err(Error::Training(format!("non-finite loss {loss} in epoch {epoch}")));
                }
                loss_sum += loss;
                for (a, b) in grads.iter_mut().zip(g) {
                    *a += b * scale;
                }
            }
            adam.step(model.params_mut(), &grads, lr);
        }
        if model.params().iter().any(|p| !p.is_finite()) {
            return Err(Error::Training(format!("weights diverged in epoch {epoch}")));
        }

        let (val_loss, val_metric) = evaluate_set(&model, val_set, tc.selection)?;
        if !val_loss.is_finite() {
            return Err(Error::Training(format!("non-finite validation loss in epoch {epoch}")));
        }
        let rec = EpochRecord {
            epoch,
            lr,
            train_loss: loss_sum / train_set.len() as f64,
            val_loss,
            val_metric,
        };
        log::info!(
            "epoch {epoch}: lr {lr:.2e} train_loss {:.4} val_loss {:.4} val_metric {}",
            rec.train_loss,
            rec.val_loss,
            rec.val_metric.map(|m| format!("{m:.4}")).unwrap_or_else(|| "undefined".into())
        );
        if best.as_ref().is_none_or(|(b, _)| better(&rec, b)) {
            best = Some((rec.clone(), model.params().to_vec()));
        }
        records.push(rec);
    }

    let (best_rec, best_params) = best.expect("at least one epoch");
    model.params_mut().copy_from_slice(&best_params);
    Ok((
        model,
        History {
            selection: tc.selection,
            epochs: records,
            best_epoch: best_rec.epoch,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::ModelInput;
    use crate::model::{ConvSpec, ConvStack, MemorySource, ModelConfig};
    use ndarray::Array2;
    use rand::Rng;
    use std::sync::Arc;

    /// Blank images vs images with a bright square, target = has square.
    fn separable(n: usize, seed: u64) -> (MemorySource, Vec<Vec<f32>>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut inputs = Vec::new();
        let mut targets = Vec::new();
        for i in 0..n {
            let glyph = i % 2 == 0;
            let (y0, x0) = (rng.random_range(2..10), rng.random_range(2..10));
            let arr = Array2::from_shape_fn((16, 16), |(y, x)| {
                let inside = glyph && (y0..y0 + 5).contains(&y) && (x0..x0 + 5).contains(&x);
                (if inside { 2.0 } else { 0.0 }) + rng.random_range(-0.3..0.3)
            });
            inputs.push(ModelInput::from_array(arr));
            targets.push(vec![if glyph { 1.0 } else { 0.0 }]);
        }
        let ids = (0..n).map(|i| format!("s{i}")).collect();
        (MemorySource::new(ids, inputs).unwrap(), targets)
    }

    fn tiny_model(seed: u64) -> Model {
        let backbone = Arc::new(ConvStack::new("tiny", 1, &[ConvSpec::new(4, 3, 2), ConvSpec::new(8, 3, 2)]));
        let cfg = ModelConfig {
            head_units: 16,
            ..ModelConfig::with_outputs(1)
        };
        Model::with_backbone(cfg, backbone, seed).unwrap()
    }

    #[test]
    fn descends_on_a_separable_task() {
        let (src, targets) = separable(200, 1);
        let (vsrc, vtargets) = separable(40, 2);
        let tr = LabeledSet::new(&src, targets).unwrap();
        let va = LabeledSet::new(&vsrc, vtargets).unwrap();
        let tc = TrainConfig {
            epochs: 10,
            lr_start: 1e-2,
            lr_end: 1e-3,
            ..TrainConfig::default()
        };
        let (best, hist) = train(&tiny_model(3), &tr, &va, &tc).unwrap();
        assert_eq!(hist.epochs.len(), 10);
        assert!(hist.epochs.last().unwrap().train_loss < hist.epochs[0].train_loss);
        // returned weights reproduce the selected epoch's metric, which is the max
        let (_, m) = evaluate_set(&best, &va, tc.selection).unwrap();
        let max = hist.epochs.iter().filter_map(|e| e.val_metric).fold(f64::MIN, f64::max);
        assert_eq!(m, Some(max));
        assert_eq!(hist.best().val_metric, Some(max));
    }

    #[test]
    fn single_epoch_and_determinism() {
        let (src, targets) = separable(8, 4);
        let tr = LabeledSet::new(&src, targets.clone()).unwrap();
        let va = LabeledSet::new(&src, targets).unwrap();
        let tc = TrainConfig {
            epochs: 1,
            batch_size: 3,
            selection: SelectionMetric::ExactMatch,
            ..TrainConfig::default()
        };
        let (m1, h1) = train(&tiny_model(5), &tr, &va, &tc).unwrap();
        assert_eq!(h1.epochs.len(), 1);
        assert_eq!(h1.best_epoch, 0);
        let (m2, h2) = train(&tiny_model(5), &tr, &va, &tc).unwrap();
        assert_eq!(h1, h2);
        assert_eq!(m1.params(), m2.params());
    }

    #[test]
    fn rejects_empty_training_set() {
        let (src, targets) = separable(4, 4);
        let empty = MemorySource::default();
        let tr = LabeledSet::new(&empty, vec![]).unwrap();
        let va = LabeledSet::new(&src, targets).unwrap();
        let err = train(&tiny_model(1), &tr, &va, &TrainConfig::default()).unwrap_err();
        assert!(matches!(err, Error::Training(_)));
    }

    #[test]
    fn config_validation() {
        let bad = TrainConfig {
            lr_start: 1e-6,
            lr_end: 1e-3,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        assert!(TrainConfig { epochs: 0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig::default().validate().is_ok());
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut adam = Adam::new(2);
        let mut p = vec![1.0f32, -1.0];
        adam.step(&mut p, &[0.5, -2.0], 0.1);
        assert!((p[0] - 0.9).abs() < 1e-6 && (p[1] + 0.9).abs() < 1e-6);
    }
}
